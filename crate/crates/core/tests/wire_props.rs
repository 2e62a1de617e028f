use proptest::prelude::*;

use rfio_core::wire::{self, Decoded, Message, ReadMode, WireError, HEADER_LEN, MAX_CHUNK};

fn text(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(any::<char>(), 0..max).prop_map(|cs| cs.into_iter().collect())
}

fn message() -> impl Strategy<Value = Message> {
    let mode = prop::sample::select(ReadMode::ALL.to_vec());
    prop_oneof![
        (text(40), mode, any::<u32>(), text(20)).prop_map(|(path, mode, iobufsize, token)| Message::OpenRequest {
            path,
            mode,
            iobufsize,
            token
        }),
        (any::<u64>(), any::<u64>()).prop_map(|(handle_id, file_size)| Message::OpenReply { handle_id, file_size }),
        (any::<u64>(), any::<u64>(), any::<u64>()).prop_map(|(handle_id, offset, length)| Message::ReadRequest {
            handle_id,
            offset,
            length
        }),
        (any::<u64>(), any::<u64>(), prop::collection::vec(any::<u8>(), 0..2048)).prop_map(
            |(handle_id, offset, payload)| Message::DataChunk {
                handle_id,
                offset,
                payload
            }
        ),
        (any::<u64>(), any::<u64>()).prop_map(|(handle_id, offset)| Message::SeekRequest { handle_id, offset }),
        (any::<u64>(), any::<u64>()).prop_map(|(handle_id, offset)| Message::StreamStart { handle_id, offset }),
        any::<u64>().prop_map(|handle_id| Message::ControlInterrupt { handle_id }),
        any::<u64>().prop_map(|handle_id| Message::CloseRequest { handle_id }),
        (any::<u16>(), text(60)).prop_map(|(code, detail)| Message::ErrorReply { code, detail }),
        text(40).prop_map(|path| Message::NsLookup { path }),
        (text(30), any::<u64>(), any::<u64>()).prop_map(|(replica_address, file_size, checksum)| {
            Message::NsLookupReply {
                replica_address,
                file_size,
                checksum,
            }
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn round_trip(msg in message()) {
        let frame = wire::encode_frame(&msg).unwrap();
        prop_assert_eq!(frame.len(), wire::frame_len(&msg));
        prop_assert_eq!(
            wire::decode_frame(&frame).unwrap(),
            Decoded::Frame { message: msg, consumed: frame.len() }
        );
    }

    #[test]
    fn strict_prefixes_need_more(msg in message()) {
        let frame = wire::encode_frame(&msg).unwrap();
        for cut in 0..frame.len() {
            prop_assert_eq!(wire::decode_frame(&frame[..cut]), Ok(Decoded::NeedMore));
        }
    }

    #[test]
    fn concatenated_frames_decode_in_order(msgs in prop::collection::vec(message(), 1..8)) {
        let mut stream = Vec::new();
        for m in &msgs {
            wire::encode_into(m, &mut stream).unwrap();
        }
        let mut rest = &stream[..];
        for m in &msgs {
            match wire::decode_frame(rest).unwrap() {
                Decoded::Frame { message, consumed } => {
                    prop_assert_eq!(&message, m);
                    rest = &rest[consumed..];
                }
                Decoded::NeedMore => prop_assert!(false, "ran out of bytes"),
            }
        }
        prop_assert!(rest.is_empty());
    }

    #[test]
    fn corrupted_header_never_panics(msg in message(), at in 0usize..HEADER_LEN, byte in any::<u8>()) {
        let mut frame = wire::encode_frame(&msg).unwrap();
        frame[at] = byte;
        let _ = wire::decode_frame(&frame);
    }
}

#[test]
fn largest_chunk_round_trips() {
    let msg = Message::DataChunk {
        handle_id: 9,
        offset: 1 << 40,
        payload: vec![0xa5; MAX_CHUNK],
    };
    let frame = wire::encode_frame(&msg).unwrap();
    assert_eq!(frame.len(), HEADER_LEN + 16 + MAX_CHUNK);
    assert!(matches!(wire::decode_frame(&frame), Ok(Decoded::Frame { .. })));
}

#[test]
fn header_layout_is_fixed() {
    let frame = wire::encode_frame(&Message::ControlInterrupt { handle_id: 1 }).unwrap();
    assert_eq!(&frame[..4], &[0x52, 0x46, 0x01, 0x07]);
    assert_eq!(u32::from_be_bytes(frame[4..8].try_into().unwrap()), 8);
    let mut bad = frame.clone();
    bad[0] = 0;
    assert!(matches!(wire::decode_frame(&bad), Err(WireError::BadMagic(..))));
}

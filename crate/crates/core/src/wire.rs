//! Binary framing for every control and data connection.
//!
//! A frame is `[0x52][0x46][0x01][msg_type:1][payload_len:4 BE][payload]`.
//! All integers are big-endian. Strings are a `u16` byte length followed by
//! UTF-8. Per-variant payload layouts are listed on [`MsgType`].

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x52, 0x46];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;

/// Largest payload a `DataChunk` may carry.
pub const MAX_CHUNK: usize = 256 * 1024;

/// Frames whose payload exceeds this are rejected by the encoder.
pub const MAX_PAYLOAD: usize = 1 << 31;

const CHUNK_PREFIX: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("bad magic {0:#04x} {1:#04x}")]
    BadMagic(u8, u8),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload length {len} does not match {msg_type:?} layout")]
    LengthMismatch { msg_type: MsgType, len: usize },
    #[error("invalid read mode {0}")]
    BadMode(u8),
    #[error("string is not valid UTF-8")]
    BadUtf8,
    #[error("string of {0} bytes exceeds the 65535-byte limit")]
    StringTooLong(usize),
    #[error("data chunk of {0} bytes exceeds the {MAX_CHUNK}-byte cap")]
    ChunkTooLarge(usize),
    #[error("payload of {0} bytes exceeds the frame limit")]
    Oversize(usize),
}

/// RFIO read mode, fixed for the lifetime of a handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReadMode {
    /// One server request per read call.
    Normal,
    /// Client-side buffer, one server call per fill.
    ReadBuf,
    /// Buffered reads fed by a server push on the single connection.
    ReadAhead,
    /// Server push on a dedicated data connection, control on another.
    Stream,
}

impl ReadMode {
    pub const ALL: [ReadMode; 4] = [
        ReadMode::Normal,
        ReadMode::ReadBuf,
        ReadMode::ReadAhead,
        ReadMode::Stream,
    ];

    pub fn code(self) -> u8 {
        match self {
            ReadMode::Normal => 0,
            ReadMode::ReadBuf => 1,
            ReadMode::ReadAhead => 2,
            ReadMode::Stream => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, WireError> {
        match code {
            0 => Ok(ReadMode::Normal),
            1 => Ok(ReadMode::ReadBuf),
            2 => Ok(ReadMode::ReadAhead),
            3 => Ok(ReadMode::Stream),
            other => Err(WireError::BadMode(other)),
        }
    }

    /// Modes in which the server pushes data without per-read requests.
    pub fn is_push(self) -> bool {
        matches!(self, ReadMode::ReadAhead | ReadMode::Stream)
    }

    pub fn name(self) -> &'static str {
        match self {
            ReadMode::Normal => "normal",
            ReadMode::ReadBuf => "readbuf",
            ReadMode::ReadAhead => "readahead",
            ReadMode::Stream => "stream",
        }
    }
}

impl fmt::Display for ReadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReadMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(ReadMode::Normal),
            "readbuf" => Ok(ReadMode::ReadBuf),
            "readahead" => Ok(ReadMode::ReadAhead),
            "stream" => Ok(ReadMode::Stream),
            other => Err(format!("unknown read mode '{other}'")),
        }
    }
}

/// Message type byte and payload layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    /// `path:str mode:u8 iobufsize:u32 token:str`
    OpenRequest = 0x01,
    /// `handle:u64 file_size:u64`
    OpenReply = 0x02,
    /// `handle:u64 offset:u64 length:u64`
    ReadRequest = 0x03,
    /// `handle:u64 offset:u64 payload:rest` (payload ≤ 256 KiB)
    DataChunk = 0x04,
    /// `handle:u64 offset:u64`
    SeekRequest = 0x05,
    /// `handle:u64 offset:u64`
    StreamStart = 0x06,
    /// `handle:u64`
    ControlInterrupt = 0x07,
    /// `handle:u64`
    CloseRequest = 0x08,
    /// `code:u16 detail:str`
    ErrorReply = 0x09,
    /// `path:str`
    NsLookup = 0x0a,
    /// `replica:str file_size:u64 checksum:u64`
    NsLookupReply = 0x0b,
}

impl MsgType {
    fn from_byte(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0x01 => MsgType::OpenRequest,
            0x02 => MsgType::OpenReply,
            0x03 => MsgType::ReadRequest,
            0x04 => MsgType::DataChunk,
            0x05 => MsgType::SeekRequest,
            0x06 => MsgType::StreamStart,
            0x07 => MsgType::ControlInterrupt,
            0x08 => MsgType::CloseRequest,
            0x09 => MsgType::ErrorReply,
            0x0a => MsgType::NsLookup,
            0x0b => MsgType::NsLookupReply,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    OpenRequest {
        path: String,
        mode: ReadMode,
        iobufsize: u32,
        token: String,
    },
    OpenReply {
        handle_id: u64,
        file_size: u64,
    },
    ReadRequest {
        handle_id: u64,
        offset: u64,
        length: u64,
    },
    DataChunk {
        handle_id: u64,
        offset: u64,
        payload: Vec<u8>,
    },
    SeekRequest {
        handle_id: u64,
        offset: u64,
    },
    StreamStart {
        handle_id: u64,
        offset: u64,
    },
    ControlInterrupt {
        handle_id: u64,
    },
    CloseRequest {
        handle_id: u64,
    },
    ErrorReply {
        code: u16,
        detail: String,
    },
    NsLookup {
        path: String,
    },
    NsLookupReply {
        replica_address: String,
        file_size: u64,
        checksum: u64,
    },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::OpenRequest { .. } => MsgType::OpenRequest,
            Message::OpenReply { .. } => MsgType::OpenReply,
            Message::ReadRequest { .. } => MsgType::ReadRequest,
            Message::DataChunk { .. } => MsgType::DataChunk,
            Message::SeekRequest { .. } => MsgType::SeekRequest,
            Message::StreamStart { .. } => MsgType::StreamStart,
            Message::ControlInterrupt { .. } => MsgType::ControlInterrupt,
            Message::CloseRequest { .. } => MsgType::CloseRequest,
            Message::ErrorReply { .. } => MsgType::ErrorReply,
            Message::NsLookup { .. } => MsgType::NsLookup,
            Message::NsLookupReply { .. } => MsgType::NsLookupReply,
        }
    }

    /// Payload bytes counted as bytes-on-wire: `DataChunk` payload only.
    pub fn data_bytes(&self) -> u64 {
        match self {
            Message::DataChunk { payload, .. } => payload.len() as u64,
            _ => 0,
        }
    }
}

/// Result of attempting to decode one frame from the front of a buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Frame { message: Message, consumed: usize },
    NeedMore,
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::StringTooLong(s.len()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn encode_payload(msg: &Message, out: &mut Vec<u8>) -> Result<(), WireError> {
    match msg {
        Message::OpenRequest {
            path,
            mode,
            iobufsize,
            token,
        } => {
            put_str(out, path)?;
            out.push(mode.code());
            out.extend_from_slice(&iobufsize.to_be_bytes());
            put_str(out, token)?;
        }
        Message::OpenReply {
            handle_id,
            file_size,
        } => {
            out.extend_from_slice(&handle_id.to_be_bytes());
            out.extend_from_slice(&file_size.to_be_bytes());
        }
        Message::ReadRequest {
            handle_id,
            offset,
            length,
        } => {
            out.extend_from_slice(&handle_id.to_be_bytes());
            out.extend_from_slice(&offset.to_be_bytes());
            out.extend_from_slice(&length.to_be_bytes());
        }
        Message::DataChunk {
            handle_id,
            offset,
            payload,
        } => {
            if payload.len() > MAX_CHUNK {
                return Err(WireError::ChunkTooLarge(payload.len()));
            }
            out.extend_from_slice(&handle_id.to_be_bytes());
            out.extend_from_slice(&offset.to_be_bytes());
            out.extend_from_slice(payload);
        }
        Message::SeekRequest { handle_id, offset } | Message::StreamStart { handle_id, offset } => {
            out.extend_from_slice(&handle_id.to_be_bytes());
            out.extend_from_slice(&offset.to_be_bytes());
        }
        Message::ControlInterrupt { handle_id } | Message::CloseRequest { handle_id } => {
            out.extend_from_slice(&handle_id.to_be_bytes());
        }
        Message::ErrorReply { code, detail } => {
            out.extend_from_slice(&code.to_be_bytes());
            put_str(out, detail)?;
        }
        Message::NsLookup { path } => put_str(out, path)?,
        Message::NsLookupReply {
            replica_address,
            file_size,
            checksum,
        } => {
            put_str(out, replica_address)?;
            out.extend_from_slice(&file_size.to_be_bytes());
            out.extend_from_slice(&checksum.to_be_bytes());
        }
    }
    Ok(())
}

/// Appends the frame for `msg` to `out`.
pub fn encode_into(msg: &Message, out: &mut Vec<u8>) -> Result<(), WireError> {
    let start = out.len();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type() as u8);
    out.extend_from_slice(&[0; 4]);
    if let Err(e) = encode_payload(msg, out) {
        out.truncate(start);
        return Err(e);
    }
    let payload_len = out.len() - start - HEADER_LEN;
    if payload_len > MAX_PAYLOAD {
        out.truncate(start);
        return Err(WireError::Oversize(payload_len));
    }
    out[start + 4..start + HEADER_LEN].copy_from_slice(&(payload_len as u32).to_be_bytes());
    Ok(())
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(HEADER_LEN + 16 + msg.data_bytes() as usize);
    encode_into(msg, &mut out)?;
    Ok(out)
}

/// Encoded size of `msg` without building it.
pub fn frame_len(msg: &Message) -> usize {
    let body = match msg {
        Message::OpenRequest { path, token, .. } => 2 + path.len() + 1 + 4 + 2 + token.len(),
        Message::OpenReply { .. } | Message::SeekRequest { .. } | Message::StreamStart { .. } => 16,
        Message::ReadRequest { .. } => 24,
        Message::DataChunk { payload, .. } => CHUNK_PREFIX + payload.len(),
        Message::ControlInterrupt { .. } | Message::CloseRequest { .. } => 8,
        Message::ErrorReply { detail, .. } => 2 + 2 + detail.len(),
        Message::NsLookup { path } => 2 + path.len(),
        Message::NsLookupReply {
            replica_address, ..
        } => 2 + replica_address.len() + 16,
    };
    HEADER_LEN + body
}

struct Reader<'a> {
    buf: &'a [u8],
    msg_type: MsgType,
}

impl<'a> Reader<'a> {
    fn mismatch(&self, len: usize) -> WireError {
        WireError::LengthMismatch {
            msg_type: self.msg_type,
            len,
        }
    }

    fn take(&mut self, n: usize, total: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(self.mismatch(total));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self, total: usize) -> Result<u8, WireError> {
        Ok(self.take(1, total)?[0])
    }

    fn u16(&mut self, total: usize) -> Result<u16, WireError> {
        let b = self.take(2, total)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, total: usize) -> Result<u32, WireError> {
        let b = self.take(4, total)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, total: usize) -> Result<u64, WireError> {
        let b = self.take(8, total)?;
        Ok(u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, total: usize) -> Result<String, WireError> {
        let len = self.u16(total)? as usize;
        let bytes = self.take(len, total)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::BadUtf8)
    }

    fn finish(self, total: usize) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.mismatch(total))
        }
    }
}

fn decode_payload(msg_type: MsgType, payload: &[u8]) -> Result<Message, WireError> {
    let n = payload.len();
    let mut r = Reader {
        buf: payload,
        msg_type,
    };
    let msg = match msg_type {
        MsgType::OpenRequest => {
            let path = r.string(n)?;
            let mode = ReadMode::from_code(r.u8(n)?)?;
            let iobufsize = r.u32(n)?;
            let token = r.string(n)?;
            Message::OpenRequest {
                path,
                mode,
                iobufsize,
                token,
            }
        }
        MsgType::OpenReply => Message::OpenReply {
            handle_id: r.u64(n)?,
            file_size: r.u64(n)?,
        },
        MsgType::ReadRequest => Message::ReadRequest {
            handle_id: r.u64(n)?,
            offset: r.u64(n)?,
            length: r.u64(n)?,
        },
        MsgType::DataChunk => {
            let handle_id = r.u64(n)?;
            let offset = r.u64(n)?;
            let rest = r.buf.len();
            if rest > MAX_CHUNK {
                return Err(WireError::ChunkTooLarge(rest));
            }
            let payload = r.take(rest, n)?.to_vec();
            Message::DataChunk {
                handle_id,
                offset,
                payload,
            }
        }
        MsgType::SeekRequest => Message::SeekRequest {
            handle_id: r.u64(n)?,
            offset: r.u64(n)?,
        },
        MsgType::StreamStart => Message::StreamStart {
            handle_id: r.u64(n)?,
            offset: r.u64(n)?,
        },
        MsgType::ControlInterrupt => Message::ControlInterrupt {
            handle_id: r.u64(n)?,
        },
        MsgType::CloseRequest => Message::CloseRequest {
            handle_id: r.u64(n)?,
        },
        MsgType::ErrorReply => Message::ErrorReply {
            code: r.u16(n)?,
            detail: r.string(n)?,
        },
        MsgType::NsLookup => Message::NsLookup { path: r.string(n)? },
        MsgType::NsLookupReply => Message::NsLookupReply {
            replica_address: r.string(n)?,
            file_size: r.u64(n)?,
            checksum: r.u64(n)?,
        },
    };
    r.finish(n)?;
    Ok(msg)
}

/// Validates as much of the header as `bytes` holds. Returns the declared
/// payload length once the full header is present.
fn check_header(bytes: &[u8]) -> Result<Option<(MsgType, usize)>, WireError> {
    let m0 = bytes.first().copied();
    let m1 = bytes.get(1).copied();
    if let Some(b0) = m0 {
        if b0 != MAGIC[0] || m1.is_some_and(|b1| b1 != MAGIC[1]) {
            return Err(WireError::BadMagic(b0, m1.unwrap_or(0)));
        }
    }
    if let Some(&v) = bytes.get(2) {
        if v != VERSION {
            return Err(WireError::BadVersion(v));
        }
    }
    let msg_type = match bytes.get(3) {
        Some(&t) => MsgType::from_byte(t)?,
        None => return Ok(None),
    };
    if bytes.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize(len));
    }
    if msg_type == MsgType::DataChunk && len > CHUNK_PREFIX + MAX_CHUNK {
        return Err(WireError::ChunkTooLarge(len - CHUNK_PREFIX));
    }
    Ok(Some((msg_type, len)))
}

/// Decodes the frame at the front of `bytes`.
///
/// Never panics. A strict prefix of a valid frame yields [`Decoded::NeedMore`].
pub fn decode_frame(bytes: &[u8]) -> Result<Decoded, WireError> {
    let Some((msg_type, len)) = check_header(bytes)? else {
        return Ok(Decoded::NeedMore);
    };
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Ok(Decoded::NeedMore);
    }
    let message = decode_payload(msg_type, &bytes[HEADER_LEN..total])?;
    Ok(Decoded::Frame {
        message,
        consumed: total,
    })
}

/// Declared total frame length, if the header is complete and valid.
pub fn peek_frame_len(bytes: &[u8]) -> Result<Option<usize>, WireError> {
    Ok(check_header(bytes)?.map(|(_, len)| HEADER_LEN + len))
}

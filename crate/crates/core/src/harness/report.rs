use std::fs;
use std::path::{Path, PathBuf};

use crate::error::Result;

use super::{Axis, ClientRecord, RunSummary, SweepPoint};

pub const CLIENT_COLUMNS: [&str; 8] = [
    "client_id",
    "mode",
    "open_time_s",
    "read_time_s",
    "bytes_consumed",
    "bytes_wire",
    "rate_bytes_per_s",
    "open_error",
];

pub const AGGREGATE_COLUMNS: [&str; 7] = [
    "axis_value",
    "clients",
    "aggregate_rate",
    "mean_open_time_s",
    "rms_open_time_s",
    "total_waste_bytes",
    "error_count",
];

pub fn write_clients_csv(records: &[ClientRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CLIENT_COLUMNS)?;
    for r in records {
        w.write_record([
            r.client_id.to_string(),
            r.mode.name().to_string(),
            format!("{:.9}", r.open_time),
            format!("{:.9}", r.read_time),
            r.bytes_consumed.to_string(),
            r.bytes_wire.to_string(),
            format!("{:.3}", r.rate),
            (r.open_error as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a RunSummary)>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGGREGATE_COLUMNS)?;
    for (axis_value, s) in rows {
        w.write_record([
            axis_value.to_string(),
            s.spec.clients.to_string(),
            format!("{:.3}", s.aggregate_rate),
            format!("{:.9}", s.mean_open_time),
            format!("{:.9}", s.rms_open_time),
            s.total_waste.to_string(),
            s.error_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `clients.csv` and `aggregate.csv` for the repetitions of one
/// run. With several repetitions the client files are `clients_<r>.csv`.
pub fn emit_run(summaries: &[RunSummary], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let labels: Vec<String> = (0..summaries.len())
        .map(|r| if summaries.len() == 1 { "run".to_string() } else { format!("run{r}") })
        .collect();
    for (r, s) in summaries.iter().enumerate() {
        let name = if summaries.len() == 1 {
            "clients.csv".to_string()
        } else {
            format!("clients_{r}.csv")
        };
        let p = dir.join(name);
        write_clients_csv(&s.records, &p)?;
        out.push(p);
    }
    let p = dir.join("aggregate.csv");
    write_aggregate_csv(labels.iter().map(String::as_str).zip(summaries), &p)?;
    out.push(p);
    Ok(out)
}

/// Writes one client file per sweep point and a combined aggregate file.
pub fn emit_sweep(axis: Axis, points: &[SweepPoint], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for p in points {
        let safe: String = p
            .axis_value
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
            .collect();
        let path = dir.join(format!("clients_{}_{safe}.csv", axis.name()));
        write_clients_csv(&p.summary.records, &path)?;
        out.push(path);
    }
    let path = dir.join(format!("aggregate_{}.csv", axis.name()));
    write_aggregate_csv(points.iter().map(|p| (p.axis_value.as_str(), &p.summary)), &path)?;
    out.push(path);
    Ok(out)
}

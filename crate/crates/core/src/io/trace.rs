use std::fmt::Write as _;
use std::path::Path;

use crate::error::{DacmError, Result};
use crate::pipeline::TraceRow;

pub const TRACE_HEADER: &str = "epoch,iter,loss,miou";

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{:.12},{:.12}", r.epoch, r.iter, r.loss, r.miou);
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(DacmError::Format("missing trace header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || DacmError::Format(format!("bad trace row {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(TraceRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                iter: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
                miou: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_to_csv(rows))?;
    Ok(())
}

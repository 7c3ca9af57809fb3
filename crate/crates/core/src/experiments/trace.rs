use std::path::Path;

use super::ExperimentError;
use crate::address::Address;
use crate::programs::DomainId;

/// One retired load from an external trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub ip: Address,
    pub vaddr: Address,
    pub domain: DomainId,
}

fn hex(field: &str, line: usize, what: &str) -> Result<u64, ExperimentError> {
    let digits = field
        .strip_prefix("0x")
        .or_else(|| field.strip_prefix("0X"))
        .unwrap_or(field);
    u64::from_str_radix(digits, 16).map_err(|e| ExperimentError::Trace {
        line,
        message: format!("bad {what} `{field}`: {e}"),
    })
}

/// Parses `ip_hex,vaddr_hex,domain_id` lines. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, ExperimentError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ExperimentError::Trace {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 3 {
            return Err(ExperimentError::Trace {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let domain = record[2].parse().map_err(|e| ExperimentError::Trace {
            line,
            message: format!("bad domain id `{}`: {e}", &record[2]),
        })?;
        out.push(TraceRecord {
            ip: Address(hex(&record[0], line, "ip")?),
            vaddr: Address(hex(&record[1], line, "address")?),
            domain,
        });
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, ExperimentError> {
    parse_trace(&std::fs::read_to_string(path)?)
}

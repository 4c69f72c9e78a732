use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::RawRecording;

pub const CANONICAL_HEADER: [&str; 8] = ["species", "subject", "rate_hz", "t", "ax", "ay", "az", "label"];

struct Group {
    rate: f64,
    last_t: f64,
    channels: [Vec<f64>; 3],
    labels: Vec<Option<usize>>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads the canonical CSV (`species,subject,rate_hz,t,ax,ay,az,label`).
///
/// `species` and `label` are integer ids; an empty label marks an
/// unlabelled sample. Rows are grouped by `(species, subject)` and must have
/// strictly increasing `t` and a constant rate within each group. Recordings
/// come back ordered by species id, then subject.
pub fn ingest_canonical_csv(path: &Path) -> Result<Vec<RawRecording>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut cols = [0usize; 8];
    for (slot, name) in cols.iter_mut().zip(CANONICAL_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column {name:?}")))?;
    }

    let mut groups: BTreeMap<(usize, String), Group> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(cols[i]).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            let raw = field(i);
            let v: f64 = raw.parse().map_err(|_| {
                parse_err(
                    path,
                    line,
                    format!("column {}: cannot parse {raw:?} as a number", CANONICAL_HEADER[i]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    line,
                    format!("column {}: non-finite value", CANONICAL_HEADER[i]),
                ));
            }
            Ok(v)
        };
        let species: usize = field(0).parse().map_err(|_| {
            parse_err(
                path,
                line,
                format!("species {:?} is not a non-negative integer", field(0)),
            )
        })?;
        let subject = field(1).to_string();
        let rate = num(2)?;
        if rate <= 0.0 {
            return Err(parse_err(path, line, "rate_hz must be positive"));
        }
        let t = num(3)?;
        let xyz = [num(4)?, num(5)?, num(6)?];
        let label = match field(7) {
            "" => None,
            raw => Some(
                raw.parse::<usize>()
                    .map_err(|_| parse_err(path, line, format!("label {raw:?} is not a non-negative integer")))?,
            ),
        };

        let key = (species, subject);
        let group_name = format!("species={} subject={}", key.0, key.1);
        let g = groups.entry(key).or_insert_with(|| Group {
            rate,
            last_t: f64::NEG_INFINITY,
            channels: [Vec::new(), Vec::new(), Vec::new()],
            labels: Vec::new(),
        });
        if t <= g.last_t {
            return Err(Error::NonMonotoneTime {
                group: group_name,
                line,
            });
        }
        if rate != g.rate {
            return Err(parse_err(
                path,
                line,
                format!("{group_name}: rate_hz changes within the recording"),
            ));
        }
        g.last_t = t;
        for (ch, v) in g.channels.iter_mut().zip(xyz) {
            ch.push(v);
        }
        g.labels.push(label);
    }

    Ok(groups
        .into_iter()
        .map(|((species, subject), g)| RawRecording {
            species,
            sampling_rate_hz: g.rate,
            channels: g.channels,
            labels: g.labels,
            subject,
        })
        .collect())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

/// Writes recordings in the canonical CSV layout with `t` in seconds.
pub fn write_canonical_csv(path: &Path, recordings: &[RawRecording]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", CANONICAL_HEADER.join(",")).map_err(io)?;
    for rec in recordings {
        for i in 0..rec.len() {
            let label = rec.labels[i].map(|l| l.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                rec.species,
                rec.subject,
                rec.sampling_rate_hz,
                i as f64 / rec.sampling_rate_hz,
                rec.channels[0][i],
                rec.channels[1][i],
                rec.channels[2][i],
                label
            )
            .map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

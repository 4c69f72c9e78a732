use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{IngestReport, SpeciesReport};
use crate::dataset::SpeciesInfo;
use crate::error::{Error, Result};
use crate::preprocess::RawRecording;

/// The three public accelerometer releases this crate knows how to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PublicDataset {
    Horse,
    Sheep,
    Cattle,
}

impl FromStr for PublicDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "horse" => Ok(PublicDataset::Horse),
            "sheep" => Ok(PublicDataset::Sheep),
            "cattle" => Ok(PublicDataset::Cattle),
            other => Err(Error::InvalidArgument(format!("unknown dataset {other:?}"))),
        }
    }
}

enum Mapping {
    Class(usize),
    Excluded,
    Unknown,
}

impl PublicDataset {
    pub fn species_info(self) -> SpeciesInfo {
        match self {
            PublicDataset::Horse => SpeciesInfo::horse(),
            PublicDataset::Sheep => SpeciesInfo::sheep(),
            PublicDataset::Cattle => SpeciesInfo::cattle(),
        }
    }

    fn map_activity(self, raw: &str) -> Mapping {
        let a = normalize(raw);
        match self {
            // Rider/natural variants of the gaits collapse onto the gait.
            PublicDataset::Horse => match a.as_str() {
                "grazing" => Mapping::Class(0),
                "standing" => Mapping::Class(2),
                _ if a.starts_with("galloping") => Mapping::Class(1),
                _ if a.starts_with("trotting") => Mapping::Class(3),
                _ if a.starts_with("walking") => Mapping::Class(4),
                _ => Mapping::Excluded,
            },
            PublicDataset::Sheep => match a.as_str() {
                "grazing" => Mapping::Class(0),
                "walking" | "scratching" | "active" => Mapping::Class(1),
                "standing" | "resting" | "inactive" => Mapping::Class(2),
                _ => Mapping::Unknown,
            },
            PublicDataset::Cattle => match a.as_str() {
                "grazing" => Mapping::Class(0),
                "moving" => Mapping::Class(1),
                "resting" => Mapping::Class(2),
                "ruminating" => Mapping::Class(3),
                "salting" => Mapping::Class(4),
                _ => Mapping::Excluded,
            },
        }
    }
}

fn normalize(raw: &str) -> String {
    raw.trim()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c == '_' || c == ' ' { '-' } else { c })
        .collect()
}

fn header_key(h: &str) -> String {
    h.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_ascii_lowercase()
}

fn find_column(headers: &csv::StringRecord, candidates: &[&str]) -> Option<usize> {
    candidates
        .iter()
        .find_map(|cand| headers.iter().position(|h| header_key(h) == *cand))
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads every `*.csv` below `dir` as one recording per file.
///
/// Each file needs a header with x/y/z acceleration columns (`ax`, `accx`,
/// `acc_x`, ... matched case-insensitively) and an activity column (`label`,
/// `activity`, `behaviour` or `behavior`). Other columns such as gyroscope
/// or magnetometer channels are ignored. The file stem becomes the subject
/// id and rows are taken in file order at the dataset's native rate.
///
/// Rows whose activity lies outside the species' class set are kept as
/// unlabelled samples (so windows dominated by them are dropped) and counted
/// in the report. For sheep, whose release contains exactly five activities,
/// an unrecognised activity is an error.
pub fn ingest_public_dataset(kind: PublicDataset, dir: &Path) -> Result<(Vec<RawRecording>, IngestReport)> {
    let info = kind.species_info();
    let files = csv_files(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no CSV files found under {}",
            dir.display()
        )));
    }
    let mut report = SpeciesReport {
        name: info.name.clone(),
        ..Default::default()
    };
    let mut recordings = Vec::new();
    for path in files {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(&path)
            .map_err(|e| Error::Parse {
                path: path.clone(),
                line: 0,
                message: e.to_string(),
            })?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse {
                path: path.clone(),
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let missing = |what: &str| Error::Parse {
            path: path.clone(),
            line: 1,
            message: format!("no {what} column in header"),
        };
        let cols = [
            find_column(&headers, &["ax", "accx", "accelx", "accelerometerx", "x"])
                .ok_or_else(|| missing("x acceleration"))?,
            find_column(&headers, &["ay", "accy", "accely", "accelerometery", "y"])
                .ok_or_else(|| missing("y acceleration"))?,
            find_column(&headers, &["az", "accz", "accelz", "accelerometerz", "z"])
                .ok_or_else(|| missing("z acceleration"))?,
        ];
        let label_col = find_column(&headers, &["label", "activity", "behaviour", "behavior"])
            .ok_or_else(|| missing("activity"))?;

        let mut channels = [Vec::new(), Vec::new(), Vec::new()];
        let mut labels = Vec::new();
        let mut unknown: BTreeMap<String, usize> = BTreeMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                message: e.to_string(),
            })?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            report.rows += 1;
            let raw_label = record.get(label_col).unwrap_or("");
            let mut xyz = [0.0; 3];
            for (v, &c) in xyz.iter_mut().zip(&cols) {
                let raw = record.get(c).unwrap_or("");
                *v = raw.parse().map_err(|_| Error::Parse {
                    path: path.clone(),
                    line,
                    message: format!("cannot parse acceleration value {raw:?}"),
                })?;
            }
            let label = if raw_label.is_empty() {
                *report.dropped_rows.entry("<unlabelled>".into()).or_default() += 1;
                None
            } else {
                match kind.map_activity(raw_label) {
                    Mapping::Class(c) => Some(c),
                    Mapping::Excluded => {
                        *report.dropped_rows.entry(normalize(raw_label)).or_default() += 1;
                        None
                    }
                    Mapping::Unknown => {
                        *unknown.entry(raw_label.to_string()).or_default() += 1;
                        None
                    }
                }
            };
            for (ch, v) in channels.iter_mut().zip(xyz) {
                ch.push(v);
            }
            labels.push(label);
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownActivity {
                path,
                labels: unknown.into_keys().collect(),
            });
        }
        let subject = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !labels.is_empty() {
            recordings.push(RawRecording {
                species: 0,
                sampling_rate_hz: info.sampling_rate_hz,
                channels,
                labels,
                subject,
            });
        }
    }
    Ok((recordings, IngestReport { species: vec![report] }))
}

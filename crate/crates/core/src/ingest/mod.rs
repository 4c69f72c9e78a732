//! Reading raw recordings from disk and turning them into datasets.

mod canonical;
mod public;

pub use canonical::{ingest_canonical_csv, write_canonical_csv, CANONICAL_HEADER};
pub use public::{ingest_public_dataset, PublicDataset};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SpeciesInfo};
use crate::error::Result;
use crate::preprocess::{recordings_to_windows, RawRecording};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: String,
    pub windows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeciesReport {
    pub name: String,
    pub rows: usize,
    /// Rows excluded at ingest, keyed by their raw activity string.
    pub dropped_rows: BTreeMap<String, usize>,
    pub classes: Vec<ClassCount>,
    pub windows: usize,
    pub dropped_windows: usize,
}

/// Summary of an ingest run, written next to the window archive.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub species: Vec<SpeciesReport>,
}

impl IngestReport {
    pub fn for_species(species: &[SpeciesInfo]) -> Self {
        IngestReport {
            species: species
                .iter()
                .map(|s| SpeciesReport {
                    name: s.name.clone(),
                    ..Default::default()
                })
                .collect(),
        }
    }
}

/// Windows and resamples `recordings` into a dataset and completes the
/// window counts of `report`.
pub fn build_dataset(
    species: Vec<SpeciesInfo>,
    recordings: &[RawRecording],
    seconds: f64,
    target_len: usize,
    mut report: IngestReport,
) -> Result<(Dataset, IngestReport)> {
    let class_counts: Vec<usize> = species.iter().map(|s| s.num_classes()).collect();
    let (windows, stats) = recordings_to_windows(recordings, &class_counts, seconds, target_len)?;
    let mut dataset = Dataset::new(species, target_len);
    dataset.windows = windows;
    if report.species.len() != dataset.species.len() {
        report = IngestReport::for_species(&dataset.species);
    }
    for (s, rep) in report.species.iter_mut().enumerate() {
        if rep.rows == 0 {
            rep.rows = recordings.iter().filter(|r| r.species == s).map(|r| r.len()).sum();
        }
        rep.windows = stats[s].windows;
        rep.dropped_windows = stats[s].dropped_windows;
        let idx: Vec<usize> = (0..dataset.windows.len())
            .filter(|&i| dataset.windows[i].species == s)
            .collect();
        let counts = dataset.class_counts(s, &idx);
        rep.classes = dataset.species[s]
            .classes
            .iter()
            .zip(counts)
            .map(|(c, n)| ClassCount {
                class: c.clone(),
                windows: n,
            })
            .collect();
    }
    Ok((dataset, report))
}

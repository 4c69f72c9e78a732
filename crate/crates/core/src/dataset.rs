//! Windowed multi-species datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Name, native sampling rate and activity classes of one species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesInfo {
    pub name: String,
    pub sampling_rate_hz: f64,
    pub classes: Vec<String>,
}

impl SpeciesInfo {
    pub fn new(name: &str, sampling_rate_hz: f64, classes: &[&str]) -> Self {
        SpeciesInfo {
            name: name.to_string(),
            sampling_rate_hz,
            classes: classes.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn horse() -> Self {
        SpeciesInfo::new(
            "horse",
            100.0,
            &["grazing", "galloping", "standing", "trotting", "walking"],
        )
    }

    pub fn sheep() -> Self {
        SpeciesInfo::new("sheep", 12.5, &["grazing", "active", "inactive"])
    }

    pub fn cattle() -> Self {
        SpeciesInfo::new(
            "cattle",
            25.0,
            &["grazing", "moving", "resting", "ruminating", "salting"],
        )
    }
}

/// One resampled tri-axial window, `data` shaped `[1, 3, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub data: Tensor,
    pub species: usize,
    pub label: usize,
    pub subject: String,
}

impl SampleWindow {
    pub fn len(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Axis `axis` (0 = x, 1 = y, 2 = z).
    pub fn channel(&self, axis: usize) -> &[f64] {
        let n = self.len();
        &self.data.data()[axis * n..(axis + 1) * n]
    }
}

/// Windows of several species sharing one target length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub species: Vec<SpeciesInfo>,
    pub target_len: usize,
    pub windows: Vec<SampleWindow>,
}

impl Dataset {
    pub fn new(species: Vec<SpeciesInfo>, target_len: usize) -> Self {
        Dataset {
            species,
            target_len,
            windows: Vec::new(),
        }
    }

    pub fn num_species(&self) -> usize {
        self.species.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.windows.iter().enumerate() {
            let info = self.species.get(w.species).ok_or(Error::UnknownSpecies(w.species))?;
            if w.label >= info.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label: w.label,
                    classes: info.num_classes(),
                });
            }
            if w.data.shape() != [1, 3, self.target_len] {
                return Err(Error::shape(
                    "dataset",
                    format!("window {i} has shape {:?}", w.data.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Indices of the windows of each species, in dataset order.
    pub fn indices_by_species(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.species.len()];
        for (i, w) in self.windows.iter().enumerate() {
            out[w.species].push(i);
        }
        out
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.windows[i].label).collect()
    }

    pub fn class_counts(&self, species: usize, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.species[species].num_classes()];
        for &i in indices {
            counts[self.windows[i].label] += 1;
        }
        counts
    }

    /// Appends another dataset, renumbering its species after ours.
    pub fn merge(&mut self, other: Dataset) -> Result<()> {
        if other.target_len != self.target_len {
            return Err(Error::InvalidArgument(format!(
                "cannot merge datasets with window lengths {} and {}",
                self.target_len, other.target_len
            )));
        }
        let offset = self.species.len();
        self.species.extend(other.species);
        self.windows.extend(other.windows.into_iter().map(|mut w| {
            w.species += offset;
            w
        }));
        Ok(())
    }

    /// Keeps only the named species, renumbered in the given order.
    pub fn select_species(&self, names: &[&str]) -> Result<Dataset> {
        let mut map = vec![None; self.species.len()];
        let mut species = Vec::new();
        for (new, name) in names.iter().enumerate() {
            let old = self
                .species
                .iter()
                .position(|s| s.name == *name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown species {name:?}")))?;
            map[old] = Some(new);
            species.push(self.species[old].clone());
        }
        let windows = self
            .windows
            .iter()
            .filter_map(|w| {
                map[w.species].map(|s| SampleWindow {
                    species: s,
                    ..w.clone()
                })
            })
            .collect();
        Ok(Dataset {
            species,
            target_len: self.target_len,
            windows,
        })
    }
}

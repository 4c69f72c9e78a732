//! JSON checkpoints. Floats are written with shortest round-trip formatting
//! so a save/load cycle is bit-exact.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ArchConfig;
use super::layers::RunningStats;
use super::network::CkspModel;
use crate::dataset::SpeciesInfo;
use crate::error::{Error, Result};
use crate::preprocess::Standardizer;

pub const FORMAT: &str = "cksp-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub arch: ArchConfig,
    pub species: Vec<SpeciesInfo>,
    pub standardizer: Standardizer,
    /// Parameters keyed by canonical path, e.g. `block2.spconv.species1.B`.
    pub params: IndexMap<String, StoredTensor>,
    /// Running statistics keyed by norm slot, e.g. `block1.sbn.species0`.
    pub running_stats: IndexMap<String, RunningStats>,
}

impl Checkpoint {
    pub fn from_model(model: &CkspModel) -> Self {
        let params = model
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    StoredTensor {
                        shape: p.tensor.shape().to_vec(),
                        data: p.tensor.data().to_vec(),
                    },
                )
            })
            .collect();
        let mut running_stats = IndexMap::new();
        for layer in &model.norms {
            for (i, slot) in layer.slots.iter().enumerate() {
                running_stats.insert(layer.slot_name(i), slot.running.clone());
            }
        }
        Checkpoint {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            arch: model.arch.clone(),
            species: model.species.clone(),
            standardizer: model.standardizer.clone(),
            params,
            running_stats,
        }
    }

    pub fn into_model(self) -> Result<CkspModel> {
        if self.format != FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = CkspModel::new(&self.arch, &self.species, 0)?;
        model.standardizer = self.standardizer;
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                self.params.len()
            )));
        }
        for (name, stored) in self.params {
            let p = model
                .params
                .by_name_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
            if p.tensor.shape() != stored.shape.as_slice() || stored.data.len() != p.tensor.numel() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    stored.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(&stored.data);
        }
        for layer in &mut model.norms {
            for i in 0..layer.slots.len() {
                let key = layer.slot_name(i);
                let stats = self
                    .running_stats
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing running statistics {key}")))?;
                if stats.mean.len() != layer.channels || stats.var.len() != layer.channels {
                    return Err(Error::Checkpoint(format!("{key}: wrong channel count")));
                }
                layer.slots[i].running = stats.clone();
            }
        }
        Ok(model)
    }
}

pub fn save(model: &CkspModel, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(&Checkpoint::from_model(model))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<CkspModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    ckpt.into_model()
}

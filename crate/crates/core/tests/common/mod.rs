#![allow(dead_code)]

use cksp_core::dataset::SpeciesInfo;
use cksp_core::model::{ArchConfig, CkspModel, SpeciesInput};
use cksp_core::rng::seeded;
use cksp_core::Tensor;
use rand::Rng;

pub fn three_species() -> Vec<SpeciesInfo> {
    vec![SpeciesInfo::horse(), SpeciesInfo::sheep(), SpeciesInfo::cattle()]
}

/// A small architecture that keeps finite-difference sweeps cheap.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        input_len: 16,
        initial_channels: 3,
        block_channels: vec![4, 4],
        fc_hidden: 5,
        rank: 2,
        ..ArchConfig::default()
    }
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Overwrites every parameter with uniform values in [-1, 1] so zero-init
/// branches and unit norm scales do not hide gradient errors.
pub fn randomize(model: &mut CkspModel, seed: u64) {
    let mut rng = seeded(seed);
    for p in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

/// `rows` random windows for each species, as model inputs.
pub fn mixed_inputs(arch: &ArchConfig, species: usize, rows: usize, seed: u64) -> Vec<SpeciesInput> {
    (0..species)
        .map(|s| SpeciesInput {
            species: s,
            data: uniform(&[rows, arch.input_channels, 1, arch.input_len], seed + s as u64),
        })
        .collect()
}

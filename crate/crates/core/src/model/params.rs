use indexmap::IndexMap;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

pub type ParamId = usize;

/// What a parameter is; decides whether L2 weight decay applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution, low-rank factor or fully connected weight.
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    NormAffine,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// Owning species for species-specific parameters.
    pub species: Option<usize>,
    pub tensor: Tensor,
}

impl Param {
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
}

/// FNV-1a, used to give every parameter its own random stream so values do
/// not depend on construction order.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Named parameters in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: IndexMap<String, ParamId>,
}

impl ParamStore {
    pub fn add(
        &mut self,
        name: String,
        kind: ParamKind,
        species: Option<usize>,
        shape: &[usize],
        init: Init,
        seed: u64,
    ) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let mut rng = seeded(derive_seed(seed, &[name_hash(&name)]));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let tensor = Tensor::new(shape, data).expect("valid parameter shape").with_grad();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            species,
            tensor,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(move |i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

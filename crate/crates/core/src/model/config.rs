use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Form of the species-specific convolution branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    /// `reshape(B · A)` with `B: [3c', r]` zero-initialised and
    /// `A: [r, c]` Gaussian.
    LowRank,
    /// A full `[c', 3, 1, c]` kernel, zero-initialised.
    FullRank,
}

/// Architecture and layer hyperparameters. Species and their class counts
/// are supplied separately when a model is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub input_len: usize,
    /// Output channels of the plain initial convolution.
    pub initial_channels: usize,
    /// Output channels of each SPConv block, in order.
    pub block_channels: Vec<usize>,
    pub fc_hidden: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub rank: usize,
    /// Standard deviation of the Gaussian init of the low-rank `A` factor.
    pub lowrank_init_std: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub activation: Activation,
    pub use_spconv: bool,
    pub use_sbn: bool,
    pub branch: BranchKind,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_channels: 3,
            input_len: 50,
            initial_channels: 16,
            block_channels: vec![32, 64, 128],
            fc_hidden: 64,
            pool_window: 2,
            pool_stride: 2,
            rank: 12,
            lowrank_init_std: 0.02,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            activation: Activation::Relu,
            use_spconv: true,
            use_sbn: true,
            branch: BranchKind::LowRank,
        }
    }
}

impl ArchConfig {
    /// The same architecture with the given module switches.
    pub fn ablation(&self, use_spconv: bool, use_sbn: bool, branch: BranchKind) -> Self {
        ArchConfig {
            use_spconv,
            use_sbn,
            branch,
            ..self.clone()
        }
    }

    /// A plain one-species network: shared convolutions and batch norm only.
    pub fn single_net(&self) -> Self {
        self.ablation(false, false, self.branch)
    }

    /// `(c_in, c_out)` of every SPConv block.
    pub fn block_dims(&self) -> Vec<(usize, usize)> {
        let mut prev = self.initial_channels;
        self.block_channels
            .iter()
            .map(|&c| {
                let d = (prev, c);
                prev = c;
                d
            })
            .collect()
    }
}

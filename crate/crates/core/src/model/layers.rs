//! Shared-preserved convolution and species-specific batch normalization.

use serde::{Deserialize, Serialize};

use super::params::{Init, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tape::{BatchStats, Tape, Var};

/// Largest admissible rank for a `[c_out, 3, 1, c_in]` kernel factored as
/// `[3 c_out, r] x [r, c_in]`.
pub fn max_rank(c_in: usize, c_out: usize) -> usize {
    (3 * c_out).min(c_in)
}

pub fn check_rank(rank: usize, c_in: usize, c_out: usize) -> Result<()> {
    let max = max_rank(c_in, c_out);
    if rank == 0 || rank > max {
        return Err(Error::RankBound { rank, c_out, c_in, max });
    }
    Ok(())
}

/// Parameters of a species-specific low-rank 1x3 convolution.
#[derive(Debug, Clone)]
pub struct LowRankConvParams {
    /// `[3 c_out, r]`, zero at construction.
    pub b: ParamId,
    /// `[r, c_in]`, drawn from `N(0, std^2)`.
    pub a: ParamId,
    pub rank: usize,
    pub std: f64,
}

/// The species-specific half of an SPConv layer.
#[derive(Debug, Clone)]
pub enum Branch {
    LowRank(LowRankConvParams),
    FullRank { weight: ParamId },
}

impl Branch {
    pub fn param_count(&self, store: &ParamStore) -> usize {
        match self {
            Branch::LowRank(p) => store.get(p.b).tensor.numel() + store.get(p.a).tensor.numel(),
            Branch::FullRank { weight } => store.get(*weight).tensor.numel(),
        }
    }
}

/// Applies `reshape(B · A)` as a bias-free 1x3 convolution.
pub fn lrconv_forward(tape: &mut Tape, x: Var, b: Var, a: Var, stride: usize, padding: usize) -> Result<Var> {
    let (rows, rank_b) = match tape.value(b).shape() {
        [r, k] => (*r, *k),
        s => return Err(Error::shape("lrconv", format!("B must be 2-D, got {s:?}"))),
    };
    let (rank_a, c_in) = match tape.value(a).shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::shape("lrconv", format!("A must be 2-D, got {s:?}"))),
    };
    if rows % 3 != 0 || rank_a != rank_b {
        return Err(Error::shape(
            "lrconv",
            format!("B [{rows},{rank_b}] and A [{rank_a},{c_in}] do not factor a 1x3 kernel"),
        ));
    }
    let c_out = rows / 3;
    check_rank(rank_a, c_in, c_out)?;
    let ba = tape.matmul(b, a)?;
    let kernel = tape.reshape(ba, &[c_out, 3, 1, c_in])?;
    tape.conv1x3(x, kernel, None, stride, padding)
}

/// Shared full-rank 1x3 convolution plus one optional branch per species.
#[derive(Debug, Clone)]
pub struct SpconvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
    pub shared_weight: ParamId,
    pub shared_bias: ParamId,
    /// Empty when species branches are disabled.
    pub branches: Vec<Branch>,
}

impl SpconvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        species: usize,
        branch: Option<(super::BranchKind, usize, f64)>,
        seed: u64,
    ) -> Result<Self> {
        let shared_weight = store.add(
            format!("{name}.conv.weight"),
            ParamKind::Weight,
            None,
            &[c_out, 3, 1, c_in],
            Init::HeUniform { fan_in: 3 * c_in },
            seed,
        );
        let shared_bias = store.add(
            format!("{name}.conv.bias"),
            ParamKind::Bias,
            None,
            &[c_out],
            Init::Zeros,
            seed,
        );
        let mut branches = Vec::new();
        if let Some((kind, rank, std)) = branch {
            if kind == super::BranchKind::LowRank {
                check_rank(rank, c_in, c_out)?;
            }
            for s in 0..species {
                let prefix = format!("{name}.spconv.species{s}");
                branches.push(match kind {
                    super::BranchKind::LowRank => Branch::LowRank(LowRankConvParams {
                        b: store.add(
                            format!("{prefix}.B"),
                            ParamKind::Weight,
                            Some(s),
                            &[3 * c_out, rank],
                            Init::Zeros,
                            seed,
                        ),
                        a: store.add(
                            format!("{prefix}.A"),
                            ParamKind::Weight,
                            Some(s),
                            &[rank, c_in],
                            Init::Normal { std },
                            seed,
                        ),
                        rank,
                        std,
                    }),
                    super::BranchKind::FullRank => Branch::FullRank {
                        weight: store.add(
                            format!("{prefix}.W"),
                            ParamKind::Weight,
                            Some(s),
                            &[c_out, 3, 1, c_in],
                            Init::Zeros,
                            seed,
                        ),
                    },
                });
            }
        }
        Ok(SpconvLayer {
            name: name.to_string(),
            c_in,
            c_out,
            stride: 1,
            padding: 1,
            shared_weight,
            shared_bias,
            branches,
        })
    }

    /// Shared convolution of the whole batch `x`.
    pub fn shared_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(self.shared_weight, &store.get(self.shared_weight).tensor);
        let b = tape.param(self.shared_bias, &store.get(self.shared_bias).tensor);
        tape.conv1x3(x, w, Some(b), self.stride, self.padding)
    }

    /// Branch output of species `s` on `x` (no bias).
    pub fn branch_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, s: usize) -> Result<Var> {
        match self.branches.get(s).ok_or(Error::UnknownSpecies(s))? {
            Branch::LowRank(p) => {
                let b = tape.param(p.b, &store.get(p.b).tensor);
                let a = tape.param(p.a, &store.get(p.a).tensor);
                lrconv_forward(tape, x, b, a, self.stride, self.padding)
            }
            Branch::FullRank { weight } => {
                let w = tape.param(*weight, &store.get(*weight).tensor);
                tape.conv1x3(x, w, None, self.stride, self.padding)
            }
        }
    }

    /// `shared(x) + branch_s(x)` over a batch whose rows are grouped into
    /// consecutive `(species, offset, len)` segments.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, segments: &[Segment]) -> Result<Var> {
        let shared = self.shared_forward(tape, store, x)?;
        if self.branches.is_empty() {
            return Ok(shared);
        }
        let branch = if let [only] = segments {
            self.branch_forward(tape, store, x, only.species)?
        } else {
            let mut parts = Vec::with_capacity(segments.len());
            for seg in segments {
                let xs = tape.slice_batch(x, seg.offset, seg.len)?;
                parts.push(self.branch_forward(tape, store, xs, seg.species)?);
            }
            tape.concat_batch(&parts)?
        };
        tape.add(shared, branch)
    }
}

/// Contiguous rows of one species inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub species: usize,
    pub offset: usize,
    pub len: usize,
}

/// Exponential moving estimates of per-channel mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running <- (1 - m) running + m batch`, using the unbiased batch
    /// variance.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let n = batch.count as f64;
        let correction = if batch.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b * correction;
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormSlot {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: RunningStats,
}

/// Batch normalization with either one shared state or one state per
/// species (affine parameters and running statistics).
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub name: String,
    pub channels: usize,
    pub per_species: bool,
    pub slots: Vec<NormSlot>,
    pub eps: f64,
    pub momentum: f64,
}

/// A batch-statistics update produced by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub layer: usize,
    pub slot: usize,
    pub stats: BatchStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl NormLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        species: Option<usize>,
        eps: f64,
        momentum: f64,
        seed: u64,
    ) -> Self {
        let mut slots = Vec::new();
        let mut add_slot = |prefix: String, owner: Option<usize>| {
            slots.push(NormSlot {
                gamma: store.add(
                    format!("{prefix}.gamma"),
                    ParamKind::NormAffine,
                    owner,
                    &[channels],
                    Init::Ones,
                    seed,
                ),
                beta: store.add(
                    format!("{prefix}.beta"),
                    ParamKind::NormAffine,
                    owner,
                    &[channels],
                    Init::Zeros,
                    seed,
                ),
                running: RunningStats::new(channels),
            });
        };
        let full_name = match species {
            Some(n) => {
                for s in 0..n {
                    add_slot(format!("{name}.sbn.species{s}"), Some(s));
                }
                format!("{name}.sbn")
            }
            None => {
                add_slot(format!("{name}.bn"), None);
                format!("{name}.bn")
            }
        };
        NormLayer {
            name: full_name,
            channels,
            per_species: species.is_some(),
            slots,
            eps,
            momentum,
        }
    }

    /// Key of slot `i` as used in checkpoints and statistics exports.
    pub fn slot_name(&self, i: usize) -> String {
        if self.per_species {
            format!("{}.species{i}", self.name)
        } else {
            self.name.clone()
        }
    }

    fn slot_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        slot: usize,
        mode: Mode,
        species: usize,
        layer_index: usize,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let s = self.slots.get(slot).ok_or(Error::UnknownSpecies(slot))?;
        let gamma = tape.param(s.gamma, &store.get(s.gamma).tensor);
        let beta = tape.param(s.beta, &store.get(s.beta).tensor);
        match mode {
            Mode::Train => {
                let rows = tape.value(x).shape()[0];
                if rows < 2 {
                    return Err(Error::BatchTooSmall { species, len: rows });
                }
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                updates.push(StatUpdate {
                    layer: layer_index,
                    slot,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_frozen(x, gamma, beta, &s.running.mean, &s.running.var, self.eps),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        segments: &[Segment],
        mode: Mode,
        layer_index: usize,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        if !self.per_species {
            let species = segments.first().map(|s| s.species).unwrap_or(0);
            return self.slot_forward(tape, store, x, 0, mode, species, layer_index, updates);
        }
        if let [only] = segments {
            return self.slot_forward(tape, store, x, only.species, mode, only.species, layer_index, updates);
        }
        let mut parts = Vec::with_capacity(segments.len());
        for seg in segments {
            let xs = tape.slice_batch(x, seg.offset, seg.len)?;
            parts.push(self.slot_forward(tape, store, xs, seg.species, mode, seg.species, layer_index, updates)?);
        }
        tape.concat_batch(&parts)
    }

    pub fn apply(&mut self, update: &StatUpdate) {
        self.slots[update.slot].running.update(&update.stats, self.momentum);
    }
}

/// Stand-alone species-specific batch norm over a `[b, c, 1, w]` batch of a
/// single species, updating that species' running statistics in training
/// mode.
pub fn sbn_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &mut NormLayer,
    x: Var,
    species: usize,
    mode: Mode,
) -> Result<Var> {
    if layer.per_species && species >= layer.slots.len() {
        return Err(Error::UnknownSpecies(species));
    }
    let rows = tape.value(x).shape()[0];
    let mut updates = Vec::new();
    let seg = [Segment {
        species,
        offset: 0,
        len: rows,
    }];
    let y = layer.forward(tape, store, x, &seg, mode, 0, &mut updates)?;
    for u in &updates {
        layer.apply(u);
    }
    Ok(y)
}

use super::config::{Activation, ArchConfig};
use super::layers::{Branch, Mode, NormLayer, Segment, SpconvLayer, StatUpdate};
use super::params::{Init, ParamId, ParamKind, ParamStore};
use crate::dataset::{SampleWindow, SpeciesInfo};
use crate::error::{Error, Result};
use crate::preprocess::Standardizer;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

/// A batch of windows of one species, stacked as `[b, 3, 1, len]`.
#[derive(Debug, Clone)]
pub struct SpeciesInput {
    pub species: usize,
    pub data: Tensor,
}

/// Result of a forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Output of the shared fully connected stage, `[B, fc_hidden]`, rows in
    /// input order.
    pub features: Var,
    /// `(species, [b_s, k_s] logits)` in input order.
    pub logits: Vec<(usize, Var)>,
    /// Batch statistics to fold into running estimates (training mode).
    pub stat_updates: Vec<StatUpdate>,
}

/// Parameter counts by component.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ParamReport {
    pub shared: usize,
    pub species_branches: usize,
    pub norm_affine_species: usize,
    pub heads: usize,
    pub total: usize,
    /// Branch parameters summed over blocks and species, `S * (3c'r + rc)`.
    pub lowrank_branch_total: usize,
    /// Full-rank equivalent, `S * 3c'c`.
    pub fullrank_branch_total: usize,
}

impl ParamReport {
    pub fn lowrank_smaller(&self) -> bool {
        self.lowrank_branch_total < self.fullrank_branch_total
    }
}

/// The multi-species network: a plain shared initial block, SPConv + SBN
/// blocks with max pooling, global average pooling, a shared fully connected
/// layer with SBN, and one linear head per species.
#[derive(Debug, Clone)]
pub struct CkspModel {
    pub arch: ArchConfig,
    pub species: Vec<SpeciesInfo>,
    pub standardizer: Standardizer,
    pub params: ParamStore,
    pub initial: SpconvLayer,
    pub blocks: Vec<SpconvLayer>,
    /// Norm layers in forward order: initial block, each block, then FC.
    pub norms: Vec<NormLayer>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub heads: Vec<Head>,
}

impl CkspModel {
    pub fn new(arch: &ArchConfig, species: &[SpeciesInfo], seed: u64) -> Result<Self> {
        if species.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one species".into()));
        }
        if species.iter().any(|s| s.num_classes() == 0) {
            return Err(Error::InvalidArgument("every species needs at least one class".into()));
        }
        let mut width = arch.input_len;
        for _ in 0..=arch.block_channels.len() {
            if width < arch.pool_window {
                return Err(Error::InvalidArgument(format!(
                    "input length {} is too short for {} pooling stages",
                    arch.input_len,
                    arch.block_channels.len() + 1
                )));
            }
            width = (width - arch.pool_window) / arch.pool_stride + 1;
        }

        let s_count = species.len();
        let mut params = ParamStore::default();
        let initial = SpconvLayer::new(
            &mut params,
            "block0",
            arch.input_channels,
            arch.initial_channels,
            s_count,
            None,
            seed,
        )?;
        let mut norms = vec![NormLayer::new(
            &mut params,
            "block0",
            arch.initial_channels,
            None,
            arch.bn_eps,
            arch.bn_momentum,
            seed,
        )];
        let norm_species = arch.use_sbn.then_some(s_count);
        let mut blocks = Vec::new();
        for (i, (c_in, c_out)) in arch.block_dims().into_iter().enumerate() {
            let name = format!("block{}", i + 1);
            let branch = arch
                .use_spconv
                .then_some((arch.branch, arch.rank, arch.lowrank_init_std));
            blocks.push(SpconvLayer::new(
                &mut params,
                &name,
                c_in,
                c_out,
                s_count,
                branch,
                seed,
            )?);
            norms.push(NormLayer::new(
                &mut params,
                &name,
                c_out,
                norm_species,
                arch.bn_eps,
                arch.bn_momentum,
                seed,
            ));
        }
        let trunk_out = arch.block_channels.last().copied().unwrap_or(arch.initial_channels);
        let fc_weight = params.add(
            "fc.weight".into(),
            ParamKind::Weight,
            None,
            &[arch.fc_hidden, trunk_out],
            Init::HeUniform { fan_in: trunk_out },
            seed,
        );
        let fc_bias = params.add(
            "fc.bias".into(),
            ParamKind::Bias,
            None,
            &[arch.fc_hidden],
            Init::Zeros,
            seed,
        );
        norms.push(NormLayer::new(
            &mut params,
            "fc",
            arch.fc_hidden,
            norm_species,
            arch.bn_eps,
            arch.bn_momentum,
            seed,
        ));
        let heads = species
            .iter()
            .enumerate()
            .map(|(s, info)| Head {
                weight: params.add(
                    format!("head.species{s}.weight"),
                    ParamKind::Weight,
                    Some(s),
                    &[info.num_classes(), arch.fc_hidden],
                    Init::HeUniform { fan_in: arch.fc_hidden },
                    seed,
                ),
                bias: params.add(
                    format!("head.species{s}.bias"),
                    ParamKind::Bias,
                    Some(s),
                    &[info.num_classes()],
                    Init::Zeros,
                    seed,
                ),
                classes: info.num_classes(),
            })
            .collect();

        Ok(CkspModel {
            arch: arch.clone(),
            species: species.to_vec(),
            standardizer: Standardizer::default(),
            params,
            initial,
            blocks,
            norms,
            fc_weight,
            fc_bias,
            heads,
        })
    }

    pub fn num_species(&self) -> usize {
        self.species.len()
    }

    fn activate(&self, tape: &mut Tape, x: Var) -> Var {
        match self.arch.activation {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    /// Stacks windows into a `[b, 3, 1, len]` input, applying the model's
    /// standardizer.
    pub fn stack_inputs(&self, windows: &[&SampleWindow]) -> Result<Tensor> {
        let len = self.arch.input_len;
        let mut data = Vec::with_capacity(windows.len() * 3 * len);
        for w in windows {
            if w.data.shape() != [1, 3, len] {
                return Err(Error::shape(
                    "stack_inputs",
                    format!("window shape {:?}, model expects [1,3,{len}]", w.data.shape()),
                ));
            }
            data.extend_from_slice(w.data.data());
        }
        self.standardizer.apply(&mut data, len);
        Tensor::new(&[windows.len(), 3, 1, len], data)
    }

    /// Runs the network over per-species sub-batches. Shared layers see the
    /// concatenated batch; species-specific layers see only their rows.
    pub fn forward(&self, tape: &mut Tape, inputs: &[SpeciesInput], mode: Mode) -> Result<ForwardOutput> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("forward called with no inputs".into()));
        }
        let mut segments = Vec::with_capacity(inputs.len());
        let mut parts = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for inp in inputs {
            if inp.species >= self.num_species() {
                return Err(Error::UnknownSpecies(inp.species));
            }
            let rows = match inp.data.shape() {
                [b, c, 1, w] if *c == self.arch.input_channels && *w == self.arch.input_len => *b,
                s => {
                    return Err(Error::shape(
                        "forward",
                        format!(
                            "species {} input {s:?}, expected [b,{},1,{}]",
                            inp.species, self.arch.input_channels, self.arch.input_len
                        ),
                    ))
                }
            };
            if rows == 0 && mode == Mode::Train {
                return Err(Error::BatchTooSmall {
                    species: inp.species,
                    len: 0,
                });
            }
            segments.push(Segment {
                species: inp.species,
                offset,
                len: rows,
            });
            parts.push(tape.constant(inp.data.clone()));
            offset += rows;
        }
        let mut x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_batch(&parts)?
        };

        let mut updates = Vec::new();
        let (pw, ps) = (self.arch.pool_window, self.arch.pool_stride);

        x = self.initial.forward(tape, &self.params, x, &segments)?;
        x = self.norms[0].forward(tape, &self.params, x, &segments, mode, 0, &mut updates)?;
        x = self.activate(tape, x);
        x = tape.maxpool1d(x, pw, ps)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, &self.params, x, &segments)?;
            x = self.norms[i + 1].forward(tape, &self.params, x, &segments, mode, i + 1, &mut updates)?;
            x = self.activate(tape, x);
            x = tape.maxpool1d(x, pw, ps)?;
        }
        x = tape.global_avg_pool(x)?;
        let fw = tape.param(self.fc_weight, &self.params.get(self.fc_weight).tensor);
        let fb = tape.param(self.fc_bias, &self.params.get(self.fc_bias).tensor);
        x = tape.fully_connected(x, fw, fb)?;
        let last = self.norms.len() - 1;
        x = self.norms[last].forward(tape, &self.params, x, &segments, mode, last, &mut updates)?;
        let features = self.activate(tape, x);

        let mut logits = Vec::with_capacity(segments.len());
        for seg in &segments {
            let rows = if segments.len() == 1 {
                features
            } else {
                tape.slice_batch(features, seg.offset, seg.len)?
            };
            let head = &self.heads[seg.species];
            let hw = tape.param(head.weight, &self.params.get(head.weight).tensor);
            let hb = tape.param(head.bias, &self.params.get(head.bias).tensor);
            logits.push((seg.species, tape.fully_connected(rows, hw, hb)?));
        }
        Ok(ForwardOutput {
            features,
            logits,
            stat_updates: updates,
        })
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            self.norms[u.layer].apply(u);
        }
    }

    /// Inference-mode logits of species `s`'s head for each window, one row
    /// per window, computed in chunks of `chunk`. The windows' own species
    /// field is ignored so callers can route data to any head.
    pub fn logits(&self, s: usize, windows: &[&SampleWindow], chunk: usize) -> Result<Vec<Vec<f64>>> {
        if s >= self.num_species() {
            return Err(Error::UnknownSpecies(s));
        }
        let k = self.heads[s].classes;
        let mut out = Vec::with_capacity(windows.len());
        for part in windows.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let fwd = self.forward(
                &mut tape,
                &[SpeciesInput {
                    species: s,
                    data: self.stack_inputs(part)?,
                }],
                Mode::Eval,
            )?;
            out.extend(tape.value(fwd.logits[0].1).data().chunks_exact(k).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Predicted class of species `s`'s head for each window.
    pub fn predict_species(&self, s: usize, windows: &[&SampleWindow], chunk: usize) -> Result<Vec<usize>> {
        Ok(self.logits(s, windows, chunk)?.iter().map(|r| argmax(r)).collect())
    }

    /// Predicted class for each window, routed by the window's species.
    pub fn predict(&self, windows: &[&SampleWindow], chunk: usize) -> Result<Vec<usize>> {
        if let Some(w) = windows.iter().find(|w| w.species >= self.num_species()) {
            return Err(Error::UnknownSpecies(w.species));
        }
        let mut out = vec![0; windows.len()];
        for s in 0..self.num_species() {
            let idx: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].species == s).collect();
            let ws: Vec<&SampleWindow> = idx.iter().map(|&i| windows[i]).collect();
            for (i, p) in idx.into_iter().zip(self.predict_species(s, &ws, chunk)?) {
                out[i] = p;
            }
        }
        Ok(out)
    }

    pub fn param_report(&self) -> ParamReport {
        let mut r = ParamReport {
            shared: 0,
            species_branches: 0,
            norm_affine_species: 0,
            heads: 0,
            total: self.params.total(),
            lowrank_branch_total: 0,
            fullrank_branch_total: 0,
        };
        for p in self.params.iter() {
            let n = p.tensor.numel();
            match (p.species, p.kind) {
                (None, _) => r.shared += n,
                (Some(_), ParamKind::NormAffine) => r.norm_affine_species += n,
                (Some(_), _) if p.name.starts_with("head.") => r.heads += n,
                (Some(_), _) => r.species_branches += n,
            }
        }
        let s = self.num_species();
        for (c_in, c_out) in self.arch.block_dims() {
            r.lowrank_branch_total += s * (3 * c_out * self.arch.rank + self.arch.rank * c_in);
            r.fullrank_branch_total += s * 3 * c_out * c_in;
        }
        r
    }

    /// Materialized kernel of species `s`'s branch in block `block`
    /// (1-based), flattened to `[3 c_out, c_in]`.
    pub fn branch_kernel(&self, block: usize, s: usize) -> Result<Tensor> {
        let layer = self
            .blocks
            .get(block.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("no block {block}")))?;
        let rows = 3 * layer.c_out;
        match layer.branches.get(s).ok_or(Error::UnknownSpecies(s))? {
            Branch::LowRank(p) => {
                let mut tape = Tape::new();
                let b = tape.constant(self.params.get(p.b).tensor.clone());
                let a = tape.constant(self.params.get(p.a).tensor.clone());
                let ba = tape.matmul(b, a)?;
                Ok(tape.value(ba).clone())
            }
            Branch::FullRank { weight } => self.params.get(*weight).tensor.reshape(&[rows, layer.c_in]),
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

//! Mini-batch training with species-balanced batches and best-validation
//! checkpoint selection.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::batching::{check_batch_size, equalize_species, make_batches};
use super::loss::{cb_focal_loss, class_balanced_weights, total_loss, LossConfig};
use super::optim::{l2_penalty, step_decay_lr, Adam, AdamConfig};
use crate::dataset::SampleWindow;
use crate::error::{Error, Result};
use crate::model::{argmax, CkspModel, Mode, SpeciesInput};
use crate::preprocess::Standardizer;
use crate::rng::derive_seed;
use crate::tape::{check_numerics, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Total windows per step, split evenly across species.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub adam: AdamConfig,
    /// Downsample every species' training pool to the smallest one.
    pub equalize_species: bool,
    /// Fit a per-axis standardizer on the training windows.
    pub standardize: bool,
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 255,
            learning_rate: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            weight_decay: 0.06,
            adam: AdamConfig::default(),
            equalize_species: true,
            standardize: true,
            eval_chunk: 256,
        }
    }
}

/// Training and validation windows, outer index = model species.
#[derive(Debug, Clone)]
pub struct TrainSplit<'a> {
    pub train: Vec<Vec<&'a SampleWindow>>,
    pub val: Vec<Vec<&'a SampleWindow>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub species: String,
    pub split: Split,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best mean validation accuracy.
    pub model: CkspModel,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub curves: Vec<CurvePoint>,
    pub steps: u64,
}

/// Keeps the first epoch reaching the highest score.
#[derive(Debug, Clone)]
pub struct BestTracker<T> {
    best: Option<(usize, f64, T)>,
}

impl<T> Default for BestTracker<T> {
    fn default() -> Self {
        BestTracker { best: None }
    }
}

impl<T> BestTracker<T> {
    /// Returns true when `score` strictly beats every earlier one; `snapshot`
    /// is only called in that case.
    pub fn offer(&mut self, epoch: usize, score: f64, snapshot: impl FnOnce() -> T) -> bool {
        let better = match &self.best {
            None => true,
            Some((_, s, _)) => score > *s,
        };
        if better {
            self.best = Some((epoch, score, snapshot()));
        }
        better
    }

    pub fn epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.0)
    }

    pub fn into_inner(self) -> Option<(usize, f64, T)> {
        self.best
    }
}

pub fn write_curves_csv(curves: &[CurvePoint], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("epoch,species,split,accuracy,loss\n");
    for c in curves {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.epoch, c.species, c.split, c.accuracy, c.loss
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn labels_of(ws: &[&SampleWindow]) -> Vec<usize> {
    ws.iter().map(|w| w.label).collect()
}

/// First parameter holding a non-finite value or gradient, else "loss".
fn non_finite_path(model: &CkspModel) -> String {
    model
        .params
        .iter()
        .find(|p| !p.tensor.all_finite() || p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        .map_or_else(|| "loss".to_string(), |p| p.name.clone())
}

/// Accuracy and mean weighted focal loss of species `s` on `windows`.
fn evaluate(
    model: &CkspModel,
    s: usize,
    windows: &[&SampleWindow],
    weights: &[f64],
    gamma: f64,
    chunk: usize,
) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Ok((0.0, 0.0));
    }
    let logits = model.logits(s, windows, chunk)?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, w) in logits.iter().zip(windows) {
        if argmax(row) == w.label {
            correct += 1;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let logp = row[w.label] - lse;
        loss += weights[w.label] * (1.0 - logp.exp()).powf(gamma) * -logp;
    }
    let n = windows.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

pub fn train(
    mut model: CkspModel,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    split: &TrainSplit<'_>,
    seed: u64,
) -> Result<TrainOutcome> {
    let n_species = model.num_species();
    if split.train.len() != n_species || split.val.len() != n_species {
        return Err(Error::InvalidArgument(format!(
            "split covers {} species, model has {n_species}",
            split.train.len()
        )));
    }
    let per_species = check_batch_size(cfg.batch_size, n_species)?;
    for (s, pool) in split.train.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::EmptySpecies(s));
        }
        if let Some(w) = pool.iter().find(|w| w.label >= model.species[s].num_classes()) {
            return Err(Error::LabelOutOfRange {
                label: w.label,
                classes: model.species[s].num_classes(),
            });
        }
    }

    let all: Vec<Vec<usize>> = split.train.iter().map(|p| (0..p.len()).collect()).collect();
    let pools = if cfg.equalize_species {
        let labels: Vec<Vec<usize>> = split.train.iter().map(|p| labels_of(p)).collect();
        equalize_species(&all, &labels, derive_seed(seed, &[0xE0]))?
    } else {
        all
    };
    let smallest = pools.iter().map(Vec::len).min().unwrap_or(0);
    if smallest < 2 {
        return Err(Error::BatchTooSmall {
            species: pools.iter().position(|p| p.len() == smallest).unwrap_or(0),
            len: smallest,
        });
    }
    let batch_size = if smallest < per_species {
        log::warn!(
            "training pools hold only {smallest} windows per species; batch shrinks from {} to {}",
            cfg.batch_size,
            smallest * n_species
        );
        smallest * n_species
    } else {
        cfg.batch_size
    };

    if cfg.standardize {
        model.standardizer = Standardizer::fit(
            pools
                .iter()
                .enumerate()
                .flat_map(|(s, p)| p.iter().map(move |&i| split.train[s][i])),
        );
    }

    let weights: Vec<Vec<f64>> = pools
        .iter()
        .enumerate()
        .map(|(s, p)| {
            let mut counts = vec![0; model.species[s].num_classes()];
            for &i in p {
                counts[split.train[s][i].label] += 1;
            }
            class_balanced_weights(&counts, loss_cfg.cb_beta, loss_cfg.normalize_weights)
        })
        .collect::<Result<_>>()?;

    let check_numerics = check_numerics();
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut best = BestTracker::default();
    let mut curves = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = step_decay_lr(cfg.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_every, epoch);
        let batches = make_batches(&pools, batch_size, derive_seed(seed, &[0xBA, epoch as u64]))?;
        let mut correct = vec![0usize; n_species];
        let mut seen = vec![0usize; n_species];
        let mut loss_sum = vec![0.0; n_species];

        for (b, batch) in batches.iter().enumerate() {
            let mut inputs = Vec::with_capacity(n_species);
            let mut labels = Vec::with_capacity(n_species);
            for (s, idx) in batch.per_species.iter().enumerate() {
                let ws: Vec<&SampleWindow> = idx.iter().map(|&i| split.train[s][i]).collect();
                labels.push(labels_of(&ws));
                inputs.push(SpeciesInput {
                    species: s,
                    data: model.stack_inputs(&ws)?,
                });
            }
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &inputs, Mode::Train)?;
            let mut losses = Vec::with_capacity(n_species);
            for &(s, logits) in &fwd.logits {
                let l = cb_focal_loss(&mut tape, logits, &labels[s], &weights[s], loss_cfg.focal_gamma)?;
                loss_sum[s] += tape.value(l).data()[0] * labels[s].len() as f64;
                let k = model.species[s].num_classes();
                for (row, &y) in tape.value(logits).data().chunks_exact(k).zip(&labels[s]) {
                    correct[s] += usize::from(argmax(row) == y);
                }
                seen[s] += labels[s].len();
                losses.push((s, l));
            }
            let total = total_loss(&mut tape, &losses, n_species)?;
            let value = tape.value(total).data()[0] + l2_penalty(&model.params, cfg.weight_decay);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    path: non_finite_path(&model),
                });
            }
            tape.backward(total)?;
            model.params.zero_grad();
            for (id, g) in tape.param_grads() {
                model.params.get_mut(id).tensor.accumulate_grad(g);
            }
            if check_numerics {
                if let Some(p) = model
                    .params
                    .iter()
                    .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
                {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        path: p.name.clone(),
                    });
                }
            }
            adam.step(&mut model.params, lr, cfg.weight_decay)?;
            model.apply_stat_updates(&fwd.stat_updates);
        }

        let mut val_acc_sum = 0.0;
        for s in 0..n_species {
            let name = model.species[s].name.clone();
            let n = seen[s].max(1) as f64;
            curves.push(CurvePoint {
                epoch,
                species: name.clone(),
                split: Split::Train,
                accuracy: correct[s] as f64 / n,
                loss: loss_sum[s] / n,
            });
            let (acc, loss) = evaluate(
                &model,
                s,
                &split.val[s],
                &weights[s],
                loss_cfg.focal_gamma,
                cfg.eval_chunk,
            )?;
            val_acc_sum += acc;
            curves.push(CurvePoint {
                epoch,
                species: name,
                split: Split::Val,
                accuracy: acc,
                loss,
            });
        }
        let mean_val = val_acc_sum / n_species as f64;
        let improved = best.offer(epoch, mean_val, || model.clone());
        log::info!(
            "epoch {epoch}: lr {lr:.2e}, mean val accuracy {mean_val:.4}{}",
            if improved { " (best)" } else { "" }
        );
    }

    let steps = adam.steps();
    match best.into_inner() {
        Some((best_epoch, best_val_accuracy, model)) => Ok(TrainOutcome {
            model,
            best_epoch,
            best_val_accuracy,
            curves,
            steps,
        }),
        None => Ok(TrainOutcome {
            model,
            best_epoch: 0,
            best_val_accuracy: 0.0,
            curves,
            steps,
        }),
    }
}

//! Class-balanced focal loss and the species-averaged objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Focusing exponent; 0 turns the focal term off.
    pub focal_gamma: f64,
    /// Effective-number parameter in `[0, 1)`; 0 gives uniform weights.
    pub cb_beta: f64,
    /// Rescale each species' weights to sum to its class count.
    pub normalize_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            cb_beta: 0.999,
            normalize_weights: true,
        }
    }
}

/// Effective-number class weights `(1 - beta) / (1 - beta^n_c)`.
///
/// Classes absent from the training data (`n_c = 0`) are weighted as if
/// they had one sample; they never contribute to the loss anyway.
pub fn class_balanced_weights(counts: &[usize], beta: f64, normalize: bool) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("cb_beta {beta} must lie in [0, 1)")));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            let n = n.max(1) as f64;
            if beta == 0.0 {
                1.0
            } else {
                (1.0 - beta) / (1.0 - beta.powf(n))
            }
        })
        .collect();
    if !normalize || raw.is_empty() {
        return Ok(raw);
    }
    let sum: f64 = raw.iter().sum();
    let k = raw.len() as f64;
    Ok(raw.into_iter().map(|w| w * k / sum).collect())
}

/// Mean over rows of `w_y (1 - p_y)^gamma (-log p_y)` with `p` the softmax
/// of `logits` (`[b, k]`).
pub fn cb_focal_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    class_weights: &[f64],
    focal_gamma: f64,
) -> Result<Var> {
    let logp = tape.log_softmax(logits)?;
    tape.focal_nll(logp, labels, class_weights, focal_gamma)
}

/// Average of one loss per species; every species in `0..num_species` must
/// appear exactly once.
pub fn total_loss(tape: &mut Tape, losses: &[(usize, Var)], num_species: usize) -> Result<Var> {
    let mut seen = vec![false; num_species];
    for &(s, _) in losses {
        match seen.get_mut(s) {
            Some(flag) if !*flag => *flag = true,
            Some(_) => return Err(Error::InvalidArgument(format!("duplicate loss for species {s}"))),
            None => return Err(Error::UnknownSpecies(s)),
        }
    }
    if let Some(missing) = seen.iter().position(|f| !f) {
        return Err(Error::MissingSpeciesLoss(missing));
    }
    let vars: Vec<Var> = losses.iter().map(|&(_, v)| v).collect();
    let sum = tape.add_n(&vars)?;
    Ok(tape.scale(sum, 1.0 / num_species as f64))
}

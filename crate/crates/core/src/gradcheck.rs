//! Central finite-difference checks of tape gradients.

use rand::Rng;

use crate::dataset::SpeciesInfo;
use crate::error::Result;
use crate::model::{ArchConfig, CkspModel, Mode, ParamStore, SpeciesInput};
use crate::rng::seeded;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{cb_focal_loss, total_loss};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; central differences cannot resolve relative error below it.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat indices whose relative error exceeds the tolerance.
    pub failing: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Central differences of a scalar function at `x`.
pub fn finite_difference<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe)?;
        probe[i] = orig - step;
        let lo = f(&probe)?;
        probe[i] = orig;
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel_error = 0.0f64;
    let mut failing = Vec::new();
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if !(e <= tol) {
            failing.push(i);
        }
        max_rel_error = max_rel_error.max(if e.is_nan() { f64::INFINITY } else { e });
    }
    GradCheckReport {
        max_rel_error,
        failing,
        analytic,
        numeric,
    }
}

/// Checks the tape gradient of a scalar function `f` at `point`.
///
/// `f` receives a fresh tape and the recorded input and must return a
/// scalar output on that tape.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(&point.clone().with_grad());
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let shape = point.shape().to_vec();
    let numeric = finite_difference(
        |flat| {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::new(&shape, flat.to_vec())?);
            let y = f(&mut tape, x)?;
            Ok(tape.value(y).data()[0])
        },
        point.data(),
        step,
    )?;
    Ok(compare(analytic, numeric, tol))
}

/// Checks the gradient of a scalar built from `store` with respect to every
/// parameter entry, flattened in store order.
///
/// `f` records the scalar on a fresh tape, reading parameters through
/// `Tape::param` so their gradients are collected.
pub fn param_grad_check<F>(store: &mut ParamStore, f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    tape.backward(y)?;
    let offsets: Vec<usize> = store
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.tensor.numel();
            Some(o)
        })
        .collect();
    let mut analytic = vec![0.0; store.total()];
    for (id, g) in tape.param_grads() {
        for (a, v) in analytic[offsets[id]..].iter_mut().zip(g) {
            *a += v;
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    for id in 0..store.len() {
        for j in 0..store.get(id).tensor.numel() {
            let orig = store.get(id).tensor.data()[j];
            let eval = |v: f64, store: &mut ParamStore| -> Result<f64> {
                store.get_mut(id).tensor.data_mut()[j] = v;
                let mut tape = Tape::new();
                let y = f(&mut tape, store)?;
                Ok(tape.value(y).data()[0])
            };
            let hi = eval(orig + step, store)?;
            let lo = eval(orig - step, store)?;
            store.get_mut(id).tensor.data_mut()[j] = orig;
            numeric.push((hi - lo) / (2.0 * step));
        }
    }
    Ok(compare(analytic, numeric, tol))
}

/// Result of one named check in [`suite`].
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Contracts `v` with a fixed random tensor so every entry gets its own
/// weight in the scalar.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let r = tape.constant(uniform(&shape, seed));
    let m = tape.mul(v, r)?;
    Ok(tape.sum(m))
}

fn op_check<F>(name: &str, shape: &[usize], seed: u64, step: f64, tol: f64, f: F) -> Result<SuiteEntry>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check(
        |t, x| {
            let y = f(t, x)?;
            project(t, y, 999)
        },
        &uniform(shape, seed),
        step,
        tol,
    )?;
    Ok(SuiteEntry {
        name: name.into(),
        report,
    })
}

/// Finite-difference checks of every tape operator plus the full model and
/// species-averaged loss on a mixed batch of two windows per species.
/// Inputs and parameters are uniform in [-1, 1].
pub fn suite(step: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let w = uniform(&[4, 3, 1, 3], 1);
    let b = uniform(&[4], 2);
    let other = uniform(&[2, 5], 8);
    let (fw, fb) = (uniform(&[2, 4], 11), uniform(&[2], 12));
    let (g, be) = (uniform(&[3], 15), uniform(&[3], 16));
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 0.9]);
    let tail = uniform(&[2, 3, 1, 4], 19);
    let mut out = vec![
        op_check("conv1x3", &[2, 3, 1, 9], 3, step, tol, |t, x| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            t.conv1x3(x, w, Some(b), 1, 1)
        })?,
        op_check("conv1x3.weight", &[4, 3, 1, 3], 1, step, tol, |t, w| {
            let x = t.constant(uniform(&[2, 3, 1, 9], 3));
            t.conv1x3(x, w, None, 2, 0)
        })?,
        op_check("matmul", &[3, 4], 5, step, tol, |t, a| {
            let b = t.constant(uniform(&[4, 2], 6));
            t.matmul(a, b)
        })?,
        op_check("reshape", &[2, 5], 7, step, tol, |t, x| t.reshape(x, &[5, 2]))?,
        op_check("add", &[2, 5], 7, step, tol, |t, x| {
            let o = t.constant(other.clone());
            t.add(x, o)
        })?,
        op_check("add_n", &[2, 5], 7, step, tol, |t, x| {
            let o = t.constant(other.clone());
            t.add_n(&[x, o, x])
        })?,
        op_check("mul", &[2, 5], 7, step, tol, |t, x| t.mul(x, x))?,
        op_check("scale", &[2, 5], 7, step, tol, |t, x| Ok(t.scale(x, -1.7)))?,
        op_check("relu", &[2, 5], 7, step, tol, |t, x| Ok(t.relu(x)))?,
        op_check("tanh", &[2, 5], 7, step, tol, |t, x| Ok(t.tanh(x)))?,
        op_check("maxpool1d", &[2, 3, 1, 9], 9, step, tol, |t, x| t.maxpool1d(x, 3, 2))?,
        op_check("global_avg_pool", &[2, 3, 1, 8], 9, step, tol, |t, x| {
            t.global_avg_pool(x)
        })?,
        op_check("fully_connected", &[3, 4], 10, step, tol, |t, x| {
            let (w, b) = (t.constant(fw.clone()), t.constant(fb.clone()));
            t.fully_connected(x, w, b)
        })?,
        op_check("log_softmax", &[3, 5], 13, step, tol, |t, x| t.log_softmax(x))?,
        op_check("focal_nll", &[3, 5], 14, step, tol, |t, x| {
            let lp = t.log_softmax(x)?;
            t.focal_nll(lp, &[1, 4, 0], &[0.7, 1.2, 1.0, 0.9, 1.3], 2.0)
        })?,
        op_check("batch_norm_train", &[4, 3, 1, 5], 17, step, tol, |t, x| {
            let (g, b) = (t.constant(g.clone()), t.constant(be.clone()));
            Ok(t.batch_norm_train(x, g, b, 1e-5)?.0)
        })?,
        op_check("batch_norm_train.gamma", &[3], 15, step, tol, |t, g| {
            let (x, b) = (t.constant(uniform(&[4, 3, 1, 5], 17)), t.constant(be.clone()));
            Ok(t.batch_norm_train(x, g, b, 1e-5)?.0)
        })?,
        op_check("batch_norm_frozen", &[4, 3, 1, 5], 17, step, tol, |t, x| {
            let (g, b) = (t.constant(g.clone()), t.constant(be.clone()));
            t.batch_norm_frozen(x, g, b, &mean, &var, 1e-5)
        })?,
        op_check("slice_concat", &[5, 3, 1, 4], 18, step, tol, |t, x| {
            let o = t.constant(tail.clone());
            let head = t.slice_batch(x, 1, 2)?;
            t.concat_batch(&[o, x, head])
        })?,
        op_check("mean", &[2, 3], 9, step, tol, |t, x| Ok(t.mean(x)))?,
    ];
    out.push(end_to_end(step, tol)?);
    Ok(out)
}

fn end_to_end(step: f64, tol: f64) -> Result<SuiteEntry> {
    let arch = ArchConfig {
        input_len: 16,
        initial_channels: 3,
        block_channels: vec![4, 4],
        fc_hidden: 5,
        rank: 2,
        ..ArchConfig::default()
    };
    let species = [SpeciesInfo::horse(), SpeciesInfo::sheep(), SpeciesInfo::cattle()];
    let mut model = CkspModel::new(&arch, &species, 3)?;
    let mut rng = seeded(11);
    for p in model.params.iter_mut() {
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let inputs: Vec<SpeciesInput> = (0..3)
        .map(|s| SpeciesInput {
            species: s,
            data: uniform(&[2, 3, 1, arch.input_len], 100 + s as u64),
        })
        .collect();
    let labels = [vec![0, 4], vec![2, 1], vec![3, 0]];
    let weights = [
        vec![0.5, 1.5, 1.0, 0.8, 1.2],
        vec![1.0, 0.7, 1.3],
        vec![1.1, 0.9, 1.0, 1.4, 0.6],
    ];
    let template = model.clone();
    let report = param_grad_check(
        &mut model.params,
        |tape, store| {
            let mut m = template.clone();
            m.params = store.clone();
            let fwd = m.forward(tape, &inputs, Mode::Train)?;
            let mut losses = Vec::new();
            for &(s, logits) in &fwd.logits {
                losses.push((s, cb_focal_loss(tape, logits, &labels[s], &weights[s], 2.0)?));
            }
            total_loss(tape, &losses, 3)
        },
        step,
        tol,
    )?;
    Ok(SuiteEntry {
        name: "cksp_end_to_end".into(),
        report,
    })
}

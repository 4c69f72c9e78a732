//! End-to-end acceptance suite. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout so the lines show up even when output is captured.

mod common;

use std::io::Write;
use std::time::Instant;

use cksp_core::eval::stratified_folds;
use cksp_core::experiment::{ablation_grid, prepare_folds, run_cv, CvReport, ExperimentConfig, ModelKind};
use cksp_core::gradcheck::suite;
use cksp_core::model::{sbn_forward, ArchConfig, BranchKind, CkspModel, Mode, NormLayer, ParamStore, SpeciesInput};
use cksp_core::preprocess::{resample_to_50, window_len};
use cksp_core::rng::seeded;
use cksp_core::synthetic::{generate_dataset, SyntheticSpec};
use cksp_core::train::{cb_focal_loss, total_loss, Adam, AdamConfig};
use cksp_core::{Dataset, Tape, Tensor};
use nalgebra::DMatrix;
use rand::Rng;

use common::*;

/// Collects failed checks for one criterion and prints the verdict line.
struct Verdict {
    criterion: u32,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn new(criterion: u32) -> Self {
        Verdict {
            criterion,
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    fn finish(self) {
        let pass = self.failures.is_empty();
        let detail = if pass {
            self.notes.join("; ")
        } else {
            self.failures.join("; ")
        };
        let line = format!(
            "criterion {}: {} {}\n",
            self.criterion,
            if pass { "PASS" } else { "FAIL" },
            detail
        );
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        assert!(pass, "{}", line.trim_end());
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn features(model: &CkspModel, inputs: &[SpeciesInput], mode: Mode) -> Vec<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, inputs, mode).unwrap();
    tape.value(out.features).data().to_vec()
}

#[test]
fn criterion_01_gradient_fidelity() {
    let mut v = Verdict::new(1);
    let start = Instant::now();
    let entries = suite(1e-5, 1e-4).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    for e in &entries {
        v.check(e.report.passed(), || {
            format!("{} max rel err {:.2e}", e.name, e.report.max_rel_error)
        });
    }
    v.check(entries.iter().any(|e| e.name == "cksp_end_to_end"), || {
        "end-to-end check missing".into()
    });
    v.check(elapsed < 60.0, || format!("took {elapsed:.1}s"));
    v.note(format!(
        "{} checks, worst rel err {worst:.2e}, {elapsed:.1}s",
        entries.len()
    ));
    v.finish();
}

#[test]
fn criterion_02_zero_init_equivalence() {
    let mut v = Verdict::new(2);
    let arch = ArchConfig {
        input_len: 50,
        ..ArchConfig::default()
    };
    let species = three_species();
    let cksp = CkspModel::new(&arch, &species, 9).unwrap();
    let shared = CkspModel::new(&arch.ablation(false, true, BranchKind::LowRank), &species, 9).unwrap();
    let data = uniform(&[6, 3, 1, arch.input_len], 21);
    let input = |s| {
        [SpeciesInput {
            species: s,
            data: data.clone(),
        }]
    };
    let mut worst = 0.0f64;
    for mode in [Mode::Train, Mode::Eval] {
        let reference = features(&shared, &input(0), mode);
        for s in 0..3 {
            let d = max_abs_diff(&features(&cksp, &input(s), mode), &reference);
            worst = worst.max(d);
            v.check(d <= 1e-12, || format!("species {s} {mode:?}: diff {d:.2e}"));
        }
    }
    v.note(format!("max abs diff {worst:.1e}"));
    v.finish();
}

/// One Adam step on a batch of species `s`; returns (param id, gradient)
/// pairs that were produced.
fn species_step(model: &mut CkspModel, adam: &mut Adam, s: usize, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let k = model.species[s].num_classes();
    let inputs = [SpeciesInput {
        species: s,
        data: uniform(&[4, 3, 1, model.arch.input_len], seed),
    }];
    let labels: Vec<usize> = (0..4).map(|i| i % k).collect();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &inputs, Mode::Train).unwrap();
    let loss = cb_focal_loss(&mut tape, out.logits[0].1, &labels, &vec![1.0; k], 2.0).unwrap();
    tape.backward(loss).unwrap();
    model.params.zero_grad();
    let grads: Vec<(usize, Vec<f64>)> = tape.param_grads().map(|(id, g)| (id, g.to_vec())).collect();
    for (id, g) in &grads {
        model.params.get_mut(*id).tensor.accumulate_grad(g);
    }
    adam.step(&mut model.params, 1e-3, 0.0).unwrap();
    model.apply_stat_updates(&out.stat_updates);
    grads
}

#[test]
fn criterion_03_species_isolation() {
    let mut v = Verdict::new(3);
    let arch = tiny_arch();
    let mut model = CkspModel::new(&arch, &three_species(), 2).unwrap();
    randomize(&mut model, 3);
    let before = model.clone();
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    for i in 0..100 {
        for (id, g) in species_step(&mut model, &mut adam, 0, 40 + i) {
            let p = model.params.get(id);
            if p.species.is_some_and(|s| s != 0) {
                v.check(g.iter().all(|&x| x == 0.0), || {
                    format!("step {i}: {} got a gradient", p.name)
                });
            }
        }
    }
    for (p, q) in model.params.iter().zip(before.params.iter()) {
        if p.species.is_some_and(|s| s != 0) {
            v.check(p.tensor.data() == q.tensor.data(), || format!("{} moved", p.name));
        }
    }
    let mut layers = 0;
    for (layer, old) in model.norms.iter().zip(&before.norms) {
        if layer.per_species {
            layers += 1;
            v.check(layer.slots[0].running != old.slots[0].running, || {
                format!("{} species 0 stats idle", layer.name)
            });
            for s in 1..3 {
                v.check(layer.slots[s].running == old.slots[s].running, || {
                    format!("{} species {s} stats changed", layer.name)
                });
            }
        }
    }
    v.note(format!("100 steps, {layers} SBN layers, other species bit-unchanged"));
    v.finish();
}

#[test]
fn criterion_04_low_rank_structure() {
    let mut v = Verdict::new(4);
    for &(c, r) in &[(16usize, 2usize), (32, 4), (64, 8), (64, 12), (64, 16)] {
        let arch = ArchConfig {
            initial_channels: c,
            block_channels: vec![c],
            fc_hidden: 4,
            rank: r,
            ..ArchConfig::default()
        };
        let mut model = CkspModel::new(&arch, &three_species(), 5).unwrap();
        randomize(&mut model, 6);
        let k = model.branch_kernel(1, 0).unwrap();
        let m = DMatrix::from_row_slice(3 * c, c, k.data());
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        v.check(sv[r..].iter().all(|&x| x < 1e-10), || {
            format!("c={c} r={r}: sigma_r+1 = {:.2e}", sv[r])
        });
    }
    // Branch parameter totals summed over the whole architecture.
    for r in [2, 4, 8, 12, 16] {
        let arch = ArchConfig {
            rank: r,
            ..ArchConfig::default()
        };
        let report = CkspModel::new(&arch, &three_species(), 0).unwrap().param_report();
        v.check(report.lowrank_smaller(), || {
            format!(
                "r={r}: low-rank {} vs full-rank {}",
                report.lowrank_branch_total, report.fullrank_branch_total
            )
        });
    }
    let (lr, fr) = {
        let arch = ArchConfig {
            rank: 12,
            ..ArchConfig::default()
        };
        let p = CkspModel::new(&arch, &three_species(), 0).unwrap().param_report();
        (p.lowrank_branch_total, p.fullrank_branch_total)
    };
    v.note(format!(
        "rank <= r up to 64 channels; branch totals smaller at every r (r=12: {lr} vs {fr})"
    ));
    v.finish();
}

#[test]
fn criterion_05_sbn_normalization() {
    let mut v = Verdict::new(5);
    let eps = 1e-5;
    let mut rng = seeded(55);
    let mut worst = (0.0f64, 0.0f64);
    for trial in 0..200 {
        let (b, c, w, s) = (
            rng.random_range(8..24),
            rng.random_range(1..6),
            rng.random_range(1..8),
            rng.random_range(0..3),
        );
        let mut store = ParamStore::default();
        let mut layer = NormLayer::new(&mut store, "n", c, Some(3), eps, 0.1, 0);
        let x = uniform(&[b, c, 1, w], 1000 + trial);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = sbn_forward(&mut tape, &store, &mut layer, xv, s, Mode::Train).unwrap();
        let y = tape.value(y).data().to_vec();
        let n = (b * w) as f64;
        for ch in 0..c {
            let pick = |d: &[f64]| -> Vec<f64> { (0..b).flat_map(|bi| d[(bi * c + ch) * w..][..w].to_vec()).collect() };
            let (xs, ys) = (pick(x.data()), pick(&y));
            let xm = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|t| (t - xm).powi(2)).sum::<f64>() / n;
            let ym = ys.iter().sum::<f64>() / n;
            let yv = ys.iter().map(|t| (t - ym).powi(2)).sum::<f64>() / n;
            let dv = (yv - var / (var + eps)).abs();
            worst = (worst.0.max(ym.abs()), worst.1.max(dv));
            v.check(ym.abs() <= 1e-9 && dv <= 1e-9, || {
                format!("trial {trial} channel {ch}: |mu| {:.1e}, var err {dv:.1e}", ym.abs())
            });
        }
    }
    v.note(format!(
        "200 batches, max |mu| {:.1e}, max var err {:.1e}",
        worst.0, worst.1
    ));
    v.finish();
}

fn brute_cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(k).zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / z).ln();
    }
    total / labels.len() as f64
}

#[test]
fn criterion_06_loss_oracles() {
    let mut v = Verdict::new(6);
    let mut rng = seeded(66);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (k, b) = (rng.random_range(2..8), rng.random_range(1..12));
        let logits: Vec<f64> = (0..b * k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[b, k], logits.clone()).unwrap());
        let l = cb_focal_loss(&mut tape, x, &labels, &vec![1.0; k], 0.0).unwrap();
        let d = (tape.value(l).data()[0] - brute_cross_entropy(&logits, k, &labels)).abs();
        worst = worst.max(d);
        v.check(d <= 1e-10, || format!("instance {i}: diff {d:.2e}"));
    }

    // Gradient of each species' logits under the mean over species is the
    // single-species gradient divided by S.
    let logits = [uniform(&[3, 5], 1), uniform(&[2, 3], 2), uniform(&[4, 5], 3)];
    let labels = [vec![0, 4, 1], vec![2, 0], vec![4, 3, 1, 0]];
    let grads = |members: &[usize]| -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let mut leaves = Vec::new();
        let mut losses = Vec::new();
        for (slot, &s) in members.iter().enumerate() {
            let x = tape.leaf(&logits[s].clone().with_grad());
            let k = logits[s].shape()[1];
            leaves.push(x);
            losses.push((
                slot,
                cb_focal_loss(&mut tape, x, &labels[s], &vec![1.0; k], 2.0).unwrap(),
            ));
        }
        let total = total_loss(&mut tape, &losses, members.len()).unwrap();
        tape.backward(total).unwrap();
        leaves.iter().map(|&x| tape.grad(x).unwrap().to_vec()).collect()
    };
    let joint = grads(&[0, 1, 2]);
    let mut worst_lin = 0.0f64;
    for s in 0..3 {
        let alone = &grads(&[s])[0];
        let d = alone
            .iter()
            .zip(&joint[s])
            .map(|(a, j)| (a / 3.0 - j).abs())
            .fold(0.0, f64::max);
        worst_lin = worst_lin.max(d);
        v.check(d <= 1e-12, || format!("species {s}: 1/S scaling off by {d:.2e}"));
    }
    v.note(format!(
        "CE diff {worst:.1e} over 1000 instances, 1/S scaling diff {worst_lin:.1e}"
    ));
    v.finish();
}

#[test]
fn criterion_07_preprocessing() {
    let mut v = Verdict::new(7);
    let affine = |n: usize| {
        let data = (0..3)
            .flat_map(|c| (0..n).map(move |i| 0.3 * c as f64 - 1.0 + (0.5 - 0.2 * c as f64) * i as f64))
            .collect();
        Tensor::new(&[1, 3, n], data).unwrap()
    };
    let mut worst = 0.0f64;
    for n in 2..=400 {
        let x = affine(n);
        let y = resample_to_50(&x).unwrap();
        for c in 0..3 {
            for j in 0..50 {
                let t = j as f64 * (n - 1) as f64 / 49.0;
                let want = 0.3 * c as f64 - 1.0 + (0.5 - 0.2 * c as f64) * t;
                worst = worst.max((y.data()[c * 50 + j] - want).abs());
            }
            v.check(
                y.data()[c * 50] == x.data()[c * n] && y.data()[c * 50 + 49] == x.data()[c * n + n - 1],
                || format!("n={n}: endpoints moved"),
            );
        }
    }
    v.check(worst <= 1e-12, || format!("affine error {worst:.2e}"));
    let w50 = uniform(&[1, 3, 50], 7);
    v.check(resample_to_50(&w50).unwrap() == w50, || "not identity at 50".into());
    for (rate, n) in [(100.0, 200), (12.5, 25), (25.0, 50)] {
        v.check(window_len(rate, 2.0) == n, || format!("{rate} Hz window is not {n}"));
        v.check(resample_to_50(&affine(n)).unwrap().shape() == [1, 3, 50], || {
            format!("{n} does not map to 50")
        });
    }
    v.note(format!("affine error {worst:.1e}; 200/25/50 -> 50"));
    v.finish();
}

fn tiny_experiment(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.folds = 5;
    cfg.rotations = (0..5).collect();
    cfg.arch = ArchConfig {
        initial_channels: 4,
        block_channels: vec![6, 8],
        fc_hidden: 6,
        rank: 2,
        ..ArchConfig::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 6;
    cfg
}

fn param_bits(models: &[CkspModel]) -> Vec<u64> {
    models
        .iter()
        .flat_map(|m| {
            m.params
                .iter()
                .flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn criterion_08_cv_machinery() {
    let mut v = Verdict::new(8);
    let mut rng = seeded(88);
    for trial in 0..50 {
        // Every class needs at least one member per fold.
        let labels: Vec<Vec<usize>> = (0..3)
            .map(|_| {
                let mut l: Vec<usize> = (0..rng.random_range(30..120)).map(|_| rng.random_range(0..5)).collect();
                l.extend((0..5).flat_map(|c| [c; 5]));
                l
            })
            .collect();
        let plan = stratified_folds(&labels, 5, trial).unwrap();
        for (s, labs) in labels.iter().enumerate() {
            let mut all: Vec<usize> = plan.folds[s].iter().flatten().copied().collect();
            all.sort_unstable();
            v.check(all == (0..labs.len()).collect::<Vec<_>>(), || {
                format!("trial {trial} species {s}: not a partition")
            });
            for c in 0..5 {
                let counts: Vec<usize> = plan.folds[s]
                    .iter()
                    .map(|f| f.iter().filter(|&&i| labs[i] == c).count())
                    .collect();
                let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
                v.check(spread <= 1, || {
                    format!("trial {trial} species {s} class {c}: {counts:?}")
                });
            }
        }
    }

    let spec = SyntheticSpec {
        windows_per_class: 10,
        ..SyntheticSpec::default()
    };
    let (ds, _) = generate_dataset(&spec).unwrap();
    let cfg = tiny_experiment(3);
    let folds = prepare_folds(&ds, 5, cfg.seed).unwrap();
    for s in 0..ds.num_species() {
        let mut tested: Vec<usize> = (0..5).flat_map(|r| folds.plan.gather(s, &[r])).collect();
        tested.sort_unstable();
        v.check(tested == (0..folds.indices[s].len()).collect::<Vec<_>>(), || {
            format!("species {s}: test folds do not cover every window once")
        });
    }
    let run = || {
        let mut bits = Vec::new();
        let report = run_cv(&ds, &cfg, ModelKind::Cksp, |_, models| {
            bits.extend(param_bits(models));
            Ok(())
        })
        .unwrap();
        (report, bits)
    };
    let (a, bits_a) = run();
    v.check(a.rotations.len() == 5, || format!("{} rotations", a.rotations.len()));
    for (s, info) in ds.species.iter().enumerate() {
        let total: u64 = a
            .rotations
            .iter()
            .flat_map(|r| r.species.iter().filter(|x| x.species == info.name))
            .map(|x| x.metrics.confusion.total())
            .sum();
        let count = ds.windows.iter().filter(|w| w.species == s).count() as u64;
        v.check(total == count, || {
            format!("{}: {total} predictions for {count} windows", info.name)
        });
    }
    let (b, bits_b) = run();
    v.check(a == b, || "rerun metrics differ".into());
    v.check(bits_a == bits_b, || "rerun weights differ".into());
    v.note(format!(
        "{} windows each tested once over 5 rotations; rerun bit-identical ({} weights)",
        ds.windows.len(),
        bits_a.len()
    ));
    v.finish();
}

/// Desk-scale setup shared by the two experiment criteria.
fn desk_config(seed: u64, fraction: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.rotations = vec![0];
    cfg.data_fraction = fraction;
    cfg.arch = ArchConfig {
        initial_channels: 12,
        block_channels: vec![16, 24, 32],
        fc_hidden: 32,
        rank: 4,
        ..ArchConfig::default()
    };
    cfg.train.epochs = if fraction < 1.0 { 200 } else { 40 };
    cfg.train.batch_size = 30;
    cfg.train.learning_rate = 1e-3;
    cfg.train.lr_decay_every = 1000;
    cfg
}

const SEEDS: u64 = 5;

fn desk_dataset() -> Dataset {
    generate_dataset(&SyntheticSpec::default()).unwrap().0
}

/// Mean over seeds of one metric per species, in dataset species order.
fn seed_means(ds: &Dataset, metric: &str, mut run: impl FnMut(u64) -> CvReport) -> Vec<f64> {
    let mut sums = vec![0.0; ds.num_species()];
    for seed in 0..SEEDS {
        let report = run(seed);
        for (s, info) in ds.species.iter().enumerate() {
            sums[s] += report.get(&info.name, metric).unwrap().mean;
        }
    }
    sums.iter().map(|v| v / SEEDS as f64).collect()
}

fn fmt_by_species(ds: &Dataset, values: &[f64]) -> String {
    ds.species
        .iter()
        .zip(values)
        .map(|(s, v)| format!("{} {:.3}", s.name, v))
        .collect::<Vec<_>>()
        .join(" ")
}

#[test]
fn criterion_09_knowledge_sharing() {
    let mut v = Verdict::new(9);
    let ds = desk_dataset();
    let mut notes = Vec::new();
    for fraction in [1.0, 0.1] {
        let mean_f1 = |kind| {
            seed_means(&ds, "f1", |seed| {
                run_cv(&ds, &desk_config(seed, fraction), kind, |_, _| Ok(())).unwrap()
            })
        };
        let cksp = mean_f1(ModelKind::Cksp);
        let single = mean_f1(ModelKind::SingleNet);
        if fraction == 1.0 {
            for (s, info) in ds.species.iter().enumerate() {
                v.check(cksp[s] >= single[s] - 0.005, || {
                    format!("(a) {}: CKSP {:.4} vs Single-Net {:.4}", info.name, cksp[s], single[s])
                });
            }
        } else {
            let wins = (0..ds.num_species()).filter(|&s| cksp[s] > single[s]).count();
            v.check(wins >= 2, || {
                format!(
                    "(b) CKSP ahead on {wins} of 3: CKSP [{}] Single-Net [{}]",
                    fmt_by_species(&ds, &cksp),
                    fmt_by_species(&ds, &single)
                )
            });
        }
        notes.push(format!(
            "fraction {fraction}: CKSP F1 [{}] Single-Net F1 [{}]",
            fmt_by_species(&ds, &cksp),
            fmt_by_species(&ds, &single)
        ));
    }
    for n in notes {
        v.note(n);
    }
    v.finish();
}

#[test]
fn criterion_10_ablation() {
    let mut v = Verdict::new(10);
    let ds = desk_dataset();
    let base = desk_config(0, 1.0);
    let mut rows = Vec::new();
    for (label, arch) in ablation_grid(&base.arch) {
        let acc = seed_means(&ds, "accuracy", |seed| {
            let mut cfg = desk_config(seed, 1.0);
            cfg.arch = arch.clone();
            run_cv(&ds, &cfg, ModelKind::Cksp, |_, _| Ok(())).unwrap()
        });
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        rows.push((label, mean, acc));
    }
    let full = rows[0].1;
    for (label, mean, _) in &rows[1..] {
        v.check(full >= *mean, || {
            format!("{}: {full:.4} below {label}: {mean:.4}", rows[0].0)
        });
    }
    for (label, mean, acc) in &rows {
        v.note(format!("{label} mean acc {mean:.4} [{}]", fmt_by_species(&ds, acc)));
    }
    v.finish();
}

/// Needs prepared archives of the three public datasets, comma-separated in
/// `CKSP_PUBLIC_DATA`. Hours of CPU time.
#[test]
#[ignore]
fn criterion_11_public_reproduction() {
    let mut v = Verdict::new(11);
    let Ok(paths) = std::env::var("CKSP_PUBLIC_DATA") else {
        v.check(false, || "CKSP_PUBLIC_DATA not set".into());
        return v.finish();
    };
    let mut ds: Option<Dataset> = None;
    for p in paths.split(',') {
        let part = cksp_core::archive::read(std::path::Path::new(p)).unwrap();
        match &mut ds {
            Some(d) => d.merge(part).unwrap(),
            None => ds = Some(part),
        }
    }
    let ds = ds.unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 100;
    let report = run_cv(&ds, &cfg, ModelKind::Cksp, |_, _| Ok(())).unwrap();
    for (name, target) in [("horse", 0.9644), ("sheep", 0.9289), ("cattle", 0.9001)] {
        let acc = report.get(name, "accuracy").map_or(f64::NAN, |m| m.mean);
        v.check((acc - target).abs() <= 0.03, || {
            format!("{name} accuracy {acc:.4} vs {target}")
        });
        v.note(format!("{name} {acc:.4}"));
    }
    let mut by_rank = Vec::new();
    for r in [2, 12] {
        let mut c = cfg.clone();
        c.arch.rank = r;
        by_rank.push(run_cv(&ds, &c, ModelKind::Cksp, |_, _| Ok(())).unwrap());
    }
    for name in ["horse", "cattle"] {
        let (r2, r12) = (
            by_rank[0].get(name, "accuracy").unwrap().mean,
            by_rank[1].get(name, "accuracy").unwrap().mean,
        );
        v.check(r12 > r2, || format!("{name}: r=12 {r12:.4} not above r=2 {r2:.4}"));
    }
    v.finish();
}

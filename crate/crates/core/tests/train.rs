mod common;

use cksp_core::model::{ArchConfig, CkspModel};
use cksp_core::rng::seeded;
use cksp_core::synthetic::{generate_dataset, SyntheticSpec};
use cksp_core::train::{
    cb_focal_loss, equalize_species, make_batches, total_loss, train, BestTracker, LossConfig, Split, TrainConfig,
    TrainSplit,
};
use cksp_core::{SampleWindow, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Plain cross-entropy, log-sum-exp with max shift, averaged over rows.
fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

#[test]
fn unfocused_unweighted_loss_is_cross_entropy() {
    let mut rng = seeded(77);
    for _ in 0..1000 {
        let k = rng.random_range(2..8);
        let b = rng.random_range(1..10);
        let logits: Vec<f64> = (0..b * k).map(|_| rng.random_range(-6.0..6.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[b, k], logits.clone()).unwrap());
        let l = cb_focal_loss(&mut tape, x, &labels, &vec![1.0; k], 0.0).unwrap();
        let got = tape.value(l).data()[0];
        assert!((got - cross_entropy(&logits, k, &labels)).abs() <= 1e-10);
    }
}

/// Gradient of one species' logits under the averaged objective.
fn species_grad(n_species: usize, logits: &[Tensor], labels: &[Vec<usize>], s: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut losses = Vec::new();
    let mut leaves = Vec::new();
    for i in 0..n_species {
        let x = tape.leaf(&logits[i].clone().with_grad());
        let k = logits[i].shape()[1];
        leaves.push(x);
        losses.push((i, cb_focal_loss(&mut tape, x, &labels[i], &vec![1.0; k], 2.0).unwrap()));
    }
    let total = total_loss(&mut tape, &losses, n_species).unwrap();
    tape.backward(total).unwrap();
    tape.grad(leaves[s]).unwrap().to_vec()
}

#[test]
fn averaged_objective_scales_species_gradients_by_one_over_s() {
    let logits = vec![
        common::uniform(&[3, 4], 1),
        common::uniform(&[2, 3], 2),
        common::uniform(&[4, 5], 3),
    ];
    let labels = vec![vec![0, 3, 1], vec![2, 0], vec![4, 4, 1, 0]];
    for s in 0..3 {
        let alone = species_grad(1, &logits[s..=s], &labels[s..=s], 0);
        let joint = species_grad(3, &logits, &labels, s);
        for (a, j) in alone.iter().zip(&joint) {
            assert!((a / 3.0 - j).abs() <= 1e-12);
        }
    }
}

#[test]
fn total_loss_needs_every_species() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1.0));
    assert!(total_loss(&mut tape, &[(0, x), (2, x)], 3).is_err());
    assert!(total_loss(&mut tape, &[(0, x), (0, x)], 1).is_err());
}

proptest! {
    #[test]
    fn batches_are_species_balanced(
        sizes in prop::collection::vec(3usize..60, 1..4),
        per in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut next = 0;
        let pools: Vec<Vec<usize>> = sizes.iter().map(|&n| { let p = (next..next + n).collect(); next += n; p }).collect();
        let batches = make_batches(&pools, per * pools.len(), seed).unwrap();
        prop_assert_eq!(batches.len(), sizes.iter().min().unwrap() / per);
        for (s, pool) in pools.iter().enumerate() {
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.per_species[s].clone()).collect();
            prop_assert!(batches.iter().all(|b| b.per_species[s].len() == per));
            prop_assert!(seen.iter().all(|i| pool.contains(i)));
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), batches.len() * per);
        }
        prop_assert_eq!(make_batches(&pools, per * pools.len(), seed).unwrap(), batches);
    }

    #[test]
    fn equalized_pools_are_stratified_subsets(
        labels in prop::collection::vec(prop::collection::vec(0usize..3, 5..50), 2..4),
        seed in any::<u64>(),
    ) {
        let pools: Vec<Vec<usize>> = labels.iter().map(|l| (0..l.len()).map(|i| i * 10).collect()).collect();
        let out = equalize_species(&pools, &labels, seed).unwrap();
        let target = labels.iter().map(Vec::len).min().unwrap();
        for (s, kept) in out.iter().enumerate() {
            prop_assert_eq!(kept.len(), target);
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            for c in 0..3 {
                let have = labels[s].iter().filter(|&&l| l == c).count() as f64;
                let got = kept.iter().filter(|&&i| labels[s][i / 10] == c).count() as f64;
                let want = have * target as f64 / labels[s].len() as f64;
                prop_assert!((got - want).abs() < 1.0 + 1e-9, "species {} class {}: {} vs {}", s, c, got, want);
            }
        }
    }
}

fn small_arch() -> ArchConfig {
    ArchConfig {
        initial_channels: 4,
        block_channels: vec![6, 8],
        fc_hidden: 6,
        rank: 2,
        ..ArchConfig::default()
    }
}

fn split_by_species(windows: &[SampleWindow], species: usize) -> Vec<Vec<&SampleWindow>> {
    (0..species)
        .map(|s| windows.iter().filter(|w| w.species == s).collect())
        .collect()
}

#[test]
fn two_epoch_smoke_run() {
    let spec = SyntheticSpec {
        windows_per_class: 5,
        ..SyntheticSpec::default()
    };
    let (ds, _) = generate_dataset(&spec).unwrap();
    assert_eq!(ds.windows.len(), 65);
    let model = CkspModel::new(&small_arch(), &ds.species, 0).unwrap();
    let pools = split_by_species(&ds.windows, 3);
    let split = TrainSplit {
        train: pools.clone(),
        val: pools,
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 6,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let out = train(model, &cfg, &LossConfig::default(), &split, 4).unwrap();
    for species in ["horse", "sheep", "cattle"] {
        for split in [Split::Train, Split::Val] {
            let n = out
                .curves
                .iter()
                .filter(|c| c.species == species && c.split == split)
                .count();
            assert_eq!(n, 2, "{species} {split}");
        }
    }
    assert!(out.best_epoch < 2);
    assert!(out.curves.iter().all(|c| c.loss.is_finite()));
    // Equalized to 15 windows per species at 2 per species per step.
    assert_eq!(out.steps, 2 * 7);

    let again = train(
        CkspModel::new(&small_arch(), &ds.species, 0).unwrap(),
        &cfg,
        &LossConfig::default(),
        &split,
        4,
    )
    .unwrap();
    assert_eq!(again.curves, out.curves);
}

#[test]
fn monotone_scores_select_last_epoch() {
    let mut tracker = BestTracker::default();
    for (epoch, score) in [0.2, 0.4, 0.5, 0.9].into_iter().enumerate() {
        assert!(tracker.offer(epoch, score, || epoch));
    }
    assert_eq!(tracker.into_inner(), Some((3, 0.9, 3)));
}

#[test]
fn non_finite_loss_names_a_parameter() {
    let spec = SyntheticSpec {
        windows_per_class: 4,
        ..SyntheticSpec::default()
    };
    let (ds, _) = generate_dataset(&spec).unwrap();
    let mut model = CkspModel::new(&small_arch(), &ds.species, 0).unwrap();
    model.params.by_name_mut("fc.weight").unwrap().tensor.data_mut()[0] = f64::NAN;
    let pools = split_by_species(&ds.windows, 3);
    let split = TrainSplit {
        train: pools.clone(),
        val: pools,
    };
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 6,
        ..TrainConfig::default()
    };
    let err = train(model, &cfg, &LossConfig::default(), &split, 0).unwrap_err();
    assert!(err.to_string().contains("fc.weight"), "{err}");
}

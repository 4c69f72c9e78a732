mod common;

use cksp_core::model::checkpoint;
use cksp_core::model::{
    check_rank, lrconv_forward, max_rank, sbn_forward, ArchConfig, BranchKind, CkspModel, Mode, NormLayer, ParamStore,
    SpconvLayer, SpeciesInput,
};
use cksp_core::train::{cb_focal_loss, Adam, AdamConfig};
use cksp_core::{Error, Tape, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;

use common::*;

fn features(model: &CkspModel, inputs: &[SpeciesInput], mode: Mode) -> Vec<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, inputs, mode).unwrap();
    tape.value(out.features).data().to_vec()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct 1x3 cross-correlation with zero padding 1, single channel.
fn conv_oracle(x: &[f64], taps: [f64; 3]) -> Vec<f64> {
    let at = |i: isize| {
        if i < 0 || i as usize >= x.len() {
            0.0
        } else {
            x[i as usize]
        }
    };
    (0..x.len() as isize)
        .map(|i| taps[0] * at(i - 1) + taps[1] * at(i) + taps[2] * at(i + 1))
        .collect()
}

#[test]
fn lrconv_single_channel_hand_example() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![3.0, 4.0, 5.0]).unwrap());
    let b = tape.constant(Tensor::new(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap());
    let a = tape.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
    let y = lrconv_forward(&mut tape, x, b, a, 1, 1).unwrap();
    let got = tape.value(y).data().to_vec();
    assert_eq!(got, conv_oracle(&[3.0, 4.0, 5.0], [2.0, 0.0, 0.0]));
    assert_eq!(got[1], 6.0);
}

#[test]
fn lowrank_branch_is_four_times_smaller_at_64_channels() {
    let mut store = ParamStore::default();
    let layer = SpconvLayer::new(&mut store, "b", 64, 64, 1, Some((BranchKind::LowRank, 12, 0.02)), 0).unwrap();
    assert_eq!(layer.branches[0].param_count(&store), 3072);
    let mut store = ParamStore::default();
    let layer = SpconvLayer::new(&mut store, "b", 64, 64, 1, Some((BranchKind::FullRank, 12, 0.02)), 0).unwrap();
    assert_eq!(layer.branches[0].param_count(&store), 12288);
}

#[test]
fn rank_bound() {
    assert_eq!(max_rank(4, 2), 4);
    assert_eq!(max_rank(16, 2), 6);
    assert!(check_rank(6, 16, 2).is_ok());
    assert!(matches!(check_rank(7, 16, 2), Err(Error::RankBound { max: 6, .. })));
    assert!(check_rank(0, 4, 4).is_err());
    let arch = ArchConfig {
        rank: 200,
        ..tiny_arch()
    };
    assert!(matches!(
        CkspModel::new(&arch, &three_species(), 0),
        Err(Error::RankBound { .. })
    ));
}

#[test]
fn materialized_kernel_has_numerical_rank_at_most_r() {
    for &(c, r) in &[(16usize, 2usize), (32, 4), (64, 12), (64, 16)] {
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
        assert_eq!(k.shape(), &[3 * c, c]);
        let m = DMatrix::from_row_slice(3 * c, c, k.data());
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[r - 1] > 1e-6, "c={c} r={r}: rank deficient below r");
        assert!(sv[r..].iter().all(|&v| v < 1e-10), "c={c} r={r}: {:?}", &sv[r..r + 2]);
    }
}

#[test]
fn default_architecture_lowrank_cheaper_at_every_swept_rank() {
    for r in [2, 4, 8, 12, 16] {
        let arch = ArchConfig {
            rank: r,
            ..ArchConfig::default()
        };
        let model = CkspModel::new(&arch, &three_species(), 0).unwrap();
        let report = model.param_report();
        let lr: usize = arch.block_dims().iter().map(|&(c, cp)| 3 * cp * r + r * c).sum();
        let fr: usize = arch.block_dims().iter().map(|&(c, cp)| 3 * cp * c).sum();
        assert_eq!(report.lowrank_branch_total, 3 * lr);
        assert_eq!(report.species_branches, 3 * lr);
        assert_eq!(report.fullrank_branch_total, 3 * fr);
        assert!(report.lowrank_smaller(), "r={r}: {lr} vs {fr}");
        for (c, cp) in arch.block_dims() {
            let cheaper = 3 * cp * r + r * c < 3 * cp * c;
            // The narrow first block stops paying off once r(3c'+c) >= 3c'c.
            assert_eq!(cheaper, !(r == 16 && c == 16), "r={r} ({c},{cp})");
        }
    }
}

#[test]
fn fresh_trunk_ignores_species_and_matches_shared_trunk() {
    let arch = tiny_arch();
    let species = three_species();
    let cksp = CkspModel::new(&arch, &species, 9).unwrap();
    let shared = CkspModel::new(&arch.ablation(false, true, BranchKind::LowRank), &species, 9).unwrap();
    let data = uniform(&[4, 3, 1, arch.input_len], 21);
    let input = |s| {
        [SpeciesInput {
            species: s,
            data: data.clone(),
        }]
    };
    let reference = features(&shared, &input(0), Mode::Train);
    for s in 0..3 {
        for mode in [Mode::Train, Mode::Eval] {
            let f = features(&cksp, &input(s), mode);
            let r = if mode == Mode::Train {
                reference.clone()
            } else {
                features(&shared, &input(0), mode)
            };
            assert!(max_abs_diff(&f, &r) <= 1e-12, "species {s} {mode:?}");
        }
    }
}

#[test]
fn full_rank_branch_also_starts_at_zero() {
    let arch = tiny_arch().ablation(true, true, BranchKind::FullRank);
    let cksp = CkspModel::new(&arch, &three_species(), 9).unwrap();
    let shared = CkspModel::new(&arch.ablation(false, true, BranchKind::FullRank), &three_species(), 9).unwrap();
    let input = [SpeciesInput {
        species: 2,
        data: uniform(&[3, 3, 1, arch.input_len], 4),
    }];
    assert!(
        max_abs_diff(
            &features(&cksp, &input, Mode::Train),
            &features(&shared, &input, Mode::Train)
        ) <= 1e-12
    );
}

/// One optimizer step on a batch of species `s` only. Returns the names of
/// parameters that received a gradient.
fn step_on(model: &mut CkspModel, adam: &mut Adam, s: usize, seed: u64) -> Vec<String> {
    let arch = model.arch.clone();
    let k = model.species[s].num_classes();
    let inputs = [SpeciesInput {
        species: s,
        data: uniform(&[4, 3, 1, arch.input_len], seed),
    }];
    let labels: Vec<usize> = (0..4).map(|i| i % k).collect();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &inputs, Mode::Train).unwrap();
    let loss = cb_focal_loss(&mut tape, out.logits[0].1, &labels, &vec![1.0; k], 2.0).unwrap();
    tape.backward(loss).unwrap();
    model.params.zero_grad();
    let mut touched = Vec::new();
    for (id, g) in tape.param_grads() {
        model.params.get_mut(id).tensor.accumulate_grad(g);
        if g.iter().any(|&v| v != 0.0) {
            touched.push(model.params.get(id).name.clone());
        }
    }
    adam.step(&mut model.params, 1e-3, 0.0).unwrap();
    model.apply_stat_updates(&out.stat_updates);
    touched
}

#[test]
fn species_step_leaves_other_species_untouched() {
    let arch = tiny_arch();
    let mut model = CkspModel::new(&arch, &three_species(), 2).unwrap();
    randomize(&mut model, 3);
    let before = model.clone();
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    for i in 0..100 {
        let touched = step_on(&mut model, &mut adam, 0, 40 + i);
        for name in &touched {
            let p = model.params.by_name(name).unwrap();
            assert!(p.species.is_none() || p.species == Some(0), "{name} got a gradient");
        }
    }
    for (p, q) in model.params.iter().zip(before.params.iter()) {
        if p.species.is_some_and(|s| s != 0) {
            assert_eq!(p.tensor.data(), q.tensor.data(), "{} moved", p.name);
        }
    }
    for (layer, old) in model.norms.iter().zip(&before.norms) {
        if layer.per_species {
            assert_ne!(layer.slots[0].running, old.slots[0].running, "{}", layer.name);
            for s in 1..3 {
                assert_eq!(
                    layer.slots[s].running, old.slots[s].running,
                    "{} species {s}",
                    layer.name
                );
            }
        }
    }
}

#[test]
fn species_gradients_are_exactly_zero_elsewhere() {
    let arch = tiny_arch();
    let mut model = CkspModel::new(&arch, &three_species(), 2).unwrap();
    randomize(&mut model, 8);
    let inputs = [SpeciesInput {
        species: 1,
        data: uniform(&[3, 3, 1, arch.input_len], 5),
    }];
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &inputs, Mode::Train).unwrap();
    let loss = cb_focal_loss(&mut tape, out.logits[0].1, &[0, 1, 2], &[1.0; 3], 2.0).unwrap();
    tape.backward(loss).unwrap();
    let mut grads = vec![None; model.params.len()];
    for (id, g) in tape.param_grads() {
        grads[id] = Some(g.to_vec());
    }
    for (id, p) in model.params.iter().enumerate() {
        match p.species {
            Some(s) if s != 1 => {
                assert!(
                    grads[id].as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0)),
                    "{}",
                    p.name
                )
            }
            _ => {}
        }
    }
    let head1 = model.params.id("head.species1.weight").unwrap();
    assert!(grads[head1].as_ref().unwrap().iter().any(|&v| v != 0.0));
}

fn norm_layer(channels: usize, eps: f64) -> (ParamStore, NormLayer) {
    let mut store = ParamStore::default();
    let layer = NormLayer::new(&mut store, "n", channels, Some(3), eps, 0.1, 0);
    (store, layer)
}

fn set_affine(store: &mut ParamStore, layer: &NormLayer, s: usize, gamma: f64, beta: f64) {
    store.get_mut(layer.slots[s].gamma).tensor.data_mut().fill(gamma);
    store.get_mut(layer.slots[s].beta).tensor.data_mut().fill(beta);
}

#[test]
fn sbn_affine_on_standardized_batch() {
    let eps = 1e-5;
    let (mut store, mut layer) = norm_layer(1, eps);
    set_affine(&mut store, &layer, 1, 2.0, 1.0);
    // Population mean 0 and variance 1 over the batch.
    let x = [-1.0, 1.0, -1.0, 1.0];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(&[4, 1, 1, 1], x.to_vec()).unwrap());
    let y = sbn_forward(&mut tape, &store, &mut layer, v, 1, Mode::Train).unwrap();
    let scale = 1.0 / (1.0 + eps).sqrt();
    for (out, xi) in tape.value(y).data().iter().zip(x) {
        assert!((out - (2.0 * xi * scale + 1.0)).abs() < 1e-12);
    }
    // Running stats: m = 0.1, unbiased variance 4/3 for the update.
    assert_eq!(layer.slots[1].running.mean, vec![0.0]);
    assert!((layer.slots[1].running.var[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);
    assert_eq!(layer.slots[0].running.var, vec![1.0]);
}

#[test]
fn sbn_constant_batch_maps_to_beta() {
    let (store, mut layer) = norm_layer(2, 1e-5);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::full(&[3, 2, 1, 4], 7.5));
    let y = sbn_forward(&mut tape, &store, &mut layer, v, 0, Mode::Train).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn sbn_isolation_over_many_batches() {
    let (store, mut layer) = norm_layer(3, 1e-5);
    for i in 0..100 {
        let mut tape = Tape::new();
        let v = tape.constant(uniform(&[4, 3, 1, 5], i));
        sbn_forward(&mut tape, &store, &mut layer, v, 0, Mode::Train).unwrap();
    }
    for s in 1..3 {
        assert_eq!(layer.slots[s].running.mean, vec![0.0; 3]);
        assert_eq!(layer.slots[s].running.var, vec![1.0; 3]);
    }
}

#[test]
fn sbn_rejects_unknown_species_and_single_row() {
    let (store, mut layer) = norm_layer(1, 1e-5);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::full(&[1, 1, 1, 4], 1.0));
    assert!(matches!(
        sbn_forward(&mut tape, &store, &mut layer, v, 3, Mode::Train),
        Err(Error::UnknownSpecies(3))
    ));
    assert!(matches!(
        sbn_forward(&mut tape, &store, &mut layer, v, 0, Mode::Train),
        Err(Error::BatchTooSmall { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sbn_output_is_standardized(b in 8usize..20, c in 1usize..5, w in 1usize..6, seed in any::<u64>(), s in 0usize..3) {
        let eps = 1e-5;
        let (store, mut layer) = norm_layer(c, eps);
        let x = uniform(&[b, c, 1, w], seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = sbn_forward(&mut tape, &store, &mut layer, v, s, Mode::Train).unwrap();
        let y = tape.value(y).data();
        let n = (b * w) as f64;
        for ch in 0..c {
            let pick = |d: &[f64]| -> Vec<f64> {
                (0..b).flat_map(|bi| d[(bi * c + ch) * w..][..w].to_vec()).collect()
            };
            let (xs, ys) = (pick(x.data()), pick(y));
            let xm = xs.iter().sum::<f64>() / n;
            let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n;
            let ym = ys.iter().sum::<f64>() / n;
            let yv = ys.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / n;
            prop_assert!(ym.abs() <= 1e-9);
            prop_assert!((yv - xv / (xv + eps)).abs() <= 1e-9);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let arch = tiny_arch();
    let mut model = CkspModel::new(&arch, &three_species(), 1).unwrap();
    randomize(&mut model, 12);
    let mut adam = Adam::new(AdamConfig::default(), &model.params);
    step_on(&mut model, &mut adam, 2, 1);
    model.standardizer.mean = [0.1, -1.0 / 3.0, 2.5];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    for (p, q) in model.params.iter().zip(loaded.params.iter()) {
        assert_eq!(p.name, q.name);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.tensor), bits(&q.tensor));
    }
    for (a, b) in model.norms.iter().zip(&loaded.norms) {
        for (x, y) in a.slots.iter().zip(&b.slots) {
            assert_eq!(x.running, y.running);
        }
    }
    assert_eq!(model.standardizer, loaded.standardizer);
    let input = [SpeciesInput {
        species: 2,
        data: uniform(&[3, 3, 1, arch.input_len], 2),
    }];
    assert_eq!(
        features(&model, &input, Mode::Eval),
        features(&loaded, &input, Mode::Eval)
    );
}

#[test]
fn param_report_partitions_the_store() {
    let arch = tiny_arch();
    let model = CkspModel::new(&arch, &three_species(), 0).unwrap();
    let r = model.param_report();
    assert_eq!(r.shared + r.species_branches + r.norm_affine_species + r.heads, r.total);
    // Two blocks (3 -> 4, 4 -> 4) at rank 2: 3*4*2 + 2*c_in per species.
    assert_eq!(r.species_branches, 3 * ((24 + 6) + (24 + 8)));
    assert_eq!(r.lowrank_branch_total, r.species_branches);
    assert_eq!(r.fullrank_branch_total, 3 * (36 + 48));
    assert_eq!(r.heads, (5 * 5 + 5) + (3 * 5 + 3) + (5 * 5 + 5));
    // Per-species norms: two blocks of 4 channels and the fc norm of 5.
    assert_eq!(r.norm_affine_species, 3 * 2 * (4 + 4 + 5));
}

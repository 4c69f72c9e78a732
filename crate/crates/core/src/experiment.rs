//! Cross-validated experiments: CKSP and Single-Net runs, ablations and
//! sweeps over rank, branch form and training-data fraction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleWindow};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, mean_std, rotation, stratified_folds, Averaging, FoldPlan, Metrics};
use crate::model::{ArchConfig, BranchKind, CkspModel};
use crate::rng::derive_seed;
use crate::synthetic::scarcity_view;
use crate::train::{equalize_species, train, CurvePoint, LossConfig, TrainConfig, TrainSplit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub folds: usize,
    /// Rotations to run; empty means all of them.
    pub rotations: Vec<usize>,
    /// Fraction of each class kept in the training folds.
    pub data_fraction: f64,
    pub averaging: Averaging,
    /// Batch size of Single-Net runs; by default the joint model's batch
    /// size, so both model kinds train under one protocol.
    pub single_net_batch_size: Option<usize>,
    /// Train Single-Net models on the same species-equalized pools as the
    /// joint model rather than on each species' full training folds.
    pub single_net_equalized: bool,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            folds: 5,
            rotations: Vec::new(),
            data_fraction: 1.0,
            averaging: Averaging::Macro,
            single_net_batch_size: None,
            single_net_equalized: true,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn rotation_list(&self) -> Result<Vec<usize>> {
        if let Some(&r) = self.rotations.iter().find(|&&r| r >= self.folds) {
            return Err(Error::InvalidArgument(format!(
                "rotation {r} with {} folds",
                self.folds
            )));
        }
        Ok(if self.rotations.is_empty() {
            (0..self.folds).collect()
        } else {
            self.rotations.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// One joint model over all species.
    Cksp,
    /// One plain network per species.
    SingleNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesResult {
    pub species: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationResult {
    pub rotation: usize,
    pub species: Vec<SpeciesResult>,
    /// Best epoch of each trained model (one for CKSP, one per species for
    /// Single-Net).
    pub best_epochs: Vec<usize>,
    pub curves: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub species: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub kind: ModelKind,
    pub rotations: Vec<RotationResult>,
    pub summary: Vec<MetricSummary>,
}

impl CvReport {
    pub fn get(&self, species: &str, metric: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.species == species && m.metric == metric)
    }
}

pub const METRICS: [&str; 4] = ["accuracy", "precision", "recall", "f1"];

fn metric_value(m: &Metrics, name: &str) -> f64 {
    match name {
        "accuracy" => m.accuracy,
        "precision" => m.precision,
        "recall" => m.recall,
        _ => m.f1,
    }
}

/// Window positions per species and the stratified fold plan over them.
#[derive(Debug, Clone)]
pub struct PreparedFolds {
    /// `indices[s][i]` is the dataset index of species `s`'s `i`-th window.
    pub indices: Vec<Vec<usize>>,
    pub plan: FoldPlan,
}

pub fn prepare_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<PreparedFolds> {
    let indices = dataset.indices_by_species();
    let labels: Vec<Vec<usize>> = indices.iter().map(|idx| dataset.labels(idx)).collect();
    let plan = stratified_folds(&labels, k, derive_seed(seed, &[0xF0]))?;
    Ok(PreparedFolds { indices, plan })
}

impl PreparedFolds {
    pub fn windows<'a>(&self, dataset: &'a Dataset, species: usize, folds: &[usize]) -> Vec<&'a SampleWindow> {
        self.plan
            .gather(species, folds)
            .into_iter()
            .map(|p| &dataset.windows[self.indices[species][p]])
            .collect()
    }
}

/// Trains and tests one rotation, returning the result and the trained
/// models (one for CKSP, one per species for Single-Net).
pub fn run_rotation(
    dataset: &Dataset,
    folds: &PreparedFolds,
    r: usize,
    cfg: &ExperimentConfig,
    kind: ModelKind,
) -> Result<(RotationResult, Vec<CkspModel>)> {
    let rot = rotation(r, folds.plan.k);
    let groups: Vec<Vec<usize>> = match kind {
        ModelKind::Cksp => vec![(0..dataset.num_species()).collect()],
        ModelKind::SingleNet => (0..dataset.num_species()).map(|s| vec![s]).collect(),
    };
    let (arch, mut train_cfg) = match kind {
        ModelKind::Cksp => (cfg.arch.clone(), cfg.train.clone()),
        ModelKind::SingleNet => {
            let mut t = cfg.train.clone();
            t.batch_size = cfg.single_net_batch_size.unwrap_or(cfg.train.batch_size);
            (cfg.arch.single_net(), t)
        }
    };
    let run_seed = derive_seed(cfg.seed, &[r as u64]);

    // Training pools: fraction first, then (optionally) species equalization,
    // done here so every model kind sees the same windows.
    let mut pools: Vec<Vec<&SampleWindow>> = Vec::with_capacity(dataset.num_species());
    for s in 0..dataset.num_species() {
        let train_w = folds.windows(dataset, s, &rot.train);
        let k = dataset.species[s].num_classes();
        pools.push(scarcity_view(
            &train_w,
            k,
            cfg.data_fraction,
            s,
            derive_seed(run_seed, &[0x5C]),
        )?);
    }
    let equalize = cfg.train.equalize_species && (kind == ModelKind::Cksp || cfg.single_net_equalized);
    if equalize {
        let positions: Vec<Vec<usize>> = pools.iter().map(|p| (0..p.len()).collect()).collect();
        let labels: Vec<Vec<usize>> = pools.iter().map(|p| p.iter().map(|w| w.label).collect()).collect();
        let keep = equalize_species(&positions, &labels, derive_seed(run_seed, &[0xE0]))?;
        pools = pools
            .iter()
            .zip(keep)
            .map(|(p, k)| k.into_iter().map(|i| p[i]).collect())
            .collect();
    }
    train_cfg.equalize_species = false;

    let mut result = RotationResult {
        rotation: r,
        species: Vec::new(),
        best_epochs: Vec::new(),
        curves: Vec::new(),
    };
    let mut models = Vec::new();
    for group in groups {
        let infos: Vec<_> = group.iter().map(|&s| dataset.species[s].clone()).collect();
        let mut split = TrainSplit {
            train: Vec::new(),
            val: Vec::new(),
        };
        for &s in &group {
            split.train.push(pools[s].clone());
            split.val.push(folds.windows(dataset, s, &[rot.val]));
        }
        let model = CkspModel::new(&arch, &infos, derive_seed(cfg.seed, &[0x1A]))?;
        let outcome = train(model, &train_cfg, &cfg.loss, &split, run_seed)?;
        for (local, &s) in group.iter().enumerate() {
            let test = folds.windows(dataset, s, &[rot.test]);
            let pred = outcome.model.predict_species(local, &test, train_cfg.eval_chunk)?;
            let truth: Vec<usize> = test.iter().map(|w| w.label).collect();
            result.species.push(SpeciesResult {
                species: dataset.species[s].name.clone(),
                metrics: compute_metrics(&truth, &pred, dataset.species[s].num_classes(), cfg.averaging)?,
            });
        }
        result.best_epochs.push(outcome.best_epoch);
        result.curves.extend(outcome.curves);
        models.push(outcome.model);
    }
    Ok((result, models))
}

pub fn summarize(kind: ModelKind, species: &[String], rotations: Vec<RotationResult>) -> CvReport {
    let mut summary = Vec::new();
    for name in species {
        for metric in METRICS {
            let values: Vec<f64> = rotations
                .iter()
                .flat_map(|r| r.species.iter().filter(|x| &x.species == name))
                .map(|x| metric_value(&x.metrics, metric))
                .collect();
            let (mean, std) = mean_std(&values);
            summary.push(MetricSummary {
                species: name.clone(),
                metric: metric.into(),
                mean,
                std,
            });
        }
    }
    CvReport {
        kind,
        rotations,
        summary,
    }
}

/// Runs every configured rotation. `on_rotation` sees each result and its
/// models as soon as they are ready.
pub fn run_cv(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    kind: ModelKind,
    mut on_rotation: impl FnMut(&RotationResult, &[CkspModel]) -> Result<()>,
) -> Result<CvReport> {
    dataset.validate()?;
    let folds = prepare_folds(dataset, cfg.folds, cfg.seed)?;
    let mut rotations = Vec::new();
    for r in cfg.rotation_list()? {
        log::info!("{kind:?}: rotation {r}");
        let (res, models) = run_rotation(dataset, &folds, r, cfg, kind)?;
        on_rotation(&res, &models)?;
        rotations.push(res);
    }
    let names: Vec<String> = dataset.species.iter().map(|s| s.name.clone()).collect();
    Ok(summarize(kind, &names, rotations))
}

/// The four on/off combinations of SPConv and SBN, full model first.
pub fn ablation_grid(arch: &ArchConfig) -> Vec<(String, ArchConfig)> {
    [(true, true), (true, false), (false, true), (false, false)]
        .into_iter()
        .map(|(sp, sbn)| {
            let label = format!(
                "spconv={},sbn={}",
                if sp { "on" } else { "off" },
                if sbn { "on" } else { "off" }
            );
            (label, arch.ablation(sp, sbn, arch.branch))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_var: String,
    pub value: String,
    pub species: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

pub fn sweep_rows(sweep_var: &str, value: &str, report: &CvReport) -> Vec<SweepRow> {
    report
        .summary
        .iter()
        .map(|m| SweepRow {
            sweep_var: sweep_var.into(),
            value: value.into(),
            species: m.species.clone(),
            metric: m.metric.clone(),
            mean: m.mean,
            std: m.std,
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sweep_var,value,species,metric,mean,std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sweep_var, r.value, r.species, r.metric, r.mean, r.std
        ));
    }
    out
}

pub fn rank_sweep(dataset: &Dataset, cfg: &ExperimentConfig, ranks: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &r in ranks {
        let mut c = cfg.clone();
        c.arch.rank = r;
        c.arch.branch = BranchKind::LowRank;
        let report = run_cv(dataset, &c, ModelKind::Cksp, |_, _| Ok(()))?;
        rows.extend(sweep_rows("rank", &r.to_string(), &report));
    }
    Ok(rows)
}

pub fn frconv_sweep(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let mut c = cfg.clone();
    c.arch.branch = BranchKind::FullRank;
    let report = run_cv(dataset, &c, ModelKind::Cksp, |_, _| Ok(()))?;
    Ok(sweep_rows("branch", "frconv", &report))
}

/// CKSP and Single-Net at each training fraction.
pub fn fraction_sweep(dataset: &Dataset, cfg: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &f in fractions {
        let mut c = cfg.clone();
        c.data_fraction = f;
        for (kind, var) in [
            (ModelKind::Cksp, "fraction-cksp"),
            (ModelKind::SingleNet, "fraction-single-net"),
        ] {
            let report = run_cv(dataset, &c, kind, |_, _| Ok(()))?;
            rows.extend(sweep_rows(var, &f.to_string(), &report));
        }
    }
    Ok(rows)
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use cksp_core::eval::{bn_stats_csv, bn_stats_export};
use cksp_core::experiment::{
    ablation_grid, fraction_sweep, frconv_sweep, rank_sweep, run_cv, sweep_csv, CvReport, ExperimentConfig, ModelKind,
};
use cksp_core::gradcheck;
use cksp_core::ingest::{build_dataset, ingest_canonical_csv, ingest_public_dataset, IngestReport, PublicDataset};
use cksp_core::model::checkpoint;
use cksp_core::preprocess::{DEFAULT_TARGET_LEN, DEFAULT_WINDOW_SECONDS};
use cksp_core::synthetic::{generate_dataset, SyntheticSpec};
use cksp_core::tape::{fault, OpKind};
use cksp_core::train::write_curves_csv;
use cksp_core::{archive, Dataset, SpeciesInfo};

#[derive(Parser)]
#[command(name = "cksp", version, about = "Cross-species activity recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest raw recordings into a window archive.
    Prepare(PrepareArgs),
    /// Cross-validated training of the joint model, its ablations or the
    /// per-species baseline.
    Train(TrainArgs),
    /// Rank, branch or training-fraction sweeps, written as long-format CSV.
    Sweep(SweepArgs),
    /// Finite-difference check of every operator and the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Horse,
    Sheep,
    Cattle,
    Csv,
    Synthetic,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum)]
    dataset: Source,
    /// Directory of a public release, or the canonical CSV file.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output archive path.
    #[arg(long)]
    out: PathBuf,
    /// TOML generator spec for `--dataset synthetic`.
    #[arg(long)]
    synth_spec: Option<PathBuf>,
    /// Species names for the integer ids of a canonical CSV, in id order.
    #[arg(long, value_delimiter = ',', default_value = "horse,sheep,cattle")]
    species: Vec<String>,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Window archives; several are merged by species name.
    #[arg(long = "data", required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Rotations to run (default: all).
    #[arg(long, value_delimiter = ',')]
    rotations: Option<Vec<usize>>,
    /// Fraction of each training fold to keep.
    #[arg(long)]
    data_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Run the module ablation grid; the listed modules are switched off in
    /// every combination (e.g. `no-spconv,no-sbn` gives four runs).
    #[arg(long, value_delimiter = ',', num_args = 0.., default_missing_value = "no-spconv,no-sbn")]
    ablate: Option<Vec<Ablate>>,
    /// Train the per-species baseline instead, optionally for one species.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    single_net: Option<String>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Ablate {
    NoSpconv,
    NoSbn,
}

#[derive(Args)]
#[group(required = true, multiple = true, args = ["rank", "fraction", "frconv"])]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    rank: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    fraction: Option<Vec<f64>>,
    /// Add the full-rank branch comparator.
    #[arg(long)]
    frconv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Tiny,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    scale: Scale,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Negate the backward rule of one operator (for testing the checker).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    seed: Option<u64>,
    config: Option<ExperimentConfig>,
    data: Vec<DataHash>,
    started: String,
    finished: String,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct DataHash {
    path: String,
    sha256: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects output paths relative to the output root for the manifest.
struct Outputs {
    root: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Outputs {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }

    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    fn finish(
        mut self,
        command: &str,
        cfg: Option<&ExperimentConfig>,
        data: Vec<DataHash>,
        started: String,
    ) -> Result<()> {
        self.files.push("manifest.json".into());
        let manifest = Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.map(|c| c.seed),
            config: cfg.cloned(),
            data,
            started,
            finished: now(),
            outputs: self.files,
        };
        let p = self.root.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", p.display()))
    }
}

fn prepare(args: PrepareArgs) -> Result<()> {
    let started = now();
    let need_input = || {
        args.input
            .clone()
            .ok_or_else(|| UserError("--in is required for this dataset".into()))
    };
    let (dataset, report) = match args.dataset {
        Source::Synthetic => {
            let spec = match &args.synth_spec {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).map_err(|e| UserError(format!("{}: {e}", p.display())))?
                }
                None => SyntheticSpec::default(),
            };
            generate_dataset(&spec)?
        }
        Source::Csv => {
            let path = need_input()?;
            let recordings = ingest_canonical_csv(&path)?;
            let species = args
                .species
                .iter()
                .map(|n| n.parse::<PublicDataset>().map(PublicDataset::species_info))
                .collect::<cksp_core::Result<Vec<SpeciesInfo>>>()?;
            if let Some(r) = recordings.iter().find(|r| r.species >= species.len()) {
                bail!(UserError(format!("species id {} has no entry in --species", r.species)));
            }
            let report = IngestReport::for_species(&species);
            build_dataset(species, &recordings, DEFAULT_WINDOW_SECONDS, DEFAULT_TARGET_LEN, report)?
        }
        Source::Horse | Source::Sheep | Source::Cattle => {
            let kind = match args.dataset {
                Source::Horse => PublicDataset::Horse,
                Source::Sheep => PublicDataset::Sheep,
                _ => PublicDataset::Cattle,
            };
            let (recordings, report) = ingest_public_dataset(kind, &need_input()?)?;
            build_dataset(
                vec![kind.species_info()],
                &recordings,
                DEFAULT_WINDOW_SECONDS,
                DEFAULT_TARGET_LEN,
                report,
            )?
        }
    };
    archive::write(&args.out, &dataset)?;
    let report_path = args.out.with_extension("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    for s in &report.species {
        println!("{}: {} windows ({} dropped)", s.name, s.windows, s.dropped_windows);
    }
    let manifest = Manifest {
        command: "prepare".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: None,
        config: None,
        data: vec![DataHash {
            path: args.out.display().to_string(),
            sha256: sha256_file(&args.out)?,
        }],
        started,
        finished: now(),
        outputs: vec![args.out.display().to_string(), report_path.display().to_string()],
    };
    let manifest_path = args.out.with_extension("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    Ok(())
}

/// Input problems detected by the command layer rather than the library.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn load_common(c: &Common) -> Result<(ExperimentConfig, Dataset, Vec<DataHash>)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = &c.rotations {
        cfg.rotations = r.clone();
    }
    if let Some(f) = c.data_fraction {
        cfg.data_fraction = f;
    }
    let mut hashes = Vec::new();
    let mut dataset: Option<Dataset> = None;
    for p in &c.data {
        let d = archive::read(p)?;
        hashes.push(DataHash {
            path: p.display().to_string(),
            sha256: sha256_file(p)?,
        });
        match &mut dataset {
            None => dataset = Some(d),
            Some(all) => all.merge(d)?,
        }
    }
    Ok((cfg, dataset.expect("at least one archive"), hashes))
}

fn dir_label(label: &str) -> String {
    label.replace('=', "-").replace(',', "_")
}

fn write_report(out: &mut Outputs, prefix: &str, report: &CvReport, dataset: &Dataset) -> Result<()> {
    out.write(&format!("{prefix}metrics.json"), serde_json::to_string_pretty(report)?)?;
    for rot in &report.rotations {
        let p = out.path(&format!("{prefix}curves/rotation{}.csv", rot.rotation))?;
        write_curves_csv(&rot.curves, &p)?;
        for sr in &rot.species {
            let info = dataset
                .species
                .iter()
                .find(|s| s.name == sr.species)
                .expect("species in dataset");
            for (percent, suffix) in [(false, ""), (true, "_percent")] {
                out.write(
                    &format!("{prefix}confusion/rotation{}_{}{suffix}.csv", rot.rotation, sr.species),
                    sr.metrics.confusion.to_csv(&info.classes, percent),
                )?;
            }
        }
    }
    for m in &report.summary {
        println!("{prefix}{} {}: {:.4} +/- {:.4}", m.species, m.metric, m.mean, m.std);
    }
    Ok(())
}

fn run_and_save(
    out: &mut Outputs,
    prefix: &str,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    kind: ModelKind,
) -> Result<()> {
    let mut saved = Vec::new();
    let report = run_cv(dataset, cfg, kind, |res, models| {
        for model in models {
            let name = match kind {
                ModelKind::Cksp => format!("rotation{}", res.rotation),
                ModelKind::SingleNet => format!("rotation{}_{}", res.rotation, model.species[0].name),
            };
            saved.push((name, model.clone()));
        }
        Ok(())
    })?;
    for (name, model) in &saved {
        let p = out.path(&format!("{prefix}checkpoints/{name}.json"))?;
        checkpoint::save(model, &p)?;
        out.write(
            &format!("{prefix}bnstats/{name}.csv"),
            bn_stats_csv(&bn_stats_export(model)),
        )?;
    }
    write_report(out, prefix, &report, dataset)
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let started = now();
    let (cfg, mut dataset, hashes) = load_common(&args.common)?;
    let mut out = Outputs::new(&args.common.out)?;
    out.write("config.toml", cfg.to_toml())?;
    if let Some(species) = &args.single_net {
        if !species.is_empty() {
            dataset = dataset.select_species(&[species.as_str()])?;
        }
        run_and_save(&mut out, "", &dataset, &cfg, ModelKind::SingleNet)?;
    } else if let Some(off) = &args.ablate {
        for (label, arch) in ablation_grid(&cfg.arch) {
            let skip = (!arch.use_spconv && !off.contains(&Ablate::NoSpconv))
                || (!arch.use_sbn && !off.contains(&Ablate::NoSbn));
            if skip {
                continue;
            }
            let c = ExperimentConfig { arch, ..cfg.clone() };
            run_and_save(
                &mut out,
                &format!("{}/", dir_label(&label)),
                &dataset,
                &c,
                ModelKind::Cksp,
            )?;
        }
    } else {
        run_and_save(&mut out, "", &dataset, &cfg, ModelKind::Cksp)?;
    }
    out.finish("train", Some(&cfg), hashes, started)
}

fn sweep_cmd(args: SweepArgs) -> Result<()> {
    let started = now();
    let (cfg, dataset, hashes) = load_common(&args.common)?;
    let mut out = Outputs::new(&args.common.out)?;
    let mut rows = Vec::new();
    if let Some(ranks) = &args.rank {
        rows.extend(rank_sweep(&dataset, &cfg, ranks)?);
    }
    if args.frconv {
        rows.extend(frconv_sweep(&dataset, &cfg)?);
    }
    if let Some(fractions) = &args.fraction {
        rows.extend(fraction_sweep(&dataset, &cfg, fractions)?);
    }
    out.write("sweep.csv", sweep_csv(&rows))?;
    print!("{}", sweep_csv(&rows));
    out.finish("sweep", Some(&cfg), hashes, started)
}

const OP_KINDS: [(&str, OpKind); 20] = [
    ("conv1x3", OpKind::Conv1x3),
    ("matmul", OpKind::MatMul),
    ("reshape", OpKind::Reshape),
    ("add", OpKind::Add),
    ("add_n", OpKind::AddN),
    ("mul", OpKind::Mul),
    ("scale", OpKind::Scale),
    ("relu", OpKind::Relu),
    ("tanh", OpKind::Tanh),
    ("maxpool1d", OpKind::MaxPool1d),
    ("global_avg_pool", OpKind::GlobalAvgPool),
    ("fully_connected", OpKind::FullyConnected),
    ("log_softmax", OpKind::LogSoftmax),
    ("batch_norm_train", OpKind::BatchNormTrain),
    ("batch_norm_frozen", OpKind::BatchNormFrozen),
    ("slice_batch", OpKind::SliceBatch),
    ("concat_batch", OpKind::ConcatBatch),
    ("sum", OpKind::Sum),
    ("mean", OpKind::Mean),
    ("focal_nll", OpKind::FocalNll),
];

fn gradcheck_cmd(args: GradcheckArgs) -> Result<bool> {
    let Scale::Tiny = args.scale;
    if let Some(name) = &args.inject_fault {
        let kind = OP_KINDS
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, k)| k)
            .ok_or_else(|| UserError(format!("unknown operator {name:?}")))?;
        fault::inject_sign_flip(Some(kind));
    }
    let entries = gradcheck::suite(args.step, args.tol)?;
    let mut ok = true;
    for e in &entries {
        let status = if e.report.passed() { "ok" } else { "FAIL" };
        ok &= e.report.passed();
        println!("{:<24} max rel error {:.3e}  {status}", e.name, e.report.max_rel_error);
    }
    Ok(ok)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cksp_core::Error>() {
            return if e.is_user_error() { 2 } else { 1 };
        }
        if cause.is::<UserError>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Sweep(a) => sweep_cmd(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

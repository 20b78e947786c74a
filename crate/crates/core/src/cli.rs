//! Command-line driver. Experiments are described by TOML files; flags only
//! carry paths and overrides. Every command writes a `manifest.json` into its
//! output directory.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 soundness violation found by `falsify`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attacks::{robust_accuracy_sweep, AttackConfig, Norm, Objective};
use crate::certify::{attack_falsification, certify_dataset, curve_from_reports, FalsifyConfig};
use crate::datasets::{gen_circles, gen_moons, load_csv, save_csv, split, LabeledDataset};
use crate::error::{Error, Result};
use crate::train::{ce_head_cluster_ablation, train, ArchConfig, TrainConfig, TrainedArtifact};

pub const SEED_ENV: &str = "CLUSTR_SEED";

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_UNSOUND: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "clustr", version, about = "Train, certify and attack clustering-based classifiers")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate data, train a pipeline and write the artifact.
    Train {
        /// Run config (TOML), or a manifest.json written by an earlier run.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certified radii and the certified-accuracy curve.
    Certify {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Radius grid: `start:stop:count` or a comma-separated list.
        #[arg(long, default_value = "0:0.5:501")]
        grid: String,
        /// Use this Lipschitz constant instead of the network's bound.
        #[arg(long)]
        lipschitz: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Robust accuracy under PGD attacks.
    Attack {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Attack config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Try to break certificates with l2-PGD inside the certified radius.
    Falsify {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Use this Lipschitz constant instead of the network's bound.
        #[arg(long)]
        lipschitz: Option<f64>,
        /// Multiply the Lipschitz constant (0.5 is a negative control).
        #[arg(long, default_value_t = 1.0)]
        lipschitz_scale: f64,
        #[arg(long, default_value_t = 0.99)]
        budget_fraction: f64,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 50)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the cross-entropy head with K-means on its features.
    AblateCe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize manifests from run directories.
    Report {
        /// Run directories (each holding a manifest.json).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Moons,
    Circles,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_gap")]
    pub gap: f64,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_n() -> usize {
    1000
}
fn default_noise() -> f64 {
    0.1
}
fn default_gap() -> f64 {
    0.5
}
fn default_test_fraction() -> f64 {
    0.3
}

/// A training run. `seed` drives data generation, the split and training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` block of a JSON manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            let m: RunManifest = serde_json::from_str(&text)?;
            serde_json::from_value(m.config).map_err(|e| Error::Config(e.to_string()))?
        } else {
            Self::from_toml(&text)?
        };
        if let Some(seed) = seed_override()? {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        cfg.train.validate()?;
        cfg.arch.validate()?;
        Ok(cfg)
    }

    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let d = &self.data;
        let full = match d.dataset {
            DatasetKind::Moons => gen_moons(d.n, d.noise, self.seed)?,
            DatasetKind::Circles => gen_circles(d.n, d.gap, d.noise, self.seed)?,
            DatasetKind::Csv => {
                let p = d.path.as_ref().ok_or_else(|| Error::Config("data.path is required for dataset = \"csv\"".into()))?;
                load_csv(p, None)?
            }
        };
        split(&full, d.test_fraction, self.seed)
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveChoice {
    CeVsLabel,
    CeVsCleanProbs,
    MagnetLoss,
    All,
}

/// Attack grid: one row per (objective, iterations, epsilon).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackFile {
    #[serde(default)]
    pub seed: u64,
    pub norm: Norm,
    pub epsilons: Vec<f64>,
    pub eta: f64,
    pub iterations: Vec<usize>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_objectives")]
    pub objectives: Vec<ObjectiveChoice>,
}

fn default_restarts() -> usize {
    10
}
fn default_objectives() -> Vec<ObjectiveChoice> {
    vec![ObjectiveChoice::CeVsLabel]
}

impl AttackFile {
    fn objectives(&self) -> Vec<Objective> {
        let mut out = Vec::new();
        for o in &self.objectives {
            let add: &[Objective] = match o {
                ObjectiveChoice::CeVsLabel => &[Objective::CeVsLabel],
                ObjectiveChoice::CeVsCleanProbs => &[Objective::CeVsCleanProbs],
                ObjectiveChoice::MagnetLoss => &[Objective::MagnetLoss],
                ObjectiveChoice::All => &[Objective::CeVsLabel, Objective::MagnetLoss],
            };
            for a in add {
                if !out.contains(a) {
                    out.push(*a);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub wall_time_s: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            wall_time_s: BTreeMap::new(),
            outputs: Vec::new(),
            results: serde_json::Value::Null,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

struct Timer(Instant);

impl Timer {
    fn start() -> Self {
        Self(Instant::now())
    }

    fn record(&self, m: &mut RunManifest, stage: &str) {
        m.wall_time_s.insert(stage.into(), self.0.elapsed().as_secs_f64());
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

/// Parses `start:stop:count` (inclusive, evenly spaced) or `r0,r1,..`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::Config(format!("invalid grid {s:?}: {m}"));
    let s = s.trim();
    if s.is_empty() {
        return Err(bad("empty"));
    }
    if let Some((a, rest)) = s.split_once(':') {
        let (b, c) = rest.split_once(':').ok_or_else(|| bad("expected start:stop:count"))?;
        let start: f64 = a.trim().parse().map_err(|_| bad("start"))?;
        let stop: f64 = b.trim().parse().map_err(|_| bad("stop"))?;
        let count: usize = c.trim().parse().map_err(|_| bad("count"))?;
        return match count {
            0 => Err(bad("count must be >= 1")),
            1 => Ok(vec![start]),
            _ => Ok((0..count).map(|i| start + (stop - start) * i as f64 / (count - 1) as f64).collect()),
        };
    }
    s.split(',').map(|t| t.trim().parse::<f64>().map_err(|_| bad(t))).collect()
}

fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<S>>) -> Result<()> {
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r.iter().map(AsRef::as_ref)).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_history(path: &Path, a: &TrainedArtifact) -> Result<()> {
    let rows = a.history.iter().map(|h| {
        vec![
            serde_json::to_value(h.phase).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            h.epoch.to_string(),
            format!("{:?}", h.loss),
            format!("{:?}", h.accuracy),
        ]
    });
    write_csv(path, &["phase", "epoch", "loss", "accuracy"], rows)
}

fn cmd_train(config: &Path, out: &Path) -> Result<u8> {
    let cfg = RunConfig::load(config)?;
    ensure_dir(out)?;
    let mut m = RunManifest::new("train", cfg.seed, serde_json::to_value(&cfg)?);
    let t = Timer::start();
    let (train_set, test_set) = cfg.datasets()?;
    t.record(&mut m, "data");
    let t = Timer::start();
    let artifact = train(&train_set, &cfg.arch, &cfg.train)?;
    t.record(&mut m, "train");

    save_csv(&train_set, out.join("train.csv"))?;
    save_csv(&test_set, out.join("test.csv"))?;
    artifact.save(out.join("artifact.json"))?;
    fs::write(out.join("network.json"), serde_json::to_string_pretty(&artifact.net)?)?;
    if let Some(model) = &artifact.cluster_model {
        fs::write(out.join("clusters.json"), serde_json::to_string_pretty(model)?)?;
        m.outputs.push("clusters.json".into());
    }
    write_history(&out.join("history.csv"), &artifact)?;
    m.outputs.extend(["artifact.json", "network.json", "history.csv", "train.csv", "test.csv"].map(String::from));

    let train_acc = artifact.accuracy(&train_set)?;
    let test_acc = artifact.accuracy(&test_set)?;
    m.results = serde_json::json!({
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "lipschitz": artifact.net.lipschitz_upper_bound(),
        "sigma_sq": artifact.cluster_model.as_ref().map(|c| c.sigma_sq()),
    });
    m.write(out)?;
    println!("train accuracy {train_acc:.4}, test accuracy {test_acc:.4}");
    Ok(EXIT_OK)
}

fn load_eval(artifact: &Path, data: &Path) -> Result<(TrainedArtifact, LabeledDataset)> {
    let a = TrainedArtifact::load(artifact)?;
    let num_classes = a.cluster_model.as_ref().map_or(a.net.output_dim(), |c| c.num_classes());
    let d = load_csv(data, Some(num_classes))?;
    if d.input_dim() != a.net.input_dim() {
        return Err(Error::Config(format!(
            "data has {} features but the artifact expects {}",
            d.input_dim(),
            a.net.input_dim()
        )));
    }
    Ok((a, d))
}

fn lipschitz_for(a: &TrainedArtifact, over: Option<f64>, scale: f64) -> Result<f64> {
    let l = over.unwrap_or_else(|| a.net.lipschitz_upper_bound()) * scale;
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::Config(format!("Lipschitz constant must be finite and > 0, got {l}")));
    }
    Ok(l)
}

fn cmd_certify(artifact: &Path, data: &Path, grid: &str, lipschitz: Option<f64>, out: &Path) -> Result<u8> {
    let grid = parse_grid(grid)?;
    crate::certify::validate_grid(&grid).map_err(|e| Error::Config(e.to_string()))?;
    let (a, d) = load_eval(artifact, data)?;
    let model = a.clusters()?;
    let l = lipschitz_for(&a, lipschitz, 1.0)?;
    ensure_dir(out)?;
    let mut m = RunManifest::new(
        "certify",
        a.seed,
        serde_json::json!({ "artifact": artifact, "data": data, "grid": grid, "lipschitz_override": lipschitz }),
    );
    let t = Timer::start();
    let reports = certify_dataset(&a.net, model, &d, l)?;
    let curve = curve_from_reports(&reports, &grid)?;
    t.record(&mut m, "certify");

    write_csv(
        &out.join("curve.csv"),
        &["radius", "certified_accuracy"],
        curve.radii.iter().zip(&curve.certified_accuracy).map(|(r, a)| vec![format!("{r:?}"), format!("{a:?}")]),
    )?;
    write_csv(
        &out.join("certificates.csv"),
        &["index", "label", "predicted", "correct", "radius", "mu1_class", "mu1_cluster", "mu2_class", "mu2_cluster"],
        reports.iter().map(|r| {
            vec![
                r.index.to_string(),
                r.label.to_string(),
                r.predicted_class.to_string(),
                r.correct.to_string(),
                format!("{:?}", r.radius),
                r.mu1.class.to_string(),
                r.mu1.cluster.to_string(),
                r.mu2.class.to_string(),
                r.mu2.cluster.to_string(),
            ]
        }),
    )?;
    m.outputs = vec!["curve.csv".into(), "certificates.csv".into()];
    let clean = reports.iter().filter(|r| r.correct).count() as f64 / reports.len() as f64;
    m.results = serde_json::json!({ "auc": curve.auc, "lipschitz": l, "clean_accuracy": clean, "n": reports.len() });
    m.write(out)?;
    println!("AUC {:.6}, clean accuracy {clean:.4}, L {l:.4}", curve.auc);
    Ok(EXIT_OK)
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::CeVsLabel => "ce_vs_label",
        Objective::CeVsCleanProbs => "ce_vs_clean_probs",
        Objective::MagnetLoss => "magnet_loss",
    }
}

fn cmd_attack(artifact: &Path, data: &Path, config: &Path, out: &Path) -> Result<u8> {
    let text = fs::read_to_string(config)?;
    let mut file: AttackFile = toml::from_str(&text).map_err(|e| Error::Config(e.message().to_string()))?;
    if let Some(seed) = seed_override()? {
        file.seed = seed;
    }
    if file.epsilons.is_empty() || file.iterations.is_empty() || file.objectives.is_empty() {
        return Err(Error::Config("epsilons, iterations and objectives must be non-empty".into()));
    }
    let mut eps = file.epsilons.clone();
    eps.sort_by(f64::total_cmp);
    let (a, d) = load_eval(artifact, data)?;
    let model = a.clusters()?;
    ensure_dir(out)?;
    let mut m = RunManifest::new("attack", file.seed, serde_json::to_value(&file)?);
    let t = Timer::start();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for obj in file.objectives() {
        for &k in &file.iterations {
            let base = AttackConfig {
                norm: file.norm,
                epsilon: eps[0],
                eta: file.eta,
                iterations: k,
                restarts: file.restarts,
                objective: obj,
                seed: file.seed,
            };
            base.validate().map_err(|e| Error::Config(e.to_string()))?;
            for r in robust_accuracy_sweep(&a.net, model, &a.magnet, &d, &base, &eps)? {
                let norm = if file.norm == Norm::Linf { "linf" } else { "l2" };
                rows.push(vec![
                    norm.to_string(),
                    format!("{:?}", r.epsilon),
                    k.to_string(),
                    file.restarts.to_string(),
                    objective_name(obj).to_string(),
                    format!("{:?}", r.accuracy),
                    r.mean_iterations_to_flip.map(|v| format!("{v:?}")).unwrap_or_default(),
                ]);
                println!(
                    "{norm} eps={} k={k} R={} {}: robust accuracy {:.4}",
                    r.epsilon,
                    file.restarts,
                    objective_name(obj),
                    r.accuracy
                );
                summary.push(serde_json::json!({
                    "norm": norm, "epsilon": r.epsilon, "iterations": k, "restarts": file.restarts,
                    "objective": objective_name(obj), "robust_accuracy": r.accuracy,
                    "mean_iterations_to_flip": r.mean_iterations_to_flip, "seed": file.seed,
                }));
            }
        }
    }
    t.record(&mut m, "attack");
    write_csv(
        &out.join("attack.csv"),
        &["norm", "epsilon", "iterations", "restarts", "objective", "robust_accuracy", "mean_iterations_to_flip"],
        rows,
    )?;
    m.outputs = vec!["attack.csv".into()];
    m.results = serde_json::Value::Array(summary);
    m.write(out)?;
    Ok(EXIT_OK)
}

fn cmd_falsify(artifact: &Path, data: &Path, lipschitz: Option<f64>, scale: f64, settings: FalsifyConfig, out: &Path) -> Result<u8> {
    let (a, d) = load_eval(artifact, data)?;
    let model = a.clusters()?;
    let l = lipschitz_for(&a, lipschitz, scale)?;
    ensure_dir(out)?;
    let mut m = RunManifest::new(
        "falsify",
        settings.seed,
        serde_json::json!({
            "artifact": artifact, "data": data, "lipschitz_override": lipschitz,
            "lipschitz_scale": scale, "settings": settings,
        }),
    );
    let t = Timer::start();
    let report = attack_falsification(&a.net, model, &a.magnet, &d, l, &settings)?;
    t.record(&mut m, "falsify");
    fs::write(out.join("falsify.json"), serde_json::to_string_pretty(&report)?)?;
    m.outputs = vec!["falsify.json".into()];
    m.results = serde_json::to_value(&report)?;
    m.write(out)?;
    println!("tested {}, skipped {}, violations {}", report.tested, report.skipped_zero_radius, report.violations);
    Ok(if report.violations > 0 { EXIT_UNSOUND } else { EXIT_OK })
}

fn cmd_ablate(config: &Path, out: &Path) -> Result<u8> {
    let cfg = RunConfig::load(config)?;
    ensure_dir(out)?;
    let mut m = RunManifest::new("ablate-ce", cfg.seed, serde_json::to_value(&cfg)?);
    let t = Timer::start();
    let (train_set, test_set) = cfg.datasets()?;
    let report = ce_head_cluster_ablation(&train_set, &test_set, &cfg.arch, &cfg.train)?;
    t.record(&mut m, "ablate");
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    m.outputs = vec!["ablation.json".into()];
    m.results = serde_json::to_value(&report)?;
    m.write(out)?;
    println!("CE head accuracy {:.4}, nearest-cluster accuracy {:.4}", report.ce_accuracy, report.cluster_accuracy);
    Ok(EXIT_OK)
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<u8> {
    let mut text = String::from("| run | command | seed | results |\n|---|---|---|---|\n");
    for dir in runs {
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        text.push_str(&format!("| {} | {} | {} | {} |\n", dir.display(), m.command, m.seed, m.results));
    }
    match out {
        Some(p) => fs::write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(EXIT_OK)
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_OTHER,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    if let Some(n) = cli.threads {
        // Fails only if the global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let res = match cli.command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Certify { artifact, data, grid, lipschitz, out } => cmd_certify(&artifact, &data, &grid, lipschitz, &out),
        Command::Attack { artifact, data, config, out } => cmd_attack(&artifact, &data, &config, &out),
        Command::Falsify { artifact, data, lipschitz, lipschitz_scale, budget_fraction, iterations, restarts, seed, out } => {
            let seed = match seed_override() {
                Ok(s) => s.unwrap_or(seed),
                Err(e) => return report_error(&e),
            };
            let settings = FalsifyConfig { budget_fraction, iterations, restarts, step_multiplier: 2.5, seed };
            cmd_falsify(&artifact, &data, lipschitz, lipschitz_scale, settings, &out)
        }
        Command::AblateCe { config, out } => cmd_ablate(&config, &out),
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()),
    };
    match res {
        Ok(code) => code,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> u8 {
    eprintln!("error: {e}");
    exit_code(e)
}

pub fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}

//! Experiment drivers behind the command-line interface.
//!
//! Every command reads an [`ExperimentConfig`], runs deterministically for
//! each requested seed and writes CSV files into the output directory. With
//! more than one seed, each seed gets its own `seed<N>` subdirectory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::metrics::metrics_csv;
use crate::data::{load_image_dir, noisy_copies, synth_blobs, train_val_split, BlobCount, MetricReport, SegSample};
use crate::error::{Error, Result};
use crate::gradcheck::{self, CheckResult, Fault};
use crate::solvers::{estimate_convergence_order, TestProblem};
use crate::unet::{epochs_to_tau, evaluate, train_split, BlockKind, ContinuousUNet, TrainConfig, TrainLog, UNetConfig};
use crate::SolverKind;

/// Dice level that counts as converged in block comparisons.
pub const TAU: f64 = 0.85;

/// Noise levels swept by default.
pub const DEFAULT_SIGMAS: [f64; 4] = [0.0, 0.2, 0.4, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of synthetic samples, split 80/20 into train and validation.
    pub n: usize,
    /// Square image side; a multiple of 16.
    pub size: usize,
    pub blobs: BlobCount,
    /// Generator seed; `None` follows the run seed.
    pub seed: Option<u64>,
    /// Real images instead of synthetic blobs. Needs `masks` as well.
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 250,
            size: 64,
            blobs: BlobCount::default(),
            seed: None,
            images: None,
            masks: None,
        }
    }
}

impl DataConfig {
    pub fn load(&self, run_seed: u64) -> Result<Vec<SegSample>> {
        match (&self.images, &self.masks) {
            (Some(images), Some(masks)) => load_image_dir(images, masks, self.size),
            (None, None) => synth_blobs(self.n, self.size, self.blobs, self.seed.unwrap_or(run_seed)),
            _ => Err(Error::Config("data.images and data.masks must be given together".into())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.train.validate()?;
        if self.data.size == 0 || self.data.size % self.unet.divisor() != 0 {
            return Err(Error::Config(format!(
                "data.size {} must be a positive multiple of {}",
                self.data.size,
                self.unet.divisor()
            )));
        }
        Ok(())
    }

    /// The configuration with every seed replaced by `seed`.
    pub fn for_seed(&self, seed: u64) -> ExperimentConfig {
        let mut cfg = self.clone();
        cfg.train.seed = seed;
        cfg
    }

    /// Train and validation splits for the current train seed.
    pub fn splits(&self) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
        let data = self.data.load(self.train.seed)?;
        if data.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        Ok(train_val_split(&data, self.train.seed))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    SolverBench,
    Train,
    Eval { checkpoint: PathBuf },
    NoiseBench { checkpoint: PathBuf, sigmas: Vec<f64> },
    BlockCompare { kinds: Vec<BlockKind> },
    Gradcheck { fault: Option<Fault> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    /// Empty means the seed in the config file.
    pub seeds: Vec<u64>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map(|e| e.to_string()).unwrap_or_default()
}

/// `solver,problem,fitted_order` over both canonical problems.
pub fn solver_bench() -> Result<String> {
    let h: Vec<f64> = (3..=9).map(|k| 2f64.powi(-k)).collect();
    let mut out = String::from("solver,problem,fitted_order\n");
    for kind in SolverKind::ALL {
        for problem in TestProblem::canonical() {
            let r = estimate_convergence_order(&problem, kind, &h)?;
            out.push_str(&format!("{kind},{},{}\n", problem.name, r.fitted_order));
        }
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub net: ContinuousUNet,
    pub log: TrainLog,
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (tr, va) = cfg.splits()?;
    let mut net = ContinuousUNet::build(&cfg.unet, cfg.train.seed)?;
    let log = train_split(&mut net, &tr, &va, &cfg.train)?;
    Ok(TrainOutcome { net, log })
}

/// Per-sample metrics of `net` on the validation split.
pub fn eval(cfg: &ExperimentConfig, net: &ContinuousUNet) -> Result<Vec<MetricReport>> {
    let (_, va) = cfg.splits()?;
    evaluate(net, &va)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRow {
    pub sigma: f64,
    pub report: MetricReport,
}

/// Mean metrics on noisy copies of the validation split, one row per sigma.
pub fn noise_bench(cfg: &ExperimentConfig, net: &ContinuousUNet, sigmas: &[f64]) -> Result<Vec<NoiseRow>> {
    let (_, va) = cfg.splits()?;
    noise_rows(net, &va, sigmas, cfg.train.seed)
}

pub fn noise_rows(net: &ContinuousUNet, samples: &[SegSample], sigmas: &[f64], seed: u64) -> Result<Vec<NoiseRow>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let noisy = noisy_copies(samples, sigma, seed)?;
            Ok(NoiseRow {
                sigma,
                report: MetricReport::mean(&evaluate(net, &noisy)?),
            })
        })
        .collect()
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut out = String::from("sigma,dice,accuracy,ahd\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.sigma, r.report.dice, r.report.accuracy, r.report.ahd));
    }
    out
}

#[derive(Clone, Debug)]
pub struct BlockRow {
    pub kind: BlockKind,
    pub report: MetricReport,
    pub epochs_to_tau: Option<usize>,
    pub log: TrainLog,
    pub net: ContinuousUNet,
}

/// Train one net per kind on identical data and seeds. A single kind is allowed.
pub fn block_compare(cfg: &ExperimentConfig, kinds: &[BlockKind]) -> Result<Vec<BlockRow>> {
    if kinds.is_empty() {
        return Err(Error::Config("no block kinds given".into()));
    }
    let (tr, va) = cfg.splits()?;
    let tcfg = TrainConfig {
        stop_at_dice: None,
        ..cfg.train.clone()
    };
    kinds
        .iter()
        .map(|&kind| {
            let ucfg = UNetConfig {
                block_kind: kind,
                ..cfg.unet.clone()
            };
            let mut net = ContinuousUNet::build(&ucfg, tcfg.seed)?;
            let log = train_split(&mut net, &tr, &va, &tcfg)?;
            let report = MetricReport::mean(&evaluate(&net, &va)?);
            Ok(BlockRow {
                kind,
                report,
                epochs_to_tau: epochs_to_tau(&log, TAU),
                log,
                net,
            })
        })
        .collect()
}

/// `kind,dice,acc,ahd,epochs_to_tau`; the last field is empty when τ was never reached.
pub fn block_compare_csv(rows: &[BlockRow]) -> String {
    let mut out = String::from("kind,dice,acc,ahd,epochs_to_tau\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.kind,
            r.report.dice,
            r.report.accuracy,
            r.report.ahd,
            fmt_opt(r.epochs_to_tau)
        ));
    }
    out
}

/// `kind,epoch,loss,val_dice,lr` for every row's training log.
pub fn curves_csv(rows: &[BlockRow]) -> String {
    let mut out = String::from("kind,epoch,loss,val_dice,lr\n");
    for r in rows {
        for e in &r.log.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.kind, e.epoch, e.loss, e.val_dice, e.lr));
        }
    }
    out
}

fn seed_dir(spec: &ExperimentSpec, seed: u64) -> Result<PathBuf> {
    let dir = if spec.seeds.len() > 1 {
        spec.out.join(format!("seed{seed}"))
    } else {
        spec.out.clone()
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Without a config file the checkpoint's own architecture is used.
fn load_net(path: &Path, cfg: &ExperimentConfig, strict: bool) -> Result<ContinuousUNet> {
    if strict {
        ContinuousUNet::load_checked(path, &cfg.unet)
    } else {
        ContinuousUNet::load(path)
    }
}

/// Run `spec`, write its files and return a human-readable summary.
pub fn run(spec: &ExperimentSpec) -> Result<String> {
    fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let base = match &spec.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let seeds = if spec.seeds.is_empty() {
        vec![base.train.seed]
    } else {
        spec.seeds.clone()
    };
    let mut summary = String::new();
    match &spec.command {
        Command::SolverBench => {
            let csv = solver_bench()?;
            write(&spec.out.join("solver_orders.csv"), &csv)?;
            summary.push_str(&csv);
        }
        Command::Gradcheck { fault } => {
            let results = gradcheck::run_checks(*fault)?;
            write(&spec.out.join("gradcheck.csv"), &gradcheck::report_csv(&results))?;
            summary.push_str(&gradcheck_report(&results));
            let failed: Vec<String> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("{} (max relative error {:e})", r.name, r.max_rel_error))
                .collect();
            if !failed.is_empty() {
                return Err(Error::CheckFailed(format!("{}\n{}", failed.join(", "), summary)));
            }
        }
        cmd => {
            for &seed in &seeds {
                let cfg = base.for_seed(seed);
                let dir = seed_dir(spec, seed)?;
                summary.push_str(&run_seeded(cmd, &cfg, &dir, spec.config.is_some())?);
            }
        }
    }
    Ok(summary)
}

fn run_seeded(cmd: &Command, cfg: &ExperimentConfig, dir: &Path, strict: bool) -> Result<String> {
    let seed = cfg.train.seed;
    Ok(match cmd {
        Command::Train => {
            let out = train(cfg)?;
            out.net.save(&dir.join("checkpoint.bin"))?;
            write(&dir.join("train_log.csv"), &out.log.to_csv())?;
            match out.log.final_dice() {
                Some(d) => format!("seed {seed}: {} epochs, final val dice {d:.4}\n", out.log.rows.len()),
                None => format!("seed {seed}: no epochs run\n"),
            }
        }
        Command::Eval { checkpoint } => {
            let net = load_net(checkpoint, cfg, strict)?;
            let reports = eval(cfg, &net)?;
            write(&dir.join("metrics.csv"), &metrics_csv(&reports))?;
            let m = MetricReport::mean(&reports);
            format!("seed {seed}: dice {:.4} accuracy {:.4} ahd {:.4}\n", m.dice, m.accuracy, m.ahd)
        }
        Command::NoiseBench { checkpoint, sigmas } => {
            let net = load_net(checkpoint, cfg, strict)?;
            let csv = noise_csv(&noise_bench(cfg, &net, sigmas)?);
            write(&dir.join("noise.csv"), &csv)?;
            csv
        }
        Command::BlockCompare { kinds } => {
            let rows = block_compare(cfg, kinds)?;
            let csv = block_compare_csv(&rows);
            write(&dir.join("block_compare.csv"), &csv)?;
            write(&dir.join("curves.csv"), &curves_csv(&rows))?;
            csv
        }
        Command::SolverBench | Command::Gradcheck { .. } => unreachable!("handled without seeds"),
    })
}

pub fn gradcheck_report(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    results
        .iter()
        .map(|r| {
            format!(
                "{:<width$}  max_rel_error={:.3e}  tol={:.0e}  {}\n",
                r.name,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            )
        })
        .collect()
}

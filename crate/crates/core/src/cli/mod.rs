//! Command-line surface: dataset generation, training, reconstruction,
//! evaluation and the memory benchmark, all driven by one JSON config.

mod pgm;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mel::{compute_gradients, write_engine_report, BenchRow, Engine};
use crate::mri::{build_case, build_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Manifest, Split};
use crate::tensor::{melt, ComplexTensor};
use crate::train::{
    cg_sense, train_loop, zero_filled, CaseMetrics, MetricsReport, Prepared, TrainConfig, TrainOutcome, CG_SENSE_ITERS,
    CG_SENSE_LAMBDA,
};
use crate::unrolled::{load_checkpoint, modl_forward, UnrolledNetParams};

pub use pgm::{magnitude_pgm, write_magnitude_pgm};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const INVALID_MARKER: &str = "INVALID";
pub const BENCH_CSV: &str = "bench_memory.csv";
pub const BENCH_SUMMARY: &str = "bench_summary.json";
pub const METRICS_CASES_CSV: &str = "metrics_cases.csv";
pub const METRICS_SUMMARY_CSV: &str = "metrics_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub lambda: f64,
    pub iters: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            lambda: CG_SENSE_LAMBDA,
            iters: CG_SENSE_ITERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub unrolls: Vec<usize>,
    pub engines: Vec<Engine>,
    /// Byte budget as a multiple of the standard engine's peak at two unrolls.
    pub budget_factor: f64,
    pub shape: Vec<usize>,
    pub coils: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            unrolls: vec![1, 2, 4, 5, 6, 8, 10, 12],
            engines: vec![Engine::Standard, Engine::Mel],
            budget_factor: 2.0,
            shape: vec![32, 32],
            coils: 4,
            seed: 7,
        }
    }
}

/// Everything one experiment needs. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file and resolves its paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data_dir, &mut self.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Applies command-line overrides; returns one description per changed key.
    pub fn apply_overrides(&mut self, o: &Overrides) -> Vec<String> {
        let mut log = Vec::new();
        if let Some(seed) = o.seed {
            self.dataset.seed = seed;
            self.train.seed = seed;
            self.bench.seed = seed;
            log.push(format!("seed = {seed}"));
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
            log.push(format!("out = {}", out.display()));
        }
        if let Some(engine) = o.engine {
            self.train.engine = engine;
            self.bench.engines = vec![engine];
            log.push(format!("engine = {engine}"));
        }
        if let Some(n) = o.unrolls {
            self.train.net.n_unrolls = n;
            self.bench.unrolls = vec![n];
            log.push(format!("unrolls = {n}"));
        }
        log
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.bench.unrolls.is_empty() || self.bench.unrolls.contains(&0) {
            return Err(Error::InvalidParameter(
                "bench unroll list must be non-empty and positive".into(),
            ));
        }
        if self.bench.engines.is_empty() {
            return Err(Error::InvalidParameter("bench engine list is empty".into()));
        }
        if !(self.bench.budget_factor > 0.0) {
            return Err(Error::InvalidParameter("budget_factor must be positive".into()));
        }
        if !(self.baseline.lambda >= 0.0) || self.baseline.iters == 0 {
            return Err(Error::InvalidParameter(
                "baseline needs lambda >= 0 and iters >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub engine: Option<Engine>,
    pub unrolls: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[value(name = "zero_filled")]
    ZeroFilled,
    #[value(name = "cg_sense")]
    CgSense,
    #[value(name = "modl")]
    Modl,
    #[value(name = "ground_truth")]
    GroundTruth,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroFilled => "zero_filled",
            Method::CgSense => "cg_sense",
            Method::Modl => "modl",
            Method::GroundTruth => "ground_truth",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "modl-mel",
    version,
    about = "Unrolled MRI reconstruction with memory-efficient backpropagation"
)]
pub struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (the dataset directory for gen-data).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub engine: Option<Engine>,
    #[arg(long, global = true)]
    pub unrolls: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and persist a synthetic dataset.
    GenData,
    /// Train an unrolled network and keep the best-validation checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruct one split (or one case) with a method.
    Recon {
        #[arg(long, value_enum, default_value = "modl")]
        method: Method,
        /// Checkpoint directory; defaults to `<out_dir>/best`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        case: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score reconstructions against ground truth.
    Eval {
        /// Directory holding one subdirectory per method; defaults to `<out_dir>/recon`.
        #[arg(long)]
        recons: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',')]
        methods: Vec<Method>,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Peak tape bytes and wall time per (engine, unrolls).
    BenchMemory {
        #[arg(long, value_delimiter = ',')]
        unroll_list: Vec<usize>,
        #[arg(long)]
        budget_factor: Option<f64>,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            engine: self.engine,
            unrolls: self.unrolls,
        }
    }

    /// Loads the config (or defaults relative to the working directory) and
    /// applies the global flags, logging each override to stderr.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut o = self.overrides();
        if matches!(self.command, Command::GenData) {
            // For gen-data the output directory is the dataset itself.
            if let Some(out) = o.out.take() {
                cfg.data_dir = out.clone();
                eprintln!("override: data_dir = {}", out.display());
            }
        }
        for line in cfg.apply_overrides(&o) {
            eprintln!("override: {line}");
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one parsed command. On failure an `INVALID` marker holding the error
/// is left in the output directory.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    let out = match cli.command {
        Command::GenData => cfg.data_dir.clone(),
        _ => cfg.out_dir.clone(),
    };
    let marker = out.join(INVALID_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = dispatch(cli, &cfg);
    if let Err(e) = &result {
        if out.is_dir() {
            let _ = fs::write(&marker, format!("{e}\n"));
        }
    }
    result
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let manifest = cmd_gen_data(cfg)?;
            for c in &manifest.cases {
                println!(
                    "{} {:>5} R = {:.3}",
                    c.dir,
                    c.split.to_string(),
                    c.realized_acceleration
                );
            }
            println!("wrote {} cases to {}", manifest.cases.len(), cfg.data_dir.display());
        }
        Command::Train { data } => {
            let out = cmd_train(cfg, data.as_deref())?;
            for r in &out.log {
                println!(
                    "epoch {:>3} step {:>5} loss {:.5} val_psnr {} ({:.1}s)",
                    r.epoch,
                    r.step,
                    r.train_loss,
                    r.val_psnr.map_or("-".into(), |p| format!("{p:.3}")),
                    r.epoch_seconds
                );
            }
            println!("best epoch {} in {}", out.best_epoch, cfg.out_dir.display());
        }
        Command::Recon {
            method,
            checkpoint,
            split,
            case,
            data,
        } => {
            let files = cmd_recon(cfg, *method, checkpoint.as_deref(), *split, *case, data.as_deref())?;
            println!("wrote {} reconstructions", files.len());
        }
        Command::Eval {
            recons,
            methods,
            split,
            data,
        } => {
            let report = cmd_eval(cfg, recons.as_deref(), methods, *split, data.as_deref())?;
            for a in report.aggregate() {
                println!(
                    "{:<13} n={} psnr {:.3} ± {:.3} dB  ssim {:.4} ± {:.4}",
                    a.method, a.n, a.psnr_mean, a.psnr_std, a.ssim_mean, a.ssim_std
                );
            }
        }
        Command::BenchMemory {
            unroll_list,
            budget_factor,
        } => {
            let mut cfg = cfg.clone();
            if !unroll_list.is_empty() {
                cfg.bench.unrolls = unroll_list.clone();
            }
            if let Some(f) = budget_factor {
                cfg.bench.budget_factor = *f;
            }
            cfg.validate()?;
            let summary = cmd_bench_memory(&cfg)?;
            print!("{}", summary.render());
            summary.check()?;
        }
    }
    Ok(())
}

fn data_dir(cfg: &RunConfig, data: Option<&Path>) -> PathBuf {
    data.map_or_else(|| cfg.data_dir.clone(), Path::to_path_buf)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Manifest> {
    let ds = build_dataset(&cfg.dataset)?;
    save_dataset(&ds, &cfg.data_dir)
}

fn check_architecture(params_rank: usize, ds: &Dataset) -> Result<()> {
    let image_rank = ds.config.shape.len();
    if params_rank != image_rank {
        return Err(Error::InvalidParameter(format!(
            "architecture mismatch: regularizer has {params_rank} spatial axes, images have {image_rank}"
        )));
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, data: Option<&Path>) -> Result<TrainOutcome> {
    let ds = load_dataset(data_dir(cfg, data))?;
    check_architecture(cfg.train.net.regularizer.spatial_rank, &ds)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(RUN_CONFIG_FILE);
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    train_loop(cfg.train, &ds, Some(&cfg.out_dir))
}

/// Writes `<out_dir>/recon/<method>/case_NNNN.{melt,pgm}` and returns the MELT paths.
pub fn cmd_recon(
    cfg: &RunConfig,
    method: Method,
    checkpoint: Option<&Path>,
    split: Split,
    case: Option<usize>,
    data: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(data_dir(cfg, data))?;
    let params: Option<UnrolledNetParams> = match method {
        Method::Modl => {
            let dir = checkpoint.map_or_else(
                || cfg.out_dir.join(crate::train::BEST_CHECKPOINT_DIR),
                Path::to_path_buf,
            );
            let (p, _) = load_checkpoint(&dir)?;
            check_architecture(p.config.regularizer.spatial_rank, &ds)?;
            Some(p)
        }
        _ => None,
    };
    let cases: Vec<_> = match case {
        Some(id) => {
            let c = ds
                .cases
                .iter()
                .find(|c| c.id == id)
                .ok_or_else(|| Error::InvalidParameter(format!("no case {id} in dataset")))?;
            vec![c]
        }
        None => ds.split(split).collect(),
    };
    let dir = cfg.out_dir.join("recon").join(method.name());
    create_dir(&dir)?;
    let mut written = Vec::new();
    for c in cases {
        let p = Prepared::new(c)?;
        let x = match method {
            Method::ZeroFilled => zero_filled(&p.op, &p.y)?,
            Method::CgSense => cg_sense(&p.op, &p.y, cfg.baseline.lambda, cfg.baseline.iters)?,
            Method::Modl => modl_forward(params.as_ref().expect("loaded above"), &p.op, &p.y)?,
            Method::GroundTruth => p.x.clone(),
        };
        let path = dir.join(format!("{}.melt", c.dir_name()));
        melt::write_complex(&path, &x)?;
        write_magnitude_pgm(dir.join(format!("{}.pgm", c.dir_name())), &x)?;
        written.push(path);
    }
    Ok(written)
}

fn read_recon(dir: &Path, case_dir: &str, reference: &ComplexTensor) -> Result<ComplexTensor> {
    let x = melt::read_complex(dir.join(format!("{case_dir}.melt")))?;
    if x.shape() != reference.shape() {
        return Err(Error::shape(reference.shape(), x.shape()));
    }
    Ok(x)
}

/// Scores every listed method (or every method directory found) on `split`;
/// writes per-case and aggregate CSVs into the output directory.
pub fn cmd_eval(
    cfg: &RunConfig,
    recons: Option<&Path>,
    methods: &[Method],
    split: Split,
    data: Option<&Path>,
) -> Result<MetricsReport> {
    let ds = load_dataset(data_dir(cfg, data))?;
    let root = recons.map_or_else(|| cfg.out_dir.join("recon"), Path::to_path_buf);
    let methods: Vec<Method> = if methods.is_empty() {
        Method::value_variants()
            .iter()
            .copied()
            .filter(|m| root.join(m.name()).is_dir())
            .collect()
    } else {
        methods.to_vec()
    };
    if methods.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no reconstructions under {}",
            root.display()
        )));
    }
    let mut report = MetricsReport::default();
    for m in methods {
        let dir = root.join(m.name());
        for c in ds.split(split) {
            let x = read_recon(&dir, &c.dir_name(), &c.x)?;
            report.push(CaseMetrics::compute(m.name(), c.id, &x, &c.x)?);
        }
    }
    create_dir(&cfg.out_dir)?;
    let cases = cfg.out_dir.join(METRICS_CASES_CSV);
    report.write_cases(fs::File::create(&cases).map_err(|e| Error::io(&cases, e))?)?;
    let agg = cfg.out_dir.join(METRICS_SUMMARY_CSV);
    report.write_aggregate(fs::File::create(&agg).map_err(|e| Error::io(&agg, e))?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    pub budget_bytes: usize,
    pub budget_factor: f64,
    /// Largest listed N whose peak, and that of every smaller listed N, fits the budget.
    pub max_feasible: BTreeMap<String, Option<usize>>,
    pub mel_flat: Option<bool>,
    pub standard_increasing: Option<bool>,
}

impl BenchSummary {
    pub fn max_feasible_for(&self, engine: Engine) -> Option<usize> {
        self.max_feasible.get(&engine.to_string()).copied().flatten()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "budget {} bytes ({}x standard peak at N=2)\n",
            self.budget_bytes, self.budget_factor
        ));
        for (engine, n) in &self.max_feasible {
            let n = n.map_or("none".to_string(), |n| n.to_string());
            s.push_str(&format!("max feasible unrolls [{engine}]: {n}\n"));
        }
        if let Some(f) = self.mel_flat {
            s.push_str(&format!("mel peak flat in N (max/min <= 1.1): {f}\n"));
        }
        if let Some(f) = self.standard_increasing {
            s.push_str(&format!("standard peak strictly increasing in N: {f}\n"));
        }
        s
    }

    /// Fails when the measured rows contradict flat MEL or growing standard memory.
    pub fn check(&self) -> Result<()> {
        if self.mel_flat == Some(false) || self.standard_increasing == Some(false) {
            return Err(Error::InvalidParameter("memory benchmark shape check failed".into()));
        }
        Ok(())
    }
}

fn bench_case(cfg: &RunConfig) -> Result<Prepared> {
    let dc = DatasetConfig {
        shape: cfg.bench.shape.clone(),
        coils: cfg.bench.coils,
        seed: cfg.bench.seed,
        ..cfg.dataset.clone()
    };
    Prepared::new(&build_case(&dc, 0, Split::Train)?)
}

fn bench_one(cfg: &RunConfig, case: &Prepared, engine: Engine, n: usize) -> Result<BenchRow> {
    let mut net = cfg.train.net;
    net.n_unrolls = n;
    let params = UnrolledNetParams::random(net, cfg.bench.seed)?;
    let r = compute_gradients(engine, &params, &case.op, &case.y, &case.x, &cfg.train.mel)?;
    Ok(BenchRow::from_result(&r, n))
}

/// One gradient evaluation per (engine, N) on a fixed random instance.
pub fn cmd_bench_memory(cfg: &RunConfig) -> Result<BenchSummary> {
    let case = bench_case(cfg)?;
    let mut unrolls = cfg.bench.unrolls.clone();
    unrolls.sort_unstable();
    unrolls.dedup();
    let mut rows = Vec::new();
    for &engine in &cfg.bench.engines {
        for &n in &unrolls {
            rows.push(bench_one(cfg, &case, engine, n)?);
        }
    }
    let reference = match rows
        .iter()
        .find(|r| r.engine == Engine::Standard.to_string() && r.n_unrolls == 2)
    {
        Some(r) => r.peak_bytes,
        None => bench_one(cfg, &case, Engine::Standard, 2)?.peak_bytes,
    };
    let budget = (cfg.bench.budget_factor * reference as f64).floor() as usize;
    let mut max_feasible = BTreeMap::new();
    for &engine in &cfg.bench.engines {
        let mut best = None;
        for r in rows.iter().filter(|r| r.engine == engine.to_string()) {
            if r.peak_bytes > budget {
                break;
            }
            best = Some(r.n_unrolls);
        }
        max_feasible.insert(engine.to_string(), best);
    }
    let peaks = |e: Engine| -> Vec<usize> {
        rows.iter()
            .filter(|r| r.engine == e.to_string())
            .map(|r| r.peak_bytes)
            .collect()
    };
    let mel = peaks(Engine::Mel);
    let std = peaks(Engine::Standard);
    let mel_flat = (mel.len() >= 2).then(|| {
        let (lo, hi) = (mel.iter().min().unwrap(), mel.iter().max().unwrap());
        *hi as f64 <= 1.1 * *lo as f64
    });
    let standard_increasing = (std.len() >= 2).then(|| std.windows(2).all(|w| w[1] > w[0]));
    let summary = BenchSummary {
        rows,
        budget_bytes: budget,
        budget_factor: cfg.bench.budget_factor,
        max_feasible,
        mel_flat,
        standard_increasing,
    };
    create_dir(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join(BENCH_CSV);
    write_engine_report(
        &summary.rows,
        fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?,
    )?;
    let json_path = cfg.out_dir.join(BENCH_SUMMARY);
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(summary)
}

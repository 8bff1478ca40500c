use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::metrics::{psnr, ssim};
use crate::error::{Error, Result};
use crate::mel::{compute_gradients, Engine, MelConfig};
use crate::mri::{Case, Dataset, EncodingOperator, Split};
use crate::tensor::ComplexTensor;
use crate::unrolled::{modl_forward, save_checkpoint, NetConfig, ParamGrads, UnrolledNetParams};

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT_DIR: &str = "best";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub engine: Engine,
    pub adam: AdamConfig,
    pub net: NetConfig,
    pub mel: MelConfig,
    /// Validate after every `val_every`-th epoch and after the last one.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 2,
            seed: 0,
            engine: Engine::Standard,
            adam: AdamConfig::default(),
            net: NetConfig::default(),
            mel: MelConfig::default(),
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 || self.net.n_unrolls == 0 {
            return Err(Error::InvalidParameter(
                "epochs, batch_size, val_every and n_unrolls must be positive".into(),
            ));
        }
        self.net.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub engine: Engine,
    pub train_loss: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub peak_bytes: usize,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl Validation {
    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len() as f64
    }
}

/// A case with its encoding operator built once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: usize,
    pub op: EncodingOperator,
    pub y: ComplexTensor,
    pub x: ComplexTensor,
}

impl Prepared {
    pub fn new(case: &Case) -> Result<Self> {
        Ok(Prepared {
            id: case.id,
            op: case.operator()?,
            y: case.y.clone(),
            x: case.x.clone(),
        })
    }

    pub fn split(ds: &Dataset, split: Split) -> Result<Vec<Self>> {
        ds.split(split).map(Prepared::new).collect()
    }
}

pub fn reconstruct(params: &UnrolledNetParams, case: &Prepared) -> Result<ComplexTensor> {
    modl_forward(params, &case.op, &case.y)
}

pub fn validate(params: &UnrolledNetParams, cases: &[Prepared]) -> Result<Validation> {
    if cases.is_empty() {
        return Err(Error::InvalidParameter("no validation cases".into()));
    }
    let mut out = Validation {
        psnr: Vec::new(),
        ssim: Vec::new(),
    };
    for c in cases {
        let x = reconstruct(params, c)?;
        out.psnr.push(psnr(&x, &c.x)?);
        out.ssim.push(ssim(&x, &c.x)?);
    }
    Ok(out)
}

/// Parameters, optimizer state and shuffling stream of one training run.
/// The engine can be swapped between steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: UnrolledNetParams,
    pub adam: AdamState,
    pub step: u64,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = UnrolledNetParams::random(config.net, config.seed)?;
        Self::from_params(config, params)
    }

    /// Starts from given weights with fresh optimizer moments.
    pub fn from_params(config: TrainConfig, params: UnrolledNetParams) -> Result<Self> {
        config.validate()?;
        if params.config != config.net {
            return Err(Error::InvalidParameter(
                "parameter architecture differs from the training config".into(),
            ));
        }
        let adam = AdamState::new(&params, config.adam)?;
        Ok(Trainer {
            config,
            params,
            adam,
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5_4A1E),
        })
    }

    pub fn engine(&self) -> Engine {
        self.config.engine
    }

    pub fn set_engine(&mut self, engine: Engine) {
        self.config.engine = engine;
    }

    /// Averages the gradients over `batch` and takes one Adam step.
    pub fn train_step(&mut self, batch: &[&Prepared]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let mut total = ParamGrads::zeros_like(&self.params)?;
        let mut loss = 0.0;
        let mut peak = 0;
        for c in batch {
            let r = compute_gradients(self.config.engine, &self.params, &c.op, &c.y, &c.x, &self.config.mel)?;
            total.add_assign(&r.grads)?;
            loss += r.loss;
            peak = peak.max(r.peak_tape_bytes);
        }
        let inv = 1.0 / batch.len() as f64;
        for g in total.regs.iter_mut().flatten() {
            g.scale_assign(inv);
        }
        self.adam.step(&mut self.params, &total)?;
        self.step += 1;
        Ok(StepReport {
            loss: loss * inv,
            peak_bytes: peak,
        })
    }

    /// One shuffled pass over `train`; validates when the cadence asks for it.
    pub fn run_epoch(&mut self, train: &[Prepared], val: &[Prepared]) -> Result<LogRow> {
        if train.is_empty() {
            return Err(Error::InvalidParameter("no training cases".into()));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut peak = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let r = self.train_step(&batch)?;
            loss_sum += r.loss * batch.len() as f64;
            peak = peak.max(r.peak_bytes);
        }
        self.epoch += 1;
        let due = self.epoch % self.config.val_every == 0 || self.epoch == self.config.epochs;
        let val = if due && !val.is_empty() {
            Some(validate(&self.params, val)?)
        } else {
            None
        };
        Ok(LogRow {
            epoch: self.epoch,
            step: self.step,
            engine: self.config.engine,
            train_loss: loss_sum / train.len() as f64,
            val_psnr: val.as_ref().map(Validation::mean_psnr),
            val_ssim: val.as_ref().map(Validation::mean_ssim),
            peak_bytes: peak,
            epoch_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// Weights with the highest mean validation pSNR (final weights without validation data).
    pub best: UnrolledNetParams,
    pub best_epoch: usize,
    pub best_val_psnr: Option<f64>,
    pub last: UnrolledNetParams,
}

pub fn write_log<W: std::io::Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Trains on the train split and keeps the best-validation weights. With
/// `out_dir`, appends to the log CSV after every epoch and rewrites the best
/// checkpoint whenever validation improves.
pub fn train_loop(config: TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let train = Prepared::split(dataset, Split::Train)?;
    let val = Prepared::split(dataset, Split::Val)?;
    let mut trainer = Trainer::new(config)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::new();
    let mut best = trainer.params.clone();
    let mut best_epoch = 0;
    let mut best_val: Option<f64> = None;
    for _ in 0..config.epochs {
        let row = trainer.run_epoch(&train, &val)?;
        if let Some(p) = row.val_psnr {
            if best_val.is_none_or(|b| p > b) {
                best_val = Some(p);
                best_epoch = row.epoch;
                best = trainer.params.clone();
                if let Some(dir) = out_dir {
                    save_checkpoint(dir.join(BEST_CHECKPOINT_DIR), &best, config.seed, trainer.step)?;
                }
            }
        }
        log.push(row);
        if let Some(dir) = out_dir {
            let path = dir.join(LOG_FILE);
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_log(&log, f)?;
        }
    }
    if best_val.is_none() {
        best = trainer.params.clone();
        best_epoch = trainer.epoch;
        if let Some(dir) = out_dir {
            save_checkpoint(dir.join(BEST_CHECKPOINT_DIR), &best, config.seed, trainer.step)?;
        }
    }
    Ok(TrainOutcome {
        log,
        best,
        best_epoch,
        best_val_psnr: best_val,
        last: trainer.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::{build_dataset, DatasetConfig};
    use crate::unrolled::RegularizerConfig;

    fn small_dataset(n_train: usize) -> Dataset {
        build_dataset(&DatasetConfig {
            shape: vec![16, 16],
            coils: 2,
            calib: 4,
            n_train,
            n_val: 2,
            n_test: 1,
            seed: 11,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    fn small_config(engine: Engine) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            engine,
            net: NetConfig {
                regularizer: RegularizerConfig {
                    layers: 3,
                    channels: 4,
                    ..RegularizerConfig::default()
                },
                n_unrolls: 3,
                ..NetConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_logs_one_row() {
        let ds = small_dataset(4);
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(small_config(Engine::Standard), &ds, Some(dir.path())).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].train_loss.is_finite());
        assert_eq!(out.log[0].step, 2);
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,step,engine,train_loss,val_psnr,val_ssim,peak_bytes,epoch_seconds"
        );
        assert!(dir
            .path()
            .join(BEST_CHECKPOINT_DIR)
            .join(crate::unrolled::CHECKPOINT_FILE)
            .exists());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_dataset(4);
        let a = train_loop(small_config(Engine::Standard), &ds, None).unwrap();
        let b = train_loop(small_config(Engine::Standard), &ds, None).unwrap();
        assert_eq!(a.last, b.last);
        assert_eq!(a.log[0].train_loss, b.log[0].train_loss);
    }

    #[test]
    fn twin_engines_agree_over_three_steps() {
        let ds = small_dataset(6);
        let train = Prepared::split(&ds, Split::Train).unwrap();
        let mut cfg = small_config(Engine::Standard);
        cfg.mel.invert_tol = 1e-12;
        let mut s = Trainer::new(cfg).unwrap();
        cfg.engine = Engine::Mel;
        let mut m = Trainer::new(cfg).unwrap();
        for k in 0..3 {
            let batch = [&train[2 * k], &train[2 * k + 1]];
            let ls = s.train_step(&batch).unwrap().loss;
            let lm = m.train_step(&batch).unwrap().loss;
            assert!((ls - lm).abs() <= 1e-10 * ls.abs());
        }
        let mut worst: f64 = 0.0;
        for (a, b) in m.params.regs[0].tensors().iter().zip(s.params.regs[0].tensors()) {
            let scale = b.max_abs().max(1e-300);
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs() / scale);
            }
        }
        assert!(worst <= 1e-5, "weight discrepancy {worst:e}");
    }

    #[test]
    fn rejects_zero_epochs() {
        let mut cfg = small_config(Engine::Mel);
        cfg.epochs = 0;
        assert!(Trainer::new(cfg).is_err());
    }
}

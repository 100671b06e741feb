//! SI-SNR objective, permutation-invariant training and the epoch loop.

mod loss;
mod optim;

pub use loss::{
    best_permutation, score_matrix, si_snr, si_snr_cap, snr, upit_loss, upit_loss_var, PermutationResult, MAX_SOURCES,
    SI_SNR_EPS,
};
pub use optim::{clip_grad_norm, global_norm, lr_at, Adam, AdamConfig, Parameters};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_model, Metadata};
use crate::data::{derive_seed, MixtureExample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::numerics::{Graph, Tensor};
use crate::par::{self, Mode};
use crate::tasnet::{separate, SeparatorModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub segment_seconds: f64,
    pub lr_init: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub clip_norm: f64,
    pub patience: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            segment_seconds: 4.0,
            lr_init: 1e-3,
            lr_decay: 0.98,
            decay_every: 2,
            clip_norm: 5.0,
            patience: 10,
            adam: AdamConfig::default(),
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr_init, self.lr_decay, self.decay_every, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("segment_seconds", self.segment_seconds),
            ("lr_init", self.lr_init),
            ("lr_decay", self.lr_decay),
            ("decay_every", self.decay_every as f64),
            ("clip_norm", self.clip_norm),
            ("patience", self.patience as f64),
            ("adam_eps", self.adam.eps),
            ("batch_size", self.batch_size as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam.beta1), ("adam_beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Loss, permutation and parameter gradients for one example.
#[derive(Debug, Clone)]
pub struct ExampleGradients {
    pub loss: f64,
    pub perm: PermutationResult,
    /// In [`SeparatorModel::visit`] order.
    pub grads: Vec<Tensor<f32>>,
}

/// Forward and backward pass for a single example. Padding beyond
/// `valid_len` is excluded from the loss.
pub fn example_gradients(model: &SeparatorModel<f32>, ex: &MixtureExample, mode: Mode, check_finite: bool) -> Result<ExampleGradients> {
    let mut g = Graph::new().with_mode(mode).with_finite_checks(check_finite);
    let vars = model.bind(&mut g, true);
    let x = g.constant(ex.mixture.clone());
    let y = separate(&mut g, x, model, &vars)?;
    let r = g.constant(ex.sources.clone());
    let (loss, perm) = upit_loss_var(&mut g, y, r, Some(ex.valid_len))?;
    let loss_value = g.value(loss).item() as f64;
    let mut grads = g.backward(loss)?;
    let grads = vars
        .leaves()
        .into_iter()
        .map(|v| grads.take(v).ok_or_else(|| Error::Backward("parameter without gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExampleGradients {
        loss: loss_value,
        perm,
        grads,
    })
}

/// Mean loss and mean gradients over a batch. Examples run in parallel
/// under [`Mode::Parallel`]; the reduction order is fixed, so the result
/// does not depend on the mode.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Tensor<f32>>,
}

pub fn batch_gradients(model: &SeparatorModel<f32>, batch: &[&MixtureExample], mode: Mode, check_finite: bool) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Empty { op: "batch_gradients" });
    }
    let per = par::map(mode, batch, |ex| example_gradients(model, ex, mode, check_finite));
    let mut loss = 0.0;
    let mut sum: Option<Vec<Tensor<f32>>> = None;
    for r in per {
        let r = r?;
        loss += r.loss;
        match &mut sum {
            None => sum = Some(r.grads),
            Some(acc) => acc.iter_mut().zip(&r.grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let mut grads = sum.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f32;
    grads.iter_mut().for_each(|g| g.scale_in_place(inv));
    Ok(BatchGradients {
        loss: loss / batch.len() as f64,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: SeparatorModel<f32>,
    pub config: TrainConfig,
    pub mode: Mode,
    adam: Adam,
}

impl Trainer {
    pub fn new(model: SeparatorModel<f32>, config: TrainConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            adam: Adam::new(config.adam),
            config,
            mode,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// One optimizer update on `batch` at learning rate `lr`. A non-finite
    /// loss or gradient leaves the parameters untouched; the error names
    /// the first op that produced a non-finite value.
    pub fn step(&mut self, batch: &[&MixtureExample], lr: f64) -> Result<StepStats> {
        let mut bg = batch_gradients(&self.model, batch, self.mode, false)?;
        let grad_norm = global_norm(&bg.grads);
        if !bg.loss.is_finite() || !grad_norm.is_finite() {
            let detail = match batch_gradients(&self.model, batch, self.mode, true) {
                Err(e) => e.to_string(),
                Ok(_) => format!("loss {} with gradient norm {grad_norm}", bg.loss),
            };
            return Err(Error::NumericAbort {
                epoch: 0,
                batch: 0,
                detail,
            });
        }
        let clip_scale = clip_grad_norm(&mut bg.grads, self.config.clip_norm);
        self.adam.step(&mut self.model, &bg.grads, lr)?;
        Ok(StepStats {
            loss: bg.loss,
            grad_norm,
            clip_scale,
        })
    }
}

/// Tracks the best validation score and how long since it improved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records a score (higher is better); returns whether it is a new best.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// Counted from 1.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_si_snri: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// One tab-separated log line. With `deterministic` the wall time is
    /// written as `-` so reruns are byte-identical.
    pub fn log_line(&self, deterministic: bool) -> String {
        let wall = if deterministic {
            "-".to_string()
        } else {
            format!("{:.3}", self.wall_seconds)
        };
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{wall}",
            self.epoch, self.lr, self.train_loss, self.val_si_snri
        )
    }
}

#[derive(Default)]
pub struct LoopOptions<'a> {
    /// Receives `metrics.tsv`, `best.ckpt` and `last.ckpt` when set.
    pub run_dir: Option<PathBuf>,
    pub mode: Mode,
    pub deterministic: bool,
    pub on_epoch: Option<Box<dyn FnMut(&EpochMetrics) + 'a>>,
}


#[derive(Debug, Clone)]
pub struct TrainReport {
    pub best: SeparatorModel<f32>,
    pub best_epoch: usize,
    pub best_val_si_snri: f64,
    pub epochs: Vec<EpochMetrics>,
    pub stopped_early: bool,
    pub steps: u64,
}

fn append(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains with seeded shuffling, step-decayed learning rate, validation
/// after every epoch and early stopping on validation SI-SNRi.
pub fn train_loop(
    model: SeparatorModel<f32>,
    train: &[MixtureExample],
    valid: &[MixtureExample],
    config: &TrainConfig,
    mut opts: LoopOptions<'_>,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Empty { op: "train_loop training set" });
    }
    if valid.is_empty() {
        return Err(Error::Empty { op: "train_loop validation set" });
    }
    let mut trainer = Trainer::new(model, *config, opts.mode)?;
    let metrics_path = opts.run_dir.as_ref().map(|d| d.join("metrics.tsv"));
    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = metrics_path.as_ref().expect("set with run_dir");
        std::fs::write(p, "").map_err(|e| Error::io(p, e))?;
    }

    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = trainer.model.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&MixtureExample> = idx.iter().map(|&i| &train[i]).collect();
            let stats = trainer.step(&batch, lr).map_err(|e| match e {
                Error::NumericAbort { detail, .. } => Error::NumericAbort {
                    epoch: epoch + 1,
                    batch: b + 1,
                    detail,
                },
                other => other,
            })?;
            loss_sum += stats.loss;
            batches += 1;
        }
        let val = evaluate(&trainer.model, valid, opts.mode)?.mean_si_snri;
        let improved = stopper.observe(val);
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / batches as f64,
            val_si_snri: val,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if improved {
            best = trainer.model.clone();
            best_epoch = epoch + 1;
        }
        if let Some(dir) = &opts.run_dir {
            let mut meta = Metadata::default();
            meta.set("epoch", epoch + 1);
            meta.set("val_si_snri", format!("{val:.6}"));
            if improved {
                save_model(dir.join("best.ckpt"), &best, &meta)?;
            }
            save_model(dir.join("last.ckpt"), &trainer.model, &meta)?;
            append(metrics_path.as_ref().expect("set with run_dir"), &metrics.log_line(opts.deterministic))?;
            if opts.deterministic {
                let mut line = String::new();
                let _ = write!(line, "{}\t{:.3}", metrics.epoch, metrics.wall_seconds);
                append(&dir.join("timing.tsv"), &line)?;
            }
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&metrics);
        }
        epochs.push(metrics);
        if stopper.should_stop() {
            break;
        }
    }
    Ok(TrainReport {
        best,
        best_epoch,
        best_val_si_snri: stopper.best.unwrap_or(f64::NAN),
        stopped_early: stopper.should_stop(),
        epochs,
        steps: trainer.steps_taken(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worsening_validation_stops_after_eleven_epochs() {
        let mut s = EarlyStopping::new(10);
        let mut seen = 0;
        for epoch in 0..100 {
            seen += 1;
            s.observe(-(epoch as f64));
            if s.should_stop() {
                break;
            }
        }
        assert_eq!(seen, 11);
        assert_eq!(s.best, Some(0.0));
    }

    #[test]
    fn defaults_follow_the_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert!((c.lr_at(2) - 9.8e-4).abs() < 1e-15);
        assert!((c.lr_at(100) - 1e-3 * 0.98f64.powi(50)).abs() < 1e-15);
        assert_eq!((c.clip_norm, c.patience, c.epochs, c.segment_seconds), (5.0, 10, 100, 4.0));
        c.validate().unwrap();
        assert!(TrainConfig { patience: 0, ..c }.validate().is_err());
    }

    #[test]
    fn deterministic_lines_hide_wall_time() {
        let m = EpochMetrics {
            epoch: 3,
            lr: 1e-3,
            train_loss: -1.5,
            val_si_snri: 2.25,
            wall_seconds: 0.5,
        };
        assert_eq!(m.log_line(true), "3\t1.000000e-3\t-1.500000\t2.250000\t-");
        assert!(m.log_line(false).ends_with("\t0.500"));
    }
}

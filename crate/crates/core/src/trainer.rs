//! Adam with mini-batches, global-norm clipping and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ModelError;
use crate::eventseq::{Dataset, EventSequence};
use crate::graddiff::{Gradients, ParamStore};

/// A differentiable training objective over batches of sequences.
pub trait Objective: Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn loss_and_grad(&self, batch: &[&EventSequence]) -> Result<(f64, Gradients), ModelError>;
    fn loss(&self, batch: &[&EventSequence]) -> Result<f64, ModelError>;
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch {epoch}: {source}")]
    Model {
        epoch: usize,
        #[source]
        source: ModelError,
    },
    #[error("training diverged at epoch {epoch}: loss {loss} (first epoch {first})")]
    Diverged { epoch: usize, loss: f64, first: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// Abort when an epoch's training loss exceeds this multiple of the
    /// first epoch's.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0 && self.clip_norm > 0.0 && self.divergence_factor > 1.0) {
            return bad("epsilon and clip_norm must be positive, divergence_factor above 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    /// Epochs where the 5-epoch moving average of training loss rose.
    pub monotone_violations: Vec<usize>,
    pub checkpoint: Option<String>,
    /// Kept out of the JSON so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_secs: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Sum of batch losses over `ds` in fixed order, batches of `batch_size`.
pub fn dataset_loss<O: Objective>(model: &O, ds: &Dataset, batch_size: usize) -> Result<f64, ModelError> {
    let refs: Vec<&EventSequence> = ds.sequences().iter().collect();
    refs.chunks(batch_size.max(1)).map(|c| model.loss(c)).sum()
}

/// Epochs whose 5-epoch trailing mean of training loss exceeds the previous
/// window's mean.
pub fn smoothed_violations(losses: &[f64]) -> Vec<usize> {
    const W: usize = 5;
    if losses.len() <= W {
        return Vec::new();
    }
    let means: Vec<f64> = losses.windows(W).map(|w| w.iter().sum::<f64>() / W as f64).collect();
    means
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] * (1.0 + 1e-9) + 1e-12)
        .map(|(i, _)| i + W)
        .collect()
}

/// Minimizes the objective on `train`, selecting the parameters with the
/// best loss on `validation`. The model is left holding those parameters.
/// `on_epoch` sees each epoch's record as it completes.
pub fn train<O: Objective>(
    model: &mut O,
    train: &Dataset,
    validation: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(TrainError::Config("train and validation splits must be nonempty".into()));
    }
    let mut adam = Adam::new(model.store().num_scalars());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let wrap = |epoch: usize| move |source| TrainError::Model { epoch, source };

    let mut best_val = dataset_loss(model, validation, cfg.batch_size).map_err(wrap(0))?;
    let mut best_params = model.store().flat();
    let mut best_epoch = 0;
    let mut records = Vec::new();
    let mut wall = Vec::new();
    let mut first_loss: Option<f64> = None;
    let mut since_best = 0;
    let mut early_stopped = false;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EventSequence> = chunk.iter().map(|&i| &train.sequences()[i]).collect();
            let (loss, mut grad) = model.loss_and_grad(&batch).map_err(wrap(epoch))?;
            epoch_loss += loss;
            let norm = grad.global_norm();
            if norm > cfg.clip_norm {
                grad.scale(cfg.clip_norm / norm);
            }
            let mut flat = model.store().flat();
            adam.step(&mut flat, &grad.flat(), cfg);
            model.store_mut().set_flat(&flat);
        }
        let first = *first_loss.get_or_insert(epoch_loss);
        if !epoch_loss.is_finite() || epoch_loss.abs() > cfg.divergence_factor * first.abs().max(1.0) {
            return Err(TrainError::Diverged {
                epoch,
                loss: epoch_loss,
                first,
            });
        }
        let val = dataset_loss(model, validation, cfg.batch_size).map_err(wrap(epoch))?;
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_loss,
            val_loss: val,
        };
        on_epoch(&rec);
        records.push(rec);
        wall.push(start.elapsed().as_secs_f64());
        if val < best_val {
            best_val = val;
            best_params = model.store().flat();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                early_stopped = true;
                break;
            }
        }
    }
    model.store_mut().set_flat(&best_params);
    let losses: Vec<f64> = records.iter().map(|r| r.train_loss).collect();
    let violations = smoothed_violations(&losses);
    if !violations.is_empty() {
        log::warn!("smoothed training loss rose at epochs {violations:?}");
    }
    Ok(TrainReport {
        stopped_epoch: records.len(),
        epochs: records,
        best_epoch,
        best_val_loss: best_val,
        early_stopped,
        monotone_violations: violations,
        checkpoint: None,
        wall_secs: wall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mhp::{HexpConfig, HexpModel};
    use crate::simulate::{simulate_mhp, MhpParams, SimConfig};

    fn data() -> (Dataset, Dataset) {
        let p = MhpParams {
            mu: vec![0.3, 0.2],
            alpha: vec![vec![0.4, 0.0], vec![0.3, 0.2]],
            gamma: vec![vec![1.0; 2]; 2],
        };
        let ds = simulate_mhp(&p, &SimConfig::new(40, 30.0, 3)).unwrap();
        (ds.subset(&(0..30).collect::<Vec<_>>()), ds.subset(&(30..40).collect::<Vec<_>>()))
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (tr, va) = data();
        let mut m = HexpModel::init(&tr, HexpConfig::default());
        let before = m.store().flat();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let rep = train(&mut m, &tr, &va, &cfg, |_| {}).unwrap();
        assert_eq!(m.store().flat(), before);
        let l0 = rep.epochs[0].train_loss;
        assert!(rep.epochs.iter().all(|e| (e.train_loss - l0).abs() < 1e-12 * l0.abs()));
    }

    #[test]
    fn same_seed_same_report() {
        let (tr, va) = data();
        let cfg = TrainConfig {
            learning_rate: 0.02,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = HexpModel::init(&tr, HexpConfig::default());
            let r = train(&mut m, &tr, &va, &cfg, |_| {}).unwrap();
            (serde_json::to_string(&r).unwrap(), m.store().flat())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn best_checkpoint_is_kept() {
        let (tr, va) = data();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 30,
            patience: 3,
            ..TrainConfig::default()
        };
        let mut m = HexpModel::init(&tr, HexpConfig::default());
        let rep = train(&mut m, &tr, &va, &cfg, |_| {}).unwrap();
        let min = rep.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(rep.best_val_loss <= min);
        let now = dataset_loss(&m, &va, cfg.batch_size).unwrap();
        assert!((now - rep.best_val_loss).abs() < 1e-9 * now.abs());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn violations_flag_rising_windows() {
        let falling: Vec<f64> = (0..20).map(|i| 100.0 - i as f64).collect();
        assert!(smoothed_violations(&falling).is_empty());
        let mut bump = falling.clone();
        bump[12] = 200.0;
        assert_eq!(smoothed_violations(&bump), vec![12]);
    }
}

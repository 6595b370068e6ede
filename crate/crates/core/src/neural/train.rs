//! Epoch loop with validation-based early stopping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::lstm::{evaluate_batch, loss_and_grads, Dropout};
use super::optim::{adam_step, clip_gradients, AdamConfig, AdamState};
use super::params::{NetworkParams, RnnState};
use super::NeuralError;
use crate::dataset::{sequential_batches, window_batches, TokenStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// Truncated BPTT window length in tokens.
    pub window: usize,
    /// Parallel lanes per batch.
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub forget_bias: f64,
    pub validation_fraction: f64,
    /// Stop as soon as an epoch's mean training loss drops below this.
    pub target_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 3,
            hidden: 256,
            dropout: 0.5,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            window: 128,
            batch: 64,
            max_epochs: 200,
            patience: 5,
            seed: 0,
            init_scale: 0.05,
            forget_bias: 1.0,
            validation_fraction: 0.1,
            target_train_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::Config(m.to_string()));
        if self.layers == 0 || self.hidden == 0 {
            return bad("layers and hidden must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must be in [0, 1)");
        }
        if self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.window < 2 || self.batch == 0 {
            return bad("window must be >= 2 and batch >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        Ok(())
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if loss >= best => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Seconds since training started.
    pub wallclock: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: NetworkParams,
    /// Optimizer state at the best epoch.
    pub best_adam: AdamState,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Mean cross-entropy (nats per symbol) over whole sequences, dropout off.
pub fn evaluate(params: &NetworkParams, streams: &[TokenStream], window: usize, batch: usize) -> Result<f64, NeuralError> {
    let batches = sequential_batches(streams, window, batch);
    let lanes = batches.first().map_or(1, |b| b.lanes.len());
    let mut state = RnnState::for_params(params, lanes);
    let (mut total, mut count) = (0.0, 0usize);
    for b in &batches {
        let (sum, n, next) = evaluate_batch(params, b, &state)?;
        total += sum;
        count += n;
        state = next;
    }
    Ok(if count > 0 { total / count as f64 } else { 0.0 })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over a simple combination.
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains from `params`/`adam` until validation loss stops improving.
///
/// `on_epoch` sees each log record as it is produced.
pub fn train(
    mut params: NetworkParams,
    adam: Option<AdamState>,
    train_streams: &[TokenStream],
    validation_streams: &[TokenStream],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, NeuralError> {
    config.validate()?;
    if train_streams.is_empty() || validation_streams.is_empty() {
        return Err(NeuralError::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(&params, config.adam()));
    adam.config = config.adam();
    let start = Instant::now();
    let mut stopper = EarlyStopping::new(config.patience.max(1));
    let mut best = (params.clone(), adam.clone(), 0usize);
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let batches = window_batches(train_streams, config.window, config.batch, mix(config.seed, epoch as u64, 0));
        let lanes = batches.first().map_or(1, |b| b.lanes.len());
        let mut state = RnnState::for_params(&params, lanes);
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let dropout = if config.dropout > 0.0 {
                Dropout::On {
                    rate: config.dropout,
                    seed: mix(config.seed, epoch as u64, bi as u64 + 1),
                }
            } else {
                Dropout::Off
            };
            let mut out = loss_and_grads(&params, batch, &state, dropout)?;
            total += out.loss * out.valid_positions as f64;
            count += out.valid_positions;
            if out.valid_positions > 0 {
                clip_gradients(&mut out.grads, config.clip_norm)?;
                adam_step(&mut params, &out.grads, &mut adam)?;
            }
            state = out.state;
        }
        let train_loss = if count > 0 { total / count as f64 } else { 0.0 };
        let val_loss = evaluate(&params, validation_streams, config.window, config.batch)?;
        if !val_loss.is_finite() {
            return Err(NeuralError::NonFiniteLoss);
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wallclock: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
        let decision = stopper.observe(epoch, val_loss);
        if decision == StopDecision::Improved {
            best = (params.clone(), adam.clone(), epoch);
        }
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
        if config.target_train_loss.is_some_and(|t| train_loss < t) {
            break;
        }
    }

    Ok(TrainOutcome {
        best_params: best.0,
        best_adam: best.1,
        best_epoch: best.2,
        log,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_on_rising_loss() {
        let mut s = EarlyStopping::new(5);
        let mut stopped_at = None;
        for epoch in 1..=20 {
            if s.observe(epoch, epoch as f64) == StopDecision::Stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        assert_eq!(s.best_epoch(), Some(1));
    }

    #[test]
    fn improvement_resets_patience() {
        let mut s = EarlyStopping::new(2);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 1.0), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.5), StopDecision::Improved);
        assert_eq!(s.observe(4, 0.7), StopDecision::Continue);
        assert_eq!(s.observe(5, 0.6), StopDecision::Stop);
        assert_eq!(s.best_loss(), Some(0.5));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { dropout: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { window: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"hidden": 32, "layers": 2}"#).unwrap();
        assert_eq!(parsed.hidden, 32);
        assert_eq!(parsed.patience, 5);
    }
}

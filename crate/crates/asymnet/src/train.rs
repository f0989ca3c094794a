//! Optimizers, learning-rate schedule, and the training loop that produces
//! checkpoint pairs for interpolation studies.

use crate::autograd::Tape;
use crate::checkpoint::{hex, ModelCheckpoint, Provenance};
use crate::data::{epoch_order, Dataset};
use crate::nn::{build_model, Model, ModelConfig, NnError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("non-finite gradient/loss at step {step}; checkpoint withheld")]
    Divergence { step: u64 },
    #[error("asym payload mismatch between pair members: {a} vs {b}")]
    AsymMismatch { a: String, b: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Warmup starting point; the schedule ramps linearly to `peak_lr`.
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 20,
            base_lr: 1e-4,
            peak_lr: 1e-3,
            warmup_epochs: 5,
            weight_decay: 0.0,
            optimizer: Optimizer::Adam,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::BadConfig(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("peak_lr", self.peak_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) {
                return Err(TrainError::BadConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Linear warmup from `base_lr` to `peak_lr` over `warmup_steps`, constant
/// afterwards. With zero warmup the peak applies from step 0.
pub fn lr_at(step: u64, warmup_steps: u64, base_lr: f64, peak_lr: f64) -> f64 {
    if step >= warmup_steps || warmup_steps == 0 {
        peak_lr
    } else {
        base_lr + (peak_lr - base_lr) * (step as f64 / warmup_steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay
/// (`theta <- theta - lr*wd*theta` before the Adam update). Indices where
/// `mask == Some(0)` are never touched. A non-finite gradient aborts the
/// step, leaving params and state unchanged.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    mask: Option<&[u8]>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::Divergence { step: state.t });
    }
    state.t += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        if mask.is_some_and(|m| m[i] == 0) {
            continue;
        }
        params[i] -= lr * weight_decay * params[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain SGD step with decoupled weight decay; same masking contract.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    mask: Option<&[u8]>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::Divergence { step: 0 });
    }
    for i in 0..params.len() {
        if mask.is_some_and(|m| m[i] == 0) {
            continue;
        }
        params[i] -= lr * weight_decay * params[i];
        params[i] -= lr * grads[i];
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_time_secs: f64,
    pub final_param_hash: String,
}

impl TrainReport {
    /// One JSON record per epoch, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec).unwrap());
            out.push('\n');
        }
        out
    }
}

/// Cross-entropy loss, accuracy, and the flat gradient vector (canonical
/// parameter order) for one batch.
pub fn batch_loss_and_grads(model: &Model, xs: &[f64], ys: &[usize]) -> Result<(f64, f64, Vec<f64>)> {
    let batch = ys.len();
    let d_in = model.config.widths[0];
    let mut tape = Tape::new();
    let x = tape.constant(&[batch, d_in], xs.to_vec())?;
    let binding = model.bind(&mut tape)?;
    let logits = model.forward_bound(&mut tape, &binding, x)?;
    let loss = tape.softmax_cross_entropy(logits, ys)?;
    tape.backward(loss)?;
    let loss_val = tape.values(loss)[0];
    let acc = accuracy(tape.values(logits), ys, model.config.widths.last().copied().unwrap());
    let mut grads = Vec::new();
    for &id in &binding.param_ids {
        grads.extend_from_slice(tape.grad(id).expect("bound params require grad"));
    }
    Ok((loss_val, acc, grads))
}

fn accuracy(logits: &[f64], ys: &[usize], classes: usize) -> f64 {
    let mut correct = 0usize;
    for (i, &y) in ys.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == y {
            correct += 1;
        }
    }
    correct as f64 / ys.len() as f64
}

/// Mean loss and accuracy over a dataset without touching gradients.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut total_loss = 0.0;
    let mut total_correct = 0.0;
    let classes = *model.config.widths.last().unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (xs, ys) = data.gather(chunk);
        let logits = model.logits(&xs, ys.len())?;
        for (i, &y) in ys.iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total_loss += log_z - row[y];
        }
        total_correct += accuracy(&logits, &ys, classes) * ys.len() as f64;
    }
    let n = data.len() as f64;
    Ok((total_loss / n, total_correct / n))
}

fn flat_param_mask(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    for (slice, mask) in model.param_slices().iter().zip(model.param_masks()) {
        match mask {
            Some(m) => out.extend_from_slice(m),
            None => out.extend(std::iter::repeat_n(1u8, slice.len())),
        }
    }
    out
}

fn param_hash(params: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in params {
        hasher.update(v.to_le_bytes());
    }
    hex(&hasher.finalize())
}

/// Trains in place; returns the checkpoint and per-epoch report. Fully
/// deterministic given the model seeds and `config.shuffle_seed`.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainReport)> {
    config.validate()?;
    let start = std::time::Instant::now();
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size) as u64;
    let warmup_steps = config.warmup_epochs as u64 * steps_per_epoch;
    let mut params = model.flatten_params();
    let mask = flat_param_mask(model);
    let mut adam = AdamState::new(params.len());
    let mut records = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;
    let mut final_loss = None;
    for epoch in 0..config.epochs {
        let order = epoch_order(n, config.shuffle_seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (xs, ys) = train_set.gather(chunk);
            let (loss, acc, grads) = batch_loss_and_grads(model, &xs, &ys)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            let lr = lr_at(step, warmup_steps, config.base_lr, config.peak_lr);
            match config.optimizer {
                Optimizer::Adam => adam_step(
                    &mut params,
                    &grads,
                    Some(&mask),
                    &mut adam,
                    lr,
                    (0.9, 0.999),
                    1e-8,
                    config.weight_decay,
                )?,
                Optimizer::Sgd => sgd_step(&mut params, &grads, Some(&mask), lr, config.weight_decay)?,
            }
            model.set_params_from_flat(&params);
            epoch_loss += loss * ys.len() as f64;
            epoch_correct += acc * ys.len() as f64;
            step += 1;
        }
        let (val_loss, val_accuracy) = match val_set {
            Some(v) => {
                let (l, a) = evaluate(model, v, config.batch_size)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let train_loss = epoch_loss / n as f64;
        final_loss = Some(train_loss);
        records.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy: epoch_correct / n as f64,
            val_loss,
            val_accuracy,
        });
    }
    let report = TrainReport {
        epochs: records,
        wall_time_secs: start.elapsed().as_secs_f64(),
        final_param_hash: param_hash(&params),
    };
    let ckpt = ModelCheckpoint::from_model(
        model,
        Provenance {
            epochs_trained: config.epochs,
            final_train_loss: final_loss,
            shuffle_seed: Some(config.shuffle_seed),
        },
    );
    Ok((ckpt, report))
}

/// Trains two members of an interpolation pair: identical architecture and
/// asymmetry payloads, independent initializations and batch orders.
#[allow(clippy::type_complexity)]
pub fn train_pair(
    base_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    seeds_a: (u64, u64),
    seeds_b: (u64, u64),
) -> Result<((ModelCheckpoint, TrainReport), (ModelCheckpoint, TrainReport))> {
    let run = |init_seed: u64, shuffle_seed: u64| -> Result<(ModelCheckpoint, TrainReport)> {
        let mut cfg = base_config.clone();
        cfg.init_seed = init_seed;
        let mut model = build_model(&cfg)?;
        let mut tc = train_config.clone();
        tc.shuffle_seed = shuffle_seed;
        train(&mut model, train_set, val_set, &tc)
    };
    let a = run(seeds_a.0, seeds_a.1)?;
    let b = run(seeds_b.0, seeds_b.1)?;
    if a.0.asym_hash != b.0.asym_hash {
        return Err(TrainError::AsymMismatch {
            a: a.0.asym_hash_hex(),
            b: b.0.asym_hash_hex(),
        });
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blobs;
    use crate::nn::ModelConfig;

    #[test]
    fn adam_zero_grads_leave_params_fixed() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, None, &mut st, 1e-3, (0.9, 0.999), 1e-8, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        // with constant g=1 the bias-corrected first update is exactly
        // lr * 1 / (1 + eps)
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], None, &mut st, 0.01, (0.9, 0.999), 1e-8, 0.0).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_nan_grads_untouched() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        let err = adam_step(&mut p, &[f64::NAN], None, &mut st, 0.01, (0.9, 0.999), 1e-8, 0.0);
        assert!(matches!(err, Err(TrainError::Divergence { .. })));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn warmup_schedule_hits_endpoints() {
        assert_eq!(lr_at(0, 100, 1e-4, 1e-2), 1e-4);
        assert_eq!(lr_at(100, 100, 1e-4, 1e-2), 1e-2);
        assert!((lr_at(50, 100, 1e-4, 1e-2) - (1e-4 + 1e-2) / 2.0).abs() < 1e-15);
        assert_eq!(lr_at(5000, 100, 1e-4, 1e-2), 1e-2);
        // non-decreasing across the ramp
        let mut prev = 0.0;
        for s in 0..=100 {
            let lr = lr_at(s, 100, 1e-4, 1e-2);
            assert!(lr >= prev);
            prev = lr;
        }
    }

    #[test]
    fn warmup_cannot_exceed_epochs() {
        let cfg = TrainConfig {
            warmup_epochs: 30,
            epochs: 20,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::BadConfig(_))));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = gaussian_blobs(3, 10, 4, 5.0, 1);
        let cfg = ModelConfig::standard(vec![4, 8, 3], true, 0, 42);
        let mut model = build_model(&cfg).unwrap();
        let before = model.flatten_params();
        let tc = TrainConfig {
            epochs: 0,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let (ckpt, report) = train(&mut model, &data, None, &tc).unwrap();
        assert_eq!(ckpt.params, before);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn blobs_standard_mlp_reaches_high_accuracy() {
        let data = gaussian_blobs(3, 50, 8, 10.0, 7);
        let cfg = ModelConfig::standard(vec![8, 32, 32, 3], true, 0, 5);
        let mut model = build_model(&cfg).unwrap();
        let tc = TrainConfig {
            epochs: 20,
            warmup_epochs: 2,
            peak_lr: 1e-2,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (_, report) = train(&mut model, &data, None, &tc).unwrap();
        let last = report.epochs.last().unwrap();
        assert!(last.train_accuracy >= 0.99, "accuracy {}", last.train_accuracy);
    }

    #[test]
    fn identical_configs_give_bit_identical_checkpoints() {
        let data = gaussian_blobs(2, 20, 6, 8.0, 3);
        let cfg = ModelConfig::w_asym(vec![6, 8, 2], true, vec![2, 1], vec![0.5, 0.5], 11, 13);
        let tc = TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = build_model(&cfg).unwrap();
            train(&mut model, &data, None, &tc).unwrap().0
        };
        assert_eq!(run().to_bytes().unwrap(), run().to_bytes().unwrap());
    }

    #[test]
    fn masked_positions_stay_at_fixed_values() {
        let data = gaussian_blobs(2, 20, 6, 8.0, 3);
        let cfg = ModelConfig::w_asym(vec![6, 8, 2], false, vec![2, 1], vec![1.0, 1.0], 11, 13);
        let mut model = build_model(&cfg).unwrap();
        let tc = TrainConfig {
            epochs: 5,
            warmup_epochs: 0,
            peak_lr: 1e-2,
            ..TrainConfig::default()
        };
        train(&mut model, &data, None, &tc).unwrap();
        let layer = &model.layers[0];
        let mask = layer.mask.as_ref().unwrap();
        let fixed = layer.fixed.as_ref().unwrap();
        let eff = layer.effective_weight();
        for i in 0..mask.len() {
            if mask[i] == 0 {
                assert_eq!(layer.weight[i], 0.0);
                assert_eq!(eff[i], fixed[i]);
            }
        }
    }

    #[test]
    fn fixed_batch_loss_strictly_decreases() {
        let data = gaussian_blobs(2, 16, 4, 10.0, 5);
        let cfg = ModelConfig::standard(vec![4, 16, 2], false, 0, 9);
        let mut model = build_model(&cfg).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let (xs, ys) = data.gather(&idx);
        let mut params = model.flatten_params();
        let mut st = AdamState::new(params.len());
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let (loss, _, grads) = batch_loss_and_grads(&model, &xs, &ys).unwrap();
            assert!(loss < prev, "loss {loss} did not decrease from {prev}");
            prev = loss;
            adam_step(&mut params, &grads, None, &mut st, 1e-3, (0.9, 0.999), 1e-8, 0.0).unwrap();
            model.set_params_from_flat(&params);
        }
    }

    #[test]
    fn pair_shares_masks_differs_in_weights() {
        let data = gaussian_blobs(2, 20, 6, 8.0, 3);
        let cfg = ModelConfig::w_asym(vec![6, 8, 2], false, vec![2, 1], vec![1.0, 1.0], 21, 0);
        let tc = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let ((a, _), (b, _)) = train_pair(&cfg, &tc, &data, None, (1, 2), (3, 4)).unwrap();
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.fixed, b.fixed);
        assert_eq!(a.asym_hash, b.asym_hash);
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn sigma_asym_pair_shares_figlu_payload() {
        let data = gaussian_blobs(2, 20, 4, 8.0, 3);
        let cfg = ModelConfig::sigma_asym(vec![4, 8, 2], false, 33, 0);
        let tc = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let ((a, _), (b, _)) = train_pair(&cfg, &tc, &data, None, (1, 2), (3, 4)).unwrap();
        assert_eq!(a.figlu, b.figlu);
        assert!(!a.figlu.is_empty());
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn report_serializes_one_line_per_epoch() {
        let data = gaussian_blobs(2, 10, 4, 8.0, 3);
        let cfg = ModelConfig::standard(vec![4, 8, 2], false, 0, 1);
        let mut model = build_model(&cfg).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let (_, report) = train(&mut model, &data, Some(&data), &tc).unwrap();
        let lines = report.to_json_lines();
        assert_eq!(lines.trim_end().lines().count(), 3);
        assert!(report.epochs.iter().all(|r| r.val_loss.is_some()));
    }
}

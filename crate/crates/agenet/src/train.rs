//! Training: multi-task loss, Adam, the epoch loop, checkpointing and
//! deterministic seeding. Per-epoch randomness (shuffle order, flip coins)
//! is derived from (seed, epoch), so resuming from a checkpoint continues
//! the identical trajectory.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fnv1a, load_batch, SampleRecord};
use crate::error::{Error, Result};
use crate::eval::{aabd, accuracy};
use crate::model::{build_model, MultiTaskModel, MultiTaskModelSpec};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};
use crate::weights::{
    decode_container, encode_container, fill_model, save_model, RawTensor, CHECKPOINT_MAGIC,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_age: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            batch_size: 16,
            epochs: 100,
            lambda_age: 1.0,
            seed: 0,
            eval_every: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.batch_size == 0 || self.epochs == 0 || self.lambda_age < 0.0 || self.eval_every == 0 {
            return Err(Error::Config(format!("invalid training config: {:?}", self)));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// cross_entropy(gender) + lambda_age * cross_entropy(age).
pub fn multitask_loss<S: Scalar>(
    gender_logits: &Tensor<S>,
    age_logits: &Tensor<S>,
    gender_labels: &[usize],
    bucket_labels: &[usize],
    lambda_age: f64,
) -> Result<Tensor<S>> {
    let gender_loss = ops::cross_entropy(gender_logits, gender_labels)?;
    let age_loss = ops::cross_entropy(age_logits, bucket_labels)?;
    ops::add(&gender_loss, &ops::scale(&age_loss, S::from_f64(lambda_age)))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam. Moment buffers are aligned index-for-index with the
/// parameter list they were created from.
pub struct Adam<S: Scalar> {
    pub t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &[(String, Tensor<S>)]) -> Adam<S> {
        Adam {
            t: 0,
            m: params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![S::zero(); p.numel()]).collect(),
        }
    }

    /// One in-place update from the gradients currently stored on `params`.
    /// Parameters without a gradient are untouched (their moments still decay
    /// toward zero, matching a zero gradient).
    pub fn step(&mut self, params: &[(String, Tensor<S>)], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam state built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1 = S::from_f64(ADAM_BETA1);
        let b2 = S::from_f64(ADAM_BETA2);
        let eps = S::from_f64(ADAM_EPS);
        let lr = S::from_f64(lr);
        let bc1 = S::one() - S::from_f64(ADAM_BETA1.powi(self.t as i32));
        let bc2 = S::one() - S::from_f64(ADAM_BETA2.powi(self.t as i32));
        for (i, (name, p)) in params.iter().enumerate() {
            let grad = p.grad();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            if m.len() != p.numel() {
                return Err(Error::InvalidArgument(format!(
                    "adam moment shape for '{}' does not match parameter",
                    name
                )));
            }
            let mut data = p.data_mut();
            for j in 0..data.len() {
                let g = match &grad {
                    Some(g) => g[j],
                    None => S::zero(),
                };
                if !g.is_finite() {
                    return Err(Error::Numerical(format!(
                        "NaN/Inf gradient in parameter '{}' at flat index {}",
                        name, j
                    )));
                }
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn raw_tensors(&self, params: &[(String, Tensor<S>)]) -> Vec<RawTensor> {
        let mut out = Vec::new();
        for (i, (name, p)) in params.iter().enumerate() {
            for (prefix, buf) in [("adam.m", &self.m[i]), ("adam.v", &self.v[i])] {
                let t = Tensor::from_vec(p.dims(), buf.clone()).unwrap();
                out.push(RawTensor::from_tensor(&format!("{prefix}.{name}"), &t));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model_spec: MultiTaskModelSpec,
    /// Epochs completed so far; training resumes at this epoch index.
    epoch: usize,
    adam_t: u64,
    /// Base RNG seed; per-epoch streams are derived from (seed, epoch).
    rng_seed: u64,
    config_hash: u64,
    best_metric: f64,
}

pub struct Checkpoint<S: Scalar> {
    pub model: MultiTaskModel<S>,
    pub adam: Adam<S>,
    pub epoch: usize,
    pub rng_seed: u64,
    pub config_hash: u64,
    pub best_metric: f64,
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &MultiTaskModel<S>,
    adam: &Adam<S>,
    epoch: usize,
    rng_seed: u64,
    config_hash: u64,
    best_metric: f64,
) -> Result<()> {
    let header = CheckpointHeader {
        model_spec: model.spec.clone(),
        epoch,
        adam_t: adam.t,
        rng_seed,
        config_hash,
        best_metric,
    };
    let params = model.trainable_params();
    let mut tensors: Vec<RawTensor> = model
        .named_tensors()
        .iter()
        .map(|(name, t, _)| RawTensor::from_tensor(name, t))
        .collect();
    tensors.extend(adam.raw_tensors(&params));
    std::fs::write(path, encode_container(&CHECKPOINT_MAGIC, &serde_json::to_string(&header)?, &tensors))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read '{}': {}", path.display(), e)))?;
    let (header, raw) = decode_container(&bytes, &CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = serde_json::from_str(&header)?;
    let model = build_model::<S>(&header.model_spec, 0)?;
    let model_raw: Vec<RawTensor> = raw.iter().filter(|t| !t.name.starts_with("adam.")).cloned().collect();
    fill_model(&model, &model_raw)?;
    let params = model.trainable_params();
    let mut adam = Adam::new(&params);
    adam.t = header.adam_t;
    let by_name: std::collections::HashMap<&str, &RawTensor> =
        raw.iter().map(|t| (t.name.as_str(), t)).collect();
    for (i, (name, p)) in params.iter().enumerate() {
        for (prefix, buf) in [("adam.m", &mut adam.m[i]), ("adam.v", &mut adam.v[i])] {
            let key = format!("{prefix}.{name}");
            let rec = by_name
                .get(key.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint is missing '{}'", key)))?;
            if rec.dims != p.dims() {
                return Err(Error::Format(format!("checkpoint moment '{}' has wrong dims", key)));
            }
            *buf = rec.values::<S>();
        }
    }
    Ok(Checkpoint {
        model,
        adam,
        epoch: header.epoch,
        rng_seed: header.rng_seed,
        config_hash: header.config_hash,
        best_metric: header.best_metric,
    })
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

/// One line of the newline-delimited JSON training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_gender_acc: Option<f64>,
    pub val_age_acc: Option<f64>,
    pub val_aabd: Option<f64>,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    fnv1a(format!("{seed}:{epoch}").as_bytes())
}

/// Validation accuracies and AABD under eval-mode forward passes.
pub fn validate_model<S: Scalar>(
    model: &MultiTaskModel<S>,
    records: &[SampleRecord],
    batch_size: usize,
) -> Result<(f64, f64, f64)> {
    let mut gender_pred = Vec::new();
    let mut gender_true = Vec::new();
    let mut age_pred = Vec::new();
    let mut age_true = Vec::new();
    for chunk in records.chunks(batch_size) {
        let batch = load_batch::<S>(chunk, model.spec.input_size, false, 0)?;
        for (i, p) in model.predict(&batch.images)?.iter().enumerate() {
            gender_pred.push(p.gender_class());
            gender_true.push(batch.gender_labels[i]);
            age_pred.push(p.age_class());
            age_true.push(batch.bucket_labels[i]);
        }
    }
    Ok((
        accuracy(&gender_pred, &gender_true)?,
        accuracy(&age_pred, &age_true)?,
        aabd(&age_pred, &age_true)?,
    ))
}

/// Runs the epoch loop from `start_epoch` to `config.epochs`. When `out_dir`
/// is given, writes `log.ndjson` (append per epoch), `best.aagw` /
/// `final.aagw` weight files and `final.aagc` for resuming. On divergence
/// (non-finite loss) the previous epoch's checkpoint is left intact and an
/// error is returned.
#[allow(clippy::too_many_arguments)]
pub fn train<S: Scalar>(
    model: &MultiTaskModel<S>,
    adam: &mut Adam<S>,
    start_epoch: usize,
    initial_best: f64,
    train_records: &[SampleRecord],
    val_records: &[SampleRecord],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(Error::Data("training partition is empty".into()));
    }
    let params = model.trainable_params();
    let config_hash = config.hash();
    let mut records_out = Vec::new();
    let mut best_metric = initial_best;
    let mut best_epoch = start_epoch;
    let log_path = out_dir.map(|d| d.join("log.ndjson"));
    if let (Some(p), true) = (&log_path, start_epoch == 0) {
        // fresh run truncates any stale log
        std::fs::write(p, b"")?;
    }

    for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch));
        order.shuffle(&mut rng);
        let aug_seed = epoch_seed(config.seed, epoch) ^ 0xa5a5_5a5a;

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                // a lone trailing sample cannot be batch-normalized
                continue;
            }
            let batch_records: Vec<SampleRecord> =
                chunk.iter().map(|&i| train_records[i].clone()).collect();
            let batch = load_batch::<S>(&batch_records, model.spec.input_size, config.augment, aug_seed)?;
            let out = model.forward(&batch.images, true)?;
            let loss = multitask_loss(
                &out.gender_logits,
                &out.age_logits,
                &batch.gender_labels,
                &batch.bucket_labels,
                config.lambda_age,
            )?;
            let loss_value = loss.data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {} (loss = {}); last good checkpoint preserved",
                    epoch, loss_value
                )));
            }
            model.zero_grads();
            loss.backward()?;
            adam.step(&params, config.learning_rate)?;
            let n = batch.gender_labels.len();
            loss_sum += loss_value * n as f64;
            seen += n;
        }
        let train_loss = loss_sum / seen.max(1) as f64;

        let run_val = !val_records.is_empty() && (epoch + 1) % config.eval_every == 0;
        let (val_gender_acc, val_age_acc, val_aabd) = if run_val {
            let (g, a, d) = validate_model(model, val_records, config.batch_size)?;
            (Some(g), Some(a), Some(d))
        } else {
            (None, None, None)
        };

        let record = EpochRecord {
            epoch,
            train_loss,
            val_gender_acc,
            val_age_acc,
            val_aabd,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(p) = &log_path {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }

        // model selection: mean of the two validation accuracies
        if let (Some(g), Some(a)) = (val_gender_acc, val_age_acc) {
            let metric = (g + a) / 2.0;
            if metric > best_metric {
                best_metric = metric;
                best_epoch = epoch;
                if let Some(dir) = out_dir {
                    save_model(&dir.join("best.aagw"), model)?;
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(
                &dir.join("final.aagc"),
                model,
                adam,
                epoch + 1,
                config.seed,
                config_hash,
                best_metric,
            )?;
        }
        records_out.push(record);
    }

    if let Some(dir) = out_dir {
        save_model(&dir.join("final.aagw"), model)?;
        if !dir.join("best.aagw").exists() {
            save_model(&dir.join("best.aagw"), model)?;
        }
    }
    Ok(TrainOutcome { records: records_out, best_epoch, best_metric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn uniform_logits_loss_is_ln2_plus_ln11() {
        let gender = Tensor::<f64>::zeros(&[4, 2]);
        let age = Tensor::<f64>::zeros(&[4, 11]);
        let loss = multitask_loss(&gender, &age, &[0, 1, 0, 1], &[3, 5, 0, 10], 1.0).unwrap();
        let expect = (2.0f64).ln() + (11.0f64).ln();
        assert!((loss.data()[0] - expect).abs() < 1e-12);
        assert!((expect - 3.0910).abs() < 1e-4);
    }

    #[test]
    fn lambda_zero_is_pure_gender_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gender = Tensor::<f64>::from_vec(&[2, 2], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let age = Tensor::<f64>::from_vec(&[2, 11], (0..22).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let combined = multitask_loss(&gender, &age, &[0, 1], &[3, 5], 0.0).unwrap();
        let gender_only = ops::cross_entropy(&gender, &[0, 1]).unwrap();
        assert_eq!(combined.data()[0], gender_only.data()[0]);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let p = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        p.set_requires_grad(true);
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = Adam::new(&params);
        p.accum_grad(&[0.0, 0.0, 0.0]);
        adam.step(&params, 0.005).unwrap();
        assert_eq!(adam.t, 1);
        assert_eq!(*p.data(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        let p = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        p.set_requires_grad(true);
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = Adam::new(&params);
        p.accum_grad(&[1.0]);
        adam.step(&params, 0.005).unwrap();
        let expect = 1.0 - 0.005 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_two_identical_steps_match_formula_oracle() {
        let p = Tensor::<f64>::from_vec(&[1], vec![2.0]).unwrap();
        p.set_requires_grad(true);
        let params = vec![("p".to_string(), p.clone())];
        let mut adam = Adam::new(&params);
        let g = 0.3;

        // independent evaluation of the update formula
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 2.0f64);
        for t in 1..=2u32 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t as i32));
            let vhat = v / (1.0 - 0.999f64.powi(t as i32));
            x -= 0.005 * mhat / (vhat.sqrt() + 1e-8);
        }

        for _ in 0..2 {
            p.zero_grad();
            p.accum_grad(&[g]);
            adam.step(&params, 0.005).unwrap();
        }
        assert!((p.data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let p = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        p.set_requires_grad(true);
        let params = vec![("layer.weight".to_string(), p.clone())];
        let mut adam = Adam::new(&params);
        p.accum_grad(&[f64::NAN]);
        let err = adam.step(&params, 0.005).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
    }
}

//! Adam with an optional differential-privacy step: per-microbatch mean
//! gradients are clipped to a norm bound, summed, perturbed with one
//! Gaussian draw per coordinate, and renormalized. Also the full training
//! loop (shuffled fixed-size batches, early stopping on validation loss)
//! and clipping-norm calibration from a non-private reference run.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Record;
use crate::metrics::flat_accuracy;
use crate::model::{build_loss, build_logits, resolve_path, HtcModel, ModelError};
use crate::rng::{record_rng, stream_rng, Stream};
use crate::taxonomy::{LabelPath, Taxonomy};
use crate::tensor::{
    batch_mean_gradient, l2_norm, per_example_gradients, Graph, LossBuilder, ParamStore,
    TensorError,
};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("bad optimizer configuration: {0}")]
    BadConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: u64 },
}

/// Adam moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamParams { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams::with_learning_rate(1e-3)
    }
}

/// Gradient norm bound: disabled, resolved to a value, or to be calibrated
/// from a non-private run before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipNorm {
    Off,
    Auto,
    Fixed(f64),
}

/// Full training configuration. Privacy is structural: the run is private
/// exactly when noise or clipping is switched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Noise multiplier z; the per-coordinate noise scale is z times the
    /// clipping norm.
    pub noise_multiplier: f64,
    pub clip: ClipNorm,
    /// Records per microbatch; must divide the batch size.
    pub microbatch: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs; `None` disables early stopping
    /// and keeps the final weights (the overfit mode).
    pub patience: Option<usize>,
}

impl DpConfig {
    pub fn non_private(batch_size: usize, max_epochs: usize) -> Self {
        DpConfig {
            noise_multiplier: 0.0,
            clip: ClipNorm::Off,
            microbatch: 1,
            batch_size,
            adam: AdamParams::default(),
            max_epochs,
            patience: Some(3),
        }
    }

    pub fn is_private(&self) -> bool {
        self.noise_multiplier > 0.0 || self.clip != ClipNorm::Off
    }

    fn validate(&self) -> Result<(), OptimError> {
        let bad = |msg: String| Err(OptimError::BadConfig(msg));
        if self.noise_multiplier < 0.0 || !self.noise_multiplier.is_finite() {
            return bad(format!("noise multiplier {} must be finite and >= 0", self.noise_multiplier));
        }
        if let ClipNorm::Fixed(c) = self.clip {
            if !(c > 0.0) || !c.is_finite() {
                return bad(format!("clipping norm {} must be finite and positive", c));
            }
        }
        if self.clip == ClipNorm::Auto {
            return bad("auto clipping norm must be calibrated before training".to_string());
        }
        if self.noise_multiplier > 0.0 && self.clip == ClipNorm::Off {
            return bad("noise without clipping has unbounded sensitivity".to_string());
        }
        if self.batch_size == 0 || self.microbatch == 0 {
            return bad("batch and microbatch sizes must be positive".to_string());
        }
        if self.batch_size % self.microbatch != 0 {
            return bad(format!(
                "microbatch {} does not divide batch size {}",
                self.microbatch, self.batch_size
            ));
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be positive".to_string());
        }
        Ok(())
    }
}

/// Scales `g` in place by min(1, c/||g||) and returns the pre-clip norm.
pub fn clip_gradient(g: &mut [f64], c: f64) -> f64 {
    let norm = l2_norm(g);
    if norm > c {
        let factor = c / norm;
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
    norm
}

/// Lower median: for even counts, the smaller of the two middle values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Flat-vector Adam over the store's canonical parameter order.
#[derive(Debug, Clone)]
pub struct Adam {
    params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, params: AdamParams) -> Self {
        Adam { params, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    /// One update of `store` from a flat gradient.
    pub fn step(&mut self, store: &mut ParamStore, grad: &[f64]) -> Result<(), OptimError> {
        let mut theta = store.flatten_params();
        if theta.len() != grad.len() {
            return Err(OptimError::BadConfig(format!(
                "gradient dim {} does not match parameter dim {}",
                grad.len(),
                theta.len()
            )));
        }
        self.t += 1;
        let b1 = self.params.beta1;
        let b2 = self.params.beta2;
        let m_corr = 1.0 - b1.powi(self.t as i32);
        let v_corr = 1.0 - b2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / m_corr;
            let v_hat = self.v[i] / v_corr;
            theta[i] -= self.params.learning_rate * m_hat / (v_hat.sqrt() + self.params.eps);
        }
        store.assign_flat(&theta)?;
        Ok(())
    }
}

/// What one privatized gradient step produced, norms included so callers
/// can assert the clipping bound and log calibration data.
#[derive(Debug)]
pub struct StepOutcome {
    /// The gradient handed to Adam.
    pub gradient: Vec<f64>,
    /// Mean loss over the batch.
    pub mean_loss: f64,
    /// Pre-clip per-microbatch gradient norms.
    pub pre_clip_norms: Vec<f64>,
    /// Largest post-clip per-microbatch norm.
    pub max_clipped_norm: f64,
}

/// One DP gradient step: partition the batch into record-order microbatches,
/// average per-example gradients within each, clip each mean to `clip`, sum,
/// add a single Gaussian draw of scale z·C per coordinate, and divide by the
/// microbatch count.
pub fn dp_step(
    store: &mut ParamStore,
    batch_len: usize,
    graph_for: &mut dyn FnMut(usize) -> Graph,
    build: &mut LossBuilder,
    z: f64,
    clip: Option<f64>,
    microbatch: usize,
    noise_rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, OptimError> {
    if microbatch == 0 || batch_len % microbatch != 0 {
        return Err(OptimError::BadConfig(format!(
            "microbatch {} does not divide batch {}",
            microbatch, batch_len
        )));
    }
    if z > 0.0 && clip.is_none() {
        return Err(OptimError::BadConfig(
            "noise without clipping has unbounded sensitivity".to_string(),
        ));
    }
    let per_example = per_example_gradients(store, batch_len, graph_for, build)?;
    let dim = store.flat_dim();
    let groups = batch_len / microbatch;

    let mut sum = vec![0.0; dim];
    let mut pre_clip_norms = Vec::with_capacity(groups);
    let mut max_clipped_norm = 0.0f64;
    let mut loss_total = 0.0;
    for group in 0..groups {
        let mut mean = vec![0.0; dim];
        for (g, loss) in &per_example[group * microbatch..(group + 1) * microbatch] {
            for (acc, v) in mean.iter_mut().zip(g) {
                *acc += v;
            }
            loss_total += loss;
        }
        for v in &mut mean {
            *v /= microbatch as f64;
        }
        let pre = match clip {
            Some(c) => clip_gradient(&mut mean, c),
            None => l2_norm(&mean),
        };
        pre_clip_norms.push(pre);
        max_clipped_norm = max_clipped_norm.max(l2_norm(&mean));
        for (acc, v) in sum.iter_mut().zip(&mean) {
            *acc += v;
        }
    }

    if z > 0.0 {
        let sigma = z * clip.expect("checked above");
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| OptimError::BadConfig(format!("noise scale: {}", e)))?;
        for v in &mut sum {
            *v += normal.sample(noise_rng);
        }
    }
    for v in &mut sum {
        *v /= groups as f64;
    }
    Ok(StepOutcome {
        gradient: sum,
        mean_loss: loss_total / batch_len as f64,
        pre_clip_norms,
        max_clipped_norm,
    })
}

/// Loss and accuracy of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Everything a finished training run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Optimizer steps taken, for the privacy accountant.
    pub steps: u64,
    /// Clipping norm in force, when clipping was on.
    pub clip: Option<f64>,
    /// Epoch whose weights the checkpoint holds (early stopping only).
    pub best_epoch: Option<usize>,
    pub per_epoch: Vec<EpochStats>,
    /// Pre-clip batch-mean gradient norm per step, logged on non-private
    /// runs for clipping-norm calibration.
    pub grad_norms: Vec<f64>,
    /// Largest post-clip microbatch norm seen, private runs only.
    pub max_microbatch_norm: Option<f64>,
}

/// Early-stopping state: strictly lower validation loss resets the clock.
pub(crate) struct EarlyStop {
    patience: usize,
    best: f64,
    pub(crate) best_epoch: usize,
    since: usize,
}

impl EarlyStop {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStop { patience, best: f64::INFINITY, best_epoch: 0, since: 0 }
    }

    /// Feeds one epoch's validation loss; true means stop now.
    pub(crate) fn update(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since = 0;
            false
        } else {
            self.since += 1;
            self.since >= self.patience
        }
    }
}

fn eval_mean_loss(
    model_spec: &crate::model::ModelSpec,
    store: &ParamStore,
    taxonomy: &Taxonomy,
    records: &[Record],
) -> Result<f64, OptimError> {
    let mut total = 0.0;
    for record in records {
        let mut g = Graph::eval();
        let loss = build_loss(model_spec, &mut g, store, taxonomy, record)?;
        total += g.value(loss).item();
    }
    Ok(total / records.len() as f64)
}

fn predicted_paths(
    model_spec: &crate::model::ModelSpec,
    store: &ParamStore,
    taxonomy: &Taxonomy,
    records: &[Record],
) -> Result<Vec<LabelPath>, OptimError> {
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let mut g = Graph::eval();
        let logits = build_logits(model_spec, &mut g, store, &record.token_ids)?;
        let probs: Vec<Vec<f64>> = logits
            .into_iter()
            .map(|l| {
                let p = g.softmax(l);
                g.value(p).data().to_vec()
            })
            .collect();
        out.push(resolve_path(taxonomy, &probs)?.0);
    }
    Ok(out)
}

fn split_accuracy(
    model_spec: &crate::model::ModelSpec,
    store: &ParamStore,
    taxonomy: &Taxonomy,
    records: &[Record],
) -> Result<f64, OptimError> {
    let preds = predicted_paths(model_spec, store, taxonomy, records)?;
    let truths: Vec<LabelPath> = records.iter().map(|r| r.label.clone()).collect();
    Ok(flat_accuracy(&preds, &truths)?)
}

/// Trains the model in place. The checkpoint left in the model is the
/// best-validation-loss snapshot when early stopping is on, the final
/// weights otherwise. Same seed and config, same report and weights.
pub fn train(
    model: &mut HtcModel,
    taxonomy: &Taxonomy,
    train_set: &[Record],
    val_set: &[Record],
    config: &DpConfig,
    seed: u64,
) -> Result<TrainReport, OptimError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(OptimError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(OptimError::EmptySplit("validation"));
    }
    let b = config.batch_size;
    let steps_per_epoch = train_set.len() / b;
    if steps_per_epoch == 0 {
        return Err(OptimError::BadConfig(format!(
            "batch size {} exceeds the {}-record train split",
            b,
            train_set.len()
        )));
    }
    let private = config.is_private();
    let clip = match config.clip {
        ClipNorm::Fixed(c) => Some(c),
        _ => None,
    };

    let HtcModel { spec, store } = model;
    let mut adam = Adam::new(store.flat_dim(), config.adam);
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);
    let mut noise_rng = stream_rng(seed, Stream::Noise);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut per_epoch = Vec::new();
    let mut grad_norms = Vec::new();
    let mut max_microbatch_norm = 0.0f64;
    let mut stopper = config.patience.map(EarlyStop::new);
    let mut best_snapshot: Option<ParamStore> = None;
    let mut steps: u64 = 0;
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        // Fisher-Yates on a continuing stream: every epoch reshuffles.
        for i in (1..order.len()).rev() {
            let j = (rand::Rng::gen::<u64>(&mut shuffle_rng) % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        let mut loss_sum = 0.0;
        for step in 0..steps_per_epoch {
            let batch: Vec<&Record> =
                order[step * b..(step + 1) * b].iter().map(|&i| &train_set[i]).collect();
            let draw_base = steps * b as u64;
            let mut graph_for = |i: usize| {
                Graph::train(record_rng(seed, Stream::Dropout, draw_base + i as u64))
            };
            let mut build = |g: &mut Graph, s: &ParamStore, i: usize| {
                build_loss(spec, g, s, taxonomy, batch[i]).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::ShapeMismatch {
                        op: "model-loss",
                        detail: other.to_string(),
                    },
                })
            };
            let (gradient, mean_loss) = if private {
                let out = dp_step(
                    store,
                    b,
                    &mut graph_for,
                    &mut build,
                    config.noise_multiplier,
                    clip,
                    config.microbatch,
                    &mut noise_rng,
                )?;
                max_microbatch_norm = max_microbatch_norm.max(out.max_clipped_norm);
                (out.gradient, out.mean_loss)
            } else {
                let (g, loss) = batch_mean_gradient(store, b, &mut graph_for, &mut build)?;
                grad_norms.push(l2_norm(&g));
                (g, loss)
            };
            steps += 1;
            if !mean_loss.is_finite() || gradient.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::Diverged { epoch, step: steps });
            }
            adam.step(store, &gradient)?;
            loss_sum += mean_loss;
        }

        let train_loss = loss_sum / steps_per_epoch as f64;
        let val_loss = eval_mean_loss(spec, store, taxonomy, val_set)?;
        if !val_loss.is_finite() {
            return Err(OptimError::Diverged { epoch, step: steps });
        }
        per_epoch.push(EpochStats {
            epoch,
            train_loss,
            train_accuracy: split_accuracy(spec, store, taxonomy, train_set)?,
            val_loss,
            val_accuracy: split_accuracy(spec, store, taxonomy, val_set)?,
        });

        if let Some(stopper) = &mut stopper {
            let stop = stopper.update(epoch, val_loss);
            if stopper.best_epoch == epoch {
                best_snapshot = Some(store.snapshot());
            }
            if stop {
                break;
            }
        }
    }

    let best_epoch = stopper.as_ref().map(|s| s.best_epoch);
    if let Some(snapshot) = best_snapshot {
        *store = snapshot;
    }
    Ok(TrainReport {
        epochs_run,
        steps,
        clip,
        best_epoch,
        per_epoch,
        grad_norms: if private { Vec::new() } else { grad_norms },
        max_microbatch_norm: private.then_some(max_microbatch_norm),
    })
}

/// Runs one non-private training on a copy of the model and returns the
/// lower median of its per-step batch-gradient norms, the clipping norm a
/// subsequent private run should use.
pub fn calibrate_clipping_norm(
    model: &HtcModel,
    taxonomy: &Taxonomy,
    train_set: &[Record],
    val_set: &[Record],
    config: &DpConfig,
    seed: u64,
) -> Result<(f64, TrainReport), OptimError> {
    let mut reference = HtcModel {
        spec: model.spec.clone(),
        store: model.store.snapshot(),
    };
    let reference_config = DpConfig {
        noise_multiplier: 0.0,
        clip: ClipNorm::Off,
        ..config.clone()
    };
    let report = train(
        &mut reference,
        taxonomy,
        train_set,
        val_set,
        &reference_config,
        seed,
    )?;
    let c = lower_median(&report.grad_norms)
        .ok_or_else(|| OptimError::BadConfig("calibration run took no steps".to_string()))?;
    if !(c > 0.0) {
        return Err(OptimError::BadConfig(format!(
            "calibrated clipping norm {} is not positive",
            c
        )));
    }
    Ok((c, report))
}

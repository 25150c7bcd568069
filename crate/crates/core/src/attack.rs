//! White-box membership inference against a trained checkpoint: split
//! construction, per-record feature extraction (losses, softmax outputs,
//! label one-hots, selected parameter gradients, hierarchy features), a
//! multi-encoder binary attack classifier, and the empirical privacy
//! report with its comparison against the differential-privacy bound.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Record;
use crate::model::{
    build_logits, consistency_check, prediction_confidence, HtcModel, ModelError, ModelSpec,
};
use crate::optim::{Adam, AdamParams, EarlyStop, OptimError};
use crate::privacy::{advantage_bound, advantage_bound_is_vacuous};
use crate::rng::{record_rng, Stream};
use crate::taxonomy::{NodeId, Taxonomy};
use crate::tensor::{batch_mean_gradient, Graph, ParamStore, Tensor, TensorError};

/// Word-position slots carving the attack RNG stream into independent
/// spans: split shuffling, classifier init, epoch shuffling, holdout.
const SPLIT_SLOT: u64 = 0;
const INIT_SLOT: u64 = 1;
const SHUFFLE_SLOT: u64 = 2;
const HOLDOUT_SLOT: u64 = 3;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack io: {0}")]
    Io(#[from] std::io::Error),
    #[error("attack records line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("known fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("{0} side of the attack split is empty")]
    EmptySplit(&'static str),
    #[error("feature shapes differ across records: {0}")]
    FeatureShape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("attack training diverged at epoch {0}")]
    Diverged(usize),
}

/// Membership-labeled record pools for attack training and evaluation.
/// Members come from the target's train split, non-members from its test
/// split; the attack-test side is balanced by downsampling.
#[derive(Debug, Clone)]
pub struct AttackSplit {
    pub train_members: Vec<Record>,
    pub train_non_members: Vec<Record>,
    pub test_members: Vec<Record>,
    pub test_non_members: Vec<Record>,
}

/// Carves attack splits out of the target's train and test data: the known
/// fraction of each side becomes attack-train, and equal counts from the
/// remainders form a balanced attack-test.
pub fn build_attack_splits(
    target_train: &[Record],
    target_test: &[Record],
    known_fraction: f64,
    seed: u64,
) -> Result<AttackSplit, AttackError> {
    if !(known_fraction > 0.0 && known_fraction < 1.0) {
        return Err(AttackError::BadFraction(known_fraction));
    }
    if target_train.is_empty() {
        return Err(AttackError::EmptySplit("member"));
    }
    if target_test.is_empty() {
        return Err(AttackError::EmptySplit("non-member"));
    }
    let mut rng = record_rng(seed, Stream::Attack, SPLIT_SLOT);
    let shuffle = |records: &[Record], rng: &mut rand_chacha::ChaCha8Rng| {
        let mut out = records.to_vec();
        for i in (1..out.len()).rev() {
            let j = (rng.gen::<u64>() % (i as u64 + 1)) as usize;
            out.swap(i, j);
        }
        out
    };
    let members = shuffle(target_train, &mut rng);
    let non_members = shuffle(target_test, &mut rng);

    let known_m = (known_fraction * members.len() as f64).floor() as usize;
    let known_n = (known_fraction * non_members.len() as f64).floor() as usize;
    if known_m == 0 || known_n == 0 {
        return Err(AttackError::EmptySplit("attack-train"));
    }
    let test_each = (members.len() - known_m).min(non_members.len() - known_n);
    if test_each == 0 {
        return Err(AttackError::EmptySplit("attack-test"));
    }
    Ok(AttackSplit {
        train_members: members[..known_m].to_vec(),
        train_non_members: non_members[..known_n].to_vec(),
        test_members: members[known_m..known_m + test_each].to_vec(),
        test_non_members: non_members[known_n..known_n + test_each].to_vec(),
    })
}

/// Which features the adversary observes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Append the hierarchy features (consistency bit, path confidence).
    pub with_htc_features: bool,
    /// Parameter names whose gradients become features; `None` selects
    /// every per-level head weight matrix.
    pub gradient_groups: Option<Vec<String>>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { with_htc_features: false, gradient_groups: None }
    }
}

impl FeatureConfig {
    pub fn resolve_groups(&self, spec: &ModelSpec) -> Vec<String> {
        match &self.gradient_groups {
            Some(groups) => groups.clone(),
            None => (1..=spec.k).map(|l| format!("head{:02}.w", l)).collect(),
        }
    }
}

/// Hierarchy-specific attack features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HtcFeatures {
    /// 1.0 when the per-level argmaxes already chain parent to child.
    pub consistency: f64,
    /// Product of per-level top probabilities.
    pub confidence: f64,
}

/// Everything the adversary sees about one record, plus its membership
/// label. Feature dimensions are constant across records of one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub source_id: String,
    /// Per-level cross-entropy; masked levels contribute 0.
    pub losses: Vec<f64>,
    /// Per-level softmax vectors.
    pub softmax: Vec<Vec<f64>>,
    /// Per-level one-hot label encodings, ABSENT slot included.
    pub label_onehot: Vec<Vec<f64>>,
    /// Flattened gradient per configured parameter group.
    pub gradients: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub htc: Option<HtcFeatures>,
    pub member: bool,
}

/// Extracts features for one record from a scratch copy of the target's
/// parameters (gradient slots are used as workspace; values stay intact).
fn extract_with_scratch(
    spec: &ModelSpec,
    scratch: &mut ParamStore,
    taxonomy: &Taxonomy,
    record: &Record,
    groups: &[String],
    with_htc: bool,
    member: bool,
) -> Result<AttackRecord, AttackError> {
    let mut g = Graph::eval();
    let logits = build_logits(spec, &mut g, scratch, &record.token_ids)?;

    let mut losses = Vec::with_capacity(spec.k);
    let mut softmax = Vec::with_capacity(spec.k);
    let mut label_onehot = Vec::with_capacity(spec.k);
    let mut terms = Vec::new();
    for (i, &level_logits) in logits.iter().enumerate() {
        let level = i + 1;
        let width = spec.head_width(level);
        let probs = g.softmax(level_logits);
        softmax.push(g.value(probs).data().to_vec());
        let target = match record.label.at_level(level) {
            Some(node) => Some(crate::model::within_level_index(taxonomy, node)?),
            None => spec.absent_index(level),
        };
        let mut onehot = vec![0.0; width];
        match target {
            Some(t) => {
                onehot[t] = 1.0;
                let term = g.cross_entropy_logits(level_logits, t)?;
                losses.push(g.value(term).item());
                terms.push(term);
            }
            None => losses.push(0.0),
        }
        label_onehot.push(onehot);
    }

    scratch.zero_grads();
    let total = g.sum_scalars(&terms)?;
    g.backward(total, scratch)?;
    let mut gradients = Vec::with_capacity(groups.len());
    for name in groups {
        let grad = scratch
            .grad(name)
            .ok_or(TensorError::UnknownParam(name.clone()))?;
        gradients.push(grad.data().to_vec());
    }
    scratch.zero_grads();

    let htc = with_htc.then(|| {
        let argmax: Vec<Option<NodeId>> = softmax
            .iter()
            .enumerate()
            .map(|(i, probs)| {
                let level = i + 1;
                let best = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("softmax is finite"))
                    .map(|(j, _)| j)
                    .expect("non-empty probabilities");
                match spec.absent_index(level) {
                    Some(a) if best == a => None,
                    _ => Some(taxonomy.nodes_at_level(level)[best]),
                }
            })
            .collect();
        let filled: Vec<NodeId> =
            argmax.iter().take_while(|a| a.is_some()).map(|a| a.unwrap()).collect();
        let tail_clean = argmax[filled.len()..].iter().all(|a| a.is_none());
        let consistent =
            tail_clean && !filled.is_empty() && consistency_check(taxonomy, &filled);
        HtcFeatures {
            consistency: consistent as u8 as f64,
            confidence: prediction_confidence(&softmax),
        }
    });

    Ok(AttackRecord {
        source_id: record.source_id.clone(),
        losses,
        softmax,
        label_onehot,
        gradients,
        htc,
        member,
    })
}

/// Features for one record; clones the parameter store, so prefer
/// [`extract_corpus`] for batches.
pub fn extract_features(
    model: &HtcModel,
    taxonomy: &Taxonomy,
    record: &Record,
    config: &FeatureConfig,
    member: bool,
) -> Result<AttackRecord, AttackError> {
    let mut scratch = model.store.snapshot();
    let groups = config.resolve_groups(&model.spec);
    extract_with_scratch(
        &model.spec,
        &mut scratch,
        taxonomy,
        record,
        &groups,
        config.with_htc_features,
        member,
    )
}

/// Features for a whole record pool under one membership label.
pub fn extract_corpus(
    model: &HtcModel,
    taxonomy: &Taxonomy,
    records: &[Record],
    config: &FeatureConfig,
    member: bool,
) -> Result<Vec<AttackRecord>, AttackError> {
    let mut scratch = model.store.snapshot();
    let groups = config.resolve_groups(&model.spec);
    records
        .iter()
        .map(|record| {
            extract_with_scratch(
                &model.spec,
                &mut scratch,
                taxonomy,
                record,
                &groups,
                config.with_htc_features,
                member,
            )
        })
        .collect()
}

/// Splits a record into its feature groups, in a fixed order: losses,
/// softmax, one-hots, each gradient group, then hierarchy features.
pub fn feature_groups(record: &AttackRecord) -> Vec<Vec<f64>> {
    let mut groups = vec![
        record.losses.clone(),
        record.softmax.concat(),
        record.label_onehot.concat(),
    ];
    groups.extend(record.gradients.iter().cloned());
    if let Some(htc) = &record.htc {
        groups.push(vec![htc.consistency, htc.confidence]);
    }
    groups
}

fn group_dims(record: &AttackRecord) -> Vec<usize> {
    feature_groups(record).iter().map(|g| g.len()).collect()
}

/// Per-coordinate affine normalization fitted on attack-train features.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupNorm {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl GroupNorm {
    fn fit(columns: usize, rows: &[Vec<f64>]) -> GroupNorm {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; columns];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; columns];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(1e-6))
            .collect();
        GroupNorm { mean, std }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Attack optimizer settings; the defaults are the documented baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
}

impl Default for AttackTrainConfig {
    fn default() -> Self {
        AttackTrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 40,
            patience: 3,
            holdout_fraction: 0.1,
        }
    }
}

const ENCODER_WIDTH: usize = 64;
const HEAD_WIDTHS: [usize; 2] = [128, 64];

/// The trained binary attack classifier: one fully-connected encoder per
/// feature group, concatenated into a two-layer head with a sigmoid output.
#[derive(Debug)]
pub struct AttackModel {
    store: ParamStore,
    norms: Vec<GroupNorm>,
    group_dims: Vec<usize>,
}

fn build_attack_logit(
    g: &mut Graph,
    store: &ParamStore,
    groups: &[Vec<f64>],
) -> Result<crate::tensor::NodeId, TensorError> {
    let mut encoded = Vec::with_capacity(groups.len());
    for (i, features) in groups.iter().enumerate() {
        let x = g.leaf(Tensor::vector(features.clone()));
        let w = g.param(store, &format!("enc{:02}.w", i))?;
        let b = g.param(store, &format!("enc{:02}.b", i))?;
        let h = g.matmul(x, w)?;
        let h = g.add_bias(h, b)?;
        encoded.push(g.relu(h));
    }
    let mut x = g.concat(&encoded)?;
    for (i, _) in HEAD_WIDTHS.iter().enumerate() {
        let w = g.param(store, &format!("head{}.w", i + 1))?;
        let b = g.param(store, &format!("head{}.b", i + 1))?;
        let h = g.matmul(x, w)?;
        let h = g.add_bias(h, b)?;
        x = g.relu(h);
    }
    let w = g.param(store, "out.w")?;
    let b = g.param(store, "out.b")?;
    let logit = g.matmul(x, w)?;
    g.add_bias(logit, b)
}

impl AttackModel {
    /// Membership score in (0,1) for one record's features.
    pub fn score(&self, record: &AttackRecord) -> Result<f64, AttackError> {
        let groups = self.normalized(record)?;
        let mut g = Graph::eval();
        let logit = build_attack_logit(&mut g, &self.store, &groups)?;
        let s = g.sigmoid(logit);
        Ok(g.value(s).item())
    }

    pub fn scores(&self, records: &[AttackRecord]) -> Result<Vec<f64>, AttackError> {
        records.iter().map(|r| self.score(r)).collect()
    }

    fn normalized(&self, record: &AttackRecord) -> Result<Vec<Vec<f64>>, AttackError> {
        let dims = group_dims(record);
        if dims != self.group_dims {
            return Err(AttackError::FeatureShape(format!(
                "{:?} vs trained {:?}",
                dims, self.group_dims
            )));
        }
        Ok(feature_groups(record)
            .iter()
            .zip(&self.norms)
            .map(|(group, norm)| norm.apply(group))
            .collect())
    }
}

/// Trains the attack classifier on membership-labeled features with plain
/// Adam (the adversary is unconstrained), early-stopped with the given
/// patience on a holdout slice of attack-train.
pub fn train_attack_model(
    records: &[AttackRecord],
    config: &AttackTrainConfig,
    seed: u64,
) -> Result<AttackModel, AttackError> {
    if records.len() < 2 {
        return Err(AttackError::EmptySplit("attack-train"));
    }
    let dims = group_dims(&records[0]);
    for r in records {
        if group_dims(r) != dims {
            return Err(AttackError::FeatureShape(format!(
                "{:?} vs {:?}",
                group_dims(r),
                dims
            )));
        }
    }

    let raw_groups: Vec<Vec<Vec<f64>>> = records.iter().map(feature_groups).collect();
    let norms: Vec<GroupNorm> = dims
        .iter()
        .enumerate()
        .map(|(gi, &dim)| {
            let rows: Vec<Vec<f64>> =
                raw_groups.iter().map(|groups| groups[gi].clone()).collect();
            GroupNorm::fit(dim, &rows)
        })
        .collect();
    let features: Vec<Vec<Vec<f64>>> = raw_groups
        .iter()
        .map(|groups| {
            groups
                .iter()
                .zip(&norms)
                .map(|(group, norm)| norm.apply(group))
                .collect()
        })
        .collect();
    let targets: Vec<f64> = records.iter().map(|r| r.member as u8 as f64).collect();

    let mut init_rng = record_rng(seed, Stream::Attack, INIT_SLOT);
    let mut store = ParamStore::new();
    let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    for (i, &dim) in dims.iter().enumerate() {
        store.insert_random(
            &format!("enc{:02}.w", i),
            vec![dim, ENCODER_WIDTH],
            glorot(dim, ENCODER_WIDTH),
            &mut init_rng,
        )?;
        store.insert_zeros(&format!("enc{:02}.b", i), vec![ENCODER_WIDTH])?;
    }
    let mut in_width = ENCODER_WIDTH * dims.len();
    for (i, &width) in HEAD_WIDTHS.iter().enumerate() {
        store.insert_random(
            &format!("head{}.w", i + 1),
            vec![in_width, width],
            glorot(in_width, width),
            &mut init_rng,
        )?;
        store.insert_zeros(&format!("head{}.b", i + 1), vec![width])?;
        in_width = width;
    }
    store.insert_random("out.w", vec![in_width, 1], glorot(in_width, 1), &mut init_rng)?;
    store.insert_zeros("out.b", vec![1])?;

    // Holdout carve for early stopping.
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut holdout_rng = record_rng(seed, Stream::Attack, HOLDOUT_SLOT);
    for i in (1..order.len()).rev() {
        let j = (holdout_rng.gen::<u64>() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let holdout_len =
        ((records.len() as f64 * config.holdout_fraction).round() as usize).max(1);
    let (holdout_idx, train_idx) = order.split_at(holdout_len.min(records.len() - 1));
    let holdout_idx = holdout_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut adam = Adam::new(store.flat_dim(), AdamParams::with_learning_rate(config.learning_rate));
    let mut shuffle_rng = record_rng(seed, Stream::Attack, SHUFFLE_SLOT);
    let mut stopper = EarlyStop::new(config.patience);
    let mut best: Option<ParamStore> = None;

    let eval_loss = |store: &ParamStore, idx: &[usize]| -> Result<f64, AttackError> {
        let mut total = 0.0;
        for &i in idx {
            let mut g = Graph::eval();
            let logit = build_attack_logit(&mut g, store, &features[i])?;
            let loss = g.bce_with_logit(logit, targets[i])?;
            total += g.value(loss).item();
        }
        Ok(total / idx.len() as f64)
    };

    for epoch in 1..=config.max_epochs {
        for i in (1..train_idx.len()).rev() {
            let j = (shuffle_rng.gen::<u64>() % (i as u64 + 1)) as usize;
            train_idx.swap(i, j);
        }
        let batch = config.batch_size.min(train_idx.len());
        for chunk in train_idx.chunks(batch) {
            if chunk.len() < batch {
                break;
            }
            let mut graph_for = |_: usize| Graph::eval();
            let mut build = |g: &mut Graph, s: &ParamStore, i: usize| {
                let logit = build_attack_logit(g, s, &features[chunk[i]])?;
                g.bce_with_logit(logit, targets[chunk[i]])
            };
            let (grad, loss) =
                batch_mean_gradient(&mut store, chunk.len(), &mut graph_for, &mut build)?;
            if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(AttackError::Diverged(epoch));
            }
            adam.step(&mut store, &grad)?;
        }
        let holdout_loss = eval_loss(&store, &holdout_idx)?;
        if !holdout_loss.is_finite() {
            return Err(AttackError::Diverged(epoch));
        }
        let stop = stopper.update(epoch, holdout_loss);
        if stopper.best_epoch == epoch {
            best = Some(store.snapshot());
        }
        if stop {
            break;
        }
    }
    if let Some(snapshot) = best {
        store = snapshot;
    }
    Ok(AttackModel { store, norms, group_dims: dims })
}

/// One operating point on the ROC curve. The (0,0) anchor sits above
/// every score and has no threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: Option<f64>,
    pub fpr: f64,
    pub tpr: f64,
}

/// Empirical attack performance next to the theoretical privacy bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub members: usize,
    pub non_members: usize,
    /// Accuracy, TPR, and FPR at the 0.5 score threshold.
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Membership advantage TPR - FPR.
    pub advantage: f64,
    /// Rank-statistic AUC, ties counted half.
    pub auc: f64,
    pub roc: Vec<RocPoint>,
    /// The target's (epsilon, delta) epsilon, when it was trained with DP.
    pub epsilon: Option<f64>,
    /// exp(epsilon) - 1, when epsilon is known.
    pub advantage_bound: Option<f64>,
    /// True when the bound exceeds 1 and so constrains nothing.
    pub bound_vacuous: Option<bool>,
}

/// Scores the attack on a balanced test split. Threshold metrics use 0.5
/// (strictly greater means member); AUC comes from the Mann-Whitney rank
/// statistic and the ROC points from a descending-threshold sweep.
pub fn evaluate_attack(
    member_scores: &[f64],
    non_member_scores: &[f64],
    epsilon: Option<f64>,
) -> AttackReport {
    let m = member_scores.len() as f64;
    let n = non_member_scores.len() as f64;
    let tp = member_scores.iter().filter(|&&s| s > 0.5).count() as f64;
    let fp = non_member_scores.iter().filter(|&&s| s > 0.5).count() as f64;
    let tpr = tp / m;
    let fpr = fp / n;
    let accuracy = (tp + (n - fp)) / (m + n);

    let mut concordant = 0.0;
    for &ms in member_scores {
        for &ns in non_member_scores {
            if ms > ns {
                concordant += 1.0;
            } else if ms == ns {
                concordant += 0.5;
            }
        }
    }
    let auc = concordant / (m * n);

    let mut thresholds: Vec<f64> = member_scores
        .iter()
        .chain(non_member_scores)
        .copied()
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    thresholds.dedup();
    let mut roc = vec![RocPoint { threshold: None, fpr: 0.0, tpr: 0.0 }];
    for &t in &thresholds {
        roc.push(RocPoint {
            threshold: Some(t),
            fpr: non_member_scores.iter().filter(|&&s| s >= t).count() as f64 / n,
            tpr: member_scores.iter().filter(|&&s| s >= t).count() as f64 / m,
        });
    }

    AttackReport {
        members: member_scores.len(),
        non_members: non_member_scores.len(),
        accuracy,
        tpr,
        fpr,
        advantage: tpr - fpr,
        auc,
        roc,
        epsilon,
        advantage_bound: epsilon.map(advantage_bound),
        bound_vacuous: epsilon.map(|e| advantage_bound_is_vacuous(advantage_bound(e))),
    }
}

/// Trapezoidal area under the report's ROC points; equals the rank AUC.
pub fn roc_trapezoid_area(roc: &[RocPoint]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Writes attack records as JSON Lines.
pub fn write_attack_records(
    path: &Path,
    records: &[AttackRecord],
) -> Result<(), AttackError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_attack_records(path: &Path) -> Result<Vec<AttackRecord>, AttackError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AttackError::MalformedLine {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabulary, encode_records, synth_corpus};
    use crate::model::EncoderConfig;
    use crate::rng::stream_rng;
    use crate::taxonomy::LabelPath;

    fn dummy_records(n: usize, prefix: &str) -> Vec<Record> {
        (0..n)
            .map(|i| Record {
                token_ids: vec![2, 3, 4, 5, 6],
                label: LabelPath::new(vec![Some(NodeId(0))]),
                source_id: format!("{}:{}", prefix, i),
            })
            .collect()
    }

    #[test]
    fn attack_splits_follow_the_known_fraction_and_balance_the_test() {
        let members = dummy_records(100, "m");
        let non_members = dummy_records(100, "n");
        let s = build_attack_splits(&members, &non_members, 0.5, 1).unwrap();
        assert_eq!(s.train_members.len(), 50);
        assert_eq!(s.train_non_members.len(), 50);
        assert_eq!(s.test_members.len(), 50);
        assert_eq!(s.test_non_members.len(), 50);

        let uneven = build_attack_splits(&members, &dummy_records(60, "n"), 0.5, 1).unwrap();
        assert_eq!(uneven.train_members.len(), 50);
        assert_eq!(uneven.train_non_members.len(), 30);
        assert_eq!(uneven.test_members.len(), 30);
        assert_eq!(uneven.test_non_members.len(), 30);
    }

    #[test]
    fn attack_splits_are_disjoint_for_any_seed() {
        let members = dummy_records(40, "m");
        let non_members = dummy_records(25, "n");
        for seed in 0..10 {
            let s = build_attack_splits(&members, &non_members, 0.5, seed).unwrap();
            let train: std::collections::HashSet<&str> = s
                .train_members
                .iter()
                .chain(&s.train_non_members)
                .map(|r| r.source_id.as_str())
                .collect();
            for r in s.test_members.iter().chain(&s.test_non_members) {
                assert!(!train.contains(r.source_id.as_str()));
            }
        }
    }

    #[test]
    fn attack_split_validation() {
        let members = dummy_records(10, "m");
        assert!(matches!(
            build_attack_splits(&members, &members, 0.0, 0),
            Err(AttackError::BadFraction(_))
        ));
        assert!(matches!(
            build_attack_splits(&members, &members, 1.0, 0),
            Err(AttackError::BadFraction(_))
        ));
        assert!(matches!(
            build_attack_splits(&[], &members, 0.5, 0),
            Err(AttackError::EmptySplit("member"))
        ));
        // One non-member: the known fraction floors to zero of them.
        assert!(matches!(
            build_attack_splits(&members, &dummy_records(1, "n"), 0.5, 0),
            Err(AttackError::EmptySplit("attack-train"))
        ));
    }

    fn fixture() -> (Taxonomy, HtcModel, Vec<Record>) {
        let t = Taxonomy::from_tsv_str("a\t*\nb\t*\na1\ta\na2\ta\nb1\tb\nb2\tb\n").unwrap();
        let raw = synth_corpus(&t, 40, 48, 3).unwrap();
        let seqs: Vec<Vec<String>> =
            raw.iter().map(|r| crate::data::tokenize(&r.text)).collect();
        let vocab = build_vocabulary(&seqs, 1).unwrap();
        let records = encode_records(&raw, &vocab, 24);
        let mut rng = stream_rng(7, Stream::Init);
        let model = HtcModel::new(
            EncoderConfig::bow(8),
            &t,
            2,
            &vocab,
            vec![false, false],
            &mut rng,
        )
        .unwrap();
        (t, model, records)
    }

    #[test]
    fn features_are_deterministic_and_match_the_loss() {
        let (t, model, records) = fixture();
        let cfg = FeatureConfig { with_htc_features: true, gradient_groups: None };
        let a = extract_features(&model, &t, &records[0], &cfg, true).unwrap();
        let b = extract_features(&model, &t, &records[0], &cfg, true).unwrap();
        assert_eq!(a, b);
        let total: f64 = a.losses.iter().sum();
        let direct = model.loss_value(&t, &records[0]).unwrap();
        assert!((total - direct).abs() < 1e-12);
        assert!(a.member);
    }

    #[test]
    fn gradient_features_cover_the_head_weights() {
        let (t, model, records) = fixture();
        let cfg = FeatureConfig::default();
        let rec = extract_features(&model, &t, &records[1], &cfg, false).unwrap();
        // Two levels, head weight matrices are [encoder_out, width].
        assert_eq!(rec.gradients.len(), 2);
        assert_eq!(rec.gradients[0].len(), 8 * 2);
        assert_eq!(rec.gradients[1].len(), 8 * 4);
        assert!(rec.htc.is_none());

        let mut scratch = model.store.snapshot();
        scratch.zero_grads();
        let mut g = Graph::eval();
        let loss = model.build_loss(&mut g, &scratch, &t, &records[1]).unwrap();
        g.backward(loss, &mut scratch).unwrap();
        assert_eq!(rec.gradients[0], scratch.grad("head01.w").unwrap().data());
        assert_eq!(rec.gradients[1], scratch.grad("head02.w").unwrap().data());
    }

    #[test]
    fn htc_consistency_bit_matches_the_prediction_view() {
        let (t, model, records) = fixture();
        let cfg = FeatureConfig { with_htc_features: true, gradient_groups: None };
        for record in records.iter().take(10) {
            let feat = extract_features(&model, &t, record, &cfg, false).unwrap();
            let pred = model.predict(&t, record).unwrap();
            let htc = feat.htc.unwrap();
            assert_eq!(htc.consistency, pred.is_consistent(&t) as u8 as f64);
            assert!((htc.confidence - pred.confidence()).abs() < 1e-12);
        }
    }

    #[test]
    fn attack_records_round_trip_through_jsonl() {
        let (t, model, records) = fixture();
        let cfg = FeatureConfig { with_htc_features: true, gradient_groups: None };
        let feats = extract_corpus(&model, &t, &records[..5], &cfg, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        write_attack_records(&path, &feats).unwrap();
        let back = read_attack_records(&path).unwrap();
        assert_eq!(feats, back);
    }

    /// Synthetic attack corpus: a one-group feature record with a location
    /// shift of `gap` between members and non-members.
    fn synthetic_features(
        n_per_class: usize,
        gap: f64,
        seed: u64,
    ) -> Vec<AttackRecord> {
        let mut rng = stream_rng(seed, Stream::Attack);
        let mut out = Vec::new();
        for i in 0..2 * n_per_class {
            let member = i % 2 == 0;
            let shift = if member { gap } else { 0.0 };
            let losses: Vec<f64> = (0..3)
                .map(|_| rng.gen::<f64>() + shift)
                .collect();
            out.push(AttackRecord {
                source_id: format!("synthetic:{}", i),
                losses,
                softmax: vec![vec![0.5, 0.5]],
                label_onehot: vec![vec![1.0, 0.0]],
                gradients: vec![vec![rng.gen::<f64>() - 0.5 + shift; 4]],
                htc: None,
                member,
            })
        }
        out
    }

    #[test]
    fn attack_model_learns_a_separable_signal() {
        let train = synthetic_features(60, 2.0, 10);
        let test = synthetic_features(40, 2.0, 11);
        let model = train_attack_model(&train, &AttackTrainConfig::default(), 5).unwrap();
        let member_scores: Vec<f64> = test
            .iter()
            .filter(|r| r.member)
            .map(|r| model.score(r).unwrap())
            .collect();
        let non_scores: Vec<f64> = test
            .iter()
            .filter(|r| !r.member)
            .map(|r| model.score(r).unwrap())
            .collect();
        let report = evaluate_attack(&member_scores, &non_scores, None);
        assert!(report.accuracy > 0.9, "accuracy {}", report.accuracy);
        assert!(report.auc > 0.95, "auc {}", report.auc);
    }

    #[test]
    fn attack_model_finds_nothing_in_identical_distributions() {
        let train = synthetic_features(80, 0.0, 21);
        let test = synthetic_features(300, 0.0, 22);
        let model = train_attack_model(&train, &AttackTrainConfig::default(), 9).unwrap();
        let member_scores: Vec<f64> = test
            .iter()
            .filter(|r| r.member)
            .map(|r| model.score(r).unwrap())
            .collect();
        let non_scores: Vec<f64> = test
            .iter()
            .filter(|r| !r.member)
            .map(|r| model.score(r).unwrap())
            .collect();
        let report = evaluate_attack(&member_scores, &non_scores, None);
        assert!(
            (report.accuracy - 0.5).abs() <= 0.05,
            "accuracy {}",
            report.accuracy
        );
    }

    #[test]
    fn attack_training_is_seed_deterministic() {
        let train = synthetic_features(30, 1.0, 2);
        let probe = &synthetic_features(4, 1.0, 3)[0];
        let cfg = AttackTrainConfig { max_epochs: 5, ..AttackTrainConfig::default() };
        let s1 = train_attack_model(&train, &cfg, 7).unwrap().score(probe).unwrap();
        let s2 = train_attack_model(&train, &cfg, 7).unwrap().score(probe).unwrap();
        let s3 = train_attack_model(&train, &cfg, 8).unwrap().score(probe).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, s3);
    }

    #[test]
    fn evaluate_attack_on_perfect_and_worked_scores() {
        let perfect = evaluate_attack(&[1.0, 1.0], &[0.0, 0.0], None);
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.auc, 1.0);
        assert_eq!(perfect.advantage, 1.0);

        // Concordant pairs: (0.9,0.7), (0.9,0.2), (0.6,0.2); discordant:
        // (0.6,0.7). Three of four.
        let worked = evaluate_attack(&[0.9, 0.6], &[0.7, 0.2], None);
        assert!((worked.auc - 0.75).abs() < 1e-15);

        let constant = evaluate_attack(&[0.5; 4], &[0.5; 4], None);
        assert_eq!(constant.auc, 0.5);
        assert_eq!(constant.advantage, 0.0);
        assert_eq!(constant.accuracy, 0.5);
    }

    #[test]
    fn rank_auc_equals_trapezoid_even_with_ties() {
        let mut rng = stream_rng(17, Stream::Attack);
        for _ in 0..20 {
            // Quantized scores force ties within and across classes.
            let members: Vec<f64> =
                (0..37).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let non: Vec<f64> =
                (0..23).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let report = evaluate_attack(&members, &non, None);
            let trapezoid = roc_trapezoid_area(&report.roc);
            assert!(
                (report.auc - trapezoid).abs() < 1e-9,
                "rank {} vs trapezoid {}",
                report.auc,
                trapezoid
            );
            assert_eq!(report.advantage, report.tpr - report.fpr);
            let last = report.roc.last().unwrap();
            assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        }
    }

    #[test]
    fn bound_fields_follow_epsilon() {
        let small = evaluate_attack(&[0.6], &[0.4], Some(0.5));
        assert!((small.advantage_bound.unwrap() - (0.5f64.exp() - 1.0)).abs() < 1e-15);
        assert_eq!(small.bound_vacuous, Some(false));
        let large = evaluate_attack(&[0.6], &[0.4], Some(2.0));
        assert_eq!(large.bound_vacuous, Some(true));
        let none = evaluate_attack(&[0.6], &[0.4], None);
        assert_eq!(none.advantage_bound, None);
    }
}

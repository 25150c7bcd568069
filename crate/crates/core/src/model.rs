//! Hierarchical classifiers: a pluggable text encoder feeding one softmax
//! head per taxonomy level, joint loss over levels, and post-processing
//! that turns per-level probabilities into a hierarchy-consistent path.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Record, Vocabulary};
use crate::taxonomy::{LabelPath, NodeId, Taxonomy};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError};

const MODEL_MAGIC: &[u8; 4] = b"HTCK";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Taxonomy(#[from] crate::taxonomy::TaxonomyError),
    #[error("bad model configuration: {0}")]
    BadConfig(String),
    #[error("sequence of {len} tokens exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("taxonomy has no node at level {k}")]
    NoFullDepthPath { k: usize },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("checkpoint {what} digest {found} does not match current {expected}")]
    DigestMismatch { what: &'static str, expected: String, found: String },
}

/// Encoder architecture and its hyperparameters. The `embedding_dim` of
/// each variant sizes the token embedding table; the constructors carry
/// the default shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderConfig {
    Bow {
        embedding_dim: usize,
    },
    Cnn {
        embedding_dim: usize,
        filter_widths: Vec<usize>,
        filters: usize,
        dropout: f64,
    },
    TinyTransformer {
        embedding_dim: usize,
        layers: usize,
        heads: usize,
        model_dim: usize,
        ff_dim: usize,
        dropout: f64,
        max_positions: usize,
    },
}

impl EncoderConfig {
    pub fn bow(embedding_dim: usize) -> Self {
        EncoderConfig::Bow { embedding_dim }
    }

    pub fn cnn(embedding_dim: usize) -> Self {
        EncoderConfig::Cnn {
            embedding_dim,
            filter_widths: vec![3, 4, 5],
            filters: 100,
            dropout: 0.5,
        }
    }

    pub fn tiny_transformer(embedding_dim: usize) -> Self {
        EncoderConfig::TinyTransformer {
            embedding_dim,
            layers: 2,
            heads: 4,
            model_dim: 128,
            ff_dim: 256,
            dropout: 0.1,
            max_positions: 256,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match *self {
            EncoderConfig::Bow { embedding_dim } => embedding_dim,
            EncoderConfig::Cnn { embedding_dim, .. } => embedding_dim,
            EncoderConfig::TinyTransformer { embedding_dim, .. } => embedding_dim,
        }
    }

    /// Width of the vector handed to the per-level heads.
    pub fn output_dim(&self) -> usize {
        match self {
            EncoderConfig::Bow { embedding_dim } => *embedding_dim,
            EncoderConfig::Cnn { filter_widths, filters, .. } => {
                filter_widths.len() * filters
            }
            EncoderConfig::TinyTransformer { model_dim, .. } => *model_dim,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::BadConfig(msg.to_string()));
        match self {
            EncoderConfig::Bow { embedding_dim } => {
                if *embedding_dim == 0 {
                    return bad("embedding dim must be positive");
                }
            }
            EncoderConfig::Cnn { embedding_dim, filter_widths, filters, dropout } => {
                if *embedding_dim == 0 || *filters == 0 || filter_widths.is_empty() {
                    return bad("cnn needs positive dims and at least one width");
                }
                if filter_widths.iter().any(|&w| w == 0) || !(0.0..1.0).contains(dropout) {
                    return bad("cnn widths must be positive, dropout in [0,1)");
                }
            }
            EncoderConfig::TinyTransformer {
                embedding_dim,
                layers,
                heads,
                model_dim,
                ff_dim,
                dropout,
                max_positions,
            } => {
                if *embedding_dim == 0
                    || *layers == 0
                    || *heads == 0
                    || *model_dim == 0
                    || *ff_dim == 0
                    || *max_positions == 0
                {
                    return bad("transformer dims must be positive");
                }
                if model_dim % heads != 0 {
                    return bad("model dim must be divisible by head count");
                }
                if !(0.0..1.0).contains(dropout) {
                    return bad("transformer dropout must be in [0,1)");
                }
            }
        }
        Ok(())
    }
}

/// Architecture description, separate from the parameters so the trainer
/// can borrow the two independently. Serialized as the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    /// Number of taxonomy levels with a head, counted from the root.
    pub k: usize,
    /// Per level, whether the head carries a trailing ABSENT class for
    /// records whose labels stop above that level.
    pub absent: Vec<bool>,
    /// Real classes per level, ABSENT excluded.
    pub class_counts: Vec<usize>,
    pub vocab_size: usize,
    pub vocab_digest: String,
    pub taxonomy_digest: String,
}

impl ModelSpec {
    /// Head width at `level` (1-based), ABSENT included.
    pub fn head_width(&self, level: usize) -> usize {
        self.class_counts[level - 1] + self.absent[level - 1] as usize
    }

    /// Index of the ABSENT class at `level`, when enabled.
    pub fn absent_index(&self, level: usize) -> Option<usize> {
        self.absent[level - 1].then_some(self.class_counts[level - 1])
    }
}

/// Per level, true when some record's label path stops above that level.
pub fn absent_levels(records: &[Record], k: usize) -> Vec<bool> {
    (1..=k)
        .map(|level| records.iter().any(|r| r.label.at_level(level).is_none()))
        .collect()
}

/// Position of a node inside its level's id-ordered class list.
pub fn within_level_index(taxonomy: &Taxonomy, node: NodeId) -> Result<usize, ModelError> {
    let level = taxonomy.level(node)?;
    Ok(taxonomy
        .nodes_at_level(level)
        .binary_search(&node)
        .expect("node listed at its own level"))
}

/// A trained (or trainable) hierarchical classifier.
#[derive(Debug)]
pub struct HtcModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
}

impl HtcModel {
    /// Builds a freshly initialized model. Weight matrices use a
    /// fan-balanced uniform init, embedding tables uniform(-0.05, 0.05)
    /// with a zeroed PAD row, biases zero, layer-norm gains one. Draws
    /// happen in a fixed registration order, so one seed means one model.
    pub fn new(
        encoder: EncoderConfig,
        taxonomy: &Taxonomy,
        k: usize,
        vocab: &Vocabulary,
        absent: Vec<bool>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        encoder.validate()?;
        if k == 0 || k > taxonomy.depth() {
            return Err(ModelError::BadConfig(format!(
                "trained depth {} outside taxonomy depth {}",
                k,
                taxonomy.depth()
            )));
        }
        if absent.len() != k {
            return Err(ModelError::BadConfig(format!(
                "absent flags cover {} levels, trained depth is {}",
                absent.len(),
                k
            )));
        }
        let spec = ModelSpec {
            encoder,
            k,
            absent,
            class_counts: (1..=k).map(|l| taxonomy.class_count(l)).collect(),
            vocab_size: vocab.size(),
            vocab_digest: vocab.digest().to_string(),
            taxonomy_digest: taxonomy.digest().to_string(),
        };
        let store = init_params(&spec, rng)?;
        Ok(HtcModel { spec, store })
    }

    /// Replaces the token embedding table, e.g. with pre-trained vectors.
    pub fn set_embeddings(&mut self, table: Tensor) -> Result<(), ModelError> {
        let want = [self.spec.vocab_size, self.spec.encoder.embedding_dim()];
        if table.shape() != want {
            return Err(ModelError::BadConfig(format!(
                "embedding table {:?}, model expects {:?}",
                table.shape(),
                want
            )));
        }
        *self
            .store
            .get_mut("emb")
            .expect("initialized model owns emb") = table;
        Ok(())
    }

    /// Per-level logits for one encoded record, rank-1 per level.
    pub fn build_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        token_ids: &[u32],
    ) -> Result<Vec<crate::tensor::NodeId>, ModelError> {
        build_logits(&self.spec, g, store, token_ids)
    }

    /// Scalar training loss for one record: the sum over trained levels of
    /// softmax cross-entropy. Levels past the record's labeled depth use
    /// the ABSENT class when the head has one and drop out of the sum
    /// otherwise.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        taxonomy: &Taxonomy,
        record: &Record,
    ) -> Result<crate::tensor::NodeId, ModelError> {
        build_loss(&self.spec, g, store, taxonomy, record)
    }

    /// Eval-mode forward returning per-level probability vectors.
    pub fn forward_probs(&self, record: &Record) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::eval();
        let logits = self.build_logits(&mut g, &self.store, &record.token_ids)?;
        Ok(logits
            .into_iter()
            .map(|l| {
                let p = g.softmax(l);
                g.value(p).data().to_vec()
            })
            .collect())
    }

    /// Eval-mode loss value for one record.
    pub fn loss_value(
        &self,
        taxonomy: &Taxonomy,
        record: &Record,
    ) -> Result<f64, ModelError> {
        let mut g = Graph::eval();
        let loss = self.build_loss(&mut g, &self.store, taxonomy, record)?;
        Ok(g.value(loss).item())
    }

    /// Full prediction for one record: probabilities, raw per-level
    /// argmaxes, and the resolved hierarchy-consistent path.
    pub fn predict(
        &self,
        taxonomy: &Taxonomy,
        record: &Record,
    ) -> Result<LevelPrediction, ModelError> {
        let probabilities = self.forward_probs(record)?;
        let mut argmax = Vec::with_capacity(self.spec.k);
        for (i, probs) in probabilities.iter().enumerate() {
            let level = i + 1;
            let best = argmax_index(probs);
            argmax.push(match self.spec.absent_index(level) {
                Some(a) if best == a => None,
                _ => Some(taxonomy.nodes_at_level(level)[best]),
            });
        }
        let (path, path_probability) = resolve_path(taxonomy, &probabilities)?;
        Ok(LevelPrediction { probabilities, argmax, path, path_probability })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        let header = serde_json::to_vec(&self.spec)
            .map_err(|e| ModelError::MalformedCheckpoint(e.to_string()))?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        self.store.write_to(w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut input)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(ModelError::MalformedCheckpoint("bad magic".to_string()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != MODEL_VERSION {
            return Err(ModelError::MalformedCheckpoint(format!(
                "unsupported version {}",
                version
            )));
        }
        r.read_exact(&mut word)?;
        let header_len = u32::from_le_bytes(word) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let spec: ModelSpec = serde_json::from_slice(&header)
            .map_err(|e| ModelError::MalformedCheckpoint(e.to_string()))?;
        let store = ParamStore::read_from(r)?;
        Ok(HtcModel { spec, store })
    }

    /// Loads a checkpoint and rejects it unless it was trained against the
    /// same taxonomy and vocabulary contents.
    pub fn load_matching(
        path: &Path,
        taxonomy: &Taxonomy,
        vocab: &Vocabulary,
    ) -> Result<Self, ModelError> {
        let model = Self::load(path)?;
        if model.spec.taxonomy_digest != taxonomy.digest() {
            return Err(ModelError::DigestMismatch {
                what: "taxonomy",
                expected: taxonomy.digest().to_string(),
                found: model.spec.taxonomy_digest.clone(),
            });
        }
        if model.spec.vocab_digest != vocab.digest() {
            return Err(ModelError::DigestMismatch {
                what: "vocabulary",
                expected: vocab.digest().to_string(),
                found: model.spec.vocab_digest.clone(),
            });
        }
        Ok(model)
    }
}

fn glorot_scale(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("sized")
}

fn init_params(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<ParamStore, ModelError> {
    let mut store = ParamStore::new();
    let edim = spec.encoder.embedding_dim();
    store.insert_random("emb", vec![spec.vocab_size, edim], 0.05, rng)?;
    // PAD must stay signal-free at init so padded positions start inert.
    store.get_mut("emb").expect("just inserted").data_mut()[..edim].fill(0.0);

    match &spec.encoder {
        EncoderConfig::Bow { .. } => {}
        EncoderConfig::Cnn { filter_widths, filters, .. } => {
            for &w in filter_widths {
                let fan_in = w * edim;
                store.insert_random(
                    &format!("cnn.w{}", w),
                    vec![fan_in, *filters],
                    glorot_scale(fan_in, *filters),
                    rng,
                )?;
                store.insert_zeros(&format!("cnn.b{}", w), vec![*filters])?;
            }
        }
        EncoderConfig::TinyTransformer {
            layers, heads, model_dim, ff_dim, max_positions, ..
        } => {
            let d = *model_dim;
            let head_dim = d / heads;
            store.insert_random("tf.in", vec![edim, d], glorot_scale(edim, d), rng)?;
            store.insert_random("tf.pos", vec![*max_positions, d], 0.05, rng)?;
            for l in 0..*layers {
                for h in 0..*heads {
                    for proj in ["wq", "wk", "wv"] {
                        store.insert_random(
                            &format!("tf.l{}.h{}.{}", l, h, proj),
                            vec![d, head_dim],
                            glorot_scale(d, head_dim),
                            rng,
                        )?;
                    }
                }
                store.insert_random(
                    &format!("tf.l{}.attn.wo", l),
                    vec![d, d],
                    glorot_scale(d, d),
                    rng,
                )?;
                store.insert_zeros(&format!("tf.l{}.attn.bo", l), vec![d])?;
                store.insert(&format!("tf.l{}.ln1.g", l), ones(d))?;
                store.insert_zeros(&format!("tf.l{}.ln1.b", l), vec![d])?;
                store.insert_random(
                    &format!("tf.l{}.ff.w1", l),
                    vec![d, *ff_dim],
                    glorot_scale(d, *ff_dim),
                    rng,
                )?;
                store.insert_zeros(&format!("tf.l{}.ff.b1", l), vec![*ff_dim])?;
                store.insert_random(
                    &format!("tf.l{}.ff.w2", l),
                    vec![*ff_dim, d],
                    glorot_scale(*ff_dim, d),
                    rng,
                )?;
                store.insert_zeros(&format!("tf.l{}.ff.b2", l), vec![d])?;
                store.insert(&format!("tf.l{}.ln2.g", l), ones(d))?;
                store.insert_zeros(&format!("tf.l{}.ln2.b", l), vec![d])?;
            }
        }
    }

    let enc_out = spec.encoder.output_dim();
    for level in 1..=spec.k {
        let width = spec.head_width(level);
        store.insert_random(
            &format!("head{:02}.w", level),
            vec![enc_out, width],
            glorot_scale(enc_out, width),
            rng,
        )?;
        store.insert_zeros(&format!("head{:02}.b", level), vec![width])?;
    }
    Ok(store)
}

/// Builds the encoder subgraph: token ids to a rank-1 feature vector.
pub fn build_encoder(
    spec: &ModelSpec,
    g: &mut Graph,
    store: &ParamStore,
    token_ids: &[u32],
) -> Result<crate::tensor::NodeId, ModelError> {
    let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
    let emb_table = g.param(store, "emb")?;
    let embedded = g.embedding(emb_table, &ids)?;
    match &spec.encoder {
        EncoderConfig::Bow { .. } => Ok(g.mean_rows(embedded)?),
        EncoderConfig::Cnn { filter_widths, dropout, .. } => {
            let mut pooled = Vec::with_capacity(filter_widths.len());
            for &w in filter_widths {
                let kernel = g.param(store, &format!("cnn.w{}", w))?;
                let bias = g.param(store, &format!("cnn.b{}", w))?;
                let conv = g.conv1d(embedded, kernel, bias, w)?;
                let active = g.relu(conv);
                pooled.push(g.max_rows(active)?);
            }
            let features = g.concat(&pooled)?;
            Ok(g.dropout(features, *dropout)?)
        }
        EncoderConfig::TinyTransformer {
            layers, heads, dropout, max_positions, ..
        } => {
            if ids.len() > *max_positions {
                return Err(ModelError::SequenceTooLong {
                    len: ids.len(),
                    max: *max_positions,
                });
            }
            let in_proj = g.param(store, "tf.in")?;
            let projected = g.matmul(embedded, in_proj)?;
            let pos_table = g.param(store, "tf.pos")?;
            let positions: Vec<usize> = (0..ids.len()).collect();
            let pos = g.embedding(pos_table, &positions)?;
            let mut x = g.add(projected, pos)?;
            for l in 0..*layers {
                let mut head_outs = Vec::with_capacity(*heads);
                for h in 0..*heads {
                    let wq = g.param(store, &format!("tf.l{}.h{}.wq", l, h))?;
                    let wk = g.param(store, &format!("tf.l{}.h{}.wk", l, h))?;
                    let wv = g.param(store, &format!("tf.l{}.h{}.wv", l, h))?;
                    let q = g.matmul(x, wq)?;
                    let k = g.matmul(x, wk)?;
                    let v = g.matmul(x, wv)?;
                    head_outs.push(g.attention(q, k, v)?);
                }
                let merged = g.concat_cols(&head_outs)?;
                let wo = g.param(store, &format!("tf.l{}.attn.wo", l))?;
                let bo = g.param(store, &format!("tf.l{}.attn.bo", l))?;
                let proj = g.matmul(merged, wo)?;
                let proj = g.add_bias(proj, bo)?;
                let proj = g.dropout(proj, *dropout)?;
                let res = g.add(x, proj)?;
                let g1 = g.param(store, &format!("tf.l{}.ln1.g", l))?;
                let b1 = g.param(store, &format!("tf.l{}.ln1.b", l))?;
                x = g.layer_norm(res, g1, b1)?;

                let w1 = g.param(store, &format!("tf.l{}.ff.w1", l))?;
                let fb1 = g.param(store, &format!("tf.l{}.ff.b1", l))?;
                let w2 = g.param(store, &format!("tf.l{}.ff.w2", l))?;
                let fb2 = g.param(store, &format!("tf.l{}.ff.b2", l))?;
                let ff = g.matmul(x, w1)?;
                let ff = g.add_bias(ff, fb1)?;
                let ff = g.relu(ff);
                let ff = g.matmul(ff, w2)?;
                let ff = g.add_bias(ff, fb2)?;
                let ff = g.dropout(ff, *dropout)?;
                let res = g.add(x, ff)?;
                let g2 = g.param(store, &format!("tf.l{}.ln2.g", l))?;
                let b2 = g.param(store, &format!("tf.l{}.ln2.b", l))?;
                x = g.layer_norm(res, g2, b2)?;
            }
            Ok(g.mean_rows(x)?)
        }
    }
}

/// Encoder plus per-level affine heads.
pub fn build_logits(
    spec: &ModelSpec,
    g: &mut Graph,
    store: &ParamStore,
    token_ids: &[u32],
) -> Result<Vec<crate::tensor::NodeId>, ModelError> {
    let features = build_encoder(spec, g, store, token_ids)?;
    let mut logits = Vec::with_capacity(spec.k);
    for level in 1..=spec.k {
        let w = g.param(store, &format!("head{:02}.w", level))?;
        let b = g.param(store, &format!("head{:02}.b", level))?;
        let affine = g.matmul(features, w)?;
        logits.push(g.add_bias(affine, b)?);
    }
    Ok(logits)
}

/// Joint loss: sum over trained levels of per-level cross-entropy.
pub fn build_loss(
    spec: &ModelSpec,
    g: &mut Graph,
    store: &ParamStore,
    taxonomy: &Taxonomy,
    record: &Record,
) -> Result<crate::tensor::NodeId, ModelError> {
    let logits = build_logits(spec, g, store, &record.token_ids)?;
    let mut terms = Vec::with_capacity(spec.k);
    for (i, &level_logits) in logits.iter().enumerate() {
        let level = i + 1;
        let target = match record.label.at_level(level) {
            Some(node) => within_level_index(taxonomy, node)?,
            None => match spec.absent_index(level) {
                Some(a) => a,
                None => continue,
            },
        };
        terms.push(g.cross_entropy_logits(level_logits, target)?);
    }
    Ok(g.sum_scalars(&terms)?)
}

fn argmax_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Picks, among all root-to-level-K taxonomy paths, the one maximizing the
/// product of its per-level class probabilities, multiplied root first.
/// Exact ties go to the smallest node-id sequence. Probability vectors are
/// indexed by within-level class position; trailing ABSENT entries are
/// never part of a path.
pub fn resolve_path(
    taxonomy: &Taxonomy,
    probabilities: &[Vec<f64>],
) -> Result<(LabelPath, f64), ModelError> {
    let k = probabilities.len();
    if k == 0 || taxonomy.nodes_at_level(k).is_empty() {
        return Err(ModelError::NoFullDepthPath { k });
    }
    for (i, probs) in probabilities.iter().enumerate() {
        if probs.len() < taxonomy.class_count(i + 1) {
            return Err(ModelError::BadConfig(format!(
                "level {} has {} classes, probability vector has {}",
                i + 1,
                taxonomy.class_count(i + 1),
                probs.len()
            )));
        }
    }

    let mut best: Option<(Vec<NodeId>, f64)> = None;
    for &end in taxonomy.nodes_at_level(k) {
        let mut chain = taxonomy.anc_set(end)?;
        chain.reverse();
        let mut product = 1.0;
        for (i, &node) in chain.iter().enumerate() {
            product *= probabilities[i][within_level_index(taxonomy, node)?];
        }
        let better = match &best {
            None => true,
            Some((seq, p)) => product > *p || (product == *p && chain < *seq),
        };
        if better {
            best = Some((chain, product));
        }
    }
    let (chain, product) = best.expect("level K is non-empty");
    Ok((LabelPath::new(chain.into_iter().map(Some).collect()), product))
}

/// True iff consecutive argmaxes form a root-anchored parent chain.
pub fn consistency_check(taxonomy: &Taxonomy, argmaxes: &[NodeId]) -> bool {
    if argmaxes.is_empty() {
        return false;
    }
    if !matches!(taxonomy.level(argmaxes[0]), Ok(1)) {
        return false;
    }
    argmaxes
        .windows(2)
        .all(|pair| matches!(taxonomy.parent(pair[1]), Ok(Some(p)) if p == pair[0]))
}

/// Product of each level's top probability.
pub fn prediction_confidence(probabilities: &[Vec<f64>]) -> f64 {
    probabilities
        .iter()
        .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .product()
}

/// One record's full prediction.
#[derive(Debug, Clone)]
pub struct LevelPrediction {
    /// Per-level softmax outputs, ABSENT slot included where enabled.
    pub probabilities: Vec<Vec<f64>>,
    /// Per-level top class; `None` marks ABSENT.
    pub argmax: Vec<Option<NodeId>>,
    /// Hierarchy-consistent resolved path of full trained depth.
    pub path: LabelPath,
    /// Product of the resolved path's per-level probabilities.
    pub path_probability: f64,
}

impl LevelPrediction {
    /// Whether the raw argmaxes already form a consistent path: a run of
    /// real classes linked parent to child, optionally tailed by ABSENT.
    pub fn is_consistent(&self, taxonomy: &Taxonomy) -> bool {
        let filled: Vec<NodeId> = self
            .argmax
            .iter()
            .take_while(|a| a.is_some())
            .map(|a| a.expect("filtered to Some"))
            .collect();
        if self.argmax[filled.len()..].iter().any(|a| a.is_some()) {
            return false;
        }
        if filled.is_empty() {
            // All-ABSENT is vacuously consistent.
            return true;
        }
        consistency_check(taxonomy, &filled)
    }

    pub fn confidence(&self) -> f64 {
        prediction_confidence(&self.probabilities)
    }
}

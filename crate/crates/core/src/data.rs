//! Corpus handling: tokenization, vocabularies, pre-trained embeddings,
//! dataset ingestion, synthetic corpora, and dataset splits.
//!
//! The canonical exchange format is JSON Lines with one
//! `{"text": ..., "labels": [...]}` object per record, labels ordered root
//! to leaf. Adapters for product-catalog JSON and article CSV dumps convert
//! into the same in-memory form. Records whose labels do not resolve to a
//! valid taxonomy path are dropped and counted, never silently kept.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{stream_rng, Stream};
use crate::taxonomy::{hex_string, LabelPath, Taxonomy};
use crate::tensor::Tensor;

/// Reserved id for padding; embedding row stays zero.
pub const PAD: u32 = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK: u32 = 1;

/// Shortest encoded sequence; keeps the widest convolution kernel valid.
pub const MIN_SEQ_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("unknown dataset adapter `{0}` (expected jsonl, bestbuy, dbpedia-csv)")]
    UnknownAdapter(String),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("embedding line {line}: expected {expected} values, found {found}")]
    EmbeddingDim { line: usize, expected: usize, found: usize },
    #[error("split fractions {0:?} do not sum to 1")]
    BadFractions([f64; 3]),
    #[error("split counts sum to {got}, dataset has {records} records")]
    SplitMismatch { got: usize, records: usize },
    #[error("vocabulary budget {vocab} too small: {nodes} taxonomy nodes need topic tokens plus noise")]
    VocabTooSmall { vocab: usize, nodes: usize },
    #[error(transparent)]
    Taxonomy(#[from] crate::taxonomy::TaxonomyError),
}

/// Lowercases, splits on Unicode whitespace, and strips non-alphanumeric
/// characters from token ends. Interior punctuation survives, so "usb-c"
/// stays one token; tokens that trim to nothing are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Token to id map with reserved PAD and UNK entries. Ids are assigned in
/// descending frequency order, ties broken lexicographically, so the same
/// corpus always yields the same mapping.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    tokens: Vec<String>,
    digest: String,
}

impl Vocabulary {
    /// Number of ids, reserved ones included.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id of a token, UNK when unseen.
    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// SHA-256 over the id-ordered token list, as lowercase hex.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Maps tokens to ids, truncating at `max_len` and padding up to
    /// [`MIN_SEQ_LEN`].
    pub fn encode(&self, tokens: &[String], max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokens.iter().take(max_len).map(|t| self.id_of(t)).collect();
        while ids.len() < MIN_SEQ_LEN {
            ids.push(PAD);
        }
        ids
    }

    /// Non-reserved tokens in id order.
    pub fn ordered_tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Builds a vocabulary from tokenized sequences. Tokens seen fewer than
/// `min_count` times fall back to UNK at encode time.
pub fn build_vocabulary(
    corpus: &[Vec<String>],
    min_count: usize,
) -> Result<Vocabulary, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in corpus {
        for token in seq {
            *counts.entry(token.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    tokens.extend(kept.iter().map(|(t, _)| t.to_string()));
    let mut token_to_id = HashMap::with_capacity(tokens.len());
    for (id, token) in tokens.iter().enumerate() {
        token_to_id.insert(token.clone(), id as u32);
    }
    let mut hasher = Sha256::new();
    for token in &tokens {
        hasher.update(token.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hex_string(&hasher.finalize());
    Ok(Vocabulary { token_to_id, tokens, digest })
}

/// Parses word-vector text (`word v1 v2 ... vdim` per line) into a
/// vocab-size × dim matrix. Rows for tokens missing from the file, UNK
/// included, are drawn uniform(−0.05, 0.05) from `rng`; the PAD row is all
/// zeros. The first file entry wins when a word repeats.
pub fn parse_embeddings(
    text: &str,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, DataError> {
    let mut rows: HashMap<u32, Vec<f64>> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-empty line has a first field");
        let values: Vec<f64> = fields
            .map(|v| {
                v.parse::<f64>().map_err(|_| DataError::MalformedLine {
                    line: i + 1,
                    msg: format!("bad float `{}`", v),
                })
            })
            .collect::<Result<_, _>>()?;
        if values.len() != dim {
            return Err(DataError::EmbeddingDim {
                line: i + 1,
                expected: dim,
                found: values.len(),
            });
        }
        if vocab.contains(word) {
            rows.entry(vocab.id_of(word)).or_insert(values);
        }
    }
    let size = vocab.size();
    let mut data = vec![0.0; size * dim];
    for id in UNK..size as u32 {
        let slot = &mut data[id as usize * dim..(id as usize + 1) * dim];
        match rows.get(&id) {
            Some(values) => slot.copy_from_slice(values),
            None => {
                for v in slot {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
        }
    }
    Ok(Tensor::new(vec![size, dim], data).expect("sized above"))
}

/// [`parse_embeddings`] over a file.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, DataError> {
    parse_embeddings(&std::fs::read_to_string(path)?, vocab, dim, rng)
}

/// An ingested record before encoding: raw text plus a validated label path.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub text: String,
    pub label: LabelPath,
    pub source_id: String,
}

/// An encoded training record.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub token_ids: Vec<u32>,
    pub label: LabelPath,
    pub source_id: String,
}

/// Turns raw records into encoded ones with a fixed tokenizer and vocabulary.
pub fn encode_records(
    raws: &[RawRecord],
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<Record> {
    raws.iter()
        .map(|r| Record {
            token_ids: vocab.encode(&tokenize(&r.text), max_len),
            label: r.label.clone(),
            source_id: r.source_id.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Jsonl,
    BestBuy,
    DbpediaCsv,
}

impl std::str::FromStr for DatasetFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "bestbuy" => Ok(DatasetFormat::BestBuy),
            "dbpedia-csv" => Ok(DatasetFormat::DbpediaCsv),
            other => Err(DataError::UnknownAdapter(other.to_string())),
        }
    }
}

/// Ingestion result: kept records plus the count of records dropped for
/// labels that do not form a valid taxonomy path.
#[derive(Debug)]
pub struct IngestOutcome {
    pub records: Vec<RawRecord>,
    pub dropped: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    labels: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CategoryEntry {
    Named { name: String },
    Plain(String),
}

impl CategoryEntry {
    fn name(&self) -> &str {
        match self {
            CategoryEntry::Named { name } => name,
            CategoryEntry::Plain(name) => name,
        }
    }
}

#[derive(Deserialize)]
struct BestBuyItem {
    #[serde(default)]
    sku: Option<serde_json::Value>,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    manufacturer: Option<String>,
    #[serde(default)]
    description: Option<String>,
    #[serde(rename = "categoryPath", default)]
    category_path: Vec<CategoryEntry>,
}

/// Ingests a dataset in the given format, validating every label path.
pub fn ingest(
    path: &Path,
    taxonomy: &Taxonomy,
    format: DatasetFormat,
) -> Result<IngestOutcome, DataError> {
    ingest_str(&std::fs::read_to_string(path)?, taxonomy, format)
}

pub fn ingest_str(
    text: &str,
    taxonomy: &Taxonomy,
    format: DatasetFormat,
) -> Result<IngestOutcome, DataError> {
    match format {
        DatasetFormat::Jsonl => ingest_jsonl(text, taxonomy),
        DatasetFormat::BestBuy => ingest_bestbuy(text, taxonomy),
        DatasetFormat::DbpediaCsv => ingest_dbpedia(text, taxonomy),
    }
}

/// Resolves labels to a validated path; `None` marks a record to drop.
fn resolve_labels(taxonomy: &Taxonomy, labels: &[String]) -> Option<LabelPath> {
    let refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
    let path = taxonomy.path_from_labels(&refs).ok()?;
    taxonomy.validate_path(&path).ok()?;
    Some(path)
}

fn ingest_jsonl(text: &str, taxonomy: &Taxonomy) -> Result<IngestOutcome, DataError> {
    let mut records = Vec::new();
    let mut dropped = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: JsonlRecord =
            serde_json::from_str(line).map_err(|e| DataError::MalformedLine {
                line: i + 1,
                msg: e.to_string(),
            })?;
        match resolve_labels(taxonomy, &parsed.labels) {
            Some(label) => records.push(RawRecord {
                text: parsed.text,
                label,
                source_id: parsed.id.unwrap_or_else(|| format!("jsonl:{}", i + 1)),
            }),
            None => dropped += 1,
        }
    }
    Ok(IngestOutcome { records, dropped })
}

fn ingest_bestbuy(text: &str, taxonomy: &Taxonomy) -> Result<IngestOutcome, DataError> {
    let mut records = Vec::new();
    let mut dropped = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let item: BestBuyItem =
            serde_json::from_str(line).map_err(|e| DataError::MalformedLine {
                line: i + 1,
                msg: e.to_string(),
            })?;
        let labels: Vec<String> = item
            .category_path
            .iter()
            .map(|c| c.name().to_string())
            .collect();
        match resolve_labels(taxonomy, &labels) {
            Some(label) => {
                let text = [&item.name, &item.manufacturer, &item.description]
                    .iter()
                    .filter_map(|f| f.as_deref())
                    .collect::<Vec<_>>()
                    .join(" ");
                let source_id = match &item.sku {
                    Some(sku) => format!("sku:{}", sku),
                    None => format!("bestbuy:{}", i + 1),
                };
                records.push(RawRecord { text, label, source_id });
            }
            None => dropped += 1,
        }
    }
    Ok(IngestOutcome { records, dropped })
}

fn ingest_dbpedia(text: &str, taxonomy: &Taxonomy) -> Result<IngestOutcome, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DataError::MalformedLine { line: 1, msg: e.to_string() })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let text_col = col("text").ok_or_else(|| DataError::MalformedLine {
        line: 1,
        msg: "missing `text` column".to_string(),
    })?;
    let label_cols: Vec<usize> = ["l1", "l2", "l3"]
        .iter()
        .filter_map(|n| col(n))
        .collect();
    if label_cols.is_empty() {
        return Err(DataError::MalformedLine {
            line: 1,
            msg: "missing `l1` column".to_string(),
        });
    }

    let mut records = Vec::new();
    let mut dropped = 0;
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| DataError::MalformedLine {
            line: i + 2,
            msg: e.to_string(),
        })?;
        let labels: Vec<String> = label_cols
            .iter()
            .filter_map(|&c| row.get(c))
            .filter(|v| !v.is_empty())
            .map(|v| v.to_string())
            .collect();
        match resolve_labels(taxonomy, &labels) {
            Some(label) => records.push(RawRecord {
                text: row.get(text_col).unwrap_or("").to_string(),
                label,
                source_id: format!("dbpedia:{}", i + 2),
            }),
            None => dropped += 1,
        }
    }
    Ok(IngestOutcome { records, dropped })
}

/// Serializes records to the canonical JSON Lines format (ids included, so
/// ingest(emit(r)) reproduces r exactly).
pub fn emit_jsonl(
    records: &[RawRecord],
    taxonomy: &Taxonomy,
    out: &mut impl Write,
) -> Result<(), DataError> {
    for record in records {
        let labels: Vec<String> = record
            .label
            .entries()
            .iter()
            .flatten()
            .map(|&id| taxonomy.label(id).expect("validated path").to_string())
            .collect();
        let line = JsonlRecord {
            text: record.text.clone(),
            labels,
            id: Some(record.source_id.clone()),
        };
        serde_json::to_writer(&mut *out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Knobs for the synthetic corpus generator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Upper bound on tokens per record.
    pub record_len: usize,
    /// Probability that a token position is noise rather than topic.
    pub noise_share: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { record_len: 24, noise_share: 0.35 }
    }
}

/// Generates `n` labeled records over the taxonomy. Every node owns a
/// disjoint slice of topic tokens; a record picks a deepest-level node,
/// labels itself with that node's full path, and fills its text with topic
/// tokens drawn from the path mixed with shared noise tokens. Classes are
/// learnable because topic slices never overlap.
pub fn synth_corpus(
    taxonomy: &Taxonomy,
    n: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<RawRecord>, DataError> {
    synth_corpus_with(taxonomy, n, vocab_size, seed, &SynthOptions::default())
}

pub fn synth_corpus_with(
    taxonomy: &Taxonomy,
    n: usize,
    vocab_size: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<Vec<RawRecord>, DataError> {
    let nodes = taxonomy.node_count();
    // A quarter of the budget is noise, at least 8 tokens; every node needs
    // at least one topic token.
    let noise_pool = (vocab_size / 4).max(8);
    if vocab_size <= noise_pool || (vocab_size - noise_pool) / nodes == 0 {
        return Err(DataError::VocabTooSmall { vocab: vocab_size, nodes });
    }
    let per_node = (vocab_size - noise_pool) / nodes;
    let noise_base = nodes * per_node;

    let leaves = taxonomy.nodes_at_level(taxonomy.depth());
    let mut rng = stream_rng(seed, Stream::Synth);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let leaf = leaves[rng.gen_range(0..leaves.len())];
        let path = taxonomy.path_to(leaf).expect("leaf from taxonomy");
        let chain = taxonomy.anc_set(leaf).expect("leaf from taxonomy");
        let len = opts.record_len - rng.gen_range(0..=opts.record_len / 3);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let token = if rng.gen::<f64>() < opts.noise_share {
                noise_base + rng.gen_range(0..vocab_size - noise_base)
            } else {
                let node = chain[rng.gen_range(0..chain.len())];
                node.index() * per_node + rng.gen_range(0..per_node)
            };
            words.push(format!("w{:05}", token));
        }
        records.push(RawRecord {
            text: words.join(" "),
            label: path,
            source_id: format!("synth:{:06}", i),
        });
    }
    Ok(records)
}

/// Train/validation/test partition sizes, by fraction or explicit count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitSpec {
    Fractions { train: f64, validation: f64, test: f64 },
    Counts { train: usize, validation: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.8, validation: 0.1, test: 0.1 }
    }
}

impl SplitSpec {
    fn sizes(&self, n: usize) -> Result<(usize, usize), DataError> {
        match *self {
            SplitSpec::Fractions { train, validation, test } => {
                let fr = [train, validation, test];
                let sum: f64 = fr.iter().sum();
                if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(DataError::BadFractions(fr));
                }
                let train_n = (n as f64 * train).floor() as usize;
                let val_n = (n as f64 * validation).floor() as usize;
                Ok((train_n, val_n))
            }
            SplitSpec::Counts { train, validation, test } => {
                if train + validation + test != n {
                    return Err(DataError::SplitMismatch {
                        got: train + validation + test,
                        records: n,
                    });
                }
                Ok((train, validation))
            }
        }
    }
}

/// Shuffles record indices with the split RNG stream and cuts them into
/// disjoint train/validation/test index sets covering 0..n.
pub fn split_indices(
    n: usize,
    spec: &SplitSpec,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), DataError> {
    let (train_n, val_n) = spec.sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::Split);
    // Fisher-Yates, explicit so the shuffle is pinned to this RNG's u64
    // stream rather than a shuffle implementation detail.
    for i in (1..n).rev() {
        let j = (rng.gen::<u64>() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let val_end = train_n + val_n;
    Ok((
        order[..train_n].to_vec(),
        order[train_n..val_end.min(n)].to_vec(),
        order[val_end.min(n)..].to_vec(),
    ))
}

/// Applies [`split_indices`] to a record slice.
pub fn split_records<T: Clone>(
    records: &[T],
    spec: &SplitSpec,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), DataError> {
    let (tr, va, te) = split_indices(records.len(), spec, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&tr), pick(&va), pick(&te)))
}

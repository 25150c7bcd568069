//! Config-driven experiment orchestration: one JSON config describes the
//! dataset, model, trainer, privacy sweep, and attack; a run trains a
//! non-private baseline plus one model per noise multiplier, accounts the
//! privacy cost, audits every checkpoint with the membership attack, and
//! writes all artifacts under a single run directory described by a
//! manifest. Reports are deterministic for a fixed config and seeds; the
//! manifest carries wall-clock timings and so is not.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{
    build_attack_splits, evaluate_attack, extract_corpus, train_attack_model, AttackReport,
    AttackSplit, AttackTrainConfig, FeatureConfig,
};
use crate::data::{
    build_vocabulary, encode_records, ingest, load_embeddings, parse_embeddings, split_records,
    synth_corpus_with, tokenize, DatasetFormat, Record, SplitSpec, SynthOptions, Vocabulary,
};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{EncoderConfig, HtcModel};
use crate::optim::{lower_median, train, AdamParams, ClipNorm, DpConfig, TrainReport};
use crate::privacy::{PrivacySpec, RdpLedger};
use crate::rng::{record_rng, stream_rng, Stream};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("harness io: {0}")]
    Io(#[from] std::io::Error),
    #[error("harness json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad experiment config: {0}")]
    BadConfig(String),
    #[error("config override `{path}`: {msg}")]
    Override { path: String, msg: String },
    #[error("stage `{stage}` failed: {message}; partial manifest at {manifest}")]
    Stage { stage: String, message: String, manifest: PathBuf },
}

/// Independent seeds for the three sources of randomness in a run. Data
/// seeding covers corpus synthesis and splitting, model seeding covers
/// initialization and training, attack seeding covers the audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub attack: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 1, model: 2, attack: 3 }
    }
}

/// Where records come from: generated on the fly, or ingested from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetConfig {
    Synth {
        /// Taxonomy TSV path; the built-in three-level demo tree when unset.
        taxonomy: Option<PathBuf>,
        n: usize,
        vocab_size: usize,
        #[serde(default)]
        options: SynthOptions,
        max_len: usize,
        split: SplitSpec,
    },
    Files {
        taxonomy: PathBuf,
        format: DatasetFormat,
        path: PathBuf,
        /// Tokens below this corpus frequency map to the unknown id.
        min_count: usize,
        max_len: usize,
        split: SplitSpec,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth {
            taxonomy: None,
            n: 600,
            vocab_size: 96,
            options: SynthOptions::default(),
            max_len: 32,
            split: SplitSpec::default(),
        }
    }
}

/// The built-in demo taxonomy: two roots, two children each, two leaves
/// under every child. Deep enough for level-count variations.
pub fn demo_taxonomy() -> Taxonomy {
    Taxonomy::from_tsv_str(
        "alpha\t*\nbeta\t*\n\
         alpha.one\talpha\nalpha.two\talpha\nbeta.one\tbeta\nbeta.two\tbeta\n\
         alpha.one.a\talpha.one\nalpha.one.b\talpha.one\n\
         alpha.two.a\talpha.two\nalpha.two.b\talpha.two\n\
         beta.one.a\tbeta.one\nbeta.one.b\tbeta.one\n\
         beta.two.a\tbeta.two\nbeta.two.b\tbeta.two\n",
    )
    .expect("demo taxonomy is well formed")
}

/// Target-model optimizer settings shared by every sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub microbatch: usize,
    pub max_epochs: usize,
    /// Early-stopping patience; `None` keeps the final epoch's weights.
    pub patience: Option<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            microbatch: 1,
            max_epochs: 30,
            patience: Some(3),
        }
    }
}

impl TrainerConfig {
    /// Full trainer config for one sweep point.
    pub fn dp_config(&self, noise_multiplier: f64, clip: ClipNorm) -> DpConfig {
        DpConfig {
            noise_multiplier,
            clip,
            microbatch: self.microbatch,
            batch_size: self.batch_size,
            adam: AdamParams::with_learning_rate(self.learning_rate),
            max_epochs: self.max_epochs,
            patience: self.patience,
        }
    }
}

/// Privacy settings for the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpOptions {
    /// When false the run stops at the non-private baseline.
    pub enabled: bool,
    /// Clipping norm; `Auto` calibrates from the baseline's gradient norms.
    pub clip: ClipNorm,
    /// Reporting delta; defaults to 1/n of the train split.
    pub delta: Option<f64>,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions { enabled: true, clip: ClipNorm::Auto, delta: None }
    }
}

/// Audit settings: how much of the target's data the adversary knows and
/// which features they extract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackOptions {
    pub known_fraction: f64,
    pub with_htc_features: bool,
    pub gradient_groups: Option<Vec<String>>,
    pub train: AttackTrainConfig,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            known_fraction: 0.5,
            with_htc_features: false,
            gradient_groups: None,
            train: AttackTrainConfig::default(),
        }
    }
}

impl AttackOptions {
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            with_htc_features: self.with_htc_features,
            gradient_groups: self.gradient_groups.clone(),
        }
    }
}

/// At most one variation may be active per run; `run_experiment` requires
/// all of them off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct VariationFlags {
    /// Train exactly this many epochs with early stopping disabled.
    pub overfit_epochs: Option<usize>,
    /// Keep only this fraction of the train split.
    pub subsample_fraction: Option<f64>,
    /// Override the number of trained hierarchy levels.
    pub levels: Option<usize>,
    /// Ignore any pretrained-embedding file and start from random rows.
    pub scratch: bool,
}

impl VariationFlags {
    pub fn active(&self) -> Vec<&'static str> {
        let mut on = Vec::new();
        if self.overfit_epochs.is_some() {
            on.push("overfit");
        }
        if self.subsample_fraction.is_some() {
            on.push("subsample");
        }
        if self.levels.is_some() {
            on.push("levels");
        }
        if self.scratch {
            on.push("scratch");
        }
        on
    }
}

/// One experiment variation, applied on top of a base config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variation {
    Overfit { epochs: usize },
    Subsample { fraction: f64 },
    Levels { k: usize },
    Scratch,
}

impl Variation {
    /// The single active variation in `flags`.
    pub fn from_flags(flags: &VariationFlags) -> Result<Variation, HarnessError> {
        let active = flags.active();
        if active.len() != 1 {
            return Err(HarnessError::BadConfig(format!(
                "exactly one variation flag must be set, got {:?}",
                active
            )));
        }
        Ok(if let Some(epochs) = flags.overfit_epochs {
            Variation::Overfit { epochs }
        } else if let Some(fraction) = flags.subsample_fraction {
            Variation::Subsample { fraction }
        } else if let Some(k) = flags.levels {
            Variation::Levels { k }
        } else {
            Variation::Scratch
        })
    }

    fn stamp(&self, flags: &mut VariationFlags) {
        match *self {
            Variation::Overfit { epochs } => flags.overfit_epochs = Some(epochs),
            Variation::Subsample { fraction } => flags.subsample_fraction = Some(fraction),
            Variation::Levels { k } => flags.levels = Some(k),
            Variation::Scratch => flags.scratch = true,
        }
    }
}

/// The complete description of one run. Every field has a default, so `{}`
/// is a valid config, and the whole document round-trips through JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub encoder: Option<EncoderConfig>,
    /// Trained hierarchy levels; the full taxonomy depth when unset.
    pub levels: Option<usize>,
    /// Pretrained embedding file (token then values, whitespace separated).
    pub embeddings: Option<PathBuf>,
    pub trainer: TrainerConfig,
    pub dp: DpOptions,
    pub z_sweep: Vec<f64>,
    pub attack: AttackOptions,
    pub variation: VariationFlags,
    pub seeds: Seeds,
}

impl ExperimentConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        self.encoder.clone().unwrap_or(EncoderConfig::bow(16))
    }

    /// Noise multipliers actually swept: positive entries in config order,
    /// deduplicated. Zero entries alias the always-run baseline.
    pub fn sweep_points(&self) -> Vec<f64> {
        let mut zs = Vec::new();
        for &z in &self.z_sweep {
            if z > 0.0 && !zs.contains(&z) {
                zs.push(z);
            }
        }
        zs
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::BadConfig(msg));
        if self.z_sweep.iter().any(|z| !z.is_finite() || *z < 0.0) {
            return bad(format!("noise multipliers must be finite and >= 0, got {:?}", self.z_sweep));
        }
        if self.dp.enabled && !self.sweep_points().is_empty() && self.dp.clip == ClipNorm::Off {
            return bad("private sweep points need a clipping norm (auto or fixed)".to_string());
        }
        if !(self.attack.known_fraction > 0.0 && self.attack.known_fraction < 1.0) {
            return bad(format!("known fraction {} outside (0, 1)", self.attack.known_fraction));
        }
        if let Some(f) = self.variation.subsample_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("subsample fraction {} outside (0, 1]", f));
            }
        }
        if let Some(d) = self.dp.delta {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("delta {} outside (0, 1)", d));
            }
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            encoder: None,
            levels: None,
            embeddings: None,
            trainer: TrainerConfig::default(),
            dp: DpOptions::default(),
            z_sweep: vec![0.1, 0.5, 1.0, 3.0],
            attack: AttackOptions::default(),
            variation: VariationFlags::default(),
            seeds: Seeds::default(),
        }
    }
}

/// Applies `key=value` overrides onto a config, where the key is a dotted
/// path into the JSON document and the value is parsed as JSON (falling
/// back to a bare string). Intermediate path segments must already exist.
pub fn apply_overrides(
    config: &ExperimentConfig,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig, HarnessError> {
    let mut doc = serde_json::to_value(config)?;
    for (path, raw) in overrides {
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let mut cursor = &mut doc;
        let segments: Vec<&str> = path.split('.').collect();
        let (last, parents) = segments.split_last().ok_or_else(|| HarnessError::Override {
            path: path.clone(),
            msg: "empty path".to_string(),
        })?;
        for segment in parents {
            cursor = cursor
                .get_mut(segment)
                .ok_or_else(|| HarnessError::Override {
                    path: path.clone(),
                    msg: format!("no key `{}` at this level", segment),
                })?;
        }
        match cursor {
            serde_json::Value::Object(map) => {
                map.insert((*last).to_string(), value);
            }
            _ => {
                return Err(HarnessError::Override {
                    path: path.clone(),
                    msg: "parent is not an object".to_string(),
                })
            }
        }
    }
    serde_json::from_value(doc).map_err(|e| HarnessError::Override {
        path: "<merged>".to_string(),
        msg: e.to_string(),
    })
}

/// The loaded, encoded, and split dataset for one run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub taxonomy: Taxonomy,
    pub vocab: Vocabulary,
    pub train: Vec<Record>,
    pub validation: Vec<Record>,
    pub test: Vec<Record>,
}

/// Loads the taxonomy and corpus, builds the vocabulary, encodes, splits,
/// and applies the subsample variation when its flag is set.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData, Box<dyn std::error::Error>> {
    let (taxonomy, raw, min_count, max_len, split) = match &config.dataset {
        DatasetConfig::Synth { taxonomy, n, vocab_size, options, max_len, split } => {
            let tax = match taxonomy {
                Some(path) => Taxonomy::from_tsv_str(&std::fs::read_to_string(path)?)?,
                None => demo_taxonomy(),
            };
            let raw = synth_corpus_with(&tax, *n, *vocab_size, config.seeds.data, options)?;
            (tax, raw, 1, *max_len, split.clone())
        }
        DatasetConfig::Files { taxonomy, format, path, min_count, max_len, split } => {
            let tax = Taxonomy::from_tsv_str(&std::fs::read_to_string(taxonomy)?)?;
            let outcome = ingest(path, &tax, *format)?;
            (tax, outcome.records, *min_count, *max_len, split.clone())
        }
    };
    let tokenized: Vec<Vec<String>> = raw.iter().map(|r| tokenize(&r.text)).collect();
    let vocab = build_vocabulary(&tokenized, min_count)?;
    let records = encode_records(&raw, &vocab, max_len);
    let (mut train, validation, test) = split_records(&records, &split, config.seeds.data)?;
    if let Some(fraction) = config.variation.subsample_fraction {
        let keep = ((train.len() as f64 * fraction).floor() as usize).max(1);
        train.truncate(keep);
    }
    Ok(PreparedData { taxonomy, vocab, train, validation, test })
}

/// Builds the untrained target model: parameter init from the model seed,
/// then the embedding table override when a file is configured (replaced
/// by fresh random rows under the scratch variation).
pub fn init_model(
    config: &ExperimentConfig,
    data: &PreparedData,
) -> Result<HtcModel, Box<dyn std::error::Error>> {
    let k = config
        .variation
        .levels
        .or(config.levels)
        .unwrap_or_else(|| data.taxonomy.depth());
    let absent: Vec<bool> = (1..=k)
        .map(|level| {
            data.train
                .iter()
                .chain(&data.validation)
                .chain(&data.test)
                .any(|r| r.label.filled_depth() < level)
        })
        .collect();
    let mut rng = stream_rng(config.seeds.model, Stream::Init);
    let mut model = HtcModel::new(
        config.encoder_config(),
        &data.taxonomy,
        k,
        &data.vocab,
        absent,
        &mut rng,
    )?;
    let dim = config.encoder_config().embedding_dim();
    let mut emb_rng = record_rng(config.seeds.model, Stream::Init, 1);
    if config.variation.scratch {
        model.set_embeddings(parse_embeddings("", &data.vocab, dim, &mut emb_rng)?)?;
    } else if let Some(path) = &config.embeddings {
        model.set_embeddings(load_embeddings(path, &data.vocab, dim, &mut emb_rng)?)?;
    }
    Ok(model)
}

/// Artifact paths (relative to the run directory) and headline numbers for
/// one trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    /// Noise multiplier; 0 on the non-private baseline.
    pub z: f64,
    pub checkpoint: PathBuf,
    pub train_report: PathBuf,
    /// Present only on private points.
    pub privacy: Option<PathBuf>,
    pub attack_report: PathBuf,
    pub eval: PathBuf,
    pub epsilon: Option<f64>,
}

/// Immutable description of one finished (or aborted) run. The manifest
/// file is named by the hash of its own content.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    pub taxonomy_digest: String,
    pub vocab_digest: String,
    pub points: Vec<SweepPoint>,
    /// Train-split records per trained level, emitted by the subsample
    /// variation for sample-efficiency plots.
    pub records_per_level: Option<f64>,
    /// Set when the run aborted; names the failed stage.
    pub failed_stage: Option<String>,
    pub stage_seconds: BTreeMap<String, f64>,
}

/// Serializes a report with a stable layout (sorted struct fields as
/// declared, pretty-printed, trailing newline) so reruns are comparable
/// byte for byte.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn short_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{:02x}", b)).collect()
}

/// Deterministic run-directory name for a config: a hash of its JSON form,
/// which includes the seeds.
pub fn run_dir_name(config: &ExperimentConfig) -> Result<String, HarnessError> {
    let doc = serde_json::to_string(config)?;
    Ok(format!("run-{}", short_digest(doc.as_bytes())))
}

/// Writes the manifest into its run directory under a content-hash name.
pub fn write_manifest(manifest: &RunManifest) -> Result<PathBuf, HarnessError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    let name = format!("manifest-{}.json", short_digest(text.as_bytes()));
    let path = manifest.run_dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

struct StageClock {
    manifest: RunManifest,
}

impl StageClock {
    fn run<T>(
        &mut self,
        stage: &str,
        f: impl FnOnce() -> Result<T, Box<dyn std::error::Error>>,
    ) -> Result<T, HarnessError> {
        let start = Instant::now();
        match f() {
            Ok(value) => {
                self.manifest
                    .stage_seconds
                    .insert(stage.to_string(), start.elapsed().as_secs_f64());
                Ok(value)
            }
            Err(e) => {
                self.manifest.failed_stage = Some(stage.to_string());
                let path = write_manifest(&self.manifest)?;
                Err(HarnessError::Stage {
                    stage: stage.to_string(),
                    message: e.to_string(),
                    manifest: path,
                })
            }
        }
    }
}

/// Runs the full protocol for one config: non-private baseline, then one
/// DP model per sweep point, each trained from the same initialization and
/// audited with the same attack splits.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    if !config.variation.active().is_empty() {
        return Err(HarnessError::BadConfig(format!(
            "variation flags {:?} require run_variation",
            config.variation.active()
        )));
    }
    run_pipeline(config.clone(), out_dir)
}

/// Runs one experiment variation on top of a base config.
pub fn run_variation(
    config: &ExperimentConfig,
    variation: Variation,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    let mut config = config.clone();
    config.variation = VariationFlags::default();
    variation.stamp(&mut config.variation);
    if let Variation::Overfit { epochs } = variation {
        config.trainer.max_epochs = epochs;
        config.trainer.patience = None;
    }
    run_pipeline(config, out_dir)
}

fn run_pipeline(
    config: ExperimentConfig,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    config.validate()?;
    let run_dir = out_dir.join(run_dir_name(&config)?);
    std::fs::create_dir_all(&run_dir)?;

    let mut clock = StageClock {
        manifest: RunManifest {
            config: config.clone(),
            run_dir: run_dir.clone(),
            taxonomy_digest: String::new(),
            vocab_digest: String::new(),
            points: Vec::new(),
            records_per_level: None,
            failed_stage: None,
            stage_seconds: BTreeMap::new(),
        },
    };

    let data = clock.run("dataset", || prepare_data(&config))?;
    clock.manifest.taxonomy_digest = data.taxonomy.digest().to_string();
    clock.manifest.vocab_digest = data.vocab.digest().to_string();

    let init = clock.run("model-init", || init_model(&config, &data))?;
    if config.variation.subsample_fraction.is_some() {
        clock.manifest.records_per_level =
            Some(data.train.len() as f64 / init.spec.k as f64);
    }

    let attack_splits = clock.run("attack-splits", || {
        Ok(build_attack_splits(
            &data.train,
            &data.test,
            config.attack.known_fraction,
            config.seeds.attack,
        )?)
    })?;

    // Non-private baseline; doubles as the clipping-norm calibration run.
    let baseline_cfg = config.trainer.dp_config(0.0, ClipNorm::Off);
    let (baseline_model, baseline_report) = clock.run("train:baseline", || {
        let mut model = clone_model(&init);
        let report = train(
            &mut model,
            &data.taxonomy,
            &data.train,
            &data.validation,
            &baseline_cfg,
            config.seeds.model,
        )?;
        Ok((model, report))
    })?;
    finish_point(
        &mut clock,
        &config,
        &data,
        &attack_splits,
        "baseline",
        0.0,
        baseline_model,
        &baseline_report,
        None,
    )?;

    let zs = config.sweep_points();
    if config.dp.enabled && !zs.is_empty() {
        let clip = match config.dp.clip {
            ClipNorm::Fixed(c) => c,
            ClipNorm::Auto => clock.run("calibrate", || {
                lower_median(&baseline_report.grad_norms)
                    .ok_or_else(|| "baseline run logged no gradient norms".into())
            })?,
            ClipNorm::Off => unreachable!("validate rejects private sweeps without clipping"),
        };
        let delta = config.dp.delta.unwrap_or(1.0 / data.train.len() as f64);
        for z in zs {
            let label = format!("z{}", z);
            let dp_cfg = config.trainer.dp_config(z, ClipNorm::Fixed(clip));
            let (model, report) = clock.run(&format!("train:{}", label), || {
                let mut model = clone_model(&init);
                let report = train(
                    &mut model,
                    &data.taxonomy,
                    &data.train,
                    &data.validation,
                    &dp_cfg,
                    config.seeds.model,
                )?;
                Ok((model, report))
            })?;
            let spec = clock.run(&format!("account:{}", label), || {
                let mut ledger = RdpLedger::with_default_grid();
                let ratio = dp_cfg.batch_size as f64 / data.train.len() as f64;
                ledger.add_gaussian_steps(report.steps as usize, z, clip, ratio)?;
                Ok(ledger.to_dp(delta)?)
            })?;
            finish_point(
                &mut clock,
                &config,
                &data,
                &attack_splits,
                &label,
                z,
                model,
                &report,
                Some(spec),
            )?;
        }
    }

    write_manifest(&clock.manifest)?;
    Ok(clock.manifest)
}

fn clone_model(init: &HtcModel) -> HtcModel {
    HtcModel { spec: init.spec.clone(), store: init.store.snapshot() }
}

/// Saves one trained model's artifacts, audits it, and evaluates utility;
/// appends the finished point to the manifest.
#[allow(clippy::too_many_arguments)]
fn finish_point(
    clock: &mut StageClock,
    config: &ExperimentConfig,
    data: &PreparedData,
    splits: &AttackSplit,
    label: &str,
    z: f64,
    model: HtcModel,
    report: &TrainReport,
    privacy: Option<PrivacySpec>,
) -> Result<(), HarnessError> {
    let run_dir = clock.manifest.run_dir.clone();
    let point_rel = PathBuf::from("points").join(label);
    let point_dir = run_dir.join(&point_rel);
    std::fs::create_dir_all(&point_dir)?;

    clock.run(&format!("save:{}", label), || {
        model.save(&point_dir.join("model.htck"))?;
        Ok(())
    })?;
    write_json(&point_dir.join("train_report.json"), report)?;
    let privacy_path = match &privacy {
        Some(spec) => {
            write_json(&point_dir.join("privacy.json"), spec)?;
            Some(point_rel.join("privacy.json"))
        }
        None => None,
    };

    let attack_report = clock.run(&format!("attack:{}", label), || {
        Ok(audit_model(
            &model,
            &data.taxonomy,
            splits,
            &config.attack,
            privacy.as_ref().map(|s| s.epsilon),
            config.seeds.attack,
        )?)
    })?;
    write_json(&point_dir.join("attack_report.json"), &attack_report)?;

    let eval = clock.run(&format!("evaluate:{}", label), || {
        Ok(evaluate_utility(&model, &data.taxonomy, &data.test)?)
    })?;
    write_json(&point_dir.join("eval.json"), &eval)?;

    clock.manifest.points.push(SweepPoint {
        label: label.to_string(),
        z,
        checkpoint: point_rel.join("model.htck"),
        train_report: point_rel.join("train_report.json"),
        privacy: privacy_path,
        attack_report: point_rel.join("attack_report.json"),
        eval: point_rel.join("eval.json"),
        epsilon: privacy.map(|s| s.epsilon),
    });
    Ok(())
}

/// The full audit for one checkpoint: feature extraction over the attack
/// splits, attack-classifier training, and scoring on the balanced test.
pub fn audit_model(
    model: &HtcModel,
    taxonomy: &Taxonomy,
    splits: &AttackSplit,
    options: &AttackOptions,
    epsilon: Option<f64>,
    seed: u64,
) -> Result<AttackReport, Box<dyn std::error::Error>> {
    let features = options.feature_config();
    let mut train_set = extract_corpus(model, taxonomy, &splits.train_members, &features, true)?;
    train_set.extend(extract_corpus(
        model,
        taxonomy,
        &splits.train_non_members,
        &features,
        false,
    )?);
    let attack = train_attack_model(&train_set, &options.train, seed)?;
    let members = extract_corpus(model, taxonomy, &splits.test_members, &features, true)?;
    let non_members =
        extract_corpus(model, taxonomy, &splits.test_non_members, &features, false)?;
    let member_scores = attack.scores(&members)?;
    let non_member_scores = attack.scores(&non_members)?;
    Ok(evaluate_attack(&member_scores, &non_member_scores, epsilon))
}

/// Utility metrics on a test split, with truth paths truncated to the
/// model's trained depth.
pub fn evaluate_utility(
    model: &HtcModel,
    taxonomy: &Taxonomy,
    test: &[Record],
) -> Result<EvalResult, Box<dyn std::error::Error>> {
    let mut preds = Vec::with_capacity(test.len());
    let mut truths = Vec::with_capacity(test.len());
    for record in test {
        preds.push(model.predict(taxonomy, record)?.path);
        truths.push(record.label.truncated(model.spec.k));
    }
    Ok(evaluate(&preds, &truths, taxonomy)?)
}

/// Long-format CSV of every manifest's headline metrics, one row per
/// (run, point, metric), with `NONE` for undefined epsilons. Rows follow
/// manifest order, so the output is deterministic.
pub fn emit_plot_data(manifests: &[RunManifest]) -> Result<String, HarnessError> {
    let mut out = String::from("run,point,z,epsilon,metric,value\n");
    for manifest in manifests {
        let run = run_dir_name(&manifest.config)?;
        for point in &manifest.points {
            let eval: EvalResult = read_json(&manifest.run_dir.join(&point.eval))?;
            let attack: AttackReport = read_json(&manifest.run_dir.join(&point.attack_report))?;
            let epsilon = match point.epsilon {
                Some(e) => format!("{}", e),
                None => "NONE".to_string(),
            };
            let mut metrics: Vec<(&str, f64)> = vec![
                ("acc", eval.acc),
                ("f_h", eval.f_h),
                ("f_lca", eval.f_lca),
                ("attack_auc", attack.auc),
                ("attack_advantage", attack.advantage),
            ];
            if let Some(bound) = attack.advantage_bound {
                metrics.push(("advantage_bound", bound));
            }
            if let Some(ratio) = manifest.records_per_level {
                metrics.push(("records_per_level", ratio));
            }
            for (metric, value) in metrics {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    run, point.label, point.z, epsilon, metric, value
                ));
            }
        }
    }
    Ok(out)
}

/// Checks that every artifact a manifest lists exists and parses as its
/// declared type.
pub fn verify_manifest(manifest: &RunManifest) -> Result<(), HarnessError> {
    for point in &manifest.points {
        HtcModel::load(&manifest.run_dir.join(&point.checkpoint))
            .map_err(|e| HarnessError::BadConfig(format!("{}: {}", point.label, e)))?;
        let _: TrainReport = read_json(&manifest.run_dir.join(&point.train_report))?;
        let _: AttackReport = read_json(&manifest.run_dir.join(&point.attack_report))?;
        let _: EvalResult = read_json(&manifest.run_dir.join(&point.eval))?;
        if let Some(privacy) = &point.privacy {
            let _: PrivacySpec = read_json(&manifest.run_dir.join(privacy))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.dataset = DatasetConfig::Synth {
            taxonomy: None,
            n: 160,
            vocab_size: 96,
            options: SynthOptions::default(),
            max_len: 24,
            split: SplitSpec::Fractions { train: 0.5, validation: 0.2, test: 0.3 },
        };
        config.encoder = Some(EncoderConfig::bow(8));
        config.levels = Some(2);
        config.trainer.max_epochs = 2;
        config.trainer.batch_size = 16;
        config.attack.train.max_epochs = 3;
        config.z_sweep = vec![1.0];
        config
    }

    #[test]
    fn config_round_trips_and_defaults_parse() {
        let empty: ExperimentConfig = serde_json::from_str("{}").unwrap();
        let first = serde_json::to_string_pretty(&empty).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&first).unwrap();
        assert_eq!(first, serde_json::to_string_pretty(&back).unwrap());
        assert_eq!(empty.seeds, Seeds { data: 1, model: 2, attack: 3 });
        assert_eq!(empty.z_sweep, vec![0.1, 0.5, 1.0, 3.0]);
    }

    #[test]
    fn overrides_set_nested_keys_and_reject_unknown_parents() {
        let config = ExperimentConfig::default();
        let patched = apply_overrides(
            &config,
            &[
                ("trainer.batch_size".to_string(), "8".to_string()),
                ("seeds.data".to_string(), "77".to_string()),
                ("z_sweep".to_string(), "[0.5, 3.0]".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(patched.trainer.batch_size, 8);
        assert_eq!(patched.seeds.data, 77);
        assert_eq!(patched.z_sweep, vec![0.5, 3.0]);
        assert!(matches!(
            apply_overrides(&config, &[("nope.key".to_string(), "1".to_string())]),
            Err(HarnessError::Override { .. })
        ));
    }

    #[test]
    fn validation_rejects_contradictory_configs() {
        let mut config = ExperimentConfig::default();
        config.dp.clip = ClipNorm::Off;
        assert!(matches!(config.validate(), Err(HarnessError::BadConfig(_))));
        let mut config = ExperimentConfig::default();
        config.attack.known_fraction = 1.0;
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::default();
        config.z_sweep = vec![-1.0];
        assert!(config.validate().is_err());
    }

    #[test]
    fn sweep_points_drop_zero_and_duplicates() {
        let mut config = ExperimentConfig::default();
        config.z_sweep = vec![0.0, 1.0, 0.5, 1.0];
        assert_eq!(config.sweep_points(), vec![1.0, 0.5]);
    }

    #[test]
    fn variation_from_flags_requires_exactly_one() {
        let mut flags = VariationFlags::default();
        assert!(Variation::from_flags(&flags).is_err());
        flags.overfit_epochs = Some(10);
        assert_eq!(
            Variation::from_flags(&flags).unwrap(),
            Variation::Overfit { epochs: 10 }
        );
        flags.scratch = true;
        assert!(Variation::from_flags(&flags).is_err());
    }

    #[test]
    fn experiment_runs_end_to_end_and_manifest_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let manifest = run_experiment(&config, dir.path()).unwrap();
        assert_eq!(manifest.points.len(), 2);
        assert_eq!(manifest.points[0].label, "baseline");
        assert_eq!(manifest.points[0].epsilon, None);
        assert_eq!(manifest.points[1].label, "z1");
        assert!(manifest.points[1].epsilon.unwrap() > 0.0);
        assert!(manifest.failed_stage.is_none());
        verify_manifest(&manifest).unwrap();

        let csv = emit_plot_data(std::slice::from_ref(&manifest)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "run,point,z,epsilon,metric,value");
        assert!(lines.iter().any(|l| l.contains("baseline") && l.contains("NONE")));
        assert!(lines.iter().any(|l| l.contains("z1") && l.contains("advantage_bound")));
    }

    #[test]
    fn baseline_only_sweep_has_no_privacy_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config();
        config.z_sweep = vec![0.0];
        let manifest = run_experiment(&config, dir.path()).unwrap();
        assert_eq!(manifest.points.len(), 1);
        assert!(manifest.points[0].privacy.is_none());
        assert!(manifest.points[0].epsilon.is_none());
    }

    #[test]
    fn reruns_write_byte_identical_reports() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let a = run_experiment(&config, dir_a.path()).unwrap();
        let b = run_experiment(&config, dir_b.path()).unwrap();
        for (pa, pb) in a.points.iter().zip(&b.points) {
            for (ra, rb) in [
                (&pa.train_report, &pb.train_report),
                (&pa.attack_report, &pb.attack_report),
                (&pa.eval, &pb.eval),
            ] {
                let bytes_a = std::fs::read(a.run_dir.join(ra)).unwrap();
                let bytes_b = std::fs::read(b.run_dir.join(rb)).unwrap();
                assert_eq!(bytes_a, bytes_b, "{:?} differs", ra);
            }
            let ca = std::fs::read(a.run_dir.join(&pa.checkpoint)).unwrap();
            let cb = std::fs::read(b.run_dir.join(&pb.checkpoint)).unwrap();
            assert_eq!(ca, cb, "checkpoint differs");
        }
    }

    #[test]
    fn overfit_variation_runs_at_least_as_many_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config();
        config.z_sweep = vec![];
        config.trainer.max_epochs = 12;
        let stopped = run_experiment(&config, dir.path()).unwrap();
        let overfit =
            run_variation(&config, Variation::Overfit { epochs: 12 }, dir.path()).unwrap();
        let stopped_report: TrainReport =
            read_json(&stopped.run_dir.join(&stopped.points[0].train_report)).unwrap();
        let overfit_report: TrainReport =
            read_json(&overfit.run_dir.join(&overfit.points[0].train_report)).unwrap();
        assert!(overfit_report.epochs_run >= stopped_report.epochs_run);
        assert_eq!(overfit_report.epochs_run, 12);
        assert!(overfit_report.best_epoch.is_none());
    }

    #[test]
    fn subsample_variation_records_the_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config();
        config.z_sweep = vec![];
        let manifest =
            run_variation(&config, Variation::Subsample { fraction: 0.5 }, dir.path()).unwrap();
        // 160 records, 50% train split, half kept, two trained levels.
        assert_eq!(manifest.records_per_level, Some(40.0 / 2.0));
    }

    #[test]
    fn levels_variation_overrides_trained_depth() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config();
        config.z_sweep = vec![];
        let manifest =
            run_variation(&config, Variation::Levels { k: 1 }, dir.path()).unwrap();
        let model = HtcModel::load(
            &manifest.run_dir.join(&manifest.points[0].checkpoint),
        )
        .unwrap();
        assert_eq!(model.spec.k, 1);
    }

    #[test]
    fn scratch_variation_ignores_the_embedding_file() {
        let dir = tempfile::tempdir().unwrap();
        let emb = dir.path().join("emb.txt");
        // A giant value that a load would visibly plant in the table.
        std::fs::write(&emb, "w00000 9 9 9 9 9 9 9 9\n").unwrap();
        let mut config = tiny_config();
        config.z_sweep = vec![];
        config.embeddings = Some(emb);
        let data = prepare_data(&config).unwrap();

        let loaded = init_model(&config, &data).unwrap();
        let max_loaded = loaded
            .store
            .get("emb")
            .unwrap()
            .data()
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert_eq!(max_loaded, 9.0);

        config.variation.scratch = true;
        let scratch = init_model(&config, &data).unwrap();
        let emb_table = scratch.store.get("emb").unwrap();
        let max_scratch = emb_table.data().iter().cloned().fold(0.0, f64::max);
        assert!(max_scratch < 0.05);
        let dim = config.encoder_config().embedding_dim();
        assert!(emb_table.data()[..dim].iter().all(|&v| v == 0.0), "padding row stays zero");
        assert!(emb_table.data()[dim..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn failed_stage_leaves_a_partial_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config();
        config.dataset = DatasetConfig::Files {
            taxonomy: dir.path().join("missing.tsv"),
            format: DatasetFormat::Jsonl,
            path: dir.path().join("missing.jsonl"),
            min_count: 1,
            max_len: 24,
            split: SplitSpec::default(),
        };
        match run_experiment(&config, dir.path()) {
            Err(HarnessError::Stage { stage, manifest, .. }) => {
                assert_eq!(stage, "dataset");
                let partial: RunManifest = read_json(&manifest).unwrap();
                assert_eq!(partial.failed_stage.as_deref(), Some("dataset"));
                assert!(partial.points.is_empty());
            }
            other => panic!("expected stage failure, got {:?}", other.map(|m| m.points.len())),
        }
    }

    #[test]
    fn plot_data_from_no_manifests_is_just_the_header() {
        assert_eq!(emit_plot_data(&[]).unwrap(), "run,point,z,epsilon,metric,value\n");
    }
}

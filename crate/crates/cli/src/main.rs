//! `privtree`: train differentially private hierarchical text classifiers
//! and audit them with a white-box membership-inference attack. Every
//! subcommand reads one JSON experiment config (all fields defaulted,
//! individual keys overridable with `--set`), writes artifacts as JSON or
//! CSV, and reports failures as a JSON object on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use privtree::attack::{
    build_attack_splits, evaluate_attack, extract_corpus, read_attack_records,
    train_attack_model, write_attack_records,
};
use privtree::harness::{
    apply_overrides, emit_plot_data, evaluate_utility, init_model, prepare_data, read_json,
    run_experiment, run_variation, write_json, DatasetConfig, ExperimentConfig, RunManifest,
    Variation,
};
use privtree::model::HtcModel;
use privtree::optim::{calibrate_clipping_norm, train, ClipNorm};
use privtree::privacy::RdpLedger;
use privtree::taxonomy::Taxonomy;

#[derive(Parser)]
#[command(
    name = "privtree",
    version,
    about = "Differentially private hierarchical text classification and auditing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model: the non-private baseline, or private at a fixed z.
    Train(TrainArgs),
    /// Extract membership-attack features from a trained checkpoint.
    Audit(AuditArgs),
    /// Train the attack classifier on feature files and score it.
    Attack(AttackArgs),
    /// Utility metrics for a checkpoint on the config's test split.
    Evaluate(EvaluateArgs),
    /// Full protocol: baseline plus one audited model per noise multiplier.
    Sweep(SweepArgs),
    /// One experiment variation (overfit, subsample, levels, scratch).
    Variation(VariationArgs),
    /// Flatten run manifests into a long-format CSV for plotting.
    PlotData(PlotDataArgs),
    /// Generate a synthetic corpus (and its taxonomy) as files.
    Synth(SynthArgs),
}

/// Config loading shared by every subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key: a dotted path and a JSON value,
    /// e.g. `--set trainer.batch_size=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Noise multiplier; 0 trains the non-private baseline.
    #[arg(long, default_value_t = 0.0)]
    z: f64,
    /// Output directory for checkpoint and reports.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained checkpoint to audit.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for attack_train.jsonl and attack_test.jsonl.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Attack-train features (JSONL, membership-labeled).
    #[arg(long)]
    train: PathBuf,
    /// Attack-test features (JSONL, membership-labeled).
    #[arg(long)]
    test: PathBuf,
    /// Privacy budget of the audited model, for the advantage bound.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Write the attack report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory that will hold the run directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct VariationArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Train exactly N epochs with early stopping off.
    #[arg(long, value_name = "N", conflicts_with_all = ["subsample", "levels", "scratch"])]
    overfit: Option<usize>,
    /// Keep only this fraction of the train split.
    #[arg(long, value_name = "F", conflicts_with_all = ["levels", "scratch"])]
    subsample: Option<f64>,
    /// Override the number of trained hierarchy levels.
    #[arg(long, value_name = "K", conflicts_with = "scratch")]
    levels: Option<usize>,
    /// Ignore pretrained embeddings and initialize rows at random.
    #[arg(long)]
    scratch: bool,
}

#[derive(Args)]
struct PlotDataArgs {
    /// Run manifest paths; rows follow argument order.
    #[arg(long = "manifest", value_name = "PATH", required = true)]
    manifests: Vec<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus output path (JSON Lines).
    #[arg(long, default_value = "synth.jsonl")]
    out: PathBuf,
    /// Also write the generating taxonomy as TSV.
    #[arg(long)]
    taxonomy_out: Option<PathBuf>,
}

struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, err: impl std::fmt::Display) -> CliError {
        CliError { kind, message: err.to_string() }
    }
}

fn fail<E: std::fmt::Display>(kind: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::new(kind, e)
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let base = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(fail("io"))?;
                serde_json::from_str(&text).map_err(fail("config"))?
            }
            None => ExperimentConfig::default(),
        };
        let overrides: Vec<(String, String)> = self
            .set
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| {
                        CliError::new("config", format!("override `{}` is not KEY=VALUE", kv))
                    })
            })
            .collect::<Result<_, _>>()?;
        apply_overrides(&base, &overrides).map_err(fail("config"))
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(fail("io"))?;
    println!("{}", text);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": e.kind, "message": e.message } })
            );
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Variation(args) => cmd_variation(args),
        Command::PlotData(args) => cmd_plot_data(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = args.config.load()?;
    config.validate().map_err(fail("config"))?;
    let data = prepare_data(&config).map_err(fail("data"))?;
    let mut model = init_model(&config, &data).map_err(fail("model"))?;

    let dp_cfg = if args.z > 0.0 {
        let clip = match config.dp.clip {
            ClipNorm::Fixed(c) => c,
            ClipNorm::Auto => {
                let probe = config.trainer.dp_config(args.z, ClipNorm::Auto);
                let (c, _) = calibrate_clipping_norm(
                    &model,
                    &data.taxonomy,
                    &data.train,
                    &data.validation,
                    &probe,
                    config.seeds.model,
                )
                .map_err(fail("optim"))?;
                c
            }
            ClipNorm::Off => {
                return Err(CliError::new(
                    "config",
                    "private training needs a clipping norm (auto or fixed)",
                ))
            }
        };
        config.trainer.dp_config(args.z, ClipNorm::Fixed(clip))
    } else {
        config.trainer.dp_config(0.0, ClipNorm::Off)
    };

    let report = train(
        &mut model,
        &data.taxonomy,
        &data.train,
        &data.validation,
        &dp_cfg,
        config.seeds.model,
    )
    .map_err(fail("optim"))?;

    std::fs::create_dir_all(&args.out).map_err(fail("io"))?;
    model.save(&args.out.join("model.htck")).map_err(fail("model"))?;
    write_json(&args.out.join("train_report.json"), &report).map_err(fail("io"))?;
    if dp_cfg.is_private() {
        let clip = report.clip.expect("private training always clips");
        let delta = config.dp.delta.unwrap_or(1.0 / data.train.len() as f64);
        let mut ledger = RdpLedger::with_default_grid();
        let ratio = dp_cfg.batch_size as f64 / data.train.len() as f64;
        ledger
            .add_gaussian_steps(report.steps as usize, args.z, clip, ratio)
            .map_err(fail("privacy"))?;
        let spec = ledger.to_dp(delta).map_err(fail("privacy"))?;
        write_json(&args.out.join("privacy.json"), &spec).map_err(fail("io"))?;
    }
    print_json(&report)
}

fn cmd_audit(args: AuditArgs) -> Result<(), CliError> {
    let config = args.config.load()?;
    config.validate().map_err(fail("config"))?;
    let data = prepare_data(&config).map_err(fail("data"))?;
    let model = HtcModel::load(&args.checkpoint).map_err(fail("model"))?;
    let splits = build_attack_splits(
        &data.train,
        &data.test,
        config.attack.known_fraction,
        config.seeds.attack,
    )
    .map_err(fail("attack"))?;

    let features = config.attack.feature_config();
    let tax = &data.taxonomy;
    let mut train_set =
        extract_corpus(&model, tax, &splits.train_members, &features, true).map_err(fail("attack"))?;
    train_set.extend(
        extract_corpus(&model, tax, &splits.train_non_members, &features, false)
            .map_err(fail("attack"))?,
    );
    let mut test_set =
        extract_corpus(&model, tax, &splits.test_members, &features, true).map_err(fail("attack"))?;
    test_set.extend(
        extract_corpus(&model, tax, &splits.test_non_members, &features, false)
            .map_err(fail("attack"))?,
    );

    std::fs::create_dir_all(&args.out).map_err(fail("io"))?;
    let train_path = args.out.join("attack_train.jsonl");
    let test_path = args.out.join("attack_test.jsonl");
    write_attack_records(&train_path, &train_set).map_err(fail("io"))?;
    write_attack_records(&test_path, &test_set).map_err(fail("io"))?;
    print_json(&serde_json::json!({
        "attack_train": train_path,
        "attack_test": test_path,
        "train_records": train_set.len(),
        "test_records": test_set.len(),
    }))
}

fn cmd_attack(args: AttackArgs) -> Result<(), CliError> {
    let config = args.config.load()?;
    let train_set = read_attack_records(&args.train).map_err(fail("attack"))?;
    let test_set = read_attack_records(&args.test).map_err(fail("attack"))?;
    let model = train_attack_model(&train_set, &config.attack.train, config.seeds.attack)
        .map_err(fail("attack"))?;
    let mut member_scores = Vec::new();
    let mut non_member_scores = Vec::new();
    for record in &test_set {
        let score = model.score(record).map_err(fail("attack"))?;
        if record.member {
            member_scores.push(score);
        } else {
            non_member_scores.push(score);
        }
    }
    let report = evaluate_attack(&member_scores, &non_member_scores, args.epsilon);
    if let Some(out) = &args.out {
        write_json(out, &report).map_err(fail("io"))?;
    }
    print_json(&report)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let config = args.config.load()?;
    let data = prepare_data(&config).map_err(fail("data"))?;
    let model = HtcModel::load(&args.checkpoint).map_err(fail("model"))?;
    let result = evaluate_utility(&model, &data.taxonomy, &data.test).map_err(fail("metrics"))?;
    print_json(&result)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let config = args.config.load()?;
    let manifest = run_experiment(&config, &args.out).map_err(fail("harness"))?;
    print_json(&manifest)
}

fn cmd_variation(args: VariationArgs) -> Result<(), CliError> {
    let config = args.config.load()?;
    let variation = if let Some(epochs) = args.overfit {
        Variation::Overfit { epochs }
    } else if let Some(fraction) = args.subsample {
        Variation::Subsample { fraction }
    } else if let Some(k) = args.levels {
        Variation::Levels { k }
    } else if args.scratch {
        Variation::Scratch
    } else {
        // No flag given: the config's own variation block picks.
        Variation::from_flags(&config.variation).map_err(fail("config"))?
    };
    let manifest = run_variation(&config, variation, &args.out).map_err(fail("harness"))?;
    print_json(&manifest)
}

fn cmd_plot_data(args: PlotDataArgs) -> Result<(), CliError> {
    let manifests: Vec<RunManifest> = args
        .manifests
        .iter()
        .map(|p| read_json(p).map_err(fail("io")))
        .collect::<Result<_, _>>()?;
    let csv = emit_plot_data(&manifests).map_err(fail("harness"))?;
    match &args.out {
        Some(path) => std::fs::write(path, &csv).map_err(fail("io"))?,
        None => print!("{}", csv),
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let config = args.config.load()?;
    let DatasetConfig::Synth { taxonomy, n, vocab_size, options, .. } = &config.dataset else {
        return Err(CliError::new("config", "synth requires a synth dataset config"));
    };
    let tax = match taxonomy {
        Some(path) => Taxonomy::load(path).map_err(fail("data"))?,
        None => privtree::harness::demo_taxonomy(),
    };
    let records =
        privtree::data::synth_corpus_with(&tax, *n, *vocab_size, config.seeds.data, options)
            .map_err(fail("data"))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out).map_err(fail("io"))?);
    privtree::data::emit_jsonl(&records, &tax, &mut out).map_err(fail("data"))?;
    drop(out);
    if let Some(tax_out) = &args.taxonomy_out {
        std::fs::write(tax_out, tax.to_tsv()).map_err(fail("io"))?;
    }
    print_json(&serde_json::json!({
        "corpus": args.out,
        "records": records.len(),
        "taxonomy_digest": tax.digest(),
    }))
}

//! Command-line entry point for the full pipeline: corpus generation,
//! alignment pretraining, adversarial finetuning, evaluation, probing,
//! projection, and the ablation matrix.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. The seed flag
//! falls back to the DAMP_SEED environment variable, then to 0.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use damp::adversarial::{self, AdversaryHead, FinetuneConfig, FinetuneMode};
use damp::align_pretrain::{self, PretrainConfig};
use damp::autodiff::{load_checkpoint, save_checkpoint, ParamSet};
use damp::evalprobe;
use damp::experiment::{self, ExperimentMatrix};
use damp::model::{self, ModelConfig, SubwordVocab};
use damp::synthdata::{self, Corpus, GrammarConfig, Split};

#[derive(Parser)]
#[command(
    name = "damp",
    about = "Doubly aligned multilingual semantic parsing laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a pseudo-multilingual corpus: JSONL splits, bitext,
    /// codeswitched test set, grammar, and metadata.
    GenData(GenDataArgs),
    /// Alignment pretraining on bitext (masked-token, sentence alignment,
    /// attention symmetry); writes a checkpoint and a loss trace.
    Pretrain(PretrainArgs),
    /// Finetune a parser on L0 labels, optionally with a language
    /// adversary; writes a checkpoint and a multiplier trace.
    Finetune(FinetuneArgs),
    /// Score a checkpoint: exact match and intent accuracy per language.
    Evaluate(EvaluateArgs),
    /// Linear probe of language identity on frozen encoder word states.
    Probe(ProbeArgs),
    /// 2-D PCA projection of encoder word states to CSV (and optional SVG).
    Project(ProjectArgs),
    /// Run the full (variant × seed) ablation matrix with resume.
    Matrix(MatrixArgs),
    /// Render report.md / results.csv / probe.csv from run records.
    Report(ReportArgs),
}

fn env_seed() -> u64 {
    std::env::var("DAMP_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

fn log(kv: &[(&str, String)]) {
    let line: Vec<String> = kv.iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("{}", line.join(" "));
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&body).with_context(|| format!("parsing config {}", path.display()))
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    synthdata::load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

/// Load a checkpoint and recover the model configuration stored under its
/// "model" key (or as the whole config value).
fn load_model_checkpoint(path: &Path) -> Result<(ParamSet, ModelConfig)> {
    let (params, config) =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model: ModelConfig = serde_json::from_value(
        config.get("model").cloned().unwrap_or(config),
    )
    .map_err(|e| anyhow!("checkpoint {} has no model config: {e}", path.display()))?;
    Ok((params, model))
}

#[derive(Args)]
struct GenDataArgs {
    /// Grammar config JSON; keys: num_intents (8), num_slots (8),
    /// templates_per_intent (3), num_languages (5), values_per_slot (6),
    /// shared_carriers (16), cognate_pair ([3,4]), cognate_fraction (0.8),
    /// codeswitch_probability (0.3).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed [default: DAMP_SEED or 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Examples per language (split 70/10/20) [default: 400]
    #[arg(long)]
    sizes: Option<usize>,
    /// Number of intents (overrides config)
    #[arg(long)]
    num_intents: Option<usize>,
    /// Number of slot labels (overrides config)
    #[arg(long)]
    num_slots: Option<usize>,
    /// Templates per intent (overrides config)
    #[arg(long)]
    templates_per_intent: Option<usize>,
    /// Number of pseudo-languages (overrides config)
    #[arg(long)]
    num_languages: Option<usize>,
    /// Values per slot (overrides config)
    #[arg(long)]
    values_per_slot: Option<usize>,
    /// Shared carrier words (overrides config)
    #[arg(long)]
    shared_carriers: Option<usize>,
    /// Cognate language pair as two indices (overrides config)
    #[arg(long, num_args = 2)]
    cognate_pair: Option<Vec<usize>>,
    /// Fraction of shared surface forms in the cognate pair (overrides config)
    #[arg(long)]
    cognate_fraction: Option<f64>,
    /// Per-token switch probability of the codeswitched test set (overrides config)
    #[arg(long)]
    codeswitch_probability: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Also print metadata JSON to standard output
    #[arg(long)]
    stdout: bool,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut config: GrammarConfig = match &args.config {
        Some(path) => read_json_config(path)?,
        None => GrammarConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { config.$f = v; })* };
    }
    set!(
        num_intents,
        num_slots,
        templates_per_intent,
        num_languages,
        values_per_slot,
        shared_carriers,
        cognate_fraction,
        codeswitch_probability
    );
    if let Some(pair) = &args.cognate_pair {
        config.cognate_pair = Some((pair[0], pair[1]));
    }
    let seed = args.seed.unwrap_or_else(env_seed);
    let sizes = args.sizes.unwrap_or(400);
    let grammar = synthdata::build_grammar(&config, seed)?;
    let meta = synthdata::emit_corpus(&grammar, sizes, seed, &args.out)?;
    log(&[
        ("cmd", "gen-data".into()),
        ("seed", seed.to_string()),
        ("sizes", sizes.to_string()),
        ("languages", grammar.languages.len().to_string()),
        ("out", args.out.display().to_string()),
    ]);
    if args.stdout {
        println!("{}", serde_json::to_string_pretty(&meta)?);
    }
    Ok(())
}

#[derive(Args)]
struct PretrainArgs {
    /// Corpus directory (from gen-data)
    #[arg(long)]
    corpus: PathBuf,
    /// Pretraining config JSON; keys: steps (6000), batch_pairs (8),
    /// mask_rate (0.15), w_tlm (1), w_sa (1), w_as (1), symmetry_pairs (1),
    /// lr (0.001), weight_decay (0).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model config JSON (defaults derived from the corpus grammar)
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Root seed [default: DAMP_SEED or 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training steps (overrides config)
    #[arg(long)]
    steps: Option<usize>,
    /// Bitext pairs per batch (overrides config)
    #[arg(long)]
    batch_pairs: Option<usize>,
    /// Masked-token rate (overrides config)
    #[arg(long)]
    mask_rate: Option<f64>,
    /// Learning rate (overrides config)
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory for checkpoint + trace
    #[arg(long)]
    out: PathBuf,
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let mut config: PretrainConfig = match &args.config {
        Some(path) => read_json_config(path)?,
        None => PretrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { config.$f = v; })* };
    }
    set!(steps, batch_pairs, mask_rate, lr);
    let model: ModelConfig = match &args.model_config {
        Some(path) => read_json_config(path)?,
        None => ModelConfig::for_grammar(&corpus.grammar),
    };
    let seed = args.seed.unwrap_or_else(env_seed);
    let (params, trace) = align_pretrain::pretrain(&corpus, &model, &config, seed)?;
    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("pretrain.ckpt");
    save_checkpoint(&ckpt, &params, &serde_json::json!({ "model": model }))?;
    align_pretrain::write_pretrain_trace(&args.out.join("pretrain.trace.csv"), &trace)?;
    let last = trace.last().map(|r| r.total).unwrap_or(f64::NAN);
    log(&[
        ("cmd", "pretrain".into()),
        ("seed", seed.to_string()),
        ("steps", config.steps.to_string()),
        ("final_loss", format!("{last:.6}")),
        ("checkpoint", ckpt.display().to_string()),
    ]);
    Ok(())
}

#[derive(Args)]
struct FinetuneArgs {
    /// Corpus directory (from gen-data)
    #[arg(long)]
    corpus: PathBuf,
    /// Initial checkpoint (e.g. from pretrain); fresh init when absent
    #[arg(long)]
    init: Option<PathBuf>,
    /// Finetune config JSON; keys: mode ("none"), adversary ("binary"),
    /// lambda0 (0), epsilon (0.6931), lambda_lr (0.003), freeze_layers (1),
    /// norm_weight (0.01), steps (3000), batch_size (8), lr (0.001),
    /// adversary_lr (0.01), weight_decay (0), eval_every (200),
    /// eval_examples (40), seed (0).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training mode: none | fixed-lambda | constrained | freeze | l1 | l2
    #[arg(long)]
    mode: Option<FinetuneMode>,
    /// Adversary head: binary | multiclass
    #[arg(long)]
    adversary: Option<AdversaryHead>,
    /// Constraint target in nats (overrides config)
    #[arg(long)]
    epsilon: Option<f64>,
    /// Initial (or fixed) adversarial weight (overrides config)
    #[arg(long)]
    lambda0: Option<f64>,
    /// Multiplier ascent rate (overrides config)
    #[arg(long)]
    lambda_lr: Option<f64>,
    /// Training steps (overrides config)
    #[arg(long)]
    steps: Option<usize>,
    /// Batch size (overrides config)
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate (overrides config)
    #[arg(long)]
    lr: Option<f64>,
    /// Root seed [default: DAMP_SEED or 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoint + trace
    #[arg(long)]
    out: PathBuf,
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let mut ft: FinetuneConfig = match &args.config {
        Some(path) => read_json_config(path)?,
        None => FinetuneConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { ft.$f = v; })* };
    }
    set!(mode, adversary, epsilon, lambda0, lambda_lr, steps, batch_size, lr, seed);
    if args.seed.is_none() && args.config.is_none() {
        ft.seed = env_seed();
    }
    let (init, model) = match &args.init {
        Some(path) => load_model_checkpoint(path)?,
        None => {
            let model = ModelConfig::for_grammar(&corpus.grammar);
            (model::init_params(&model, ft.seed), model)
        }
    };
    let tuned = adversarial::finetune(&init, &corpus, &model, &ft)?;
    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("finetune.ckpt");
    save_checkpoint(
        &ckpt,
        &tuned.params,
        &serde_json::json!({ "model": model, "finetune": ft }),
    )?;
    adversarial::write_finetune_trace(&args.out.join("finetune.trace.csv"), &tuned.lagrangian.trace)?;
    log(&[
        ("cmd", "finetune".into()),
        ("mode", format!("{:?}", ft.mode)),
        ("seed", ft.seed.to_string()),
        ("best_dev_em", format!("{:.4}", tuned.best_dev_em)),
        ("lambda", format!("{:.4}", tuned.lagrangian.lambda)),
        ("checkpoint", ckpt.display().to_string()),
    ]);
    Ok(())
}

#[derive(Args)]
struct EvaluateArgs {
    /// Corpus directory (from gen-data)
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint to score
    #[arg(long)]
    ckpt: PathBuf,
    /// Score the codeswitched test set instead of the per-language splits
    #[arg(long)]
    codeswitched: bool,
    /// Test examples per language [default: all]
    #[arg(long)]
    limit: Option<usize>,
    /// Write the JSON report here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report to standard output
    #[arg(long)]
    stdout: bool,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let (params, model) = load_model_checkpoint(&args.ckpt)?;
    let vocab = SubwordVocab::from_grammar(&corpus.grammar);
    let limit = args.limit.unwrap_or(usize::MAX);
    let dataset: Vec<_> = if args.codeswitched {
        corpus.codeswitched_test.iter().take(limit).cloned().collect()
    } else {
        corpus
            .languages()
            .iter()
            .flat_map(|l| corpus.split(l, Split::Test).iter().take(limit).cloned())
            .collect()
    };
    let report = evalprobe::evaluate(&model, &params, &corpus.grammar, &vocab, &dataset)?;
    for (lang, em) in &report.em_by_lang {
        log(&[
            ("cmd", "evaluate".into()),
            ("lang", lang.clone()),
            ("em", format!("{em:.4}")),
            ("intent", format!("{:.4}", report.intent_by_lang[lang])),
            ("count", report.count_by_lang[lang].to_string()),
        ]);
    }
    let body = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &body)?;
    }
    if args.stdout {
        println!("{body}");
    }
    Ok(())
}

#[derive(Args)]
struct ProbeArgs {
    /// Corpus directory (from gen-data)
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint whose frozen encoder states are probed
    #[arg(long)]
    ckpt: PathBuf,
    /// Test examples per language feeding the probe [default: 8]
    #[arg(long, default_value_t = 8)]
    per_lang: usize,
    /// Cross-validation folds [default: 10]
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Root seed [default: DAMP_SEED or 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Variant label recorded in the report [default: "cli"]
    #[arg(long, default_value = "cli")]
    variant: String,
    /// Write the JSON report here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report to standard output
    #[arg(long)]
    stdout: bool,
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let (params, model) = load_model_checkpoint(&args.ckpt)?;
    let vocab = SubwordVocab::from_grammar(&corpus.grammar);
    let seed = args.seed.unwrap_or_else(env_seed);
    let (states, labels, _) =
        experiment::collect_probe_states(&model, &params, &corpus, &vocab, args.per_lang)?;
    let report = evalprobe::fit_probe(&states, &labels, args.folds, seed, &args.variant)?;
    log(&[
        ("cmd", "probe".into()),
        ("tokens", states.len().to_string()),
        ("mean_acc", format!("{:.4}", report.mean)),
        ("std", format!("{:.4}", report.std)),
    ]);
    let body = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        std::fs::write(out, &body)?;
    }
    if args.stdout {
        println!("{body}");
    }
    Ok(())
}

#[derive(Args)]
struct ProjectArgs {
    /// Corpus directory (from gen-data)
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint whose encoder states are projected
    #[arg(long)]
    ckpt: PathBuf,
    /// Test examples per language [default: 8]
    #[arg(long, default_value_t = 8)]
    per_lang: usize,
    /// Variant label recorded in the CSV [default: "cli"]
    #[arg(long, default_value = "cli")]
    variant: String,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Also write a static SVG scatter here
    #[arg(long)]
    svg: Option<PathBuf>,
}

fn cmd_project(args: ProjectArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let (params, model) = load_model_checkpoint(&args.ckpt)?;
    let vocab = SubwordVocab::from_grammar(&corpus.grammar);
    let (states, _, langs) =
        experiment::collect_probe_states(&model, &params, &corpus, &vocab, args.per_lang)?;
    let projection = evalprobe::project_2d(&states)?;
    evalprobe::write_projection_csv(&args.out, &projection, &langs, &args.variant)?;
    if let Some(svg) = &args.svg {
        evalprobe::write_projection_svg(svg, &projection, &langs)?;
    }
    log(&[
        ("cmd", "project".into()),
        ("tokens", states.len().to_string()),
        ("discarded_variance", format!("{:.6}", projection.discarded)),
        ("out", args.out.display().to_string()),
    ]);
    Ok(())
}

#[derive(Args)]
struct MatrixArgs {
    /// Corpus directory (from gen-data)
    #[arg(long)]
    corpus: PathBuf,
    /// Matrix spec JSON; keys: variants (default nine-variant ablation),
    /// seeds ([11..15]), model (derived from grammar), pretrain (defaults),
    /// eval_test_examples (40), probe_examples_per_lang (8).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parallel runs [default: 1]
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Run-record output directory
    #[arg(long)]
    out: PathBuf,
}

fn cmd_matrix(args: MatrixArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let matrix: ExperimentMatrix = match &args.config {
        Some(path) => read_json_config(path)?,
        None => experiment::default_matrix(&corpus),
    };
    log(&[
        ("cmd", "matrix".into()),
        ("variants", matrix.variants.len().to_string()),
        ("seeds", matrix.seeds.len().to_string()),
        ("workers", args.workers.to_string()),
    ]);
    let records = experiment::run_matrix(&matrix, &corpus, &args.out, args.workers)?;
    let expected = matrix.variants.len() * matrix.seeds.len();
    log(&[
        ("cmd", "matrix".into()),
        ("records", records.len().to_string()),
        ("expected", expected.to_string()),
    ]);
    if records.len() < expected {
        bail!("{} of {} runs failed", expected - records.len(), expected);
    }
    Ok(())
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding run-record JSON files
    #[arg(long)]
    runs: PathBuf,
    /// Output directory for report.md / results.csv / probe.csv
    #[arg(long)]
    out: PathBuf,
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let records = experiment::load_records(&args.runs)?;
    if records.is_empty() {
        bail!("no run records in {}", args.runs.display());
    }
    experiment::render_report(&records, &args.out)?;
    log(&[
        ("cmd", "report".into()),
        ("records", records.len().to_string()),
        ("out", args.out.display().to_string()),
    ]);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Project(args) => cmd_project(args),
        Command::Matrix(args) => cmd_matrix(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error={err:#}");
            ExitCode::FAILURE
        }
    }
}

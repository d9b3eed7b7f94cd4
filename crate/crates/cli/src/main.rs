//! `emospace`: generate data, train, guide, refine and run statistics.
//!
//! Machine-readable JSON (or CSV with `--csv`) goes to stdout; progress and
//! diagnostics go to stderr. Exit codes: 0 success, 2 configuration or usage,
//! 3 I/O or malformed file, 4 domain validation, 5 internal invariant violation.

mod config;

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use emospace_core::data::{self, Checkpoint};
use emospace_core::guidance::{self, GuidanceConfig};
use emospace_core::refine::{self, LexiconStub};
use emospace_core::stats::{self, AnnotationMatrix, RatingMatrix};
use emospace_core::training;
use emospace_core::EmoError;
use serde::Serialize;

use config::RunConfig;

/// Error carrying its own exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return e.code;
    }
    match err.downcast_ref::<EmoError>() {
        Some(EmoError::InvalidConfig(_) | EmoError::InvalidTemperature(_)) => 2,
        Some(
            EmoError::Io(_) | EmoError::FormatError { .. } | EmoError::VersionError { .. } | EmoError::CsvFormat { .. },
        ) => 3,
        Some(EmoError::InvariantViolation(_)) => 5,
        Some(_) => 4,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 5,
    }
}

#[derive(Parser)]
#[command(name = "emospace", version, about = "Emotion-prototype learning and guidance engine")]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic embedding dataset.
    Synth(SynthArgs),
    /// Train the fusion network and prototype bank.
    Train(TrainArgs),
    /// Multi-prototype guidance for a query.
    Guide(GuideArgs),
    /// Refine a prompt towards a target emotion.
    Refine(RefineArgs),
    /// Step-by-step blending and attention trace.
    Trace(TraceArgs),
    /// Agreement and rank statistics from CSV.
    #[command(subcommand)]
    Stats(StatsCommand),
}

#[derive(Args)]
struct SeedArg {
    /// Random seed; overrides EMOSPACE_SEED and the config.
    #[arg(long, env = "EMOSPACE_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    seed: SeedArg,
    /// Output dataset path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report path; defaults to the checkpoint path plus `.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads for gradient computation; results are identical for any value.
    #[arg(long)]
    threads: Option<usize>,
    /// Print per-epoch CSV instead of the JSON summary.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Lexicon word whose embedding is the query.
    #[arg(long, conflicts_with = "query")]
    word: Option<String>,
    /// JSON file holding the query embedding as an array of numbers.
    #[arg(long)]
    query: Option<PathBuf>,
    /// Number of positive prototypes.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_neg: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct GuideArgs {
    #[command(flatten)]
    query: QueryArgs,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    prompt: String,
    /// Lexicon word naming the target emotion.
    #[arg(long)]
    target: String,
    /// Route the target through this checkpoint's prototype bank.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    query: QueryArgs,
    /// Lexicon word for the content embedding.
    #[arg(long, default_value = "anticipation")]
    content: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    ramp_start: Option<f64>,
    #[arg(long)]
    ramp_end: Option<f64>,
    #[arg(long)]
    csv: bool,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Pairwise Cohen's kappa; CSV has one annotator per row.
    Kappa {
        csv_path: PathBuf,
        /// Print the per-pair table as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Friedman test; CSV has one subject per row.
    Friedman { csv_path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.validate()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(cfg, a, out),
        Command::Train(a) => cmd_train(cfg, a, out),
        Command::Guide(a) => cmd_guide(cfg, a, out),
        Command::Refine(a) => cmd_refine(cfg, a, out),
        Command::Trace(a) => cmd_trace(cfg, a, out),
        Command::Stats(s) => cmd_stats(s, out),
    }
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn required(path: Option<PathBuf>, what: &str, flag: &str) -> anyhow::Result<PathBuf> {
    path.ok_or_else(|| CliError::new(2, format!("no {what} path: pass {flag} or set it under paths")).into())
}

fn cmd_synth(mut cfg: RunConfig, a: SynthArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if let Some(seed) = a.seed.seed {
        cfg.synth.seed = seed;
    }
    let path = required(a.out.or(cfg.paths.dataset), "output", "--out")?;
    for w in cfg.synth.warnings() {
        eprintln!("warning: {w}");
    }
    let ds = data::generate_synthetic(&cfg.synth)?;
    data::save_dataset(&ds, &path).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {} samples to {}", ds.len(), path.display());
    emit_json(
        out,
        &serde_json::json!({
            "N": ds.len(),
            "d": cfg.synth.dim,
            "m": ds.classes(),
            "path": path,
            "seed": cfg.synth.seed,
        }),
    )
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if let Some(seed) = a.seed.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(t) = a.threads {
        cfg.train.threads = t;
    }
    cfg.train
        .validate()
        .map_err(|e| CliError::new(2, format!("train options: {e}")))?;
    let dataset = required(a.dataset.or(cfg.paths.dataset), "dataset", "--dataset")?;
    let ckpt_path = required(a.out.or(cfg.paths.checkpoint), "checkpoint", "--out")?;
    let report_path = a.report.or(cfg.paths.report).unwrap_or_else(|| {
        let mut p = ckpt_path.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });

    let ds = data::load_dataset(&dataset).with_context(|| format!("loading {}", dataset.display()))?;
    eprintln!(
        "training on {} samples ({} classes) for {} epochs",
        ds.len(),
        ds.classes(),
        cfg.train.epochs
    );
    let model = training::train(&ds, &cfg.train, &cfg.loss_weights)?;
    let guidance = cfg.guidance.build(model.bank.dim(), cfg.train.seed);
    let ck = Checkpoint {
        net: model.net,
        bank: model.bank,
        mapper: None,
        guidance: Some(guidance),
        train_config: cfg.train.clone(),
    };
    data::save_checkpoint(&ck, &ckpt_path).with_context(|| format!("writing {}", ckpt_path.display()))?;
    let report = &model.report;
    let mut text = serde_json::to_string_pretty(&report.deterministic_json())?;
    text.push('\n');
    std::fs::write(&report_path, text).with_context(|| format!("writing {}", report_path.display()))?;

    let k = ck.bank.len();
    eprintln!(
        "final accuracy {:.4}, {k} prototypes, {:.2}s",
        report.final_accuracy, report.wall_time_secs
    );
    if a.csv {
        writeln!(out, "epoch,total,main,contrast,diversity,distance,train_accuracy,prototypes")?;
        for e in &report.epochs {
            let l = &e.loss;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch, l.total, l.main, l.contrast, l.diversity, l.distance, e.train_accuracy, e.prototypes
            )?;
        }
        return Ok(());
    }
    emit_json(
        out,
        &serde_json::json!({
            "final_accuracy": report.final_accuracy,
            "prototypes": k,
            "k_trajectory": report.k_trajectory,
            "checkpoint": ckpt_path,
            "report": report_path,
            "seed": cfg.train.seed,
        }),
    )
}

fn load_checkpoint(path: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = required(path.or_else(|| cfg.paths.checkpoint.clone()), "checkpoint", "--checkpoint")?;
    data::load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
}

fn lexicon() -> anyhow::Result<LexiconStub> {
    Ok(LexiconStub::builtin()?)
}

fn word_embedding(lex: &LexiconStub, word: &str) -> anyhow::Result<Vec<f64>> {
    match lex.embedding(word) {
        Ok(v) => Ok(v.to_vec()),
        Err(_) => {
            let words: Vec<&str> = lex.words().collect();
            Err(CliError::new(4, format!("unknown lexicon word {word:?}; available: {}", words.join(", "))).into())
        }
    }
}

/// Resolve the query vector and the effective guidance configuration.
fn resolve_query(cfg: &RunConfig, q: QueryArgs) -> anyhow::Result<(Checkpoint, Vec<f64>, GuidanceConfig)> {
    let query = match (&q.word, &q.query) {
        (Some(word), _) => word_embedding(&lexicon()?, word)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<Vec<f64>>(&text)
                .map_err(|e| CliError::new(4, format!("query {} is not a JSON number array: {e}", path.display())))?
        }
        (None, None) => return Err(CliError::new(2, "pass --word or --query").into()),
    };
    let ck = load_checkpoint(q.checkpoint, cfg)?;
    let mut gcfg = match &ck.guidance {
        Some(g) => g.clone(),
        None => cfg.guidance.build(ck.bank.dim(), ck.train_config.seed),
    };
    if let Some(k) = q.k {
        gcfg.k_pos = k;
    }
    if let Some(k) = q.k_neg {
        gcfg.k_neg = k;
    }
    if let Some(t) = q.tau {
        gcfg.tau_temp = t;
    }
    Ok((ck, query, gcfg))
}

fn cmd_guide(cfg: RunConfig, a: GuideArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (ck, query, gcfg) = resolve_query(&cfg, a.query)?;
    let result = guidance::multi_prototype_guidance(&query, &ck.bank, &gcfg)?;
    let effective = result.effective(gcfg.neg_scale)?;
    eprintln!("selected prototypes {:?}", result.indices);
    emit_json(
        out,
        &serde_json::json!({
            "indices": result.indices,
            "weights": result.weights,
            "scores": result.scores,
            "neg_indices": result.neg_indices,
            "neg_weights": result.neg_weights,
            "p_emo": result.p_emo,
            "effective": effective,
        }),
    )
}

fn cmd_refine(cfg: RunConfig, a: RefineArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let lex = lexicon()?;
    let mut target = word_embedding(&lex, &a.target)?;
    if let Some(path) = a.checkpoint {
        let ck = data::load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        let gcfg = ck.guidance.clone().unwrap_or_else(|| cfg.guidance.build(ck.bank.dim(), ck.train_config.seed));
        let g = guidance::multi_prototype_guidance(&target, &ck.bank, &gcfg)?;
        target = g.effective(gcfg.neg_scale)?;
    }
    let max_iters = a.max_iters.unwrap_or(cfg.refine.max_iters);
    let eps = a.eps.unwrap_or(cfg.refine.eps_conv);
    let trace = refine::refine(&a.prompt, &target, &lex, &lex, max_iters, eps)?;
    eprintln!(
        "{:?} after {} accepted rewrites: {:?}",
        trace.stop_reason,
        trace.iterations.len(),
        trace.final_prompt()
    );
    emit_json(out, &trace)
}

fn cmd_trace(cfg: RunConfig, a: TraceArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let content = word_embedding(&lexicon()?, &a.content)?;
    let (ck, query, gcfg) = resolve_query(&cfg, a.query)?;
    let mut schedule = cfg.blend;
    if let Some(s) = a.steps {
        schedule.total_steps = s;
    }
    if let Some(r) = a.ramp_start {
        schedule.ramp_start = r;
    }
    if let Some(r) = a.ramp_end {
        schedule.ramp_end = r;
    }
    schedule
        .validate()
        .map_err(|e| CliError::new(2, format!("blend options: {e}")))?;
    let fixture = guidance::uniform_attention([1, gcfg.heads(), 4, 8]);
    let trace = guidance::guidance_trace(&content, &query, &ck.bank, &gcfg, &schedule, &fixture)?;
    if a.csv {
        let heads: Vec<String> = (0..gcfg.heads()).map(|h| format!("head_factor_{h}")).collect();
        writeln!(out, "step,blend_weight,cosine_to_target,cosine_to_emo,{}", heads.join(","))?;
        for s in &trace.steps {
            let factors: Vec<String> = s.head_factors.iter().map(f64::to_string).collect();
            writeln!(
                out,
                "{},{},{},{},{}",
                s.step,
                s.blend_weight,
                s.cosine_to_target,
                s.cosine_to_emo,
                factors.join(",")
            )?;
        }
        return Ok(());
    }
    emit_json(out, &trace)
}

fn open(path: &Path) -> anyhow::Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn cmd_stats(cmd: StatsCommand, out: &mut dyn Write) -> anyhow::Result<()> {
    match cmd {
        StatsCommand::Kappa { csv_path, csv } => {
            let m = AnnotationMatrix::from_csv(open(&csv_path)?)?;
            let r = stats::pairwise_kappa(&m)?;
            eprintln!(
                "{} annotators, {} items: kappa {:.3} ± {:.3}",
                m.annotators(),
                m.items(),
                r.mean,
                r.std
            );
            if csv {
                writeln!(out, "a,b,kappa")?;
                for p in &r.pairs {
                    writeln!(out, "{},{},{}", p.a, p.b, p.kappa)?;
                }
                return Ok(());
            }
            emit_json(out, &r)
        }
        StatsCommand::Friedman { csv_path } => {
            let m = RatingMatrix::from_csv(open(&csv_path)?)?;
            let r = stats::friedman_test(&m);
            eprintln!("chi2 = {:.4} (df {}), p = {:.4e}", r.chi2, r.df, r.p_value);
            emit_json(out, &r)
        }
    }
}

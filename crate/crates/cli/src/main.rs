//! `priorfit` command-line front end.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use priorfit_core::eval::{self, SweepFixture};
use priorfit_core::promptselect::{self, PromptCandidate};
use priorfit_core::synth::{self, SynthSpec};
use priorfit_core::trainer::{self, TrainConfig};
use priorfit_core::{dataio, zeroshot, Adapter, Error, ErrorCategory, LabelPrior, Task};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "priorfit", version, about = "Prior-guided adaptation of zero-shot embedding predictions")]
struct Cli {
    /// Seed for training and prompt ranking; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress and timing output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic fixture with known ground truth.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_embeddings: PathBuf,
        #[arg(long)]
        out_captions: PathBuf,
        #[arg(long)]
        out_prior: PathBuf,
    },
    /// Assign each image to its nearest caption.
    Zeroshot {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Rank prompt templates by distance of their predictions to the prior.
    SelectPrompt {
        #[arg(long)]
        embeddings: PathBuf,
        /// JSON list of `{"template": ..., "captions": <manifest path>}`.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Train an adapter.
    Train {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        overrides: TrainFlags,
        /// Model output (`.pfad`).
        #[arg(long)]
        out: String,
        /// Training report JSON.
        #[arg(long)]
        report: Option<String>,
    },
    /// Evaluate a trained adapter against ground-truth labels.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long, default_value = "-")]
        out: String,
        /// Optional CSV of predicted, prior and true histograms.
        #[arg(long)]
        distribution: Option<String>,
    },
    /// Retrain over a grid of priors or alpha values.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        /// JSON list of priors (robustness) or alpha values (alpha).
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        inputs: SweepInputs,
        #[command(flatten)]
        overrides: TrainFlags,
        #[arg(long, default_value = "-")]
        out: String,
    },
}

#[derive(Debug, clap::Args)]
struct Inputs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    prior: PathBuf,
}

#[derive(Debug, clap::Args)]
struct SweepInputs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    /// Fixed prior for alpha sweeps.
    #[arg(long, required_if_eq("kind", "alpha"))]
    prior: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct TrainFlags {
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Starting recipe before the config file and flags are applied.
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    preset: Preset,
    /// JSON training config; missing fields keep the preset value.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    accum: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Standard,
    Desk,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Robustness,
    Alpha,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateEntry {
    template: String,
    captions: PathBuf,
}

#[derive(Serialize)]
struct EvalOutput {
    report: priorfit_core::EvalReport,
    zero_shot: priorfit_core::EvalReport,
}

#[derive(Serialize)]
struct SweepOutput<T> {
    kind: &'static str,
    config: TrainConfig,
    rows: Vec<eval::SweepRow<T>>,
}

#[derive(Serialize)]
struct ZeroShotRow<'a> {
    id: &'a str,
    assigned_index: usize,
    hard_label: f64,
}

enum Failure {
    Usage(String),
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Engine(Error::Config(_)) => 1,
            Failure::Engine(e) => match e.category() {
                ErrorCategory::Data => 2,
                ErrorCategory::Numerical => 3,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Engine(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("priorfit: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if cli.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let started = Instant::now();
    let name = match &cli.command {
        Command::Synth { .. } => "synth",
        Command::Zeroshot { .. } => "zeroshot",
        Command::SelectPrompt { .. } => "select-prompt",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Sweep { .. } => "sweep",
    };
    match cli.command {
        Command::Synth {
            spec,
            out_embeddings,
            out_captions,
            out_prior,
        } => cmd_synth(spec.as_deref(), cli.seed, &out_embeddings, &out_captions, &out_prior)?,
        Command::Zeroshot { embeddings, captions, out } => cmd_zeroshot(&embeddings, &captions, &out)?,
        Command::SelectPrompt {
            embeddings,
            candidates,
            prior,
            out,
        } => cmd_select_prompt(&embeddings, &candidates, &prior, cli.seed.unwrap_or(promptselect::RANKING_SEED), &out)?,
        Command::Train {
            inputs,
            overrides,
            out,
            report,
        } => cmd_train(&inputs, &overrides, cli.seed, cli.quiet, &out, report.as_deref())?,
        Command::Eval {
            model,
            embeddings,
            captions,
            prior,
            out,
            distribution,
        } => cmd_eval(&model, &embeddings, &captions, &prior, &out, distribution.as_deref())?,
        Command::Sweep {
            kind,
            grid,
            inputs,
            overrides,
            out,
        } => cmd_sweep(kind, &grid, &inputs, &overrides, cli.seed, &out)?,
    }
    if !cli.quiet {
        eprintln!("{name}: {:.2}s", started.elapsed().as_secs_f64());
    }
    Ok(())
}

fn output(target: &str) -> Result<Box<dyn Write>, Failure> {
    if target == "-" {
        return Ok(Box::new(io::stdout().lock()));
    }
    let file = File::create(target).map_err(|e| Error::Io {
        path: target.into(),
        source: e,
    })?;
    Ok(Box::new(BufWriter::new(file)))
}

fn write_json<T: Serialize>(target: &str, value: &T) -> Outcome {
    let mut w = output(target)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_error(target, e))?;
    Ok(())
}

fn io_error(target: &str, source: io::Error) -> Failure {
    Failure::Engine(Error::Io {
        path: target.into(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn cmd_synth(spec: Option<&Path>, seed: Option<u64>, embeddings: &Path, captions: &Path, prior: &Path) -> Outcome {
    let mut spec = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.into(),
                source: e,
            })?;
            SynthSpec::from_json_str(&text)?
        }
        None => SynthSpec::regression_default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let fixture = synth::generate(&spec)?;
    dataio::write_embeddings(&fixture.dataset, embeddings)?;
    let payload = captions.with_extension("pfeb");
    dataio::write_captions(
        fixture.captions.embeddings().mapv(|v| v as f32).view(),
        fixture.captions.values(),
        fixture.captions.names(),
        fixture.captions.task(),
        captions,
        payload,
    )?;
    fixture.prior.save(prior)?;
    Ok(())
}

fn cmd_zeroshot(embeddings: &Path, captions: &Path, out: &str) -> Outcome {
    let dataset = dataio::read_embeddings(embeddings)?;
    let captions = dataio::read_captions(captions)?;
    let zs = zeroshot::assign(&dataset, &captions)?;
    let mut writer = csv::Writer::from_writer(output(out)?);
    for (i, (&index, &label)) in zs.assigned_index.iter().zip(&zs.hard_labels).enumerate() {
        let id = dataset.id(i);
        writer
            .serialize(ZeroShotRow {
                id: &id,
                assigned_index: index,
                hard_label: label,
            })
            .map_err(Error::from)?;
    }
    writer.flush().map_err(|e| io_error(out, e))?;
    Ok(())
}

fn cmd_select_prompt(embeddings: &Path, candidates: &Path, prior: &Path, seed: u64, out: &str) -> Outcome {
    let entries: Vec<CandidateEntry> = read_json(candidates)?;
    let prior = LabelPrior::load(prior)?;
    let dataset = dataio::read_embeddings(embeddings)?;
    let base = candidates.parent().unwrap_or(Path::new("."));
    let mut list = entries
        .into_iter()
        .map(|e| PromptCandidate::new(e.template, dataio::read_captions(base.join(e.captions))?))
        .collect::<priorfit_core::Result<Vec<_>>>()?;
    let ranking = promptselect::rank_prompts(&dataset, &mut list, &prior, seed)?;
    write_json(out, &ranking)
}

fn resolve_config(flags: &TrainFlags, seed: Option<u64>, fallback: Task) -> Result<TrainConfig, Failure> {
    let task = flags.task.map(Task::from);
    let base_task = task.unwrap_or(fallback);
    let mut config = match flags.preset {
        Preset::Standard => TrainConfig::for_task(base_task),
        Preset::Desk => TrainConfig::desk_scale(base_task),
        Preset::Large => TrainConfig::large_scale(base_task),
    };
    if let Some(path) = &flags.config {
        let mut merged = serde_json::to_value(&config).map_err(Error::from)?;
        let file: serde_json::Value = read_json(path)?;
        let serde_json::Value::Object(fields) = file else {
            return Err(Failure::Usage(format!("{}: config must be a JSON object", path.display())));
        };
        for (k, v) in fields {
            merged[k] = v;
        }
        config = serde_json::from_value(merged).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(t) = task {
        config.task = t;
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut config.epochs, flags.epochs);
    set(&mut config.batch_size, flags.batch);
    set(&mut config.accumulate_batches, flags.accum);
    set(&mut config.warmup_epochs, flags.warmup);
    if let Some(a) = flags.alpha {
        config.alpha = a;
    }
    if let Some(lr) = flags.lr {
        config.base_lr = lr;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(inputs: &Inputs, flags: &TrainFlags, seed: Option<u64>, quiet: bool, out: &str, report: Option<&str>) -> Outcome {
    let dataset = dataio::read_embeddings(&inputs.embeddings)?;
    let captions = dataio::read_captions(&inputs.captions)?;
    let prior = LabelPrior::load(&inputs.prior)?;
    let config = resolve_config(flags, seed, captions.task())?;
    let zs = zeroshot::assign(&dataset, &captions)?;
    let (adapter, train_report) = trainer::train(&dataset, &captions, &prior, &zs, &config)?;
    if !quiet {
        if let Some(last) = train_report.epochs.last() {
            eprintln!(
                "trained {} epochs: prior loss {:.4}, labels loss {:.4}",
                train_report.epochs.len(),
                last.prior_loss,
                last.labels_loss
            );
        }
    }
    if out == "-" {
        let mut w = output(out)?;
        adapter.encode(&mut w).and_then(|_| w.flush()).map_err(|e| io_error(out, e))?;
    } else {
        adapter.save(out)?;
    }
    if let Some(path) = report {
        write_json(path, &train_report)?;
    }
    Ok(())
}

fn cmd_eval(model: &Path, embeddings: &Path, captions: &Path, prior: &Path, out: &str, distribution: Option<&str>) -> Outcome {
    let adapter = Adapter::load(model)?;
    let dataset = dataio::read_embeddings(embeddings)?;
    let captions = dataio::read_captions(captions)?;
    let prior = LabelPrior::load(prior)?;
    let report = eval::evaluate(&adapter, &dataset, &captions, &prior)?;
    let zs = zeroshot::assign(&dataset, &captions)?;
    let zero_shot = eval::evaluate_zero_shot(&zs, &dataset, &captions, &prior)?;
    if let Some(target) = distribution {
        let predictions = trainer::predict(&adapter, &dataset, &captions)?;
        let dist = eval::distribution_report(&predictions.values, &prior, dataset.labels(), captions.values())?;
        dist.write_csv(output(target)?)?;
    }
    write_json(out, &EvalOutput { report, zero_shot })
}

fn cmd_sweep(kind: SweepKind, grid: &Path, inputs: &SweepInputs, flags: &TrainFlags, seed: Option<u64>, out: &str) -> Outcome {
    let dataset = dataio::read_embeddings(&inputs.embeddings)?;
    let captions = dataio::read_captions(&inputs.captions)?;
    let config = resolve_config(flags, seed, captions.task())?;
    let fixture = SweepFixture::new(dataset, captions)?;
    match kind {
        SweepKind::Robustness => {
            let priors: Vec<LabelPrior> = read_json(grid)?;
            let rows = eval::robustness_sweep(&fixture, &priors, &config);
            write_json(out, &SweepOutput { kind: "robustness", config, rows })
        }
        SweepKind::Alpha => {
            let alphas: Vec<f64> = read_json(grid)?;
            let prior_path = inputs.prior.as_deref().ok_or_else(|| Failure::Usage("--prior is required for alpha sweeps".into()))?;
            let prior = LabelPrior::load(prior_path)?;
            let rows = eval::alpha_sweep(&fixture, &prior, &alphas, &config);
            write_json(out, &SweepOutput { kind: "alpha", config, rows })
        }
    }
}

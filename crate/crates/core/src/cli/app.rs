//! Argument definitions and subcommand dispatch for the `instmod` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::grid::{run_grid, ExperimentGrid};
use super::report::{merge_reports, write_long_csv};
use super::synth::{synth_corpus, SynthTask, SyntheticCorpusSpec};
use crate::corpus::{apply_chat_template, dataset_stats, load_dataset, tokenize_corpus, write_dataset, DatasetStats, Vocabulary};
use crate::error::{Error, Result};
use crate::masking::{dump_line, MaskMode};
use crate::metrics::{generate_for_examples, loss_distribution, per_example_output_loss, DistributionSummary};
use crate::model::{generate_greedy, init_params, load_checkpoint, ModelConfig};
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "instmod", version, about = "Instruction tuning vs instruction modelling on a tiny byte-level transformer")]
pub struct Cli {
    /// Seed for corpus generation, initialization and data order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset length statistics, or per-example masks with --dump-masks.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Fine-tune a model.
    Train(TrainArgs),
    /// Per-example completion loss, memorization BLEU and output length.
    Eval(EvalArgs),
    /// Greedy completion for a single user message.
    Generate(GenerateArgs),
    /// Run an experiment grid described by a JSON file.
    Grid(GridArgs),
    /// Merge run reports into a long-format CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Dataset label used in the stats row.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub dump_masks: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthTask::Lookup)]
    pub task: SynthTask,
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    /// Extra examples written to eval.jsonl.
    #[arg(long, default_value_t = 0)]
    pub heldout: usize,
    #[arg(long, default_value_t = 50)]
    pub instr_len: usize,
    /// Output length including the end-of-sequence token.
    #[arg(long, default_value_t = 5)]
    pub out_len: usize,
    #[arg(long, default_value_t = 36)]
    pub vocab_subset: usize,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Training config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<MaskMode>,
    /// Enables the KL penalty with this weight.
    #[arg(long)]
    pub kl_lambda: Option<f64>,
    /// Enables embedding noise with this alpha.
    #[arg(long)]
    pub neftune_alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub gen_max_new: Option<usize>,
    #[arg(long)]
    pub bleu_smoothing: bool,
    /// Skip greedy decoding during evaluation.
    #[arg(long)]
    pub no_generation: bool,
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    #[arg(long)]
    pub bleu_smoothing: bool,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the grid file's parallelism.
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories containing report.json.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

/// How a successfully dispatched command finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Success,
    /// Some grid cells or report inputs failed; the rest were produced.
    Partial,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn stdout_write(text: &str) -> Result<()> {
    std::io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: Cli) -> Result<Completion> {
    if let Some(n) = cli.threads {
        // Fails only if the global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_deref();
    match cli.command {
        Command::Analyze(args) => analyze(&args, out),
        Command::Synth(args) => synth(&args, seed, out),
        Command::Train(args) => train_cmd(&args, seed, out),
        Command::Eval(args) => eval(&args, out),
        Command::Generate(args) => generate(&args),
        Command::Grid(args) => grid(&args, out),
        Command::Report(args) => report(&args, out),
    }
}

fn analyze(args: &AnalyzeArgs, out: Option<&Path>) -> Result<Completion> {
    let loaded = load_dataset(&args.data, args.limit)?;
    let vocab = Vocabulary::new();
    let examples: Vec<_> = loaded.examples.iter().map(|ex| apply_chat_template(ex, &vocab)).collect();
    let (text, file) = if args.dump_masks {
        let lines = examples.iter().map(dump_line).collect::<Result<Vec<_>>>()?;
        (lines.join("\n") + "\n", "masks.txt")
    } else {
        let stats = dataset_stats(&examples)?;
        let name = args.name.clone().unwrap_or_else(|| {
            args.data
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        });
        (format!("{}\n{}\n", DatasetStats::CSV_HEADER, stats.csv_row(&name)), "stats.csv")
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join(file), &text)?;
    }
    stdout_write(&text)?;
    Ok(Completion::Success)
}

fn synth(args: &SynthArgs, seed: u64, out: Option<&Path>) -> Result<Completion> {
    let spec = SyntheticCorpusSpec {
        task: args.task,
        n_examples: args.n + args.heldout,
        instr_len_mean: args.instr_len,
        out_len_mean: args.out_len,
        vocab_subset: args.vocab_subset,
        seed,
    };
    let mut examples = synth_corpus(&spec)?;
    let eval = examples.split_off(args.n);
    let dir = out.unwrap_or(Path::new("data"));
    create_dir(dir)?;
    write_dataset(&dir.join("train.jsonl"), &examples)?;
    if !eval.is_empty() {
        write_dataset(&dir.join("eval.jsonl"), &eval)?;
    }
    let vocab = Vocabulary::new();
    let tokenized: Vec<_> = examples.iter().map(|ex| apply_chat_template(ex, &vocab)).collect();
    let stats = dataset_stats(&tokenized)?;
    stdout_write(&format!("{}\n{}\n", DatasetStats::CSV_HEADER, stats.csv_row("synthetic")))?;
    Ok(Completion::Success)
}

fn train_config(args: &TrainArgs, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(mode) = args.mode {
        cfg.loss_mode = mode;
    }
    if let Some(lambda) = args.kl_lambda {
        cfg.use_kl = true;
        cfg.kl_lambda = lambda;
    }
    if let Some(alpha) = args.neftune_alpha {
        cfg.use_neftune = true;
        cfg.neftune_alpha = alpha;
    }
    let set = |dst: &mut usize, src: Option<usize>| {
        if let Some(v) = src {
            *dst = v;
        }
    };
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.grad_accum, args.grad_accum);
    set(&mut cfg.max_seq_len, args.max_seq_len);
    set(&mut cfg.eval_every, args.eval_every);
    set(&mut cfg.gen_max_new, args.gen_max_new);
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(w) = args.warmup {
        cfg.warmup_fraction = w;
    }
    if let Some(wd) = args.weight_decay {
        cfg.weight_decay = wd;
    }
    cfg.bleu_smoothing |= args.bleu_smoothing;
    if args.no_generation {
        cfg.eval_generation = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(args: &TrainArgs, seed: u64, out: Option<&Path>) -> Result<Completion> {
    let cfg = train_config(args, seed)?;
    let init = match &args.init {
        Some(path) => load_checkpoint(path)?,
        None => init_params(&ModelConfig {
            vocab_size: Vocabulary::SIZE,
            d_model: args.model.d_model,
            n_layers: args.model.layers,
            n_heads: args.model.heads,
            d_ff: args.model.d_ff,
            max_seq_len: cfg.max_seq_len,
            seed,
        })?,
    };
    let vocab = Vocabulary::new();
    let max_len = cfg.max_seq_len.min(init.config().max_seq_len);
    let train_set = tokenize_corpus(&load_dataset(&args.train, args.limit)?.examples, &vocab, max_len);
    let eval_set = match &args.eval {
        Some(path) => tokenize_corpus(&load_dataset(path, None)?.examples, &vocab, max_len),
        None => Vec::new(),
    };
    let dir = out.unwrap_or(Path::new("runs/train"));
    create_dir(dir)?;
    let outcome = train(&train_set, &eval_set, init, &cfg, Some(dir))?;
    if let Some(last) = outcome.report.last_epoch() {
        let mean = |s: &Option<DistributionSummary>| s.as_ref().map(|s| format!("{:.4}", s.mean)).unwrap_or_else(|| "-".into());
        stdout_write(&format!(
            "epoch {} step {} train_output_loss {} heldout_output_loss {} memorization_bleu {} output_length {}\n",
            last.epoch,
            last.step,
            mean(&last.train_output_loss),
            mean(&last.heldout_output_loss),
            mean(&last.memorization_bleu),
            mean(&last.output_length),
        ))?;
    }
    Ok(Completion::Success)
}

#[derive(Debug, Serialize)]
struct EvalRow {
    id: String,
    loss: f64,
    bleu: f64,
    gen_len: usize,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    examples: usize,
    loss: DistributionSummary,
    bleu: DistributionSummary,
    gen_len: DistributionSummary,
}

fn eval(args: &EvalArgs, out: Option<&Path>) -> Result<Completion> {
    let params = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocabulary::new();
    let examples = tokenize_corpus(&load_dataset(&args.data, args.limit)?.examples, &vocab, params.config().max_seq_len);
    let losses = per_example_output_loss(&params, &examples)?;
    let generations = generate_for_examples(&params, &examples, args.max_new, args.bleu_smoothing)?;
    let rows: Vec<EvalRow> = losses
        .iter()
        .zip(&generations)
        .map(|(l, g)| {
            debug_assert_eq!(l.id, g.id);
            EvalRow {
                id: l.id.clone(),
                loss: l.loss,
                bleu: g.bleu.score,
                gen_len: g.gen_len,
            }
        })
        .collect();
    let column = |f: fn(&EvalRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let summary = EvalSummary {
        examples: rows.len(),
        loss: loss_distribution(&column(|r| r.loss), args.bins)?,
        bleu: loss_distribution(&column(|r| r.bleu), args.bins)?,
        gen_len: loss_distribution(&column(|r| r.gen_len as f64), args.bins)?,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let csv_bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    let summary_json = serde_json::to_string_pretty(&summary)? + "\n";
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join("eval.csv"), &csv_bytes)?;
            write_file(&dir.join("eval_summary.json"), &summary_json)?;
            stdout_write(&format!(
                "examples {} loss {:.4} bleu {:.4} gen_len {:.2}\n",
                summary.examples, summary.loss.mean, summary.bleu.mean, summary.gen_len.mean
            ))?;
        }
        None => {
            stdout_write(&String::from_utf8_lossy(&csv_bytes))?;
            stdout_write(&summary_json)?;
        }
    }
    Ok(Completion::Success)
}

fn generate(args: &GenerateArgs) -> Result<Completion> {
    let params = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocabulary::new();
    let mut prompt = vec![Vocabulary::BOS];
    if let Some(system) = &args.system {
        prompt.push(Vocabulary::SYSTEM_TAG);
        prompt.extend(vocab.encode(system));
    }
    prompt.push(Vocabulary::USER_TAG);
    prompt.extend(vocab.encode(&args.prompt));
    prompt.push(Vocabulary::ASSISTANT_TAG);
    let max_new = args.max_new.min(params.config().max_seq_len.saturating_sub(prompt.len()));
    let mut generated = generate_greedy(&params, &prompt, max_new, Some(Vocabulary::EOS))?;
    if generated.last() == Some(&Vocabulary::EOS) {
        generated.pop();
    }
    stdout_write(&(vocab.decode(&generated) + "\n"))?;
    Ok(Completion::Success)
}

fn grid(args: &GridArgs, out: Option<&Path>) -> Result<Completion> {
    let mut grid = ExperimentGrid::load(&args.config)?;
    if let Some(p) = args.parallelism {
        grid.parallelism = p;
    }
    let dir = out.unwrap_or(Path::new("runs/grid"));
    let outcome = run_grid(&grid, dir)?;
    let failures = outcome.failures();
    stdout_write(&format!(
        "{} cells, {} failed; comparison written to {}\n",
        outcome.cells.len(),
        failures,
        dir.join("comparison.csv").display()
    ))?;
    Ok(if failures == 0 { Completion::Success } else { Completion::Partial })
}

fn report(args: &ReportArgs, out: Option<&Path>) -> Result<Completion> {
    let merged = merge_reports(&args.runs);
    for (dir, reason) in &merged.failures {
        eprintln!("skipped {}: {reason}", dir.display());
    }
    if merged.failures.len() == args.runs.len() {
        return Err(Error::Report("no readable run reports".into()));
    }
    match out {
        Some(dir) => write_long_csv(&dir.join("report.csv"), &merged.rows)?,
        None => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in &merged.rows {
                w.serialize(row)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
            stdout_write(&String::from_utf8_lossy(&bytes))?;
        }
    }
    Ok(if merged.failures.is_empty() {
        Completion::Success
    } else {
        Completion::Partial
    })
}

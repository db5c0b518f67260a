//! Command-line entry point: training runs, ablation grids, checkpoint
//! EMA, held-out evaluation, diagnostics reports, and corpus tooling.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use desklm::config::{ConfigFileError, GridConfig, RunConfig};
use desklm::data::{
    byte_tokenize, read_shard, write_shard, BpeTokenizer, DataError, TokenShard, BYTE_VOCAB,
};
use desklm::diag::diag_report;
use desklm::model::ModelParams;
use desklm::optim::OptimError;
use desklm::tensor::TensorError;
use desklm::trainer::{
    eval_loss, is_optimizer_tensor, load_checkpoint, posthoc_ema, run_grid, save_checkpoint,
    train, TensorMap, TrainError,
};

#[derive(Parser)]
#[command(name = "desklm", version, about = "Desk-scale transformer pretraining lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a (multi-stage) training plan from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for metrics, checkpoints and the manifest.
        #[arg(long, default_value = "runs/run")]
        out: PathBuf,
    },
    /// Train every row of an ablation grid and emit a results table.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Report directory (defaults to the grid file's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-hoc EMA over the last N checkpoints in a directory.
    Ema {
        #[arg(long, default_value_t = 0.8)]
        beta: f64,
        #[arg(long, default_value_t = 10)]
        last: usize,
        ckpt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Uniform average instead of the EMA recurrence.
        #[arg(long)]
        uniform: bool,
    },
    /// Held-out loss and perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of .shard files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        batches: usize,
        #[arg(long, default_value_t = 128)]
        context: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Activation diagnostics (kurtosis, sink mass, logit stats) as JSONL.
    Diag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        #[arg(long, default_value_t = 64)]
        context: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tokenize text files into a shard (one document per file).
    Tokenize {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Source name stored with the shard (defaults to the output stem).
        #[arg(long)]
        source: Option<String>,
        /// BPE merge table; omit for byte-level tokens.
        #[arg(long)]
        bpe: Option<PathBuf>,
        /// Quality score attached to every document.
        #[arg(long)]
        quality: Option<f32>,
    },
    /// Train a BPE merge table on text files.
    BpeTrain {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: u32,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigFileError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diag(#[from] desklm::diag::DiagError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 = config error, 3 = numeric failure, 1 = everything else.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Train(e) => match e {
                TrainError::NonFiniteLoss { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Optim(OptimError::NonFiniteGradient) => 3,
                TrainError::Io(_) => 1,
                _ => 2,
            },
            CliError::Data(DataError::Io(_)) => 1,
            CliError::Data(_) => 2,
            CliError::Diag(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

fn load_shard_dir(dir: &Path) -> Result<Vec<TokenShard>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "shard").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no .shard files in {}", dir.display())));
    }
    paths.iter().map(|p| read_shard(p).map_err(CliError::from)).collect()
}

fn load_model(ckpt: &Path) -> Result<(ModelParams<f32>, u64), CliError> {
    let (meta, tensors) = load_checkpoint(ckpt)?;
    let model = ModelParams::<f32>::init(meta.config.clone(), meta.rng_seed)
        .map_err(TrainError::from)?;
    let model_tensors: TensorMap = tensors
        .into_iter()
        .filter(|(n, _)| !is_optimizer_tensor(n))
        .collect();
    model
        .load_tensor_map(&model_tensors)
        .map_err(TrainError::from)?;
    Ok((model, meta.rng_seed))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train { config, resume, out } => {
            let cfg = RunConfig::load(&config)?;
            let shards = load_shard_dir(&cfg.data_dir)?;
            let plans = cfg.plans();
            let manifest = train::<f32>(
                cfg.model.clone(),
                cfg.optimizer,
                &plans,
                &shards,
                cfg.seed,
                cfg.mup,
                Some(&out),
                resume.as_deref(),
                cfg.log_every,
            )?;
            println!(
                "{}",
                serde_json::to_string_pretty(&manifest)
                    .map_err(|e| CliError::Usage(e.to_string()))?
            );
            if let Some(heldout) = cfg.heldout_dir.as_ref() {
                let shards = load_shard_dir(heldout)?;
                let last = manifest
                    .checkpoints
                    .last()
                    .ok_or_else(|| CliError::Usage("run produced no checkpoint".into()))?;
                let (model, _) = load_model(last)?;
                let t = plans.last().map(|p| p.context).unwrap_or(128);
                let (loss, ppl) = eval_loss(&model, &shards, t, 16, 8, 0)?;
                println!("heldout: loss {loss:.4} ppl {ppl:.2}");
            }
        }
        Cmd::Ablate { grid, out } => {
            let cfg = GridConfig::load(&grid)?;
            let shards = load_shard_dir(&cfg.data_dir)?;
            let report = run_grid(&cfg.to_spec(), &shards)?;
            let table = report.table();
            print!("{table}");
            let dir = out.unwrap_or_else(|| {
                grid.parent().map(|p| p.to_path_buf()).unwrap_or_else(|| PathBuf::from("."))
            });
            std::fs::create_dir_all(&dir)?;
            let base = dir.join(format!("{}_report", report.grid_name));
            std::fs::write(base.with_extension("txt"), &table)?;
            std::fs::write(
                base.with_extension("json"),
                serde_json::to_string_pretty(&report)
                    .map_err(|e| CliError::Usage(e.to_string()))?,
            )?;
        }
        Cmd::Ema { beta, last, ckpt_dir, out, uniform } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&ckpt_dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.file_name()
                        .map(|n| {
                            let n = n.to_string_lossy();
                            n.starts_with("ckpt_") && n.ends_with(".bin")
                        })
                        .unwrap_or(false)
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(CliError::Usage(format!(
                    "no ckpt_*.bin files in {}",
                    ckpt_dir.display()
                )));
            }
            let tail: Vec<PathBuf> =
                paths.iter().skip(paths.len().saturating_sub(last)).cloned().collect();
            let (meta, tensors) = posthoc_ema(&tail, beta, uniform)?;
            save_checkpoint(&out, &meta, &tensors)?;
            println!(
                "averaged {} checkpoints ({}) -> {}",
                tail.len(),
                if uniform { "uniform".to_string() } else { format!("ema beta={beta}") },
                out.display()
            );
        }
        Cmd::Eval { ckpt, data, batches, context, batch_size, seed } => {
            let (model, _) = load_model(&ckpt)?;
            let shards = load_shard_dir(&data)?;
            let t = context.min(model.config.max_context);
            let (loss, ppl) = eval_loss(&model, &shards, t, batches, batch_size, seed)?;
            println!("{}", serde_json::json!({"loss": loss, "perplexity": ppl, "batches": batches, "context": t}));
        }
        Cmd::Diag { ckpt, data, report, batches, context, batch_size, seed } => {
            let (model, _) = load_model(&ckpt)?;
            let shards = load_shard_dir(&data)?;
            let t = context.min(model.config.max_context);
            let mixture = desklm::data::MixtureSpec::uniform(
                &shards.iter().map(|s| s.source_name.as_str()).collect::<Vec<_>>(),
                seed,
            );
            let mut stream = desklm::data::BatchStream::new(shards, &mixture)
                .map_err(TrainError::from)?;
            let batch_vec: Vec<_> = (0..batches).map(|_| stream.next_batch(batch_size, t)).collect();
            let records = diag_report(&model, &batch_vec)?;
            let mut out = String::new();
            for r in &records {
                out.push_str(&r.to_string());
                out.push('\n');
            }
            std::fs::write(&report, out)?;
            println!("wrote {} diagnostic records to {}", records.len(), report.display());
        }
        Cmd::Tokenize { input, output, source, bpe, quality } => {
            let tokenizer = match bpe.as_deref() {
                Some(path) => Some(BpeTokenizer::load(path)?),
                None => None,
            };
            let vocab = tokenizer.as_ref().map(|t| t.vocab_size()).unwrap_or(BYTE_VOCAB);
            let name = source.unwrap_or_else(|| {
                output
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "source".into())
            });
            let mut shard = TokenShard::new(name, vocab);
            for path in &input {
                let text = std::fs::read_to_string(path)?;
                let ids = match &tokenizer {
                    Some(tok) => tok.encode(&text),
                    None => byte_tokenize(&text),
                };
                shard.push_doc(&ids, text.chars().count() as u64, quality);
            }
            write_shard(&shard, &output)?;
            println!(
                "wrote {} docs / {} tokens (vocab {}) to {}",
                shard.doc_count(),
                shard.token_ids.len(),
                vocab,
                output.display()
            );
        }
        Cmd::BpeTrain { input, vocab_size, output } => {
            let mut corpus = Vec::new();
            for path in &input {
                corpus.push(std::fs::read_to_string(path)?);
            }
            let tok = BpeTokenizer::train(&corpus, vocab_size)?;
            tok.save(&output)?;
            println!(
                "trained {} merges (vocab {}) -> {}",
                tok.merge_count(),
                tok.vocab_size(),
                output.display()
            );
        }
    }
    Ok(())
}

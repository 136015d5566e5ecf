use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use beaconkv::compressor::RatioPolicy;
use beaconkv::harness::commands::{
    cmd_compress, cmd_flops, cmd_generate, cmd_needle_eval, cmd_needle_gen, cmd_train,
    default_lengths, ContextSource, CorpusKind, FlopsArgs, GenerateArgs, NeedleEvalArgs,
    NeedleGenArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "beaconkv",
    version,
    about = "Beacon-token context compression on a small transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Corpus {
    Base,
    Beacon,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a TOML config; writes a checkpoint and JSON-lines metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory of text files, or a file with one document per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "model.bkv")]
        out: PathBuf,
        #[arg(long, default_value = "metrics.jsonl")]
        metrics: PathBuf,
    },
    /// Compress a text file into a cache snapshot and print its statistics.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// `N`, `adaptive`, `random:SEED` or a per-chunk list `a,b,c`.
        #[arg(long, default_value = "8")]
        ratio: RatioPolicy,
        #[arg(long, default_value = "cache.bkv")]
        out: PathBuf,
    },
    /// Decode after a prompt, on top of a snapshot or a freshly compressed text.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "context")]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long, default_value = "8")]
        ratio: RatioPolicy,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep going past the end-of-sequence byte.
        #[arg(long)]
        no_stop: bool,
    },
    /// Full versus beacon attention FLOPs over a length grid, as CSV.
    Flops {
        /// One of llama2-7b, qwen2-7b, llama3-8b.
        #[arg(long)]
        preset: Option<String>,
        /// Take the model shape from a training config instead.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<u64>,
        #[arg(long)]
        chunk_size: Option<u64>,
        /// Context lengths; defaults to 8K, 16K, ..., 256K.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<u64>,
        /// Ratios to tabulate; defaults to the preset's ratio.
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate needle tasks, or a training corpus with `--train-corpus`.
    NeedleGen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        context_len: usize,
        #[arg(long, default_value_t = 64)]
        chunk_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        depths: Vec<f64>,
        /// Cases per depth.
        #[arg(long, default_value_t = 40)]
        cases: usize,
        /// Plant three needles per case.
        #[arg(long)]
        multi: bool,
        #[arg(long, value_enum)]
        train_corpus: Option<Corpus>,
        /// Documents in a training corpus.
        #[arg(long, default_value_t = 10000)]
        docs: usize,
        #[arg(long, default_value = "needles.jsonl")]
        out: PathBuf,
    },
    /// Answer needle tasks with a checkpoint and score them.
    NeedleEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "2")]
        ratio: RatioPolicy,
        #[arg(long, default_value_t = 1)]
        max_new: usize,
        #[arg(long)]
        multi_turn: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            corpus,
            init,
            out,
            metrics,
        } => {
            let args = TrainArgs {
                config,
                corpus,
                init,
                out: out.clone(),
                metrics,
            };
            let r = cmd_train(&args).context("training failed")?;
            println!(
                "steps {} loss {:.4} -> {:.4}, {} tokens; wrote {}",
                r.steps,
                r.first_loss,
                r.last_loss,
                r.tokens_seen,
                out.display()
            );
        }
        Command::Compress {
            checkpoint,
            input,
            ratio,
            out,
        } => {
            let s = cmd_compress(&checkpoint, &input, &ratio, &out)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Generate {
            checkpoint,
            snapshot,
            context,
            prompt,
            max_new,
            ratio,
            temperature,
            seed,
            no_stop,
        } => {
            let context = match (snapshot, context) {
                (Some(p), _) => ContextSource::Snapshot(p),
                (None, Some(p)) => ContextSource::Text(p),
                (None, None) => ContextSource::None,
            };
            let args = GenerateArgs {
                checkpoint,
                context,
                prompt,
                max_new,
                policy: ratio,
                temperature: temperature.map(|t| (t, seed)),
                stop_at_eos: !no_stop,
            };
            println!("{}", cmd_generate(&args)?);
        }
        Command::Flops {
            preset,
            config,
            alpha,
            chunk_size,
            lengths,
            ratios,
            out,
        } => {
            let lengths = if lengths.is_empty() {
                default_lengths()
            } else {
                lengths
            };
            let args = FlopsArgs {
                preset,
                config,
                alpha,
                chunk_size,
                lengths,
                ratios,
                out,
            };
            let rows = cmd_flops(&args)?;
            if args.out.is_none() {
                print!("{}", beaconkv::analyzer::curve_csv(&rows));
            }
        }
        Command::NeedleGen {
            seed,
            context_len,
            chunk_size,
            depths,
            cases,
            multi,
            train_corpus,
            docs,
            out,
        } => {
            let args = match train_corpus {
                Some(kind) => NeedleGenArgs::Corpus {
                    kind: match kind {
                        Corpus::Base => CorpusKind::Base,
                        Corpus::Beacon => CorpusKind::Beacon,
                    },
                    seed,
                    docs,
                    len: context_len,
                    out: out.clone(),
                },
                None => NeedleGenArgs::Tasks {
                    seed,
                    context_len,
                    chunk_size,
                    depths,
                    cases,
                    multi,
                    out: out.clone(),
                },
            };
            let n = cmd_needle_gen(&args)?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::NeedleEval {
            checkpoint,
            tasks,
            ratio,
            max_new,
            multi_turn,
            report,
        } => {
            let args = NeedleEvalArgs {
                checkpoint,
                tasks,
                policy: ratio,
                max_new,
                multi_turn,
                report,
            };
            let r = cmd_needle_eval(&args)?;
            for c in &r.cells {
                println!(
                    "len {:>6} depth {:.2}: {}/{}",
                    c.context_len, c.depth, c.correct, c.total
                );
            }
            println!(
                "accuracy {}/{} = {:.3} (chance {:.4}, p = {:.3e})",
                r.correct, r.total, r.accuracy, r.chance, r.p_value
            );
        }
    }
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};

use ribosphere::pipeline::{self, Context, RunConfig, SplitSel};
use ribosphere::Error;

#[derive(Parser)]
#[command(name = "ribosphere", version, about = "Discrete geometric tokens for RNA backbones")]
struct Cli {
    /// TOML run configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads for per-structure parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse inputs (and synthetic helices) into the run corpus and split it.
    Ingest {
        /// Extra PDB files, directories or .jsonl corpora.
        inputs: Vec<PathBuf>,
    },
    /// Train tokenizer and decoder on the training split.
    Train {
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Write tokens.tsv for a split.
    Tokenize {
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Decode tokens.tsv back to coordinates.
    Reconstruct {
        #[arg(long, default_value = "all")]
        split: String,
        /// Use the SDE sampler instead of Euler.
        #[arg(long)]
        stochastic: bool,
    },
    /// Score reconstructions against references.
    Evaluate {
        #[arg(long, default_value = "all")]
        split: String,
        /// Predicted structures; pairs with --reference by position.
        #[arg(long, requires = "reference")]
        pred: Vec<PathBuf>,
        #[arg(long, requires = "pred")]
        reference: Vec<PathBuf>,
    },
    /// N-gram and motif tables over tokens.tsv.
    Analyze {
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Train the inverse folding model on the frozen tokenizer.
    InvfoldTrain,
    /// Design sequences for a split.
    InvfoldSample {
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Recovery and diversity across sampling temperatures.
    Sweep {
        #[arg(long, default_value = "all")]
        split: String,
    },
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(
                Error::Config(_)
                    | Error::Invalid(_)
                    | Error::Pdb { .. }
                    | Error::DuplicateAtom { .. }
                    | Error::NoRnaChains
                    | Error::Format(_)
                    | Error::LengthMismatch(..)
                    | Error::Structure(_)
            )
        ) || c.downcast_ref::<clap::Error>().is_some()
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    }
    let split = |s: &str| SplitSel::parse(s);
    match cli.command {
        Command::InvfoldSample { temperature, samples, .. } => {
            if let Some(t) = temperature {
                cfg.design.temperature = t;
            }
            if let Some(n) = samples {
                cfg.design.samples = n;
            }
        }
        _ => {}
    }
    let ctx = Context::new(cfg, &cli.out)?;
    match &cli.command {
        Command::Ingest { inputs } => {
            let s = pipeline::cmd_ingest(&ctx, inputs)?;
            println!("ingested {} structures (train {}, val {}, test {})", s.structures, s.train, s.val, s.test);
        }
        Command::Train { resume } => {
            let s = pipeline::cmd_train(&ctx, *resume)?;
            if let Some(r) = s.rows.last() {
                println!("trained to step {} (flow loss {:.4})", s.steps, r.loss);
            } else {
                println!("already at step {}", s.steps);
            }
        }
        Command::Tokenize { split: sp } => {
            let s = pipeline::cmd_tokenize(&ctx, split(sp)?)?;
            println!(
                "tokenized {} structures; codebook utilization {}%",
                s.structures,
                ribosphere::fsq::format_utilization(s.utilization)
            );
        }
        Command::Reconstruct { split: sp, stochastic } => {
            let out = pipeline::cmd_reconstruct(&ctx, split(sp)?, *stochastic)?;
            println!("reconstructed {} structures", out.len());
        }
        Command::Evaluate { split: sp, pred, reference } => {
            let ext = (!pred.is_empty()).then_some((pred.as_slice(), reference.as_slice()));
            let r = pipeline::cmd_evaluate(&ctx, split(sp)?, ext)?;
            println!(
                "median RMSD {:.3} A (C4' {:.3}), TM {:.3}, lDDT {:.3} over {} structures",
                r.rmsd_all_atom.median,
                r.rmsd_c4.median,
                r.tm_score.median,
                r.lddt.median,
                r.rows.len()
            );
        }
        Command::Analyze { split: sp } => {
            let s = pipeline::cmd_analyze(&ctx, split(sp)?)?;
            if let Some(g) = s.ngrams.first() {
                println!("top n-gram {:?} occurs {} times", g.ngram, g.count);
            }
        }
        Command::InvfoldTrain => {
            let s = pipeline::cmd_invfold_train(&ctx)?;
            let mean = s.recovery.iter().sum::<f64>() / s.recovery.len() as f64;
            println!("inverse folding trained {} steps; teacher-forced recovery {:.3}", s.steps, mean);
        }
        Command::InvfoldSample { split: sp, .. } => {
            let d = pipeline::cmd_invfold_sample(&ctx, split(sp)?)?;
            println!("wrote {} designs", d.len());
        }
        Command::Sweep { split: sp } => {
            let rows = pipeline::cmd_sweep(&ctx, split(sp)?)?;
            print!("{}", ribosphere::invfold::format_sweep(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

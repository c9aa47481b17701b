use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use c3rec::data::{load_movielens, load_tsv, test_split, DatasetBundle};
use c3rec::eval::{evaluate, EvalOptions, EvalReport, RerankOptions, DEFAULT_POOL};
use c3rec::model::{C3Model, Variant};
use c3rec::train::{run_ablation, train_with, TrainConfig};
use c3rec::{Error, Result};

#[derive(Parser)]
#[command(
    name = "c3rec",
    version,
    about = "Convolution-augmented sequential recommender"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Movielens,
    Tsv,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw interaction files into a bundle cache.
    Ingest {
        #[arg(long, value_enum)]
        format: Format,
        /// ratings.dat (movielens) or events file (tsv).
        #[arg(long)]
        events: PathBuf,
        /// movies.dat (movielens) or item-attribute file (tsv).
        #[arg(long)]
        attributes: PathBuf,
        /// TSV files start with a header line.
        #[arg(long)]
        header: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out last items.
    Eval {
        #[command(flatten)]
        target: EvalTarget,
    },
    /// Train and evaluate several variants side by side.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_value = "C3SASR,FFN,NoCC,RawConv")]
        variants: Vec<Variant>,
        /// Evaluation cutoffs.
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        cutoffs: Vec<usize>,
    },
    /// Evaluate a checkpoint with greedy calibrated reranking.
    Rerank {
        #[command(flatten)]
        target: EvalTarget,
        #[arg(long)]
        beta: f64,
        #[arg(long, default_value_t = DEFAULT_POOL)]
        pool: usize,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundle cache written by `ingest`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalTarget {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    k: Vec<usize>,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    filter_seen: bool,
    /// Write the report here (`.csv` for CSV, JSON lines otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<(TrainConfig, DatasetBundle)> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let m = &mut cfg.model;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lambda {
            m.lambda = v;
        }
        if let Some(v) = self.variant {
            m.variant = v;
        }
        if let Some(v) = self.k {
            m.kernel_size = v;
        }
        if let Some(v) = self.k2 {
            m.head_kernel = v;
        }
        if let Some(v) = self.alpha {
            m.alpha = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        cfg.validate()?;
        Ok((cfg, DatasetBundle::load(&self.data)?))
    }
}

fn emit(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) if p.extension().is_some_and(|e| e == "csv") => report.write_csv(p),
        Some(p) => report.write_json_lines(p),
        None => {
            print!("{}", report.to_json_lines()?);
            Ok(())
        }
    }
}

fn run_eval(t: &EvalTarget, rerank: Option<RerankOptions>) -> Result<()> {
    let model = C3Model::load(&t.checkpoint)?;
    let bundle = DatasetBundle::load(&t.data)?;
    let opts = EvalOptions {
        cutoffs: t.k.clone(),
        filter_seen: t.filter_seen,
        rerank,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &test_split(&bundle), &bundle.attribute_table, &opts)?;
    emit(
        &report.with_label(model.config().variant.name()),
        t.out.as_deref(),
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            format,
            events,
            attributes,
            header,
            out,
        } => {
            let bundle = match format {
                Format::Movielens => load_movielens(&events, &attributes)?,
                Format::Tsv => load_tsv(&events, &attributes, header)?,
            };
            bundle.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&bundle.stats)?);
        }
        Command::Train { overrides, out } => {
            let (cfg, bundle) = overrides.resolve()?;
            let out = out.or_else(|| cfg.checkpoint.clone()).ok_or_else(|| {
                Error::Config("no output path: pass --out or set `checkpoint`".into())
            })?;
            let outcome = train_with(&cfg, &bundle, |e| {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  ce {:.5}  calib {:.5}  val {}  {:.1}s",
                    e.epoch,
                    e.values.loss,
                    e.values.accuracy,
                    e.values.calibration,
                    e.validation_recall
                        .map_or("-".into(), |r| format!("{r:.4}")),
                    e.wall_seconds
                );
            })?;
            outcome.model.save(&out)?;
            std::fs::write(
                out.with_extension("log.jsonl"),
                outcome.log.to_json_lines()?,
            )?;
            if let Some(report) = &cfg.report {
                let eval = evaluate(
                    &outcome.model,
                    &test_split(&bundle),
                    &bundle.attribute_table,
                    &EvalOptions::default(),
                )?;
                emit(&eval.with_label(cfg.model.variant.name()), Some(report))?;
            }
        }
        Command::Eval { target } => run_eval(&target, None)?,
        Command::Rerank { target, beta, pool } => {
            run_eval(&target, Some(RerankOptions { beta, pool }))?
        }
        Command::Ablate {
            overrides,
            variants,
            cutoffs,
        } => {
            let (cfg, bundle) = overrides.resolve()?;
            let opts = EvalOptions {
                cutoffs,
                ..EvalOptions::default()
            };
            print!(
                "{}",
                run_ablation(&cfg, &bundle, &variants, &opts)?.to_table()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

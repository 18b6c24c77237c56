use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clipsim::check;
use clipsim::config::RunConfig;
use clipsim::encoder::Encoder;
use clipsim::params::{load_checkpoint, save_checkpoint, ParamStore};
use clipsim::pipeline::{self, ablation_monotone, ablation_table};
use clipsim::predmae::DECODER_DEPTH;
use clipsim::retrieval::{evaluate, rank_query_with, AnnotationSet, CorpusIndex, Task};
use clipsim::simlearn::metrics_csv;
use clipsim::synth::{load_dataset, SyntheticBenchmark};
use clipsim::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "clipsim", version, about = "Clip-level near-duplicate video retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON file of dotted configuration keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Corpus size, queries and distractors included.
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
    },
    /// Future-frame pretraining; writes encoder and decoder weights.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Per-step loss CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Similarity training; writes encoder weights.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to write. Not used with --ablation.
        #[arg(long, required_unless_present = "ablation")]
        out: Option<PathBuf>,
        /// Start from these weights instead of a fresh encoder.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Per-step metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Train and score the four component configurations.
        #[arg(long)]
        ablation: bool,
    },
    /// Embed every video of a dataset into a feature store.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Encoder weights; a fresh encoder is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rank the corpus against one stored video.
    Query {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        k: Option<usize>,
        /// Print only the best N results.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Per-query AP and mAP for one or every task.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        k: Option<usize>,
        /// Write the CSV report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every gradient and oracle check.
    Selfcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    Usage(String),
    Check(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric { .. } | Error::Training { .. } | Error::NonFiniteGradient { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn finish(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate()?;
    log::info!("resolved configuration:\n{}", cfg.resolved_json());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Lib(Error::Io { path: path.to_path_buf(), source: e }))
}

fn load_encoder(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Encoder, ParamStore<f32>), Failure> {
    match checkpoint {
        Some(path) => {
            let store = load_checkpoint(path)?;
            Ok((Encoder::from_store(cfg.model.clone(), &store)?, store))
        }
        None => {
            log::warn!("no checkpoint given; using a fresh encoder");
            Ok(pipeline::init_encoder(cfg)?)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { common, out, videos, queries } => {
            let mut cfg = resolve(&common)?;
            if let Some(v) = videos {
                cfg.synth.videos = v;
            }
            if let Some(q) = queries {
                cfg.synth.queries = q;
            }
            finish(&cfg)?;
            let bench = SyntheticBenchmark::generate(&cfg.synth)?;
            bench.write(&out, &cfg.synth)?;
            println!(
                "wrote {} videos and {} annotated queries to {}",
                bench.videos.len(),
                bench.annotations.queries.len(),
                out.display()
            );
        }
        Command::Pretrain { common, out, steps, batch, metrics } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            if let Some(b) = batch {
                cfg.pretrain.batch = b;
            }
            finish(&cfg)?;
            log::info!("decoder depth {DECODER_DEPTH}");
            let (model, curve) = pipeline::pretrain(&cfg)?;
            save_checkpoint(&model.params, &out)?;
            if let Some(path) = metrics {
                write_text(&path, &curve.to_csv())?;
            }
            let first = curve.0.first().copied().unwrap_or(f64::NAN);
            let last = curve.0.last().copied().unwrap_or(f64::NAN);
            println!("pretraining loss {first:.5} -> {last:.5}; weights in {}", out.display());
        }
        Command::Train { common, out, init, steps, batch, metrics, ablation } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(b) = batch {
                cfg.train.batch = b;
            }
            finish(&cfg)?;
            if ablation {
                let bench = SyntheticBenchmark::generate(&cfg.synth)?;
                let rows = pipeline::run_ablation(&cfg, &bench)?;
                print!("{}", ablation_table(&rows));
                println!("DSVR non-decreasing down the table: {}", ablation_monotone(&rows));
                return Ok(());
            }
            let out = out.ok_or_else(|| Failure::Usage("--out is required".into()))?;
            let (encoder, params) = match init {
                Some(path) => pipeline::encoder_from(&cfg, &load_checkpoint(&path)?)?,
                None => pipeline::init_encoder(&cfg)?,
            };
            let (params, steps) = pipeline::train_similarity(&cfg, &cfg.train, encoder, params)?;
            save_checkpoint(&params, &out)?;
            if let Some(path) = metrics {
                write_text(&path, &metrics_csv(&steps))?;
            }
            if let Some(last) = steps.last() {
                println!("final loss {:.5} after {} steps; weights in {}", last.total, steps.len(), out.display());
            }
        }
        Command::Extract { common, data, store, checkpoint } => {
            let cfg = resolve(&common)?;
            finish(&cfg)?;
            let (encoder, params) = load_encoder(&cfg, checkpoint.as_deref())?;
            let videos = load_dataset(&data)?;
            let index = CorpusIndex::build(&encoder, &params, &videos)?;
            index.write(&store)?;
            println!(
                "stored {} clip vectors for {} videos in {}",
                index.vector_count(),
                index.len(),
                store.display()
            );
        }
        Command::Query { common, store, id, k, top } => {
            let mut cfg = resolve(&common)?;
            if let Some(k) = k {
                cfg.k = k;
            }
            finish(&cfg)?;
            let index = CorpusIndex::read(&store)?;
            let ranked = rank_query_with(&index, &id, cfg.scoring())?;
            let limit = top.unwrap_or(usize::MAX);
            for (rank, (candidate, score)) in ranked.entries.iter().take(limit).enumerate() {
                println!("{}\t{candidate}\t{score:.6}", rank + 1);
            }
        }
        Command::Eval { common, store, annotations, task, k, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(k) = k {
                cfg.k = k;
            }
            finish(&cfg)?;
            let index = CorpusIndex::read(&store)?;
            let ann = AnnotationSet::load(&annotations)?;
            ann.check_against(&index)?;
            let tasks: Vec<Task> = task.map_or_else(|| Task::ALL.to_vec(), |t| vec![t]);
            let mut csv = String::new();
            for t in tasks {
                let report = evaluate(&index, &ann, t, cfg.scoring())?;
                eprintln!("{} mAP {:.4} over {} queries", t.name(), report.mean_ap, report.per_query.len());
                let text = report.to_csv();
                if csv.is_empty() {
                    csv.push_str(&text);
                } else {
                    csv.extend(text.lines().skip(1).map(|l| format!("{l}\n")));
                }
            }
            match out {
                Some(path) => write_text(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Selfcheck { common } => {
            let cfg = resolve(&common)?;
            let outcomes = check::run_all(cfg.train.seed);
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            for o in &outcomes {
                println!("{o}");
            }
            if failed > 0 {
                return Err(Failure::Check(failed));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(n)) => {
            eprintln!("error: {n} self-check(s) failed");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}

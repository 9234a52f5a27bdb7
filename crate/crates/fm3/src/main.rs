use std::fs::OpenOptions;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fm3::bench::bench_inference;
use fm3::checkpoint::Checkpoint;
use fm3::config::{Ablation, RunConfig};
use fm3::data::{pool_records, read_ndjson, write_ndjson, Suite};
use fm3::report::{aggregate, Metric};
use fm3::runner::{episode_inputs, prepare_base, run_ablation, sweep, EpisodeResult};
use fm3::{Error, Result};
use fm3_core::encoders::SizeClass;
use fm3_core::pipeline::{episode_seed, run_head_stage, EpisodeMode, FeatureView, Model};

#[derive(Parser)]
#[command(name = "fm3", version, about = "Few-shot multimodal multitask pipeline on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (TOML). The built-in six-task suite when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's worker count.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::suite(0),
        };
        if let Some(s) = self.seed {
            cfg.global_seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Accuracy,
    F1,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Suite,
    Multidomain,
}

#[derive(Subcommand)]
enum Command {
    /// Prints a built-in run config as TOML.
    InitConfig {
        #[arg(long, value_enum, default_value = "suite")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Joint contrastive stage, then k-shot heads for every task; writes a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "fm3.ckpt")]
        out: PathBuf,
        /// Support examples per class for the heads.
        #[arg(long, default_value_t = 16)]
        shots: usize,
    },
    /// Episode sweep; appends one metric record per (task, k, episode).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "metrics.ndjson")]
        out: PathBuf,
        /// Where episode timings go; next to `out` by default.
        #[arg(long)]
        timings: Option<PathBuf>,
        /// Start every episode from this checkpoint's model instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
    },
    /// Sweep under an ablation and under the baseline; prints per-task deltas.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// no_hypernet, budget_5pct, small_text, small_vision or small_both.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        shots: Option<Vec<usize>>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sample inference latency on one task's eval pool.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Also time the same task with small text and vision encoders.
        #[arg(long)]
        compare_small: bool,
    },
    /// Tasks × shots table of mean ± std from a metric record file.
    Report {
        records: PathBuf,
        #[arg(long, value_enum, default_value = "accuracy")]
        metric: MetricArg,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Exports the synthetic train and eval pools, one example per line.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "pools.ndjson")]
        out: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    std::fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn append(path: &Path) -> Result<BufWriter<std::fs::File>> {
    OpenOptions::new().create(true).append(true).open(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_results(results: &[EpisodeResult], out: &Path, timings: &Path) -> Result<()> {
    let records: Vec<_> = results.iter().map(|r| r.record.clone()).collect();
    let times: Vec<_> = results.iter().map(|r| r.timing.clone()).collect();
    write_ndjson(append(out)?, &records).map_err(|e| Error::io(out, e))?;
    write_ndjson(append(timings)?, &times).map_err(|e| Error::io(timings, e))
}

fn timings_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "metrics".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.timings.ndjson"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { preset, seed } => {
            let cfg = match preset {
                Preset::Suite => RunConfig::suite(seed),
                Preset::Multidomain => RunConfig::multidomain(seed),
            };
            print!("{}", cfg.to_toml()?);
        }
        Command::Train { cfg, out, shots } => {
            let cfg = cfg.load()?;
            let suite = Suite::build(&cfg)?;
            let (model, joint) = prepare_base(&cfg, &suite)?;
            if let Some(j) = joint {
                eprintln!("joint stage: {} steps, {} skipped batches", j.steps, j.skipped_batches);
            }
            let mut heads = Vec::new();
            for (i, t) in suite.tasks.iter().enumerate() {
                let inputs = episode_inputs(&suite, i, shots, episode_seed(cfg.global_seed, t.spec.task_id, shots, 0));
                heads.push(run_head_stage(&model, &t.spec, &inputs.head, FeatureView::Projected, cfg.heads.l2)?);
            }
            Checkpoint { config: cfg, model, heads }.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { cfg, shots, episodes, out, timings, checkpoint, mode } => {
            let mut cfg = cfg.load()?;
            if let Some(s) = shots {
                cfg.shots = s;
            }
            if let Some(e) = episodes {
                cfg.episodes_per_setting = e;
            }
            cfg.validate()?;
            let suite = Suite::build(&cfg)?;
            let base = match checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(&p)?;
                    if ck.model.config.num_tasks != cfg.tasks.len() {
                        return Err(Error::Config("checkpoint was trained for a different task list".into()));
                    }
                    ck.model
                }
                None => prepare_base(&cfg, &suite)?.0,
            };
            let mode = match mode {
                ModeArg::Full => EpisodeMode::Full,
                ModeArg::Raw => EpisodeMode::RawBaseline,
            };
            let tasks: Vec<usize> = (0..suite.tasks.len()).collect();
            let results = sweep(&cfg, &suite, &base, &tasks, &cfg.shots, mode)?;
            let timings = timings.unwrap_or_else(|| timings_path(&out));
            write_results(&results, &out, &timings)?;
            let records: Vec<_> = results.into_iter().map(|r| r.record).collect();
            print!("{}", aggregate(&records, Metric::Accuracy).render());
        }
        Command::Ablate { cfg, mode, shots, episodes, out } => {
            let ablation: Ablation = mode.parse()?;
            let mut cfg = cfg.load()?;
            if let Some(s) = shots {
                cfg.shots = s;
            }
            if let Some(e) = episodes {
                cfg.episodes_per_setting = e;
            }
            cfg.validate()?;
            let (table, _) = run_ablation(&cfg, ablation, None)?;
            print!("{}", table.render());
            if let Some(p) = out {
                serde_json::to_writer_pretty(create(&p)?, &table).map_err(|e| Error::Records(e.to_string()))?;
            }
        }
        Command::Bench { cfg, task, checkpoint, samples, repetitions, warmup, compare_small } => {
            let mut cfg = cfg.load()?;
            let loaded = checkpoint.map(|p| Checkpoint::load(&p)).transpose()?;
            if let Some(ck) = &loaded {
                cfg = ck.config.clone();
            }
            let suite = Suite::build(&cfg)?;
            let idx = match &task {
                Some(name) => suite.task_by_name(name)?,
                None => suite.tasks.iter().position(|t| t.kind.is_visionlang()).unwrap_or(0),
            };
            let t = &suite.tasks[idx];
            let pool: Vec<_> = t.eval().into_iter().take(samples).collect();
            let seed = episode_seed(cfg.global_seed, t.spec.task_id, 16, 0);
            let support = episode_inputs(&suite, idx, 16, seed).head;
            let mut models = vec![("base", loaded.as_ref().map_or_else(|| Model::build(&cfg.model_config()), |c| Ok(c.model.clone()))?)];
            if compare_small {
                let mut small = cfg.clone();
                small.encoders.text = SizeClass::Small;
                small.encoders.vision = SizeClass::Small;
                models.push(("small", Model::build(&small.model_config())?));
            }
            for (label, model) in &models {
                let head = match loaded.as_ref().and_then(|c| c.head(t.spec.task_id)).filter(|_| *label == "base") {
                    Some(h) => h.clone(),
                    None => run_head_stage(model, &t.spec, &support, FeatureView::Projected, cfg.heads.l2)?,
                };
                let report = bench_inference(model, &t.spec, &head, &pool, repetitions, warmup)?;
                let line = serde_json::json!({ "encoders": label, "task": t.spec.name, "report": report });
                println!("{line}");
            }
        }
        Command::Report { records, metric, csv, svg } => {
            let file = std::fs::File::open(&records).map_err(|e| Error::io(&records, e))?;
            let recs = read_ndjson(BufReader::new(file))?;
            let metric = match metric {
                MetricArg::Accuracy => Metric::Accuracy,
                MetricArg::F1 => Metric::F1,
            };
            let table = aggregate(&recs, metric);
            print!("{}", table.render());
            if let Some(p) = csv {
                std::fs::write(&p, table.to_csv()).map_err(|e| Error::io(&p, e))?;
            }
            if let Some(p) = svg {
                std::fs::write(&p, table.to_svg()).map_err(|e| Error::io(&p, e))?;
            }
        }
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let suite = Suite::build(&cfg)?;
            let records = pool_records(&suite);
            write_ndjson(create(&out)?, &records).map_err(|e| Error::io(&out, e))?;
            println!("wrote {} examples to {}", records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
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
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

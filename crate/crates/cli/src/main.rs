//! Command-line front end: data generation, staged training, evaluation
//! sweeps and planning runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpm::config::RunConfig;
use cpm::dataset::{Dataset, Encoding};
use cpm::env::Mode;
use cpm::eval::{aggregate_seeds, evaluate, write_csv, MetricRecord};
use cpm::model::{ModelKind, WorldModel};
use cpm::planner::{self, Planner};
use cpm::plot::{line_chart, series_by};
use cpm::training::{Stage, Trainer};
use cpm::Error;

#[derive(Parser, Debug)]
#[command(name = "cpm", version, about = "Causal process world model")]
struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads. Computation currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of random-action episodes.
    GenData {
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        episode_len: Option<usize>,
        #[arg(long, default_value = "u8")]
        encoding: String,
        /// File name inside the output directory.
        #[arg(long, default_value = "data.cpmd")]
        name: String,
    },
    /// Train a model; writes model.ckpt, metrics.csv and timing.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// 1, 2, 3 or all.
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long, default_value = "cpm")]
        model: ModelKind,
        /// Checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate checkpoints; writes eval.csv.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        checkpoint: Vec<PathBuf>,
        /// Comma-separated horizons.
        #[arg(long)]
        horizons: Option<String>,
        /// Seed aggregation such as `top8of10`.
        #[arg(long)]
        aggregate: Option<String>,
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        sampled: bool,
    },
    /// Run a goal-reaching task suite; writes plan.csv.
    Plan {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, required_unless_present_any = ["oracle", "random"])]
        checkpoint: Option<PathBuf>,
        /// Plan with the true environment.
        #[arg(long)]
        oracle: bool,
        /// Act uniformly at random.
        #[arg(long)]
        random: bool,
        /// Generate a solvable suite at the task path first.
        #[arg(long)]
        write_suite: bool,
        #[arg(long)]
        mode: Option<Mode>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Pipeline(_) => 3,
        Error::Diverged(_) | Error::NonFiniteGradient(_) => 4,
        _ => 2,
    }
}

/// Fails with an input error naming `path` when it does not exist.
fn require(path: &Path) -> cpm::Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Input(format!("{} does not exist", path.display())))
    }
}

fn load_config(cli: &Cli) -> cpm::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(require(p)?)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_config(out: &Path, cfg: &RunConfig, extra: serde_json::Value) -> cpm::Result<()> {
    let doc = serde_json::json!({ "config": cfg, "command": extra });
    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}

fn parse_stage(s: &str) -> cpm::Result<Option<Stage>> {
    match s {
        "1" => Ok(Some(Stage::One)),
        "2" => Ok(Some(Stage::Two)),
        "3" => Ok(Some(Stage::Three)),
        "all" => Ok(None),
        _ => Err(Error::Input(format!("unknown stage `{s}` (expected 1, 2, 3 or all)"))),
    }
}

fn parse_aggregate(s: &str) -> cpm::Result<(usize, usize)> {
    let bad = || Error::Input(format!("aggregate `{s}` is not of the form topKofN"));
    let rest = s.strip_prefix("top").ok_or_else(bad)?;
    let (k, n) = rest.split_once("of").ok_or_else(bad)?;
    let k: usize = k.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    if k == 0 || k > n {
        return Err(bad());
    }
    Ok((k, n))
}

fn run(cli: Cli) -> cpm::Result<()> {
    let mut cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::GenData {
            objects,
            mode,
            episodes,
            episode_len,
            encoding,
            name,
        } => {
            if let Some(o) = objects {
                cfg.env.objects = *o;
            }
            if let Some(m) = mode {
                cfg.env.mode = *m;
            }
            if let Some(e) = episodes {
                cfg.episodes = *e;
            }
            if let Some(t) = episode_len {
                cfg.env.episode_len = *t;
            }
            let encoding = match encoding.as_str() {
                "u8" => Encoding::U8,
                "f32" => Encoding::F32,
                e => return Err(Error::Input(format!("unknown encoding `{e}`"))),
            };
            cfg.env.validate()?;
            let data = Dataset::generate(&cfg.env, cfg.episodes, cfg.seed, encoding)?;
            let path = cli.out.join(name);
            data.save(&path)?;
            write_config(&cli.out, &cfg, serde_json::json!({ "verb": "gen-data", "file": path }))?;
            println!("wrote {} transitions to {}", data.transitions(), path.display());
        }
        Command::Train {
            data,
            stage,
            model,
            checkpoint,
            epochs,
        } => {
            let stage = parse_stage(stage)?;
            let data = Dataset::load(require(data)?)?;
            cfg.env = data.config.clone();
            if let Some(e) = epochs {
                cfg.train.stage1_epochs = *e;
            }
            cfg.validate()?;
            let mut wm = match checkpoint {
                Some(p) => {
                    let wm = WorldModel::load(require(p)?)?;
                    if wm.kind() != *model {
                        return Err(Error::Input(format!("checkpoint holds a {} model, not {model}", wm.kind())));
                    }
                    wm
                }
                None => WorldModel::new(*model, &cfg.model, data.config.image_shape(), cfg.seed)?,
            };
            if let Some(s) = stage {
                let need = s as u32 - 1;
                if wm.stage < need {
                    return Err(Error::Pipeline(format!(
                        "stage {} needs a checkpoint that completed stage {need}",
                        s as u32
                    )));
                }
            }
            let mut trainer = Trainer::new(cfg.train.clone(), &data, cfg.seed)?;
            let result = trainer.run(&mut wm, stage);
            trainer.log.save(&cli.out.join("metrics.csv"), &cli.out.join("timing.csv"))?;
            result?;
            let run = serde_json::to_value(&cfg)?;
            wm.save(&cli.out.join("model.ckpt"), run)?;
            write_config(&cli.out, &cfg, serde_json::json!({ "verb": "train", "model": model, "stage": wm.stage }))?;
            println!("{model} trained through stage {}", wm.stage);
        }
        Command::Eval {
            data,
            checkpoint,
            horizons,
            aggregate,
            plot,
            sampled,
        } => {
            if let Some(h) = horizons {
                cfg.eval.horizons = h
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Input(format!("bad horizon `{s}`"))))
                    .collect::<cpm::Result<_>>()?;
            }
            cfg.eval.sampled |= *sampled;
            let data = Dataset::load(require(data)?)?;
            if data.transitions() == 0 {
                return Err(Error::Input("evaluation dataset is empty".into()));
            }
            let mut records: Vec<MetricRecord> = Vec::new();
            for (k, p) in checkpoint.iter().enumerate() {
                let wm = WorldModel::load(require(p)?)?;
                let seed = WorldModel::load_run_meta(p)?
                    .get("seed")
                    .and_then(|s| s.as_u64())
                    .unwrap_or(k as u64);
                records.extend(evaluate(&wm, &data, &cfg.eval.horizons, seed, cfg.eval.sampled)?);
            }
            let mut buf = Vec::new();
            write_csv(&records, &mut buf)?;
            std::fs::write(cli.out.join("eval.csv"), buf)?;
            if let Some(a) = aggregate {
                let (k, n) = parse_aggregate(a)?;
                let mut agg = Vec::new();
                let mut keys: Vec<(String, String, usize, usize, String)> = records
                    .iter()
                    .map(|r| (r.model.clone(), r.setting.clone(), r.objects, r.horizon, r.metric.clone()))
                    .collect();
                keys.sort();
                keys.dedup();
                for key in keys {
                    let vals: Vec<f64> = records
                        .iter()
                        .filter(|r| (&r.model, &r.setting, r.objects, r.horizon, &r.metric) == (&key.0, &key.1, key.2, key.3, &key.4))
                        .map(|r| r.value)
                        .collect();
                    if vals.len() != n {
                        return Err(Error::Input(format!(
                            "{a} needs {n} seeds but {} {} has {}",
                            key.0,
                            key.4,
                            vals.len()
                        )));
                    }
                    agg.push(MetricRecord {
                        model: key.0,
                        setting: key.1,
                        objects: key.2,
                        horizon: key.3,
                        seed: 0,
                        metric: format!("{}_{a}", key.4),
                        value: aggregate_seeds(&vals, k)?,
                    });
                }
                let mut buf = Vec::new();
                write_csv(&agg, &mut buf)?;
                std::fs::write(cli.out.join("aggregate.csv"), buf)?;
            }
            if *plot {
                for metric in ["h@1", "mrr"] {
                    let s = series_by(&records, metric, |r| r.horizon as f64);
                    let svg = line_chart(&format!("{metric} vs horizon"), "horizon", metric, &s);
                    std::fs::write(cli.out.join(format!("{}_horizon.svg", metric.replace('@', ""))), svg)?;
                    let one: Vec<MetricRecord> = records.iter().filter(|r| r.horizon == 1).cloned().collect();
                    let s = series_by(&one, metric, |r| r.objects as f64);
                    let svg = line_chart(&format!("1-step {metric} vs objects"), "objects", metric, &s);
                    std::fs::write(cli.out.join(format!("{}_objects.svg", metric.replace('@', ""))), svg)?;
                }
            }
            write_config(&cli.out, &cfg, serde_json::json!({ "verb": "eval", "checkpoints": checkpoint }))?;
            println!("wrote {} metric rows", records.len());
        }
        Command::Plan {
            tasks,
            checkpoint,
            oracle,
            random,
            write_suite,
            mode,
        } => {
            let mode = mode.unwrap_or(cfg.env.mode);
            if *write_suite {
                let suite = planner::solvable_suite(&cfg.env, cfg.plan.tasks, cfg.plan.max_steps, cfg.seed)?;
                planner::save_suite(tasks, &suite)?;
            }
            let suite = planner::load_suite(require(tasks)?)?;
            let model;
            let (name, planner) = if *oracle {
                ("oracle".to_string(), Planner::Oracle)
            } else if *random {
                ("random".to_string(), Planner::Random)
            } else {
                let p = checkpoint.as_ref().ok_or_else(|| Error::Input("plan needs --checkpoint".into()))?;
                model = WorldModel::load(require(p)?)?;
                if model.stage < 1 {
                    return Err(Error::Pipeline("planning needs a checkpoint that completed stage 1".into()));
                }
                (model.kind().to_string(), Planner::Learned(&model))
            };
            let rewards = planner::run_suite(&planner, &suite, mode, &cfg.plan, cfg.seed)?;
            let mut w = csv::Writer::from_path(cli.out.join("plan.csv")).map_err(|e| Error::Io(e.into()))?;
            let io = |e: csv::Error| Error::Io(e.into());
            w.write_record(["planner", "task", "reward"]).map_err(io)?;
            for (i, r) in rewards.iter().enumerate() {
                w.write_record([name.clone(), i.to_string(), r.to_string()]).map_err(io)?;
            }
            w.write_record([name.clone(), "mean".into(), planner::mean(&rewards).to_string()])
                .map_err(io)?;
            w.flush()?;
            write_config(&cli.out, &cfg, serde_json::json!({ "verb": "plan", "planner": name }))?;
            println!("{name}: mean reward {:.3} over {} tasks", planner::mean(&rewards), rewards.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

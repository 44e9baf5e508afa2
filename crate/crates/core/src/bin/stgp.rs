use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stgp::data::{load_dataset, save_dataset, Graph, SignalTensor};
use stgp::evalbench::{
    generate_synthetic, merge_reports, run_experiment, write_report, Ablation, BaselineMethod, ExperimentSpec, MetricRow, Report, SynthSpec, TaskScore,
    TestSet,
};
use stgp::pipeline::{fit_domain_prompts, fit_task_prompts, plan_for, pretrain, Setting, StageOutput, TargetSpec, TaskKind};
use stgp::{Checkpoint, Stage, TrainConfig};

#[derive(Parser)]
#[command(name = "stgp", about = "Prompt-based transfer learning on spatio-temporal graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Training config (key=value); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (or meta.json). Repeat for several sources.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark: source0..sourceP-1 and target.
    Generate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train on one or more source datasets.
    Pretrain(StageArgs),
    /// Fit domain prompts on the target.
    PromptDomain {
        #[command(flatten)]
        stage: StageArgs,
        /// Pretrained checkpoint.
        #[arg(long)]
        from: PathBuf,
        /// Delete unobserved nodes from the graph instead of only hiding their signal.
        #[arg(long)]
        inductive: bool,
    },
    /// Fit task prompts on the target.
    PromptTask {
        #[command(flatten)]
        stage: StageArgs,
        /// Domain-prompted checkpoint.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        inductive: bool,
        #[arg(long)]
        tune_head: bool,
    },
    /// Score a task-prompted checkpoint on the target's test days.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score a statistical baseline on the target's test days.
    Baseline {
        #[arg(long)]
        method: BaselineMethod,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        inductive: bool,
        #[arg(long)]
        report: PathBuf,
    },
    /// Merge report directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        merge: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, train and score the whole benchmark for several seeds.
    Experiment {
        /// Training config; the desk profile when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "zero")]
        ablations: Vec<Ablation>,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<TaskKind>,
        #[arg(long)]
        inductive: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, fallback: TrainConfig, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => fallback,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load(path: &Path) -> Result<(Graph, SignalTensor)> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn single(data: &[PathBuf]) -> Result<(Graph, SignalTensor)> {
    match data {
        [one] => load(one),
        _ => bail!("this stage takes exactly one --data"),
    }
}

fn setting(inductive: bool) -> Setting {
    if inductive {
        Setting::Inductive
    } else {
        Setting::Transductive
    }
}

fn save(out: StageOutput, dir: &Path) -> Result<()> {
    out.checkpoint.save(dir).with_context(|| format!("writing checkpoint {}", dir.display()))?;
    let log = &out.log;
    eprintln!("{}: best epoch {} of {}, validation {:.5} (initial {:.5}), {} steps", log.stage, log.best_epoch, log.val_curve.len(), log.best_val(), log.initial_val, log.steps_taken);
    Ok(())
}

/// The target split a checkpoint was adapted on.
fn checkpoint_target(ckpt: &Checkpoint, n: usize) -> Result<TargetSpec> {
    let unobserved = match ckpt.meta.get("unobserved") {
        Some(list) if !list.is_empty() => list.split(',').map(|v| v.parse::<usize>()).collect::<Result<Vec<_>, _>>().context("checkpoint meta `unobserved`")?,
        Some(_) => vec![],
        None => return Ok(TargetSpec::from_config(n, &ckpt.config, Setting::Transductive)),
    };
    let setting = setting(ckpt.meta.get("setting").map(String::as_str) == Some("inductive"));
    Ok(TargetSpec { unobserved, setting })
}

fn write_single(dir: &Path, row: MetricRow, score: &TaskScore, extra: &[(&str, String)]) -> Result<()> {
    let mut report = Report { rows: vec![row], ..Report::default() };
    for (k, v) in extra {
        report.entries.insert(k.to_string(), v.clone());
    }
    for (k, v) in score.horizon.iter().enumerate() {
        let r = &report.rows[0];
        let key = format!("horizon.{}.{}.seed{}.step{:02}", r.task, r.method, r.seed, k + 1);
        report.entries.insert(key, v.to_string());
    }
    report.refresh();
    report.write(dir).with_context(|| format!("writing report {}", dir.display()))?;
    let r = &report.rows[0];
    println!("{} {} MAE {:.4} RMSE {:.4} over {} cells", r.task, r.method, r.mae, r.rmse, r.cells);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { spec, out, seed } => {
            let mut s = match spec {
                Some(p) => SynthSpec::parse(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let data = generate_synthetic(&s)?;
            let p = s.num_sources;
            for (k, (g, sig)) in data.iter().enumerate() {
                let name = if k < p { format!("source{k}") } else { "target".to_string() };
                save_dataset(out.join(&name), g, sig)?;
            }
            println!("wrote {p} sources and one target to {}", out.display());
        }
        Command::Pretrain(a) => {
            let cfg = load_config(a.config.as_deref(), TrainConfig::default(), a.seed)?;
            let sources = a.data.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            save(pretrain(&sources, &cfg)?, &a.out)?;
        }
        Command::PromptDomain { stage, from, inductive } => {
            let pre = Checkpoint::load(&from).with_context(|| format!("loading {}", from.display()))?;
            let cfg = load_config(stage.config.as_deref(), pre.config.clone(), stage.seed)?;
            let (g, s) = single(&stage.data)?;
            let target = TargetSpec::from_config(g.num_nodes(), &cfg, setting(inductive));
            save(fit_domain_prompts(&g, &s, &target, &pre, &cfg)?, &stage.out)?;
        }
        Command::PromptTask { stage, from, task, inductive, tune_head } => {
            let dom = Checkpoint::load(&from).with_context(|| format!("loading {}", from.display()))?;
            let mut cfg = load_config(stage.config.as_deref(), dom.config.clone(), stage.seed)?;
            cfg.tune_head |= tune_head;
            let (g, s) = single(&stage.data)?;
            let mut target = checkpoint_target(&dom, g.num_nodes())?;
            if inductive {
                target.setting = Setting::Inductive;
            }
            save(fit_task_prompts(&g, &s, &target, &dom, task, &cfg)?, &stage.out)?;
        }
        Command::Eval { checkpoint, data, task, report } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            ckpt.expect_stage(|s| matches!(s, Stage::TaskPrompted(t) if t == task.name()), &format!("task_prompted:{task}"))?;
            let (g, s) = load(&data)?;
            let cfg = &ckpt.config;
            let target = checkpoint_target(&ckpt, g.num_nodes())?;
            let test = TestSet::new(&s, &target, cfg, task, 0, cfg.seed)?;
            let score = test.score_model(&ckpt.params, cfg, &plan_for(&ckpt, Some(task)), &g)?;
            let row = MetricRow { seed: cfg.seed, task: task.name().into(), method: "STGP".into(), mae: score.mae, rmse: score.rmse, cells: score.cells };
            write_single(&report, row, &score, &[("config_hash", cfg.hash()), ("stage", ckpt.stage.to_string())])?;
        }
        Command::Baseline { method, data, task, config, inductive, report } => {
            let cfg = load_config(config.as_deref(), TrainConfig::default(), None)?;
            let (g, s) = load(&data)?;
            let target = TargetSpec::from_config(g.num_nodes(), &cfg, setting(inductive));
            let test = TestSet::new(&s, &target, &cfg, task, 0, cfg.seed)?;
            let score = test.score_baseline(method, &g, &cfg)?;
            let row = MetricRow { seed: cfg.seed, task: task.name().into(), method: method.to_string(), mae: score.mae, rmse: score.rmse, cells: score.cells };
            write_single(&report, row, &score, &[("config_hash", cfg.hash())])?;
        }
        Command::Report { merge, out } => {
            let report = merge_reports(&merge)?;
            report.write(&out)?;
            print!("{}", report.to_markdown());
        }
        Command::Experiment { config, spec, seeds, ablations, tasks, inductive, out } => {
            let mut exp = ExperimentSpec::desk();
            exp.config = load_config(config.as_deref(), exp.config, None)?;
            if let Some(p) = spec {
                exp.synth = SynthSpec::parse(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?;
            }
            exp.seeds = seeds;
            exp.ablations = ablations;
            if !tasks.is_empty() {
                exp.tasks = tasks;
            }
            exp.setting = setting(inductive);
            let started = Instant::now();
            let outcomes = run_experiment(&exp)?;
            let report = write_report(&out, &exp, &outcomes)?;
            print!("{}", report.to_markdown());
            eprintln!("finished in {:.1} s", started.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

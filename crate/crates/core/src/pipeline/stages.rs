//! Data views, the three training stages, the fine-tuning ablation and
//! inference.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{run_stage, DomainData, PipelineError, Result, Setting, StageLog, StageSpec, TaskKind, TaskTemplate, TrainMasking, Window};
use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{BankMode, TrainConfig};
use crate::data::{patchify, round_half_up, unzscore, zscore, Graph, MaskSpec, NormStats, SignalTensor};
use crate::model::{forward, init_backbone, is_backbone, is_head, PromptPlan, Sample};
use crate::params::{Binder, Init, ParamStore};
use crate::prompting::{domain_bank_names, init_banks, task_bank_names};
use crate::structure::GraphStructure;

const SECONDS_PER_DAY: i64 = 86_400;
pub const NORM_KEY: &str = "norm.target";

/// Deterministic choice of `round(fraction · n)` held-out nodes (at least one,
/// at most `n − 1`), sorted.
pub fn split_nodes(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = round_half_up(fraction * n as f64).clamp(1, n.saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = rand::seq::index::sample(&mut rng, n, k).into_vec();
    nodes.sort_unstable();
    nodes
}

/// Which target nodes are unobserved and how they are treated in training.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub unobserved: Vec<usize>,
    pub setting: Setting,
}

impl TargetSpec {
    pub fn from_config(num_nodes: usize, cfg: &TrainConfig, setting: Setting) -> Self {
        Self { unobserved: split_nodes(num_nodes, cfg.unobserved_fraction, cfg.node_split_seed), setting }
    }

    pub fn observed(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|i| !self.unobserved.contains(i)).collect()
    }
}

fn make_windows(signal: &SignalTensor, start: usize, end: usize, stride: usize, cfg: &TrainConfig) -> Result<Vec<Window>> {
    let len = cfg.window_len();
    let mut out = Vec::new();
    let mut s = start;
    while s + len <= end {
        out.push(Window { start: s, patches: patchify(&signal.slice_steps(s, s + len), cfg.patch_len)? });
        s += stride;
    }
    Ok(out)
}

fn normalize(signal: &SignalTensor, stats: &NormStats) -> Result<SignalTensor> {
    Ok(zscore(signal, stats)?)
}

/// A source dataset split 8:2 (by default) into training and validation
/// segments, normalised with training-segment statistics.
pub fn source_view(graph: &Graph, signal: &SignalTensor, cfg: &TrainConfig, name: &str) -> Result<DomainData> {
    let t = signal.num_steps();
    let split = ((t as f64 * cfg.source_train_fraction) as usize / cfg.patch_len) * cfg.patch_len;
    let stats = if cfg.normalize { NormStats::compute(&signal.slice_steps(0, split))? } else { NormStats::identity(signal.num_channels()) };
    let norm = normalize(signal, &stats)?;
    let train = make_windows(&norm, 0, split, cfg.window_stride * cfg.patch_len, cfg)?;
    let val = make_windows(&norm, split, t, cfg.val_stride * cfg.patch_len, cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(PipelineError::NoData(format!("source `{name}` ({t} steps) is too short for {}-step windows", cfg.window_len())));
    }
    Ok(DomainData { name: name.to_string(), graph: graph.clone(), structure: GraphStructure::new(graph, cfg.max_hops), stats, train, val, node_map: (0..graph.num_nodes()).collect() })
}

fn steps_per_day(signal: &SignalTensor) -> usize {
    (SECONDS_PER_DAY / signal.interval.max(1)) as usize
}

/// `(train_end, val_end)` step bounds of the target split.
pub fn target_bounds(signal: &SignalTensor, cfg: &TrainConfig) -> (usize, usize) {
    let spd = steps_per_day(signal);
    let train_end = (cfg.target_train_days * spd).min(signal.num_steps());
    let val_end = (train_end + cfg.target_val_days * spd).min(signal.num_steps());
    (train_end, val_end)
}

/// Normalisation statistics of the target training segment, observed nodes only.
pub fn target_stats(signal: &SignalTensor, spec: &TargetSpec, cfg: &TrainConfig) -> Result<NormStats> {
    if !cfg.normalize {
        return Ok(NormStats::identity(signal.num_channels()));
    }
    let (train_end, _) = target_bounds(signal, cfg);
    let observed = spec.observed(signal.num_nodes());
    Ok(NormStats::compute(&signal.slice_steps(0, train_end).select_nodes(&observed))?)
}

/// The target as seen by one adaptation stage (`task = None` for domain
/// prompting). Returns the view and the nodes of the view that are hidden
/// (present in the graph, signal never shown).
pub fn domain_view(graph: &Graph, signal: &SignalTensor, spec: &TargetSpec, cfg: &TrainConfig, task: Option<TaskKind>) -> Result<(DomainData, Vec<usize>)> {
    let n = graph.num_nodes();
    if signal.num_nodes() != n {
        return Err(PipelineError::NoData(format!("graph has {n} nodes, signal {}", signal.num_nodes())));
    }
    let stats = target_stats(signal, spec, cfg)?;
    let (node_map, hidden) = match (task, spec.setting) {
        (Some(TaskKind::Forecast), _) => ((0..n).collect::<Vec<_>>(), vec![]),
        (_, Setting::Transductive) => ((0..n).collect(), spec.unobserved.clone()),
        (_, Setting::Inductive) => (spec.observed(n), vec![]),
    };
    let view_graph = if node_map.len() == n { graph.clone() } else { graph.subgraph(&node_map) };
    let view_signal = if node_map.len() == n { signal.clone() } else { signal.select_nodes(&node_map) };
    let (train_end, val_end) = target_bounds(signal, cfg);
    let norm = normalize(&view_signal, &stats)?;
    let train = make_windows(&norm, 0, train_end, cfg.window_stride * cfg.patch_len, cfg)?;
    let val = make_windows(&norm, train_end, val_end, cfg.val_stride * cfg.patch_len, cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(PipelineError::NoData(format!("target split leaves {} training and {} validation windows", train.len(), val.len())));
    }
    let data = DomainData { name: "target".into(), structure: GraphStructure::new(&view_graph, cfg.max_hops), graph: view_graph, stats, train, val, node_map };
    Ok((data, hidden))
}

/// A trained checkpoint plus the record of how it was trained.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub log: StageLog,
}

fn record_target(ckpt: &mut Checkpoint, spec: &TargetSpec, num_nodes: usize) {
    let list = spec.unobserved.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    ckpt.meta.insert("unobserved".into(), list);
    ckpt.meta.insert("setting".into(), format!("{:?}", spec.setting).to_lowercase());
    ckpt.meta.insert("target_nodes".into(), num_nodes.to_string());
}

fn log_meta(ckpt: &mut Checkpoint, log: &StageLog) {
    ckpt.meta.insert(format!("{}.best_epoch", log.stage), log.best_epoch.to_string());
    ckpt.meta.insert(format!("{}.best_val", log.stage), format!("{:e}", log.best_val()));
}

/// Pre-trains encoder, decoder and head on the source datasets with random
/// spatio-temporal masking.
pub fn pretrain(sources: &[(Graph, SignalTensor)], cfg: &TrainConfig) -> Result<StageOutput> {
    if sources.is_empty() {
        return Err(PipelineError::NoData("pre-training needs at least one source dataset".into()));
    }
    let domains = sources.iter().enumerate().map(|(k, (g, s))| source_view(g, s, cfg, &format!("source{k}"))).collect::<Result<Vec<_>>>()?;
    let mut store = init_backbone(cfg, cfg.seed);
    let trainable = |name: &str| is_backbone(name) || is_head(name);
    let spec = StageSpec {
        name: "pretrain".into(),
        plan: PromptPlan::none(cfg.prompt_threshold),
        trainable: &trainable,
        lr: cfg.lr_pretrain,
        epochs: cfg.epochs_pretrain,
        masking: TrainMasking::Random { ratio: cfg.mask_ratio, hidden: vec![] },
        seed: cfg.seed,
    };
    let log = run_stage(&mut store, cfg, &spec, &domains)?;
    let mut checkpoint = Checkpoint::new(Stage::Pretrained, cfg.clone(), store);
    checkpoint.meta.insert("sources".into(), sources.len().to_string());
    log_meta(&mut checkpoint, &log);
    Ok(StageOutput { checkpoint, log })
}

fn bank_init(store: &mut ParamStore, names: &[String], cfg: &TrainConfig, salt: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(salt));
    init_banks(store, names, cfg.num_prompts, cfg.d_hidden, cfg.prompt_init_std, &mut Init { rng: &mut rng });
}

/// Fits the domain prompt banks on the target with the pre-training
/// objective; every other array is frozen.
pub fn fit_domain_prompts(graph: &Graph, signal: &SignalTensor, target: &TargetSpec, pretrained: &Checkpoint, cfg: &TrainConfig) -> Result<StageOutput> {
    pretrained.expect_stage(|s| *s == Stage::Pretrained, "pretrained")?;
    let (view, hidden) = domain_view(graph, signal, target, cfg, None)?;
    let mut store = pretrained.params.clone();
    let names = domain_bank_names(cfg.domain_banks);
    bank_init(&mut store, &names, cfg, 101);
    store.insert(NORM_KEY, view.stats.to_array());
    let trainable = |name: &str| names.iter().any(|n| n == name);
    let spec = StageSpec {
        name: "domain".into(),
        plan: PromptPlan { domain: cfg.domain_banks, task: None, threshold: cfg.prompt_threshold },
        trainable: &trainable,
        lr: cfg.lr_prompt,
        epochs: if names.is_empty() { 0 } else { cfg.epochs_domain },
        masking: TrainMasking::Random { ratio: cfg.mask_ratio, hidden },
        seed: cfg.seed,
    };
    let log = run_stage(&mut store, cfg, &spec, std::slice::from_ref(&view))?;
    let mut checkpoint = Checkpoint::new(Stage::DomainPrompted, cfg.clone(), store);
    checkpoint.meta = pretrained.meta.clone();
    record_target(&mut checkpoint, target, graph.num_nodes());
    log_meta(&mut checkpoint, &log);
    Ok(StageOutput { checkpoint, log })
}

fn task_masking(kind: TaskKind, hidden: Vec<usize>, cfg: &TrainConfig) -> TrainMasking {
    TrainMasking::Task { kind, hidden, pseudo_fraction: cfg.unobserved_fraction, hist: cfg.forecast_hist, pred: cfg.forecast_pred }
}

/// Fits the task prompt banks (and the head when `tune_head`) for one task;
/// backbone and domain prompts stay frozen.
pub fn fit_task_prompts(graph: &Graph, signal: &SignalTensor, target: &TargetSpec, domain: &Checkpoint, kind: TaskKind, cfg: &TrainConfig) -> Result<StageOutput> {
    domain.expect_stage(|s| *s == Stage::DomainPrompted, "domain_prompted")?;
    let (view, hidden) = domain_view(graph, signal, target, cfg, Some(kind))?;
    let mut store = domain.params.clone();
    let names = task_bank_names(kind.name(), cfg.task_banks);
    bank_init(&mut store, &names, cfg, 202 + kind as u64);
    let tune_head = cfg.tune_head;
    let trainable = |name: &str| names.iter().any(|n| n == name) || (tune_head && is_head(name));
    let spec = StageSpec {
        name: format!("task.{kind}"),
        plan: PromptPlan { domain: cfg.domain_banks, task: Some((kind.name().into(), cfg.task_banks)), threshold: cfg.prompt_threshold },
        trainable: &trainable,
        lr: cfg.lr_prompt,
        epochs: if names.is_empty() && !tune_head { 0 } else { cfg.epochs_task },
        masking: task_masking(kind, hidden, cfg),
        seed: cfg.seed,
    };
    let log = run_stage(&mut store, cfg, &spec, std::slice::from_ref(&view))?;
    let mut checkpoint = Checkpoint::new(Stage::TaskPrompted(kind.name().into()), cfg.clone(), store);
    checkpoint.meta = domain.meta.clone();
    log_meta(&mut checkpoint, &log);
    Ok(StageOutput { checkpoint, log })
}

/// Ablation: tune every backbone and head array on the task, no prompts.
pub fn finetune(graph: &Graph, signal: &SignalTensor, target: &TargetSpec, pretrained: &Checkpoint, kind: TaskKind, cfg: &TrainConfig) -> Result<StageOutput> {
    pretrained.expect_stage(|s| *s == Stage::Pretrained, "pretrained")?;
    let (view, hidden) = domain_view(graph, signal, target, cfg, Some(kind))?;
    let mut store = pretrained.params.clone();
    store.insert(NORM_KEY, view.stats.to_array());
    let trainable = |name: &str| is_backbone(name) || is_head(name);
    let spec = StageSpec {
        name: format!("finetune.{kind}"),
        plan: PromptPlan::none(cfg.prompt_threshold),
        trainable: &trainable,
        lr: cfg.lr_finetune,
        epochs: cfg.epochs_task,
        masking: task_masking(kind, hidden, cfg),
        seed: cfg.seed,
    };
    let log = run_stage(&mut store, cfg, &spec, std::slice::from_ref(&view))?;
    let mut checkpoint = Checkpoint::new(Stage::TaskPrompted(kind.name().into()), cfg.clone(), store);
    checkpoint.meta = pretrained.meta.clone();
    checkpoint.meta.insert("variant".into(), "finetune".into());
    record_target(&mut checkpoint, target, graph.num_nodes());
    log_meta(&mut checkpoint, &log);
    Ok(StageOutput { checkpoint, log })
}

/// Prompt banks a checkpoint carries for `task`.
pub fn plan_for(ckpt: &Checkpoint, task: Option<TaskKind>) -> PromptPlan {
    let cfg = &ckpt.config;
    let has = |names: &[String]| !names.is_empty() && names.iter().all(|n| ckpt.params.contains(n));
    let domain = if has(&domain_bank_names(cfg.domain_banks)) { cfg.domain_banks } else { BankMode::Off };
    let task = task.and_then(|k| has(&task_bank_names(k.name(), cfg.task_banks)).then(|| (k.name().to_string(), cfg.task_banks)));
    PromptPlan { domain, task, threshold: cfg.prompt_threshold }
}

/// Predicted (or true) patches at a mask's evaluation cells, raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub cells: Vec<(usize, usize)>,
    /// `[cell][step within patch][channel]`
    pub values: Array3<f64>,
}

/// Raw values of `window` at `cells`, in the layout of [`Prediction`].
pub fn truth_at(window: &SignalTensor, cells: &[(usize, usize)], patch_len: usize) -> Prediction {
    let dx = window.num_channels();
    let values = Array3::from_shape_fn((cells.len(), patch_len, dx), |(k, s, c)| {
        let (i, t) = cells[k];
        window.values[[i, t * patch_len + s, c]]
    });
    Prediction { cells: cells.to_vec(), values }
}

/// Runs the model on one raw window and returns de-normalised predictions at
/// the evaluation cells of `mask`.
pub fn predict_window(store: &ParamStore, cfg: &TrainConfig, plan: &PromptPlan, graph: &Graph, window: &SignalTensor, stats: &NormStats, mask: &MaskSpec) -> Result<Prediction> {
    if window.num_steps() != cfg.window_len() {
        return Err(PipelineError::Template(format!("window has {} steps, expected {}", window.num_steps(), cfg.window_len())));
    }
    let patches = patchify(&zscore(window, stats)?, cfg.patch_len)?;
    let structure = GraphStructure::new(graph, cfg.max_hops);
    let mut tape = Tape::new();
    let mut p = Binder::frozen(store);
    let out = forward(&mut tape, &mut p, cfg, &Sample { patches: &patches, structure: &structure, mask }, plan)?;
    let pred = tape.value(out.pred);
    let cells = mask.eval_cells();
    let (l, dx) = (cfg.patch_len, cfg.num_channels);
    let mut values = Array3::zeros((cells.len(), l, dx));
    for (k, &(i, t)) in cells.iter().enumerate() {
        let row = pred.row(i * cfg.num_patches + t);
        for c in 0..dx {
            for s in 0..l {
                values[[k, s, c]] = row[c * l + s];
            }
        }
    }
    // back to raw units through the same path as the inputs
    let as_signal = SignalTensor { values, start_epoch: 0, interval: 1, channel_names: window.channel_names.clone() };
    let raw = unzscore(&as_signal, stats)?;
    Ok(Prediction { cells, values: raw.values })
}

/// Inference from a checkpoint. For transductive checkpoints the graph must
/// be the training graph; inductive ones accept graphs with new nodes.
pub fn predict(ckpt: &Checkpoint, graph: &Graph, window: &SignalTensor, template: &TaskTemplate) -> Result<Prediction> {
    let cfg = &ckpt.config;
    let n = graph.num_nodes();
    if ckpt.meta.get("setting").map(String::as_str) == Some("transductive") {
        if let Some(expected) = ckpt.meta.get("target_nodes").and_then(|v| v.parse::<usize>().ok()) {
            if expected != n {
                return Err(PipelineError::Template(format!("transductive checkpoint trained on {expected} nodes, graph has {n}")));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mask = super::task_mask(template, n, cfg.num_patches, &mut rng)?;
    let stats = ckpt.params.get(NORM_KEY).map(NormStats::from_array).unwrap_or_else(|| NormStats::identity(cfg.num_channels));
    predict_window(&ckpt.params, cfg, &plan_for(ckpt, template.kind()), graph, window, &stats, &mask)
}

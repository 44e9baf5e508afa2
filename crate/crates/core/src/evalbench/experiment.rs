//! The desk-scale transfer experiment: generate a shifted benchmark, run the
//! three stages per seed, and score every method on the held-out test days.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{baseline_ha, BaselineMethod, baseline_knn, baseline_mean, distribution_distance, generate_synthetic, metrics, EvalError, Result, SynthSpec};
use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{BankMode, TrainConfig};
use crate::data::{patchify, zscore, Graph, MaskSpec, NormStats, SignalTensor};
use crate::model::{forward, is_head, PromptPlan, Sample};
use crate::params::{Binder, ParamStore};
use crate::pipeline::{
    finetune, fit_domain_prompts, fit_task_prompts, plan_for, predict_window, pretrain, target_bounds, target_stats, task_mask, truth_at, Prediction, Setting,
    StageLog, StageOutput, TargetSpec, TaskKind, TaskTemplate,
};
use crate::prompting::{domain_bank_names, task_bank_names};
use crate::structure::GraphStructure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ablation {
    /// Pretrained backbone with target statistics, no prompts.
    Zero,
    /// Every backbone and head array tuned on the task.
    FineTune,
    /// One shared domain bank instead of spatial and temporal ones.
    SingleDomainBank,
    /// One shared task bank instead of masked and unmasked ones.
    SingleTaskBank,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Zero, Ablation::FineTune, Ablation::SingleDomainBank, Ablation::SingleTaskBank];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::FineTune => "ft",
            Self::SingleDomainBank => "sdp",
            Self::SingleTaskBank => "stp",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL.into_iter().find(|a| a.tag() == s).ok_or_else(|| format!("unknown ablation `{s}` (zero|ft|sdp|stp)"))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub synth: SynthSpec,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskKind>,
    pub ablations: Vec<Ablation>,
    /// Setting of the spatial tasks (and of the domain stage).
    pub setting: Setting,
    /// Test window stride in patches; 0 means one window length.
    pub test_stride: usize,
    pub dump_embeddings: bool,
}

impl ExperimentSpec {
    /// The default benchmark at the desk profile, three seeds.
    pub fn desk() -> Self {
        Self {
            synth: SynthSpec::default(),
            config: TrainConfig::desk(),
            seeds: vec![0, 1, 2],
            tasks: TaskKind::ALL.to_vec(),
            ablations: vec![Ablation::Zero],
            setting: Setting::Transductive,
            test_stride: 0,
            dump_embeddings: true,
        }
    }
}

/// One method's test score on one task for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub task: String,
    pub method: String,
    pub mae: f64,
    pub rmse: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    /// Forecasting MAE per step ahead, by method.
    pub horizons: BTreeMap<String, Vec<f64>>,
    pub logs: Vec<StageLog>,
    pub param_counts: BTreeMap<String, usize>,
    /// Stage or method → failure message.
    pub errors: BTreeMap<String, String>,
    /// `(variant, rows node-major over the test window's patches)`.
    pub embeddings: Vec<(String, Array2<f64>)>,
    pub distance: f64,
    /// No target step at or after the training split's end reached a training batch.
    pub isolated: bool,
}

/// Non-overlapping (by default) windows of `len` steps from `start` on.
pub fn test_windows(signal: &SignalTensor, start: usize, len: usize, stride: usize) -> Vec<(usize, SignalTensor)> {
    let stride = if stride == 0 { len } else { stride };
    let mut out = Vec::new();
    let mut s = start;
    while s + len <= signal.num_steps() {
        out.push((s, signal.slice_steps(s, s + len)));
        s += stride;
    }
    out
}

fn template(kind: TaskKind, unobserved: &[usize], cfg: &TrainConfig, setting: Setting) -> TaskTemplate {
    match kind {
        TaskKind::Forecast => TaskTemplate::Forecast { hist: cfg.forecast_hist, pred: cfg.forecast_pred },
        TaskKind::Kriging => TaskTemplate::Kriging { unobserved: unobserved.to_vec(), setting },
        TaskKind::Extrapolation => TaskTemplate::Extrapolation { unobserved: unobserved.to_vec(), hist: cfg.forecast_hist, pred: cfg.forecast_pred },
    }
}

/// Pooled scores over windows plus the per-step-ahead MAE for cells past `hist`.
fn score(pairs: &[(Prediction, Prediction)], hist: usize, patch_len: usize) -> Result<TaskScore> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut hsum: Vec<f64> = Vec::new();
    let mut hcount: Vec<usize> = Vec::new();
    let mut cells = 0;
    for (p, t) in pairs {
        cells += p.cells.len();
        for (k, &(_, patch)) in p.cells.iter().enumerate() {
            for s in 0..patch_len {
                for c in 0..p.values.dim().2 {
                    let (a, b) = (p.values[[k, s, c]], t.values[[k, s, c]]);
                    pred.push(a);
                    truth.push(b);
                    if patch >= hist {
                        let h = (patch - hist) * patch_len + s;
                        if hsum.len() <= h {
                            hsum.resize(h + 1, 0.0);
                            hcount.resize(h + 1, 0);
                        }
                        hsum[h] += (a - b).abs();
                        hcount[h] += 1;
                    }
                }
            }
        }
    }
    let (mae, rmse) = metrics(&pred, &truth)?;
    let horizon = hsum.iter().zip(&hcount).map(|(s, &c)| s / c.max(1) as f64).collect();
    Ok(TaskScore { mae, rmse, cells, horizon })
}

/// Encoder output for a fully visible window.
pub fn encoder_embeddings(store: &ParamStore, cfg: &TrainConfig, plan: &PromptPlan, graph: &Graph, window: &SignalTensor, stats: &NormStats) -> Result<Array2<f64>> {
    let patches = patchify(&zscore(window, stats)?, cfg.patch_len)?;
    let structure = GraphStructure::new(graph, cfg.max_hops);
    let mask = MaskSpec::empty(graph.num_nodes(), cfg.num_patches);
    let mut tape = Tape::new();
    let mut p = Binder::frozen(store);
    let out = forward(&mut tape, &mut p, cfg, &Sample { patches: &patches, structure: &structure, mask: &mask }, plan).map_err(crate::pipeline::PipelineError::from)?;
    Ok(tape.value(out.encoded).clone())
}

/// Test scores of one method on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScore {
    pub mae: f64,
    pub rmse: f64,
    pub cells: usize,
    /// Forecasting MAE per step ahead (empty for spatial tasks).
    pub horizon: Vec<f64>,
}

/// The test segment of a target as one task sees it: windows after the
/// validation days, each with a fixed task mask.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub kind: TaskKind,
    pub windows: Vec<(usize, SignalTensor)>,
    pub masks: Vec<MaskSpec>,
    pub truths: Vec<Prediction>,
    pub stats: NormStats,
    /// Everything before the test segment.
    pub history: SignalTensor,
    pub train_end: usize,
}

impl TestSet {
    pub fn new(signal: &SignalTensor, target: &TargetSpec, cfg: &TrainConfig, kind: TaskKind, stride_patches: usize, mask_seed: u64) -> Result<Self> {
        let (train_end, val_end) = target_bounds(signal, cfg);
        let stats = target_stats(signal, target, cfg)?;
        let windows = test_windows(signal, val_end, cfg.window_len(), stride_patches * cfg.patch_len);
        if windows.is_empty() {
            return Err(EvalError::Invalid(format!("no {}-step test window after step {val_end}", cfg.window_len())));
        }
        let tpl = template(kind, &target.unobserved, cfg, target.setting);
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let masks = windows.iter().map(|_| task_mask(&tpl, signal.num_nodes(), cfg.num_patches, &mut rng)).collect::<crate::pipeline::Result<Vec<_>>>()?;
        let truths = windows.iter().zip(&masks).map(|((_, w), m)| truth_at(w, &m.eval_cells(), cfg.patch_len)).collect();
        Ok(Self { kind, windows, masks, truths, stats, history: signal.slice_steps(0, val_end), train_end })
    }

    fn score(&self, preds: Vec<Prediction>, cfg: &TrainConfig) -> Result<TaskScore> {
        let pairs: Vec<_> = preds.into_iter().zip(self.truths.iter().cloned()).collect();
        let hist = if self.kind == TaskKind::Kriging { cfg.num_patches } else { cfg.forecast_hist };
        score(&pairs, hist, cfg.patch_len)
    }

    pub fn score_model(&self, store: &ParamStore, cfg: &TrainConfig, plan: &PromptPlan, graph: &Graph) -> Result<TaskScore> {
        let preds = self.windows.iter().zip(&self.masks).map(|((_, w), m)| predict_window(store, cfg, plan, graph, w, &self.stats, m)).collect::<crate::pipeline::Result<Vec<_>>>()?;
        self.score(preds, cfg)
    }

    /// HA is only defined for forecasting: the other tasks' nodes have no history.
    pub fn score_baseline(&self, method: BaselineMethod, graph: &Graph, cfg: &TrainConfig) -> Result<TaskScore> {
        let l = cfg.patch_len;
        let preds = match (method, self.kind) {
            (BaselineMethod::Ha, TaskKind::Forecast) => self.windows.iter().zip(&self.masks).map(|((_, w), m)| baseline_ha(&self.history, w, &m.eval_cells(), l)).collect(),
            (BaselineMethod::Ha, k) => return Err(EvalError::Invalid(format!("HA needs the target nodes' history, which {k} hides"))),
            (BaselineMethod::Mean, _) => self.windows.iter().zip(&self.masks).map(|((_, w), m)| baseline_mean(w, m, l)).collect(),
            (BaselineMethod::Knn, _) => self.windows.iter().zip(&self.masks).map(|((_, w), m)| baseline_knn(w, graph, m, l, cfg.knn_k)).collect(),
        };
        self.score(preds, cfg)
    }
}

fn record(out: &mut RunOutcome, kind: TaskKind, method: &str, scored: Result<TaskScore>) {
    let task = kind.name().to_string();
    match scored {
        Ok(s) => {
            if kind == TaskKind::Forecast {
                out.horizons.insert(method.to_string(), s.horizon);
            }
            out.rows.push(MetricRow { seed: out.seed, task, method: method.to_string(), mae: s.mae, rmse: s.rmse, cells: s.cells });
        }
        Err(e) => {
            out.errors.insert(format!("{task}.{method}"), e.to_string());
        }
    }
}

fn bank_count(ckpt: &Checkpoint, names: &[String], head: bool) -> usize {
    ckpt.params.count(|n| names.iter().any(|b| b == n) || (head && is_head(n)))
}

/// The head is always tuned for extrapolation.
pub fn task_config(cfg: &TrainConfig, kind: TaskKind) -> TrainConfig {
    TrainConfig { tune_head: cfg.tune_head || kind == TaskKind::Extrapolation, ..cfg.clone() }
}

fn stage<T>(out: &mut RunOutcome, name: &str, r: crate::pipeline::Result<T>) -> Option<T> {
    r.map_err(|e| out.errors.insert(name.to_string(), e.to_string())).ok()
}

fn keep(out: &mut RunOutcome, s: StageOutput) -> Checkpoint {
    out.logs.push(s.log);
    s.checkpoint
}

/// Runs every stage and method for one seed. Failures are recorded in the
/// outcome rather than returned, so a partial report can still be written.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> RunOutcome {
    let mut out = RunOutcome { seed, isolated: true, ..RunOutcome::default() };
    let synth = SynthSpec { seed, ..spec.synth.clone() };
    let data = match generate_synthetic(&synth) {
        Ok(d) => d,
        Err(e) => {
            out.errors.insert("generate".into(), e.to_string());
            return out;
        }
    };
    let (sources, rest) = data.split_at(synth.num_sources);
    let (graph, signal) = (&rest[0].0, &rest[0].1);
    let source_signals: Vec<SignalTensor> = sources.iter().map(|(_, s)| s.clone()).collect();
    out.distance = distribution_distance(&source_signals, signal);

    let cfg = TrainConfig { seed, ..spec.config.clone() };
    let tspec = TargetSpec::from_config(graph.num_nodes(), &cfg, spec.setting);
    let mut tests = Vec::new();
    for &kind in &spec.tasks {
        match TestSet::new(signal, &tspec, &cfg, kind, spec.test_stride, seed) {
            Ok(t) => tests.push(t),
            Err(e) => {
                out.errors.insert(format!("{kind}.test_set"), e.to_string());
            }
        }
    }
    let (train_end, _) = target_bounds(signal, &cfg);

    let Some(pre) = stage(&mut out, "pretrain", pretrain(sources, &cfg)).map(|s| keep(&mut out, s)) else { return out };
    let dom = stage(&mut out, "domain", fit_domain_prompts(graph, signal, &tspec, &pre, &cfg)).map(|s| keep(&mut out, s));
    if let Some(d) = &dom {
        out.param_counts.insert("domain_stage".into(), bank_count(d, &domain_bank_names(cfg.domain_banks), false));
    }
    let wants = |a: Ablation| spec.ablations.contains(&a);
    let sdp = if wants(Ablation::SingleDomainBank) {
        let c = TrainConfig { domain_banks: BankMode::Single, ..cfg.clone() };
        stage(&mut out, "domain.sdp", fit_domain_prompts(graph, signal, &tspec, &pre, &c)).map(|s| keep(&mut out, s))
    } else {
        None
    };

    if let (true, Some(t0)) = (spec.dump_embeddings, tests.first()) {
        let w0 = &t0.windows[0].1;
        let mut variants = vec![("pretrained", &pre, PromptPlan::none(cfg.prompt_threshold))];
        if let Some(d) = &dom {
            variants.push(("domain", d, plan_for(d, None)));
        }
        for (name, ckpt, plan) in variants {
            match encoder_embeddings(&ckpt.params, &cfg, &plan, graph, w0, &t0.stats) {
                Ok(e) => out.embeddings.push((name.to_string(), e)),
                Err(e) => {
                    out.errors.insert(format!("embeddings.{name}"), e.to_string());
                }
            }
        }
    }

    for test in &tests {
        let kind = test.kind;
        let tcfg = task_config(&cfg, kind);
        if let Some(d) = &dom {
            if let Some(t) = stage(&mut out, &format!("task.{kind}"), fit_task_prompts(graph, signal, &tspec, d, kind, &tcfg)).map(|s| keep(&mut out, s)) {
                out.param_counts.insert(format!("task_stage.{kind}"), bank_count(&t, &task_bank_names(kind.name(), tcfg.task_banks), tcfg.tune_head));
                let r = test.score_model(&t.params, &tcfg, &plan_for(&t, Some(kind)), graph);
                record(&mut out, kind, "STGP", r);
            }
        }
        // the zero-shot row is always reported: it is the reference for the transfer gain
        let r = test.score_model(&pre.params, &cfg, &PromptPlan::none(cfg.prompt_threshold), graph);
        record(&mut out, kind, "zero", r);
        if let Some(d) = &dom {
            let r = test.score_model(&d.params, &cfg, &plan_for(d, None), graph);
            record(&mut out, kind, "domain", r);
        }
        let baselines: &[BaselineMethod] = if kind == TaskKind::Forecast { &[BaselineMethod::Ha] } else { &[BaselineMethod::Mean, BaselineMethod::Knn] };
        for &b in baselines {
            record(&mut out, kind, &b.to_string(), test.score_baseline(b, graph, &cfg));
        }

        if wants(Ablation::FineTune) {
            if let Some(t) = stage(&mut out, &format!("finetune.{kind}"), finetune(graph, signal, &tspec, &pre, kind, &tcfg)).map(|s| keep(&mut out, s)) {
                let r = test.score_model(&t.params, &tcfg, &PromptPlan::none(cfg.prompt_threshold), graph);
                record(&mut out, kind, "ft", r);
            }
        }
        if let Some(d) = &sdp {
            let c = TrainConfig { domain_banks: BankMode::Single, ..tcfg.clone() };
            if let Some(t) = stage(&mut out, &format!("task.{kind}.sdp"), fit_task_prompts(graph, signal, &tspec, d, kind, &c)).map(|s| keep(&mut out, s)) {
                let r = test.score_model(&t.params, &c, &plan_for(&t, Some(kind)), graph);
                record(&mut out, kind, "sdp", r);
            }
        }
        if let (true, Some(d)) = (wants(Ablation::SingleTaskBank), &dom) {
            let c = TrainConfig { task_banks: BankMode::Single, ..tcfg.clone() };
            if let Some(t) = stage(&mut out, &format!("task.{kind}.stp"), fit_task_prompts(graph, signal, &tspec, d, kind, &c)).map(|s| keep(&mut out, s)) {
                let r = test.score_model(&t.params, &c, &plan_for(&t, Some(kind)), graph);
                record(&mut out, kind, "stp", r);
            }
        }
    }

    // every stage but pre-training sees the target, whose test days start after the validation days
    out.isolated = out.logs.iter().filter(|l| l.stage != "pretrain").all(|l| l.train_ranges.iter().all(|&(_, _, end)| end <= train_end));
    out
}

/// Runs every seed of `spec`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<RunOutcome>> {
    spec.synth.validate()?;
    spec.config.validate().map_err(|e| EvalError::Invalid(e.to_string()))?;
    if spec.seeds.is_empty() {
        return Err(EvalError::Invalid("experiment needs at least one seed".into()));
    }
    Ok(spec.seeds.iter().map(|&s| run_seed(spec, s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn test_windows_do_not_overlap() {
        let s = SignalTensor::new(Array3::zeros((2, 100, 1)), 0, 300, vec!["x".into()]).unwrap();
        let w = test_windows(&s, 10, 30, 0);
        assert_eq!(w.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![10, 40, 70]);
        assert!(w.iter().all(|(_, t)| t.num_steps() == 30));
        assert_eq!(test_windows(&s, 10, 30, 15).len(), 5);
    }

    #[test]
    fn horizon_breakdown() {
        let cells = vec![(0, 2), (1, 3)];
        let p = Prediction { cells: cells.clone(), values: Array3::from_shape_vec((2, 2, 1), vec![1.0, 1.0, 1.0, 1.0]).unwrap() };
        let t = Prediction { cells, values: Array3::from_shape_vec((2, 2, 1), vec![2.0, 3.0, 5.0, 1.0]).unwrap() };
        let s = score(&[(p, t)], 2, 2).unwrap();
        assert_eq!(s.horizon, vec![1.0, 2.0, 4.0, 0.0]);
        assert_eq!(s.mae, 7.0 / 4.0);
        assert_eq!(s.cells, 2);
    }

    #[test]
    fn ablation_tags() {
        for a in Ablation::ALL {
            assert_eq!(a.tag().parse::<Ablation>().unwrap(), a);
        }
        assert!("rp".parse::<Ablation>().is_err());
    }
}

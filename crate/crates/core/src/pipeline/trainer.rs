//! The shared optimisation loop behind every stage.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PipelineError, Result, TrainMasking};
use crate::autograd::Tape;
use crate::config::TrainConfig;
use crate::data::{Graph, MaskSpec, NormStats, PatchSet};
use crate::model::{reconstruction_loss, PromptPlan, Sample};
use crate::optim::{clip_global_norm, AdamW};
use crate::params::{Binder, ParamStore};
use crate::structure::GraphStructure;

/// A normalised, patched window and its first step in the original series.
#[derive(Debug, Clone)]
pub struct Window {
    pub start: usize,
    pub patches: PatchSet,
}

/// One dataset as seen by a stage.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub name: String,
    pub graph: Graph,
    pub structure: GraphStructure,
    pub stats: NormStats,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    /// Positions (in this view) of the original nodes.
    pub node_map: Vec<usize>,
}

impl DomainData {
    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

pub struct StageSpec<'a> {
    pub name: String,
    pub plan: PromptPlan,
    pub trainable: &'a dyn Fn(&str) -> bool,
    pub lr: f64,
    pub epochs: usize,
    pub masking: TrainMasking,
    pub seed: u64,
}

/// What happened during a stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageLog {
    pub stage: String,
    /// Validation loss of the parameters the stage started from.
    pub initial_val: f64,
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    /// 1-based epoch whose parameters were kept; 0 if no epoch ran.
    pub best_epoch: usize,
    pub steps_taken: usize,
    /// `(domain, first step, end step)` of every window used for an update.
    pub train_ranges: Vec<(usize, usize, usize)>,
}

impl StageLog {
    pub fn best_val(&self) -> f64 {
        if self.best_epoch == 0 {
            self.initial_val
        } else {
            self.val_curve[self.best_epoch - 1]
        }
    }
}

fn stage_rng(seed: u64, name: &str, salt: u64) -> ChaCha8Rng {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ h ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Fixed validation masks, one per validation window.
fn validation_masks(spec: &StageSpec<'_>, cfg: &TrainConfig, domains: &[DomainData]) -> Result<Vec<Vec<MaskSpec>>> {
    let mut rng = stage_rng(spec.seed, &spec.name, 1);
    domains.iter().map(|d| d.val.iter().map(|_| spec.masking.draw(d.num_nodes(), cfg.num_patches, &mut rng)).collect()).collect()
}

/// Mean masked MAE over every validation window.
pub fn validation_loss(store: &ParamStore, cfg: &TrainConfig, plan: &PromptPlan, domains: &[DomainData], masks: &[Vec<MaskSpec>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (d, masks) in domains.iter().zip(masks) {
        for (w, mask) in d.val.iter().zip(masks) {
            let mut tape = Tape::new();
            let mut p = Binder::frozen(store);
            let sample = Sample { patches: &w.patches, structure: &d.structure, mask };
            let (loss, _) = reconstruction_loss(&mut tape, &mut p, cfg, &sample, plan)?;
            total += tape.scalar(loss);
            count += 1;
        }
    }
    if count == 0 {
        return Err(PipelineError::NoData("no validation windows".into()));
    }
    Ok(total / count as f64)
}

/// Round-robin batches over domains from per-domain shuffled window orders.
fn epoch_batches(domains: &[DomainData], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let mut queues: Vec<Vec<usize>> = domains
        .iter()
        .map(|d| {
            let mut idx: Vec<usize> = (0..d.train.len()).collect();
            idx.shuffle(rng);
            idx.reverse();
            idx
        })
        .collect();
    let mut out = Vec::new();
    let mut d = 0;
    while queues.iter().any(|q| !q.is_empty()) {
        if !queues[d].is_empty() {
            let take = batch.min(queues[d].len());
            let items = (0..take).map(|_| (d, queues[d].pop().expect("non-empty"))).collect();
            out.push(items);
        }
        d = (d + 1) % domains.len();
    }
    out
}

/// Optimises the parameters selected by `spec.trainable`, keeping the
/// parameters of the epoch with the lowest validation loss.
pub fn run_stage(store: &mut ParamStore, cfg: &TrainConfig, spec: &StageSpec<'_>, domains: &[DomainData]) -> Result<StageLog> {
    if domains.iter().all(|d| d.train.is_empty()) {
        return Err(PipelineError::NoData(format!("{}: no training windows", spec.name)));
    }
    let val_masks = validation_masks(spec, cfg, domains)?;
    let mut log = StageLog { stage: spec.name.clone(), ..StageLog::default() };
    log.initial_val = validation_loss(store, cfg, &spec.plan, domains, &val_masks)?;
    let mut rng = stage_rng(spec.seed, &spec.name, 2);
    let mut opt = AdamW::new(spec.lr, cfg.weight_decay);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=spec.epochs {
        let mut batches = epoch_batches(domains, cfg.batch_size, &mut rng);
        if cfg.max_batches_per_epoch > 0 {
            batches.truncate(cfg.max_batches_per_epoch);
        }
        let mut epoch_loss = 0.0;
        for (b, items) in batches.iter().enumerate() {
            let scale = 1.0 / items.len() as f64;
            let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &(d, w) in items {
                let domain = &domains[d];
                let window = &domain.train[w];
                let mask = spec.masking.draw(domain.num_nodes(), cfg.num_patches, &mut rng)?;
                let mut tape = Tape::new();
                let mut p = Binder::new(store, spec.trainable);
                let sample = Sample { patches: &window.patches, structure: &domain.structure, mask: &mask };
                let (loss, _) = reconstruction_loss(&mut tape, &mut p, cfg, &sample, &spec.plan)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(PipelineError::Diverged { stage: spec.name.clone(), epoch, batch: b, loss: value });
                }
                batch_loss += value * scale;
                tape.backward(loss);
                for (name, g) in p.gradients(&tape) {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.scaled_add(scale, &g),
                        None => {
                            grads.insert(name, g * scale);
                        }
                    }
                }
                log.train_ranges.push((d, window.start, window.start + cfg.window_len()));
            }
            let norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(PipelineError::Diverged { stage: spec.name.clone(), epoch, batch: b, loss: norm });
            }
            opt.step(store, &grads);
            epoch_loss += batch_loss;
        }
        log.train_curve.push(epoch_loss / batches.len().max(1) as f64);
        let val = validation_loss(store, cfg, &spec.plan, domains, &val_masks)?;
        if !val.is_finite() {
            return Err(PipelineError::Diverged { stage: spec.name.clone(), epoch, batch: batches.len(), loss: val });
        }
        log.val_curve.push(val);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, store.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    log.steps_taken = opt.steps_taken();
    if let Some((_, params)) = best {
        *store = params;
    }
    Ok(log)
}

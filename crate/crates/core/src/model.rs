//! The full forward pass: patch embedding, optional domain prompts, the
//! dual-branch encoder, mask-token recovery, optional task prompts and the
//! gated decoder with its head.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::config::{BankMode, TrainConfig};
use crate::data::{DataError, MaskSpec, PatchSet};
use crate::decoder::{decode, init_decoder, recover_full, DecodeContext};
use crate::encoder::{embed_patches, encode, init_encoder, EncodeContext};
use crate::params::{Binder, Init, ParamGroup, ParamStore};
use crate::prompting::{domain_prompt, task_prompt};
use crate::structure::GraphStructure;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("patch position {step} outside the positional table ({covered} positions)")]
    PositionOutOfRange { step: usize, covered: usize },
    #[error("evaluation cell set is empty")]
    EmptyEvalCells,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Fresh encoder, decoder and head parameters for `cfg`.
pub fn init_backbone(cfg: &TrainConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let mut store = ParamStore::new();
    init_encoder(&mut store, cfg, &mut init);
    init_decoder(&mut store, cfg, &mut init);
    store
}

pub fn is_backbone(name: &str) -> bool {
    ParamGroup::of(name) == ParamGroup::Backbone
}

pub fn is_head(name: &str) -> bool {
    ParamGroup::of(name) == ParamGroup::Head
}

/// Which prompt banks participate in a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPlan {
    pub domain: BankMode,
    /// Task name and bank mode; `None` skips task prompting.
    pub task: Option<(String, BankMode)>,
    pub threshold: f64,
}

impl PromptPlan {
    pub fn none(threshold: f64) -> Self {
        Self { domain: BankMode::Off, task: None, threshold }
    }
}

/// One model input: a patched window on a graph plus its mask.
pub struct Sample<'a> {
    pub patches: &'a PatchSet,
    pub structure: &'a GraphStructure,
    pub mask: &'a MaskSpec,
}

pub struct ForwardOutput {
    /// `N·T_p × L·d_x` predictions, node-major.
    pub pred: Var,
    /// Fused encoder output over the unmasked grid.
    pub encoded: Var,
}

/// Node-major `N·T_p × width` view of a patch set.
pub fn patch_rows(patches: &PatchSet) -> Array2<f64> {
    let (n, t, w) = patches.values.dim();
    patches.values.to_shape((n * t, w)).expect("contiguous patches").to_owned()
}

pub fn forward(tape: &mut Tape, p: &mut Binder<'_>, cfg: &TrainConfig, sample: &Sample<'_>, plan: &PromptPlan) -> Result<ForwardOutput, ModelError> {
    let (patches, mask) = (sample.patches, sample.mask);
    let (n, t_p, width) = patches.values.dim();
    if width != cfg.patch_len * cfg.num_channels {
        return Err(ModelError::Shape(format!("patch width {width}, config expects {}", cfg.patch_len * cfg.num_channels)));
    }
    if n != mask.num_nodes || t_p != mask.num_patches || n != sample.structure.num_nodes {
        return Err(ModelError::Shape(format!(
            "patches {n}x{t_p}, mask {}x{}, graph {}",
            mask.num_nodes, mask.num_patches, sample.structure.num_nodes
        )));
    }
    mask.validate()?;
    let node_map = mask.unmasked_nodes();
    let step_map = mask.unmasked_steps();
    let t_u = step_map.len();
    let block = patches.values.select(Axis(0), &node_map).select(Axis(1), &step_map);
    let block = block.to_shape((node_map.len() * t_u, width)).expect("contiguous block").to_owned();
    let steps: Vec<usize> = node_map.iter().flat_map(|_| step_map.iter().copied()).collect();
    let s_pe = embed_patches(tape, p, block, &steps)?;
    let (s_spatial, s_temporal) = domain_prompt(tape, p, s_pe, plan.domain, plan.threshold);
    let tod: Vec<usize> = step_map.iter().map(|&t| patches.tod_index[t]).collect();
    let dow: Vec<usize> = step_map.iter().map(|&t| patches.dow_index[t]).collect();
    let ctx = EncodeContext { structure: sample.structure, node_map: &node_map, tod: &tod, dow: &dow };
    let encoded = encode(tape, p, s_spatial, s_temporal, &ctx, cfg);
    let full = recover_full(tape, p, encoded, mask);
    let (h_star, add_pe) = match &plan.task {
        Some((task, mode)) => (task_prompt(tape, p, full, mask, task, *mode, plan.threshold), false),
        None => (full, true),
    };
    let dctx = DecodeContext {
        adjacency: Rc::new(sample.structure.propagation.clone()),
        num_patches: t_p,
        tod: patches.tod_index.clone(),
        dow: patches.dow_index.clone(),
        add_pe,
    };
    let pred = decode(tape, p, h_star, &dctx, cfg);
    Ok(ForwardOutput { pred, encoded })
}

/// Forward pass plus masked MAE against the sample's own patches.
pub fn reconstruction_loss(tape: &mut Tape, p: &mut Binder<'_>, cfg: &TrainConfig, sample: &Sample<'_>, plan: &PromptPlan) -> Result<(Var, ForwardOutput), ModelError> {
    let out = forward(tape, p, cfg, sample, plan)?;
    let target = Rc::new(patch_rows(sample.patches));
    let loss = crate::decoder::masked_mae(tape, out.pred, target, sample.mask)?;
    Ok((loss, out))
}

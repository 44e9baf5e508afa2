//! Thresholded prompt banks and their placement on encoder inputs (domain
//! prompts) and decoder inputs (task prompts).

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{sigmoid, Tape, Var};
use crate::config::BankMode;
use crate::data::MaskSpec;
use crate::decoder::add_decoder_pe;
use crate::params::{Binder, Init, ParamStore};

/// A bank of `N_p` prompt vectors with a fixed similarity threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub prompts: Array2<f64>,
    pub threshold: f64,
}

impl PromptBank {
    pub fn new(prompts: Array2<f64>, threshold: f64) -> Self {
        assert!(prompts.nrows() >= 1, "a prompt bank needs at least one prompt");
        assert!((0.0..=1.0).contains(&threshold), "threshold must lie in [0, 1]");
        Self { prompts, threshold }
    }

    /// Per-row prompt weights: `σ(h·p_j)` if above the threshold, else 0.
    pub fn alphas(&self, h: &Array2<f64>) -> Array2<f64> {
        h.dot(&self.prompts.t()).mapv(|s| {
            let a = sigmoid(s);
            if a > self.threshold {
                a
            } else {
                0.0
            }
        })
    }

    /// `h + Σ_j α_j p_j`, row by row.
    pub fn apply(&self, h: &Array2<f64>) -> Array2<f64> {
        h + &self.alphas(h).dot(&self.prompts)
    }
}

pub const DOMAIN_SPATIAL: &str = "domain.spatial";
pub const DOMAIN_TEMPORAL: &str = "domain.temporal";
pub const DOMAIN_SHARED: &str = "domain.shared";

pub fn task_bank_names(task: &str, mode: BankMode) -> Vec<String> {
    match mode {
        BankMode::Separate => vec![format!("task.{task}.masked"), format!("task.{task}.unmasked")],
        BankMode::Single => vec![format!("task.{task}.shared")],
        BankMode::Off => vec![],
    }
}

pub fn domain_bank_names(mode: BankMode) -> Vec<String> {
    match mode {
        BankMode::Separate => vec![DOMAIN_SPATIAL.into(), DOMAIN_TEMPORAL.into()],
        BankMode::Single => vec![DOMAIN_SHARED.into()],
        BankMode::Off => vec![],
    }
}

/// Adds freshly initialised banks under `names`.
pub fn init_banks<R: Rng>(store: &mut ParamStore, names: &[String], num_prompts: usize, d_hidden: usize, std: f64, init: &mut Init<'_, R>) {
    for name in names {
        store.insert(name.clone(), init.normal(num_prompts, d_hidden, std));
    }
}

fn bank(tape: &mut Tape, p: &mut Binder<'_>, name: &str, h: Var, threshold: f64) -> Var {
    let bank = p.param(tape, name);
    tape.prompt(h, bank, threshold)
}

/// Domain prompting of the position-embedded encoder input. Returns the
/// spatial-branch and temporal-branch inputs.
pub fn domain_prompt(tape: &mut Tape, p: &mut Binder<'_>, s_pe: Var, mode: BankMode, threshold: f64) -> (Var, Var) {
    match mode {
        BankMode::Separate => (bank(tape, p, DOMAIN_SPATIAL, s_pe, threshold), bank(tape, p, DOMAIN_TEMPORAL, s_pe, threshold)),
        BankMode::Single => {
            let s = bank(tape, p, DOMAIN_SHARED, s_pe, threshold);
            (s, s)
        }
        BankMode::Off => (s_pe, s_pe),
    }
}

/// Task prompting of the recovered full grid. The decoder positional table is
/// added first; masked cells go through the masked bank and all other cells
/// through the unmasked bank.
pub fn task_prompt(tape: &mut Tape, p: &mut Binder<'_>, h: Var, mask: &MaskSpec, task: &str, mode: BankMode, threshold: f64) -> Var {
    let h = add_decoder_pe(tape, p, h, mask.num_patches);
    match mode {
        BankMode::Off => h,
        BankMode::Single => bank(tape, p, &format!("task.{task}.shared"), h, threshold),
        BankMode::Separate => {
            let t_p = mask.num_patches;
            let rows = mask.num_nodes * t_p;
            let (masked, unmasked): (Vec<usize>, Vec<usize>) = (0..rows).partition(|&r| mask.is_masked(r / t_p, r % t_p));
            let mut parts: Vec<(Var, &[usize])> = Vec::new();
            for (suffix, idx) in [("masked", &masked), ("unmasked", &unmasked)] {
                if !idx.is_empty() {
                    let sub = tape.gather(h, idx);
                    parts.push((bank(tape, p, &format!("task.{task}.{suffix}"), sub, threshold), idx));
                }
            }
            if parts.len() == 1 {
                return parts[0].0;
            }
            // restore the original row order
            let joined = tape.concat_rows(parts[0].0, parts[1].0);
            let mut order = vec![None; rows];
            for (pos, &r) in parts[0].1.iter().chain(parts[1].1).enumerate() {
                order[r] = Some(pos);
            }
            tape.select_rows(joined, Rc::new(order))
        }
    }
}

/// Trainable scalar count of a prompting stage.
pub fn stage_parameter_count(mode: BankMode, num_prompts: usize, d_hidden: usize) -> usize {
    let banks = match mode {
        BankMode::Separate => 2,
        BankMode::Single => 1,
        BankMode::Off => 0,
    };
    banks * num_prompts * d_hidden
}

//! Mask-token recovery, gated graph/temporal decoder layers, prediction head
//! and the masked reconstruction loss.
//!
//! Full-grid tensors are node-major: row `i * T_p + t` is node `i`, patch `t`.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::TrainConfig;
use crate::data::MaskSpec;
use crate::encoder::{gated_fuse, init_gate, linear, lookup, DAYS_PER_WEEK, HOURS_PER_DAY};
use crate::model::ModelError;
use crate::params::{zeros_row, Binder, Init, ParamStore};

pub fn init_decoder<R: Rng>(store: &mut ParamStore, cfg: &TrainConfig, init: &mut Init<'_, R>) {
    let (d, dd) = (cfg.d_hidden, cfg.d_dec);
    store.insert("decoder.mask_token", init.normal(1, d, 0.1));
    store.insert("decoder.pe", init.normal(cfg.num_patches, d, 0.1));
    store.insert("decoder.tod", init.normal(HOURS_PER_DAY, d, 0.1));
    store.insert("decoder.dow", init.normal(DAYS_PER_WEEK, d, 0.1));
    store.insert("decoder.entry.w", init.linear(d, dd));
    store.insert("decoder.entry.b", zeros_row(dd));
    for l in 0..cfg.dec_layers {
        let pre = format!("decoder.layer.{l}");
        for o in 0..cfg.kernel {
            store.insert(format!("{pre}.tcn.w{o}"), init.normal(dd, dd, 1.0 / ((dd * cfg.kernel) as f64).sqrt()));
        }
        store.insert(format!("{pre}.tcn.b"), zeros_row(dd));
        store.insert(format!("{pre}.gcn.wg"), init.linear(dd, dd));
        store.insert(format!("{pre}.gcn.wself"), init.linear(dd, dd));
        init_gate(store, init, &format!("{pre}.gate"), dd);
        store.insert(format!("{pre}.skip.w"), init.linear(dd, dd));
        store.insert(format!("{pre}.skip.b"), zeros_row(dd));
    }
    let out = cfg.patch_len * cfg.num_channels;
    store.insert("head.w1", init.linear(dd, cfg.head_hidden));
    store.insert("head.b1", zeros_row(cfg.head_hidden));
    store.insert("head.w2", init.linear(cfg.head_hidden, cfg.head_hidden2));
    store.insert("head.b2", zeros_row(cfg.head_hidden2));
    store.insert("head.w3", init.linear(cfg.head_hidden2, out));
    store.insert("head.b3", zeros_row(out));
}

/// Row routing for [`recover_full`]: `Some(r)` copies encoder row `r`,
/// `None` takes the mask token.
pub fn recovery_map(mask: &MaskSpec) -> Vec<Option<usize>> {
    let nodes = mask.unmasked_nodes();
    let steps = mask.unmasked_steps();
    let mut node_pos = vec![None; mask.num_nodes];
    for (a, &i) in nodes.iter().enumerate() {
        node_pos[i] = Some(a);
    }
    let mut step_pos = vec![None; mask.num_patches];
    for (b, &t) in steps.iter().enumerate() {
        step_pos[t] = Some(b);
    }
    let t_u = steps.len();
    let mut out = Vec::with_capacity(mask.num_nodes * mask.num_patches);
    for i in 0..mask.num_nodes {
        for t in 0..mask.num_patches {
            out.push(match (node_pos[i], step_pos[t]) {
                (Some(a), Some(b)) => Some(a * t_u + b),
                _ => None,
            });
        }
    }
    out
}

/// Scatters encoder rows back onto the full grid, filling masked cells with
/// the shared mask token. Unmasked rows are copied bit for bit.
pub fn recover_full(tape: &mut Tape, p: &mut Binder<'_>, h_enc: Var, mask: &MaskSpec) -> Var {
    let rows = tape.shape(h_enc).0;
    assert_eq!(rows, mask.num_nodes_unmasked() * mask.num_steps_unmasked(), "recover_full: encoder rows");
    let token = p.param(tape, "decoder.mask_token");
    let stacked = tape.concat_rows(h_enc, token);
    let map = recovery_map(mask).into_iter().map(|r| Some(r.unwrap_or(rows))).collect();
    tape.select_rows(stacked, Rc::new(map))
}

/// Adds the decoder positional table, broadcast over nodes.
pub fn add_decoder_pe(tape: &mut Tape, p: &mut Binder<'_>, h: Var, num_patches: usize) -> Var {
    let n = tape.shape(h).0 / num_patches;
    let idx: Vec<usize> = (0..n).flat_map(|_| 0..num_patches).collect();
    let pe = lookup(tape, p, "decoder.pe", &idx);
    tape.add(h, pe)
}

/// Non-causal temporal convolution with zero padding, per node:
/// `out[t] = b + Σ_o x[t + o − k/2] · W_o`.
fn tcn(tape: &mut Tape, p: &mut Binder<'_>, prefix: &str, h: Var, num_patches: usize, kernel: usize) -> Var {
    let rows = tape.shape(h).0;
    let half = (kernel / 2) as isize;
    let mut acc: Option<Var> = None;
    for o in 0..kernel {
        let shift = o as isize - half;
        let map: Vec<Option<usize>> = (0..rows)
            .map(|r| {
                let t = (r % num_patches) as isize + shift;
                (0..num_patches as isize).contains(&t).then(|| (r as isize + shift) as usize)
            })
            .collect();
        let shifted = if shift == 0 { h } else { tape.select_rows(h, Rc::new(map)) };
        let w = p.param(tape, &format!("{prefix}.w{o}"));
        let term = tape.matmul(shifted, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let b = p.param(tape, &format!("{prefix}.b"));
    tape.add_row(acc.expect("kernel >= 1"), b)
}

/// One gated layer: `Z = σ(TCN(H)·W1 + GCN(H,A)·W2 + b)`,
/// `H' = Z ⊙ TCN(H) + (1 − Z) ⊙ GCN(H,A) + H` with `GCN(H,A) = A·H·Wg + H·Wself`.
pub fn gated_st_layer(tape: &mut Tape, p: &mut Binder<'_>, layer: usize, h: Var, adjacency: Rc<Array2<f64>>, num_patches: usize, kernel: usize) -> Var {
    let pre = format!("decoder.layer.{layer}");
    let t = tcn(tape, p, &format!("{pre}.tcn"), h, num_patches, kernel);
    let mixed = tape.graph_mix(h, adjacency, num_patches);
    let wg = p.param(tape, &format!("{pre}.gcn.wg"));
    let ws = p.param(tape, &format!("{pre}.gcn.wself"));
    let g1 = tape.matmul(mixed, wg);
    let g2 = tape.matmul(h, ws);
    let g = tape.add(g1, g2);
    let (fused, _) = gated_fuse(tape, p, &format!("{pre}.gate"), t, g);
    tape.add(fused, h)
}

/// Inputs of [`decode`] besides the prompted representation.
pub struct DecodeContext {
    /// Propagation matrix used by every graph convolution.
    pub adjacency: Rc<Array2<f64>>,
    pub num_patches: usize,
    /// Calendar index of each patch position.
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
    /// Add the decoder positional table here (task prompting has not).
    pub add_pe: bool,
}

/// Decoder stack and prediction head. Returns one row of `L·d_x` values per
/// full-grid cell.
pub fn decode(tape: &mut Tape, p: &mut Binder<'_>, h_star: Var, ctx: &DecodeContext, cfg: &TrainConfig) -> Var {
    let t_p = ctx.num_patches;
    let n = tape.shape(h_star).0 / t_p;
    assert_eq!(n * t_p, tape.shape(h_star).0, "decode: rows");
    let mut h = if ctx.add_pe { add_decoder_pe(tape, p, h_star, t_p) } else { h_star };
    let tod: Vec<usize> = (0..n).flat_map(|_| ctx.tod.iter().copied()).collect();
    let dow: Vec<usize> = (0..n).flat_map(|_| ctx.dow.iter().copied()).collect();
    let te = lookup(tape, p, "decoder.tod", &tod);
    let de = lookup(tape, p, "decoder.dow", &dow);
    h = tape.add(h, te);
    h = tape.add(h, de);
    h = linear(tape, p, h, "decoder.entry.w", "decoder.entry.b");
    let mut skip: Option<Var> = None;
    for l in 0..cfg.dec_layers {
        h = gated_st_layer(tape, p, l, h, ctx.adjacency.clone(), t_p, cfg.kernel);
        let s = linear(tape, p, h, &format!("decoder.layer.{l}.skip.w"), &format!("decoder.layer.{l}.skip.b"));
        skip = Some(match skip {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    head(tape, p, skip.unwrap_or(h))
}

/// `d_dec → head_hidden → head_hidden2 → L·d_x` with GELU between layers.
pub fn head(tape: &mut Tape, p: &mut Binder<'_>, x: Var) -> Var {
    let h = linear(tape, p, x, "head.w1", "head.b1");
    let h = tape.gelu(h);
    let h = linear(tape, p, h, "head.w2", "head.b2");
    let h = tape.gelu(h);
    linear(tape, p, h, "head.w3", "head.b3")
}

/// Full-grid rows of the mask's evaluation cells.
pub fn eval_rows(mask: &MaskSpec) -> Vec<usize> {
    mask.eval_cells().into_iter().map(|(i, t)| i * mask.num_patches + t).collect()
}

/// Mean absolute error over the evaluation cells of `mask`.
pub fn masked_mae(tape: &mut Tape, pred: Var, target: Rc<Array2<f64>>, mask: &MaskSpec) -> Result<Var, ModelError> {
    let rows = eval_rows(mask);
    if rows.is_empty() {
        return Err(ModelError::EmptyEvalCells);
    }
    Ok(tape.masked_l1(pred, target, Rc::new(rows)))
}

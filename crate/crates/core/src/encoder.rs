//! Dual-branch transformer encoder over the unmasked patch block.
//!
//! Rows of every encoder tensor are laid out node-major over the unmasked
//! grid: row `a * T_u + b` is unmasked node `a` at unmasked step `b`. The
//! temporal branch attends along steps within one node, the spatial branch
//! along nodes within one step (with an additive hop-distance bias), and the
//! two outputs are mixed by a learned sigmoid gate.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{AttentionLayout, Tape, Var};
use crate::config::TrainConfig;
use crate::model::ModelError;
use crate::params::{ones_row, zeros_row, Binder, Init, ParamStore};
use crate::structure::{GraphStructure, DEGREE_BUCKETS};

pub const HOURS_PER_DAY: usize = 24;
pub const DAYS_PER_WEEK: usize = 7;

fn layer_names(prefix: &str) -> [String; 16] {
    [
        "ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.g", "ln2.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b",
    ]
    .map(|s| format!("{prefix}.{s}"))
}

fn init_transformer_layer<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, prefix: &str, d: usize, ffn: usize) {
    let [ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, f1w, f1b, f2w, f2b] = layer_names(prefix);
    store.insert(ln1g, ones_row(d));
    store.insert(ln1b, zeros_row(d));
    for (w, b) in [(wq, bq), (wk, bk), (wv, bv), (wo, bo)] {
        store.insert(w, init.linear(d, d));
        store.insert(b, zeros_row(d));
    }
    store.insert(ln2g, ones_row(d));
    store.insert(ln2b, zeros_row(d));
    store.insert(f1w, init.linear(d, ffn));
    store.insert(f1b, zeros_row(ffn));
    store.insert(f2w, init.linear(ffn, d));
    store.insert(f2b, zeros_row(d));
}

/// Registers every encoder array.
pub fn init_encoder<R: Rng>(store: &mut ParamStore, cfg: &TrainConfig, init: &mut Init<'_, R>) {
    let d = cfg.d_hidden;
    let width = cfg.patch_len * cfg.num_channels;
    store.insert("encoder.patch_proj.w", init.linear(width, d));
    store.insert("encoder.patch_proj.b", zeros_row(d));
    store.insert("encoder.pe", init.normal(cfg.num_patches, d, 0.1));
    store.insert("encoder.tod", init.normal(HOURS_PER_DAY, d, 0.1));
    store.insert("encoder.dow", init.normal(DAYS_PER_WEEK, d, 0.1));
    store.insert("encoder.degree", init.normal(DEGREE_BUCKETS, d, 0.1));
    store.insert("encoder.hop_bias", init.normal(cfg.max_hops + 2, cfg.heads, 0.1));
    for l in 0..cfg.enc_layers_temporal {
        init_transformer_layer(store, init, &format!("encoder.temporal.{l}"), d, d * cfg.ffn_mult);
    }
    for l in 0..cfg.enc_layers_spatial {
        init_transformer_layer(store, init, &format!("encoder.spatial.{l}"), d, d * cfg.ffn_mult);
    }
    init_gate(store, init, "encoder.gate", d);
}

pub(crate) fn init_gate<R: Rng>(store: &mut ParamStore, init: &mut Init<'_, R>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.w1"), init.linear(d, d));
    store.insert(format!("{prefix}.w2"), init.linear(d, d));
    store.insert(format!("{prefix}.b"), zeros_row(d));
}

/// Pre-norm transformer layer: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
fn transformer_layer(tape: &mut Tape, p: &mut Binder<'_>, prefix: &str, x: Var, layout: Rc<AttentionLayout>, bias: Option<Var>) -> Var {
    let [ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b, f1w, f1b, f2w, f2b] = layer_names(prefix);
    let (g, b) = (p.param(tape, &ln1g), p.param(tape, &ln1b));
    let h = tape.layer_norm(x, g, b);
    let q = linear(tape, p, h, &wq, &bq);
    let k = linear(tape, p, h, &wk, &bk);
    let v = linear(tape, p, h, &wv, &bv);
    let att = tape.attention(q, k, v, bias, layout);
    let att = linear(tape, p, att, &wo, &bo);
    let x = tape.add(x, att);
    let (g, b) = (p.param(tape, &ln2g), p.param(tape, &ln2b));
    let h = tape.layer_norm(x, g, b);
    let h = linear(tape, p, h, &f1w, &f1b);
    let h = tape.gelu(h);
    let h = linear(tape, p, h, &f2w, &f2b);
    tape.add(x, h)
}

pub(crate) fn linear(tape: &mut Tape, p: &mut Binder<'_>, x: Var, w: &str, b: &str) -> Var {
    let w = p.param(tape, w);
    let b = p.param(tape, b);
    tape.linear(x, w, Some(b))
}

/// Embedding-table lookup, one table row per output row.
pub(crate) fn lookup(tape: &mut Tape, p: &mut Binder<'_>, table: &str, idx: &[usize]) -> Var {
    let t = p.param(tape, table);
    tape.gather(t, idx)
}

/// Projects raw patch rows into the hidden space and adds the encoder's
/// positional embedding of each row's original step index.
pub fn embed_patches(tape: &mut Tape, p: &mut Binder<'_>, patch_rows: Array2<f64>, steps: &[usize]) -> Result<Var, ModelError> {
    let t_max = p.store().expect("encoder.pe").nrows();
    if let Some(&bad) = steps.iter().find(|&&s| s >= t_max) {
        return Err(ModelError::PositionOutOfRange { step: bad, covered: t_max });
    }
    let x = tape.constant(patch_rows);
    let s = linear(tape, p, x, "encoder.patch_proj.w", "encoder.patch_proj.b");
    let pe = lookup(tape, p, "encoder.pe", steps);
    Ok(tape.add(s, pe))
}

pub fn temporal_layout(n_u: usize, t_u: usize, heads: usize) -> AttentionLayout {
    AttentionLayout { groups: (0..n_u).map(|a| (0..t_u).map(|b| a * t_u + b).collect()).collect(), heads, bias_buckets: None }
}

pub fn spatial_layout(n_u: usize, t_u: usize, heads: usize, buckets: Array2<usize>) -> AttentionLayout {
    AttentionLayout { groups: (0..t_u).map(|b| (0..n_u).map(|a| a * t_u + b).collect()).collect(), heads, bias_buckets: Some(buckets) }
}

/// Temporal branch. `tod`/`dow` are the calendar indices of the `t_u`
/// unmasked steps; they are broadcast to every node.
pub fn temporal_encode(
    tape: &mut Tape,
    p: &mut Binder<'_>,
    x: Var,
    n_u: usize,
    tod: &[usize],
    dow: &[usize],
    cfg: &TrainConfig,
) -> Var {
    let t_u = tod.len();
    assert_eq!(tape.shape(x).0, n_u * t_u, "temporal_encode: rows");
    let tod_rows: Vec<usize> = (0..n_u).flat_map(|_| tod.iter().copied()).collect();
    let dow_rows: Vec<usize> = (0..n_u).flat_map(|_| dow.iter().copied()).collect();
    let te = lookup(tape, p, "encoder.tod", &tod_rows);
    let de = lookup(tape, p, "encoder.dow", &dow_rows);
    let mut h = tape.add(x, te);
    h = tape.add(h, de);
    let layout = Rc::new(temporal_layout(n_u, t_u, cfg.heads));
    for l in 0..cfg.enc_layers_temporal {
        h = transformer_layer(tape, p, &format!("encoder.temporal.{l}"), h, layout.clone(), None);
    }
    h
}

/// Spatial branch over unmasked nodes `node_map` of `structure`.
pub fn spatial_encode(
    tape: &mut Tape,
    p: &mut Binder<'_>,
    x: Var,
    t_u: usize,
    structure: &GraphStructure,
    node_map: &[usize],
    cfg: &TrainConfig,
) -> Var {
    let n_u = node_map.len();
    assert_eq!(tape.shape(x).0, n_u * t_u, "spatial_encode: rows");
    let deg_rows: Vec<usize> = node_map.iter().flat_map(|&i| std::iter::repeat_n(structure.degree_buckets[i], t_u)).collect();
    let de = lookup(tape, p, "encoder.degree", &deg_rows);
    let mut h = tape.add(x, de);
    let layout = Rc::new(spatial_layout(n_u, t_u, cfg.heads, structure.restrict_hops(node_map)));
    if cfg.enc_layers_spatial > 0 {
        let bias = p.param(tape, "encoder.hop_bias");
        for l in 0..cfg.enc_layers_spatial {
            h = transformer_layer(tape, p, &format!("encoder.spatial.{l}"), h, layout.clone(), Some(bias));
        }
    }
    h
}

/// `Z = σ(a·W1 + b·W2 + bias)`, output `Z ⊙ a + (1 − Z) ⊙ b`. Returns `(output, Z)`.
pub fn gated_fuse(tape: &mut Tape, p: &mut Binder<'_>, prefix: &str, a: Var, b: Var) -> (Var, Var) {
    let w1 = p.param(tape, &format!("{prefix}.w1"));
    let w2 = p.param(tape, &format!("{prefix}.w2"));
    let bias = p.param(tape, &format!("{prefix}.b"));
    let za = tape.matmul(a, w1);
    let zb = tape.matmul(b, w2);
    let z = tape.add(za, zb);
    let z = tape.add_row(z, bias);
    let z = tape.sigmoid(z);
    (tape.blend(z, a, b), z)
}

/// Everything about the unmasked grid the encoder needs besides its inputs.
pub struct EncodeContext<'a> {
    pub structure: &'a GraphStructure,
    pub node_map: &'a [usize],
    /// Calendar indices of the unmasked steps.
    pub tod: &'a [usize],
    pub dow: &'a [usize],
}

/// Runs both branches (spatial on `s_spatial`, temporal on `s_temporal`) and
/// fuses them.
pub fn encode(tape: &mut Tape, p: &mut Binder<'_>, s_spatial: Var, s_temporal: Var, ctx: &EncodeContext<'_>, cfg: &TrainConfig) -> Var {
    let n_u = ctx.node_map.len();
    let t_u = ctx.tod.len();
    let hs = spatial_encode(tape, p, s_spatial, t_u, ctx.structure, ctx.node_map, cfg);
    let ht = temporal_encode(tape, p, s_temporal, n_u, ctx.tod, ctx.dow, cfg);
    gated_fuse(tape, p, "encoder.gate", hs, ht).0
}

/// Spatial attention bias `[heads][a][b]` the first spatial layer adds to its
/// logits for the given unmasked nodes.
pub fn spatial_attention_bias(store: &ParamStore, structure: &GraphStructure, node_map: &[usize]) -> Vec<Array2<f64>> {
    let table = store.expect("encoder.hop_bias");
    let buckets = structure.restrict_hops(node_map);
    (0..table.ncols()).map(|h| buckets.mapv(|k| table[[k, h]])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference;
    use crate::data::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(layers: usize) -> TrainConfig {
        TrainConfig {
            d_hidden: 8,
            heads: 2,
            ffn_mult: 2,
            enc_layers_temporal: layers,
            enc_layers_spatial: layers,
            patch_len: 3,
            num_patches: 6,
            ..TrainConfig::default()
        }
    }

    fn store(cfg: &TrainConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_encoder(&mut s, cfg, &mut Init { rng: &mut rng });
        s
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn ring(n: usize) -> Graph {
        let mut a = Array2::eye(n);
        for i in 0..n {
            a[[i, (i + 1) % n]] = 0.7;
            a[[(i + 1) % n, i]] = 0.7;
        }
        Graph::from_adjacency(a).unwrap()
    }

    fn run_temporal(cfg: &TrainConfig, st: &ParamStore, x: &Array2<f64>, n_u: usize, tod: &[usize], dow: &[usize]) -> Array2<f64> {
        let mut tape = Tape::new();
        let mut p = Binder::frozen(st);
        let xv = tape.constant(x.clone());
        let out = temporal_encode(&mut tape, &mut p, xv, n_u, tod, dow, cfg);
        tape.value(out).clone()
    }

    #[test]
    fn zero_layer_temporal_adds_calendar_tables() {
        let cfg = small_cfg(0);
        let st = store(&cfg, 1);
        let x = random(2 * 3, 8, 2);
        let out = run_temporal(&cfg, &st, &x, 2, &[9, 10, 11], &[0, 0, 1]);
        let tod = st.expect("encoder.tod");
        let dow = st.expect("encoder.dow");
        for a in 0..2 {
            for (b, (&h, &d)) in [9usize, 10, 11].iter().zip(&[0usize, 0, 1]).enumerate() {
                let expect = &x.row(a * 3 + b) + &tod.row(h) + &dow.row(d);
                assert_eq!(out.row(a * 3 + b), expect);
            }
        }
    }

    #[test]
    fn temporal_rows_are_independent_and_equivariant() {
        let cfg = small_cfg(2);
        let st = store(&cfg, 3);
        let (n, t) = (3, 4);
        let x = random(n * t, 8, 4);
        let tod = [1, 2, 3, 4];
        let dow = [2, 2, 2, 2];
        let base = run_temporal(&cfg, &st, &x, n, &tod, &dow);
        // duplicate node 0 into node 2
        let mut dup = x.clone();
        for b in 0..t {
            let row = x.row(b).to_owned();
            dup.row_mut(2 * t + b).assign(&row);
        }
        let out = run_temporal(&cfg, &st, &dup, n, &tod, &dow);
        for b in 0..t {
            assert_eq!(out.row(2 * t + b), out.row(b));
            assert_eq!(out.row(t + b), base.row(t + b));
        }
        // node permutation (2, 0, 1)
        let perm = [2usize, 0, 1];
        let mut px = x.clone();
        for (a, &src) in perm.iter().enumerate() {
            for b in 0..t {
                px.row_mut(a * t + b).assign(&x.row(src * t + b));
            }
        }
        let pout = run_temporal(&cfg, &st, &px, n, &tod, &dow);
        for (a, &src) in perm.iter().enumerate() {
            for b in 0..t {
                for c in 0..8 {
                    assert!((pout[[a * t + b, c]] - base[[src * t + b, c]]).abs() < 1e-12);
                }
            }
        }
    }

    fn run_spatial(cfg: &TrainConfig, st: &ParamStore, x: &Array2<f64>, t_u: usize, s: &GraphStructure, nodes: &[usize]) -> (Array2<f64>, Vec<(usize, usize, usize)>) {
        let mut tape = Tape::new();
        let mut p = Binder::frozen(st);
        let xv = tape.constant(x.clone());
        let out = spatial_encode(&mut tape, &mut p, xv, t_u, s, nodes, cfg);
        (tape.value(out).clone(), tape.attention_shapes())
    }

    #[test]
    fn zero_layer_spatial_adds_degree_embedding() {
        let cfg = small_cfg(0);
        let st = store(&cfg, 5);
        let g = ring(5);
        let s = GraphStructure::new(&g, cfg.max_hops);
        let x = random(3 * 2, 8, 6);
        let (out, shapes) = run_spatial(&cfg, &st, &x, 2, &s, &[0, 2, 4]);
        assert!(shapes.is_empty());
        let deg = st.expect("encoder.degree");
        for r in 0..6 {
            assert_eq!(out.row(r), &x.row(r) + &deg.row(2));
        }
    }

    #[test]
    fn spatial_columns_are_independent() {
        let cfg = small_cfg(2);
        let st = store(&cfg, 7);
        let s = GraphStructure::new(&ring(6), cfg.max_hops);
        let nodes = [0, 1, 3, 5];
        let t_u = 3;
        let x = random(4 * t_u, 8, 8);
        let (base, shapes) = run_spatial(&cfg, &st, &x, t_u, &s, &nodes);
        // logits are per step over nodes: t_u groups of size n_u
        assert_eq!(shapes, vec![(t_u, 4, 4); 2]);
        let mut y = x.clone();
        for a in 0..4 {
            y[[a * t_u + 1, 0]] += 0.5; // perturb step 1 only
        }
        let (out, _) = run_spatial(&cfg, &st, &y, t_u, &s, &nodes);
        for a in 0..4 {
            for b in [0, 2] {
                assert_eq!(out.row(a * t_u + b), base.row(a * t_u + b));
            }
            assert_ne!(out.row(a * t_u + 1), base.row(a * t_u + 1));
        }
    }

    #[test]
    fn single_node_spatial_is_pointwise() {
        let cfg = small_cfg(1);
        let st = store(&cfg, 9);
        let s = GraphStructure::new(&ring(4), cfg.max_hops);
        let x = random(3, 8, 10);
        let (out, shapes) = run_spatial(&cfg, &st, &x, 3, &s, &[2]);
        assert_eq!(shapes, vec![(3, 1, 1)]);
        // with one node, attention returns its own value projection
        let mut tape = Tape::new();
        let mut p = Binder::frozen(&st);
        let deg = st.expect("encoder.degree").row(s.degree_buckets[2]).to_owned();
        let h0 = tape.constant(&x + &deg);
        let g = p.param(&mut tape, "encoder.spatial.0.ln1.g");
        let b = p.param(&mut tape, "encoder.spatial.0.ln1.b");
        let h = tape.layer_norm(h0, g, b);
        let v = linear(&mut tape, &mut p, h, "encoder.spatial.0.wv", "encoder.spatial.0.bv");
        let o = linear(&mut tape, &mut p, v, "encoder.spatial.0.wo", "encoder.spatial.0.bo");
        let x1 = tape.add(h0, o);
        let g = p.param(&mut tape, "encoder.spatial.0.ln2.g");
        let b = p.param(&mut tape, "encoder.spatial.0.ln2.b");
        let h = tape.layer_norm(x1, g, b);
        let h = linear(&mut tape, &mut p, h, "encoder.spatial.0.ff1.w", "encoder.spatial.0.ff1.b");
        let h = tape.gelu(h);
        let h = linear(&mut tape, &mut p, h, "encoder.spatial.0.ff2.w", "encoder.spatial.0.ff2.b");
        let expect = tape.add(x1, h);
        for (a, b) in out.iter().zip(tape.value(expect).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disconnected_pairs_use_unreachable_bucket() {
        let cfg = small_cfg(1);
        let st = store(&cfg, 11);
        let mut a = Array2::eye(6);
        for &(i, j) in &[(0, 1), (1, 2), (3, 4), (4, 5)] {
            a[[i, j]] = 0.9;
            a[[j, i]] = 0.9;
        }
        let s = GraphStructure::new(&Graph::from_adjacency(a).unwrap(), cfg.max_hops);
        let nodes = [0, 1, 2, 3, 4, 5];
        let bias = spatial_attention_bias(&st, &s, &nodes);
        let table = st.expect("encoder.hop_bias");
        let unreachable = cfg.max_hops + 1;
        for h in 0..cfg.heads {
            for i in 0..6 {
                for j in 0..6 {
                    let same = (i < 3) == (j < 3);
                    let bucket = if same { (i as isize - j as isize).unsigned_abs() } else { unreachable };
                    assert_eq!(bias[h][[i, j]], table[[bucket, h]]);
                }
            }
        }
    }

    #[test]
    fn gate_examples() {
        let mut st = ParamStore::new();
        st.insert("g.w1", Array2::zeros((1, 1)));
        st.insert("g.w2", Array2::zeros((1, 1)));
        st.insert("g.b", Array2::zeros((1, 1)));
        let run = |st: &ParamStore, hs: f64, ht: f64| {
            let mut tape = Tape::new();
            let mut p = Binder::frozen(st);
            let a = tape.constant(Array2::from_elem((1, 1), hs));
            let b = tape.constant(Array2::from_elem((1, 1), ht));
            let (o, z) = gated_fuse(&mut tape, &mut p, "g", a, b);
            (tape.scalar(o), tape.scalar(z))
        };
        assert_eq!(run(&st, 2.0, 4.0), (3.0, 0.5));
        st.get_mut("g.w1").unwrap()[[0, 0]] = 1.0;
        let (o, z) = run(&st, 1.0, 0.0);
        assert!((z - 0.7311).abs() < 5e-5);
        assert!((o - 0.7311).abs() < 5e-5);
        // equal inputs pass through regardless of gate
        let x = 0.123456789;
        assert_eq!(run(&st, x, x).0, x);
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let d = 4;
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        init_gate(&mut st, &mut Init { rng: &mut rng }, "g", d);
        st.insert("g.b", random(1, d, 13));
        let hs = random(6, d, 14);
        let ht = random(6, d, 15);
        let weights = random(6, d, 16);
        let loss = |st: &ParamStore, hs: &Array2<f64>, ht: &Array2<f64>| -> (f64, Vec<Array2<f64>>) {
            let mut tape = Tape::new();
            let all = |_: &str| true;
            let mut p = Binder::new(st, &all);
            let a = tape.leaf(hs.clone(), true);
            let b = tape.leaf(ht.clone(), true);
            let (o, _) = gated_fuse(&mut tape, &mut p, "g", a, b);
            let w = tape.constant(weights.clone());
            let y = tape.mul(o, w);
            let l = tape.constant(Array2::ones((1, 6)));
            let r = tape.constant(Array2::ones((d, 1)));
            let y = tape.matmul(l, y);
            let s = tape.matmul(y, r);
            tape.backward(s);
            let mut grads = vec![tape.grad(a).unwrap().clone(), tape.grad(b).unwrap().clone()];
            let pg = p.gradients(&tape);
            for k in ["g.w1", "g.w2", "g.b"] {
                grads.push(pg[k].clone());
            }
            (tape.scalar(s), grads)
        };
        let (_, analytic) = loss(&st, &hs, &ht);
        let mut numeric = vec![
            finite_difference(hs.view(), 1e-6, |x| loss(&st, x, &ht).0),
            finite_difference(ht.view(), 1e-6, |x| loss(&st, &hs, x).0),
        ];
        for k in ["g.w1", "g.w2", "g.b"] {
            let base = st.expect(k).clone();
            numeric.push(finite_difference(base.view(), 1e-6, |x| {
                let mut s2 = st.clone();
                s2.insert(k, x.clone());
                loss(&s2, &hs, &ht).0
            }));
        }
        for (a, n) in analytic.iter().zip(&numeric) {
            for (x, y) in a.iter().zip(n.iter()) {
                assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()) + 1e-9, "{x} vs {y}");
            }
        }
    }
}

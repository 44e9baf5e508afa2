//! HA, MEAN and KNN reference predictors.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;

use crate::data::{Graph, MaskSpec, SignalTensor};
use crate::pipeline::Prediction;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Ha,
    Mean,
    Knn,
}

impl FromStr for BaselineMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ha" => Ok(Self::Ha),
            "mean" => Ok(Self::Mean),
            "knn" => Ok(Self::Knn),
            other => Err(format!("unknown baseline `{other}` (ha|mean|knn)")),
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ha => "HA",
            Self::Mean => "MEAN",
            Self::Knn => "KNN",
        })
    }
}

fn slot_of(ts: i64, interval: i64) -> usize {
    (ts.rem_euclid(SECONDS_PER_DAY) / interval) as usize
}

/// Historical average: each node's mean at the same time-of-day slot over
/// `history`, falling back to the node's overall mean for unseen slots.
pub fn baseline_ha(history: &SignalTensor, window: &SignalTensor, cells: &[(usize, usize)], patch_len: usize) -> Prediction {
    let interval = history.interval.max(1);
    let slots = (SECONDS_PER_DAY / interval).max(1) as usize;
    let (n, t, dx) = history.values.dim();
    let mut sum = Array3::<f64>::zeros((n, slots, dx));
    let mut count = vec![vec![0usize; slots]; n];
    for i in 0..n {
        for s in 0..t {
            let slot = slot_of(history.timestamp(s), interval);
            count[i][slot] += 1;
            for c in 0..dx {
                sum[[i, slot, c]] += history.values[[i, s, c]];
            }
        }
    }
    let node_mean = |i: usize, c: usize| {
        let lane = history.values.slice(ndarray::s![i, .., c]);
        lane.sum() / lane.len().max(1) as f64
    };
    let values = Array3::from_shape_fn((cells.len(), patch_len, dx), |(k, s, c)| {
        let (i, p) = cells[k];
        let slot = slot_of(window.timestamp(p * patch_len + s), interval) % slots;
        if count[i][slot] > 0 {
            sum[[i, slot, c]] / count[i][slot] as f64
        } else {
            node_mean(i, c)
        }
    });
    Prediction { cells: cells.to_vec(), values }
}

/// Latest raw step at or before `step` whose patch is visible to the observed
/// nodes (steps of masked patches fall back to the last visible one).
fn visible_step(mask: &MaskSpec, step: usize, patch_len: usize) -> usize {
    let patch = step / patch_len;
    if !mask.masked_steps.contains(&patch) {
        return step;
    }
    let last = (0..patch).rev().find(|p| !mask.masked_steps.contains(p)).expect("mask keeps one step visible");
    last * patch_len + patch_len - 1
}

fn observed_nodes(mask: &MaskSpec) -> Vec<usize> {
    mask.unmasked_nodes()
}

fn mean_at(window: &SignalTensor, nodes: &[usize], step: usize, c: usize) -> f64 {
    nodes.iter().map(|&j| window.values[[j, step, c]]).sum::<f64>() / nodes.len() as f64
}

/// MEAN: the average over observed nodes at the same step (at the last
/// visible step for masked future patches).
pub fn baseline_mean(window: &SignalTensor, mask: &MaskSpec, patch_len: usize) -> Prediction {
    let cells = mask.eval_cells();
    let observed = observed_nodes(mask);
    let dx = window.num_channels();
    let values = Array3::from_shape_fn((cells.len(), patch_len, dx), |(k, s, c)| {
        let (_, p) = cells[k];
        mean_at(window, &observed, visible_step(mask, p * patch_len + s, patch_len), c)
    });
    Prediction { cells, values }
}

/// KNN: adjacency-weighted mean over the `k` observed nodes with the largest
/// weight to the target node; nodes with no weighted link to any observed
/// node fall back to MEAN.
pub fn baseline_knn(window: &SignalTensor, graph: &Graph, mask: &MaskSpec, patch_len: usize, k: usize) -> Prediction {
    let cells = mask.eval_cells();
    let observed = observed_nodes(mask);
    let dx = window.num_channels();
    let a = &graph.adjacency;
    let neighbours = |i: usize| -> Vec<(usize, f64)> {
        let mut cand: Vec<(usize, f64)> = observed.iter().filter(|&&j| j != i).map(|&j| (j, a[[i, j]].max(a[[j, i]]))).filter(|&(_, w)| w > 0.0).collect();
        cand.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        cand.truncate(k);
        cand
    };
    let per_cell: Vec<Vec<(usize, f64)>> = cells.iter().map(|&(i, _)| neighbours(i)).collect();
    let values = Array3::from_shape_fn((cells.len(), patch_len, dx), |(q, s, c)| {
        let (_, p) = cells[q];
        let step = visible_step(mask, p * patch_len + s, patch_len);
        let nb = &per_cell[q];
        if nb.is_empty() {
            return mean_at(window, &observed, step, c);
        }
        let wsum: f64 = nb.iter().map(|(_, w)| w).sum();
        nb.iter().map(|&(j, w)| w * window.values[[j, step, c]]).sum::<f64>() / wsum
    });
    Prediction { cells, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn signal(values: Array3<f64>, interval: i64) -> SignalTensor {
        SignalTensor::new(values, 0, interval, vec!["x".into()]).unwrap()
    }

    #[test]
    fn ha_examples() {
        // hourly data over two days; node 0 reads 2 then 4 at 09:00
        let mut v = Array3::zeros((1, 48, 1));
        for t in 0..48 {
            v[[0, t, 0]] = 5.0;
        }
        v[[0, 9, 0]] = 2.0;
        v[[0, 33, 0]] = 4.0;
        let hist = signal(v, 3600);
        let win = signal(Array3::zeros((1, 24, 1)), 3600);
        let p = baseline_ha(&hist, &win, &[(0, 9)], 1);
        assert_eq!(p.values[[0, 0, 0]], 3.0);
        let p = baseline_ha(&hist, &win, &[(0, 10)], 1);
        assert_eq!(p.values[[0, 0, 0]], 5.0);
    }

    #[test]
    fn ha_falls_back_to_node_mean() {
        // only slots 0..3 observed; mean 5
        let v = Array3::from_shape_vec((1, 4, 1), vec![4.0, 6.0, 5.0, 5.0]).unwrap();
        let hist = signal(v, 3600);
        let win = signal(Array3::zeros((1, 24, 1)), 3600);
        let p = baseline_ha(&hist, &win, &[(0, 12)], 1);
        assert_eq!(p.values[[0, 0, 0]], 5.0);
    }

    #[test]
    fn mean_and_knn_examples() {
        // node 3 unobserved, neighbours 0 and 1 with equal weight, node 2 far
        let mut a = Array2::eye(5);
        for j in [0, 1] {
            a[[3, j]] = 0.5;
            a[[j, 3]] = 0.5;
        }
        let g = Graph::from_adjacency(a).unwrap();
        let mut v = Array3::zeros((5, 2, 1));
        for (i, x) in [(0, 4.0), (1, 6.0), (2, 2.0)] {
            v[[i, 0, 0]] = x;
            v[[i, 1, 0]] = x;
        }
        let win = signal(v, 300);
        let mask = MaskSpec::new(5, 2, vec![3, 4], vec![]).unwrap();
        let knn = baseline_knn(&win, &g, &mask, 1, 2);
        assert_eq!(knn.cells[0], (3, 0));
        assert_eq!(knn.values[[0, 0, 0]], 5.0);
        let mean = baseline_mean(&win, &mask, 1);
        assert_eq!(mean.values[[0, 0, 0]], 4.0);
        // node 4 is isolated: KNN falls back to MEAN
        let iso = knn.cells.iter().position(|&c| c == (4, 1)).unwrap();
        assert_eq!(knn.values[[iso, 0, 0]], 4.0);
    }

    #[test]
    fn masked_future_uses_last_visible_step() {
        let v = Array3::from_shape_fn((3, 4, 1), |(i, t, _)| (i * 10 + t) as f64);
        let win = signal(v, 300);
        let mask = MaskSpec::new(3, 2, vec![2], vec![1]).unwrap().with_eval_cells(vec![(2, 1)]).unwrap();
        let p = baseline_mean(&win, &mask, 2);
        // last visible raw step is 1: nodes 0, 1 read 1 and 11
        assert_eq!(p.values[[0, 0, 0]], 6.0);
        assert_eq!(p.values[[0, 1, 0]], 6.0);
    }
}

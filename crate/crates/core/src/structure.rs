//! Static structural features of a sensor graph used by the model.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::data::Graph;

/// Degree buckets: 0, 1, 2, 3, 4–7, 8+.
pub const DEGREE_BUCKETS: usize = 6;

pub fn degree_bucket(degree: usize) -> usize {
    match degree {
        0..=3 => degree,
        4..=7 => 4,
        _ => 5,
    }
}

/// Unweighted BFS hop distance; an edge exists iff `A[i][j] > 0` (`i != j`).
/// Edges are treated as undirected.
pub fn hop_distances(adjacency: &Array2<f64>) -> Array2<Option<usize>> {
    let n = adjacency.nrows();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && (adjacency[[i, j]] > 0.0 || adjacency[[j, i]] > 0.0)).collect())
        .collect();
    let mut out = Array2::from_elem((n, n), None);
    for src in 0..n {
        let mut queue = VecDeque::from([src]);
        out[[src, src]] = Some(0);
        while let Some(u) = queue.pop_front() {
            let d = out[[src, u]].expect("visited");
            for &v in &neighbours[u] {
                if out[[src, v]].is_none() {
                    out[[src, v]] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
    }
    out
}

/// Hop-distance bucket: `min(d, max_hops)` for reachable pairs, `max_hops + 1`
/// for unreachable ones.
pub fn hop_bucket(distance: Option<usize>, max_hops: usize) -> usize {
    match distance {
        Some(d) => d.min(max_hops),
        None => max_hops + 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphStructure {
    pub num_nodes: usize,
    pub max_hops: usize,
    pub hop_buckets: Array2<usize>,
    pub degree_buckets: Vec<usize>,
    /// Row-normalised adjacency with the diagonal removed; rows without
    /// neighbours stay zero.
    pub propagation: Array2<f64>,
}

impl GraphStructure {
    pub fn new(graph: &Graph, max_hops: usize) -> Self {
        let a = &graph.adjacency;
        let n = graph.num_nodes();
        let hops = hop_distances(a);
        let hop_buckets = hops.mapv(|d| hop_bucket(d, max_hops));
        let degree_buckets = (0..n)
            .map(|i| degree_bucket(hops.row(i).iter().filter(|d| **d == Some(1)).count()))
            .collect();
        let mut propagation = a.clone();
        for i in 0..n {
            propagation[[i, i]] = 0.0;
            let sum: f64 = propagation.row(i).sum();
            if sum > 0.0 {
                propagation.row_mut(i).mapv_inplace(|v| v / sum);
            }
        }
        Self { num_nodes: n, max_hops, hop_buckets, degree_buckets, propagation }
    }

    pub fn num_hop_buckets(&self) -> usize {
        self.max_hops + 2
    }

    /// Hop buckets restricted to `nodes` (in that order).
    pub fn restrict_hops(&self, nodes: &[usize]) -> Array2<usize> {
        Array2::from_shape_fn((nodes.len(), nodes.len()), |(a, b)| self.hop_buckets[[nodes[a], nodes[b]]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> Graph {
        // {0,1,2} and {3,4,5}, no edges between
        let mut a = Array2::zeros((6, 6));
        for &(i, j) in &[(0, 1), (1, 2), (3, 4), (4, 5)] {
            a[[i, j]] = 0.5;
            a[[j, i]] = 0.5;
        }
        for i in 0..6 {
            a[[i, i]] = 1.0;
        }
        Graph::from_adjacency(a).unwrap()
    }

    #[test]
    fn bfs_on_two_components() {
        let g = two_triangles();
        let d = hop_distances(&g.adjacency);
        assert_eq!(d[[0, 2]], Some(2));
        assert_eq!(d[[3, 5]], Some(2));
        assert_eq!(d[[0, 3]], None);
        let s = GraphStructure::new(&g, 4);
        assert_eq!(s.hop_buckets[[0, 4]], 5);
        assert_eq!(s.hop_buckets[[1, 1]], 0);
        assert_eq!(s.degree_buckets, vec![1, 2, 1, 1, 2, 1]);
    }

    #[test]
    fn buckets_saturate() {
        assert_eq!(hop_bucket(Some(9), 4), 4);
        assert_eq!(degree_bucket(5), 4);
        assert_eq!(degree_bucket(8), 5);
        assert_eq!(degree_bucket(100), 5);
    }

    #[test]
    fn propagation_rows_sum_to_one_or_zero() {
        let mut a = Array2::zeros((3, 3));
        a[[0, 1]] = 0.2;
        a[[0, 2]] = 0.6;
        a[[1, 0]] = 0.2;
        a[[2, 2]] = 1.0;
        let s = GraphStructure::new(&Graph::from_adjacency(a).unwrap(), 4);
        assert!((s.propagation.row(0).sum() - 1.0).abs() < 1e-15);
        assert!((s.propagation[[0, 2]] - 0.75).abs() < 1e-15);
        assert_eq!(s.propagation.row(2).sum(), 0.0);
    }
}

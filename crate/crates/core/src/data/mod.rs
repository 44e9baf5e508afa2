//! Sensor graphs, raw signal tensors, normalization, patching and masking.

mod io;
mod mask;
mod patch;

pub use io::{load_dataset, save_dataset, DatasetMeta};
pub use mask::{gather_unmasked, round_half_up, sample_random_mask, scatter_unmasked, Gathered, MaskSpec};
pub use patch::{patchify, time_features, unpatchify, PatchSet};

use ndarray::{Array2, Array3, Axis};
use thiserror::Error;

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed metadata: {0}")]
    Meta(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("adjacency out of range: entry ({row}, {col}) = {value}")]
    AdjacencyOutOfRange { row: usize, col: usize, value: f64 },
    #[error("non-finite signal value at node {node}, step {step}, channel {channel}")]
    NonFinite { node: usize, step: usize, channel: usize },
    #[error("degenerate channel {channel}: std {std} below floor")]
    DegenerateChannel { channel: usize, std: f64 },
    #[error("length not divisible by patch size: {len} steps, patch {patch}")]
    NotDivisible { len: usize, patch: usize },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Sensor graph with a weighted adjacency matrix whose entries lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub adjacency: Array2<f64>,
    pub node_ids: Vec<String>,
}

impl Graph {
    pub fn new(adjacency: Array2<f64>, node_ids: Vec<String>) -> Result<Self> {
        let g = Self { adjacency, node_ids };
        g.validate()?;
        Ok(g)
    }

    /// Graph with ids `"0".."n-1"`.
    pub fn from_adjacency(adjacency: Array2<f64>) -> Result<Self> {
        let ids = (0..adjacency.nrows()).map(|i| i.to_string()).collect();
        Self::new(adjacency, ids)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.adjacency.dim();
        if r != c || r == 0 {
            return Err(DataError::DimensionMismatch(format!("adjacency is {r}x{c}")));
        }
        if self.node_ids.len() != r {
            return Err(DataError::DimensionMismatch(format!("{} node ids for {r} nodes", self.node_ids.len())));
        }
        for ((row, col), &value) in self.adjacency.indexed_iter() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(DataError::AdjacencyOutOfRange { row, col, value });
            }
        }
        Ok(())
    }

    /// Subgraph induced by `nodes`, in the given order.
    pub fn subgraph(&self, nodes: &[usize]) -> Graph {
        let adjacency = Array2::from_shape_fn((nodes.len(), nodes.len()), |(a, b)| self.adjacency[[nodes[a], nodes[b]]]);
        Graph { adjacency, node_ids: nodes.iter().map(|&i| self.node_ids[i].clone()).collect() }
    }
}

/// Raw readings `[node][step][channel]` sampled at a fixed interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTensor {
    pub values: Array3<f64>,
    pub start_epoch: i64,
    pub interval: i64,
    pub channel_names: Vec<String>,
}

impl SignalTensor {
    pub fn new(values: Array3<f64>, start_epoch: i64, interval: i64, channel_names: Vec<String>) -> Result<Self> {
        let s = Self { values, start_epoch, interval, channel_names };
        s.validate()?;
        Ok(s)
    }

    pub fn num_nodes(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_steps(&self) -> usize {
        self.values.dim().1
    }

    pub fn num_channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval <= 0 {
            return Err(DataError::Meta(format!("interval must be positive, got {}", self.interval)));
        }
        if self.channel_names.len() != self.num_channels() {
            return Err(DataError::DimensionMismatch(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.num_channels()
            )));
        }
        if let Some(((node, step, channel), _)) = self.values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite { node, step, channel });
        }
        Ok(())
    }

    /// Epoch seconds of step `t`.
    pub fn timestamp(&self, t: usize) -> i64 {
        self.start_epoch + self.interval * t as i64
    }

    /// Steps `[start, end)`, timestamps shifted accordingly.
    pub fn slice_steps(&self, start: usize, end: usize) -> SignalTensor {
        SignalTensor {
            values: self.values.slice(ndarray::s![.., start..end, ..]).to_owned(),
            start_epoch: self.timestamp(start),
            interval: self.interval,
            channel_names: self.channel_names.clone(),
        }
    }

    pub fn select_nodes(&self, nodes: &[usize]) -> SignalTensor {
        SignalTensor {
            values: self.values.select(Axis(0), nodes),
            start_epoch: self.start_epoch,
            interval: self.interval,
            channel_names: self.channel_names.clone(),
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over all nodes and steps, per channel.
    pub fn compute(signal: &SignalTensor) -> Result<Self> {
        let dx = signal.num_channels();
        let mut mean = vec![0.0; dx];
        let mut std = vec![0.0; dx];
        for c in 0..dx {
            let lane = signal.values.index_axis(Axis(2), c);
            let n = lane.len() as f64;
            let m = lane.sum() / n;
            let var = lane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            if !(s >= STD_FLOOR) {
                return Err(DataError::DegenerateChannel { channel: c, std: s });
            }
            mean[c] = m;
            std[c] = s;
        }
        Ok(Self { mean, std })
    }

    /// Mean zero, unit std: leaves values untouched.
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn validate(&self) -> Result<()> {
        for (channel, &std) in self.std.iter().enumerate() {
            if !(std >= STD_FLOOR) {
                return Err(DataError::DegenerateChannel { channel, std });
            }
        }
        Ok(())
    }

    pub fn to_array(&self) -> Array2<f64> {
        let dx = self.mean.len();
        Array2::from_shape_fn((2, dx), |(r, c)| if r == 0 { self.mean[c] } else { self.std[c] })
    }

    pub fn from_array(a: &Array2<f64>) -> Self {
        Self { mean: a.row(0).to_vec(), std: a.row(1).to_vec() }
    }
}

pub fn zscore(signal: &SignalTensor, stats: &NormStats) -> Result<SignalTensor> {
    stats.validate()?;
    check_channels(signal, stats)?;
    let mut out = signal.clone();
    for ((_, _, c), v) in out.values.indexed_iter_mut() {
        *v = (*v - stats.mean[c]) / stats.std[c];
    }
    Ok(out)
}

pub fn unzscore(signal: &SignalTensor, stats: &NormStats) -> Result<SignalTensor> {
    stats.validate()?;
    check_channels(signal, stats)?;
    let mut out = signal.clone();
    for ((_, _, c), v) in out.values.indexed_iter_mut() {
        *v = *v * stats.std[c] + stats.mean[c];
    }
    Ok(out)
}

fn check_channels(signal: &SignalTensor, stats: &NormStats) -> Result<()> {
    if stats.mean.len() != signal.num_channels() || stats.std.len() != signal.num_channels() {
        return Err(DataError::DimensionMismatch(format!(
            "stats cover {} channels, signal has {}",
            stats.mean.len(),
            signal.num_channels()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn signal(values: Array3<f64>) -> SignalTensor {
        let dx = values.dim().2;
        SignalTensor::new(values, 0, 300, (0..dx).map(|c| format!("c{c}")).collect()).unwrap()
    }

    #[test]
    fn zscore_two_values() {
        let s = signal(Array3::from_shape_vec((1, 2, 1), vec![2.0, 4.0]).unwrap());
        let stats = NormStats::compute(&s).unwrap();
        assert_eq!(stats.mean, vec![3.0]);
        assert_eq!(stats.std, vec![1.0]);
        let z = zscore(&s, &stats).unwrap();
        assert_eq!(z.values.iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0]);
    }

    #[test]
    fn zscore_round_trip_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals = Array3::from_shape_fn((4, 50, 2), |(_, _, c)| rng.random_range(0.0..100.0) * (c + 1) as f64);
        let s = signal(vals);
        let stats = NormStats::compute(&s).unwrap();
        let z = zscore(&s, &stats).unwrap();
        let back = unzscore(&z, &stats).unwrap();
        for (a, b) in s.values.iter().zip(back.values.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        let zstats = NormStats::compute(&z).unwrap();
        for c in 0..2 {
            assert!(zstats.mean[c].abs() < 1e-6);
            assert!((zstats.std[c] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let s = signal(Array3::from_elem((1, 3, 1), 5.0));
        assert!(matches!(NormStats::compute(&s), Err(DataError::DegenerateChannel { .. })));
    }

    #[test]
    fn adjacency_range_checked() {
        let err = Graph::from_adjacency(array![[1.0, 1.5], [0.0, 1.0]]).unwrap_err();
        assert!(err.to_string().contains("adjacency out of range"));
        assert!(Graph::from_adjacency(array![[1.0, 0.5], [0.5, 1.0]]).is_ok());
    }

    #[test]
    fn non_finite_signal_rejected() {
        let mut v = Array3::zeros((2, 2, 1));
        v[[1, 0, 0]] = f64::INFINITY;
        let err = SignalTensor::new(v, 0, 60, vec!["x".into()]).unwrap_err();
        assert!(matches!(err, DataError::NonFinite { node: 1, step: 0, channel: 0 }));
    }
}

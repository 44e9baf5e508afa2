//! On-disk dataset layout: a JSON metadata file next to a CSV adjacency
//! matrix and a raw little-endian `f32` payload ordered `[node][step][channel]`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{DataError, Graph, Result, SignalTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_nodes: usize,
    pub num_steps: usize,
    pub num_channels: usize,
    pub interval_seconds: i64,
    pub start_epoch: i64,
    pub adjacency_file: String,
    pub values_file: String,
    pub node_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_names: Option<Vec<String>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Accepts either the metadata file itself or a directory holding `meta.json`.
fn resolve_meta(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("meta.json")
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(meta_path: impl AsRef<Path>) -> Result<(Graph, SignalTensor)> {
    let meta_path = resolve_meta(meta_path.as_ref());
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DataError::Meta(e.to_string()))?;
    let dir = meta_path.parent().unwrap_or(Path::new("."));

    if meta.node_ids.len() != meta.num_nodes {
        return Err(DataError::DimensionMismatch(format!(
            "meta declares {} nodes but lists {} node ids",
            meta.num_nodes,
            meta.node_ids.len()
        )));
    }

    let adj_path = dir.join(&meta.adjacency_file);
    let adj_text = fs::read_to_string(&adj_path).map_err(io_err(&adj_path))?;
    let adjacency = parse_adjacency(&adj_text)?;
    if adjacency.nrows() != meta.num_nodes {
        return Err(DataError::DimensionMismatch(format!(
            "meta declares {} nodes, adjacency is {}x{}",
            meta.num_nodes,
            adjacency.nrows(),
            adjacency.ncols()
        )));
    }
    let graph = Graph::new(adjacency, meta.node_ids.clone())?;

    let val_path = dir.join(&meta.values_file);
    let bytes = fs::read(&val_path).map_err(io_err(&val_path))?;
    let expected = meta.num_nodes * meta.num_steps * meta.num_channels;
    if bytes.len() != expected * 4 {
        let rows = bytes.len() / 4 / (meta.num_steps * meta.num_channels).max(1);
        return Err(DataError::DimensionMismatch(format!(
            "meta declares {}x{}x{} values ({} bytes) but payload has {} bytes ({} node rows)",
            meta.num_nodes,
            meta.num_steps,
            meta.num_channels,
            expected * 4,
            bytes.len(),
            rows
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = Array3::from_shape_vec((meta.num_nodes, meta.num_steps, meta.num_channels), flat)
        .expect("length checked above");
    let channel_names = meta
        .channel_names
        .clone()
        .unwrap_or_else(|| (0..meta.num_channels).map(|c| format!("channel_{c}")).collect());
    let signal = SignalTensor::new(values, meta.start_epoch, meta.interval_seconds, channel_names)?;
    Ok((graph, signal))
}

fn parse_adjacency(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| DataError::Meta(format!("adjacency line {}: {e}", lineno + 1)))?;
        rows.push(row);
    }
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(DataError::DimensionMismatch("adjacency is not square".into()));
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]))
}

/// Writes `meta.json`, `adjacency.csv` and `values.f32` into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, graph: &Graph, signal: &SignalTensor) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (n, t, dx) = signal.values.dim();
    if n != graph.num_nodes() {
        return Err(DataError::DimensionMismatch(format!("graph has {} nodes, signal {n}", graph.num_nodes())));
    }
    let meta = DatasetMeta {
        num_nodes: n,
        num_steps: t,
        num_channels: dx,
        interval_seconds: signal.interval,
        start_epoch: signal.start_epoch,
        adjacency_file: "adjacency.csv".into(),
        values_file: "values.f32".into(),
        node_ids: graph.node_ids.clone(),
        channel_names: Some(signal.channel_names.clone()),
    };
    let mut csv = String::new();
    for row in graph.adjacency.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    let mut bytes = Vec::with_capacity(n * t * dx * 4);
    for v in signal.values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| DataError::Meta(e.to_string()))?;
    fs::write(&meta_path, json).map_err(io_err(&meta_path))?;
    let adj_path = dir.join(&meta.adjacency_file);
    fs::write(&adj_path, csv).map_err(io_err(&adj_path))?;
    let val_path = dir.join(&meta.values_file);
    fs::write(&val_path, bytes).map_err(io_err(&val_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, n_meta: usize, adj: &str, node_rows: usize, t: usize) {
        let meta = DatasetMeta {
            num_nodes: n_meta,
            num_steps: t,
            num_channels: 1,
            interval_seconds: 300,
            start_epoch: 0,
            adjacency_file: "adj.csv".into(),
            values_file: "vals.bin".into(),
            node_ids: (0..n_meta).map(|i| format!("s{i}")).collect(),
            channel_names: None,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        fs::write(dir.join("adj.csv"), adj).unwrap();
        let mut bytes = Vec::new();
        for i in 0..node_rows * t {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        fs::write(dir.join("vals.bin"), bytes).unwrap();
    }

    fn adjacency_csv(n: usize, off: f64) -> String {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { "1".to_string() } else { off.to_string() }).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn happy_path_with_byte_offsets() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), 4, &adjacency_csv(4, 0.25), 4, 48);
        let (g, s) = load_dataset(dir.path().join("meta.json")).unwrap();
        assert_eq!(g.num_nodes(), 4);
        assert_eq!(s.values.dim(), (4, 48, 1));
        // value of node i, step t at byte offset 4·(i·T + t)
        assert_eq!(s.values[[2, 5, 0]], (2 * 48 + 5) as f64);
    }

    #[test]
    fn adjacency_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), 4, &adjacency_csv(4, 1.5), 4, 48);
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("adjacency out of range"), "{err}");
    }

    #[test]
    fn payload_row_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_raw(dir.path(), 5, &adjacency_csv(5, 0.1), 4, 48);
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path().join("nope.json")), Err(DataError::Io { .. })));
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let g = Graph::from_adjacency(Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.5 })).unwrap();
        let vals = Array3::from_shape_fn((3, 10, 2), |(i, t, c)| (i * 100 + t * 2 + c) as f64 * 0.5);
        let s = SignalTensor::new(vals, 1_700_000_000, 300, vec!["a".into(), "b".into()]).unwrap();
        save_dataset(dir.path(), &g, &s).unwrap();
        let (g2, s2) = load_dataset(dir.path()).unwrap();
        assert_eq!(g, g2);
        assert_eq!(s, s2);
    }
}

use std::collections::BTreeSet;

use ndarray::Array3;
use rand::Rng;

use super::{DataError, Result};

/// Union-structured mask over an `N × T_p` patch grid: cell `(i, t)` is
/// masked iff node `i` is in `masked_nodes` or step `t` is in `masked_steps`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub num_nodes: usize,
    pub num_patches: usize,
    /// Sorted, unique.
    pub masked_nodes: Vec<usize>,
    /// Sorted, unique.
    pub masked_steps: Vec<usize>,
    /// Cells scored by the loss; `None` means every masked cell.
    pub eval_cells: Option<Vec<(usize, usize)>>,
}

impl MaskSpec {
    pub fn new(
        num_nodes: usize,
        num_patches: usize,
        masked_nodes: impl IntoIterator<Item = usize>,
        masked_steps: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let masked_nodes: Vec<usize> = masked_nodes.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let masked_steps: Vec<usize> = masked_steps.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let m = Self { num_nodes, num_patches, masked_nodes, masked_steps, eval_cells: None };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(num_nodes: usize, num_patches: usize) -> Self {
        Self { num_nodes, num_patches, masked_nodes: vec![], masked_steps: vec![], eval_cells: None }
    }

    pub fn with_eval_cells(mut self, cells: Vec<(usize, usize)>) -> Result<Self> {
        self.eval_cells = Some(cells);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.masked_nodes.iter().any(|&i| i >= self.num_nodes) {
            return Err(DataError::InvalidMask("masked node index out of range".into()));
        }
        if self.masked_steps.iter().any(|&t| t >= self.num_patches) {
            return Err(DataError::InvalidMask("masked step index out of range".into()));
        }
        if self.num_nodes_unmasked() == 0 || self.num_steps_unmasked() == 0 {
            return Err(DataError::InvalidMask(format!(
                "mask leaves {} unmasked nodes and {} unmasked steps; both must be at least 1",
                self.num_nodes_unmasked(),
                self.num_steps_unmasked()
            )));
        }
        if let Some(cells) = &self.eval_cells {
            if cells.is_empty() {
                return Err(DataError::InvalidMask("empty evaluation cell set".into()));
            }
            if let Some(&(i, t)) = cells.iter().find(|&&(i, t)| i >= self.num_nodes || t >= self.num_patches || !self.is_masked(i, t)) {
                return Err(DataError::InvalidMask(format!("evaluation cell ({i}, {t}) is not masked")));
            }
        }
        Ok(())
    }

    pub fn num_nodes_unmasked(&self) -> usize {
        self.num_nodes - self.masked_nodes.len()
    }

    pub fn num_steps_unmasked(&self) -> usize {
        self.num_patches - self.masked_steps.len()
    }

    pub fn is_masked(&self, node: usize, step: usize) -> bool {
        self.masked_nodes.binary_search(&node).is_ok() || self.masked_steps.binary_search(&step).is_ok()
    }

    pub fn unmasked_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes).filter(|i| self.masked_nodes.binary_search(i).is_err()).collect()
    }

    pub fn unmasked_steps(&self) -> Vec<usize> {
        (0..self.num_patches).filter(|t| self.masked_steps.binary_search(t).is_err()).collect()
    }

    /// All masked cells in row-major order.
    pub fn masked_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.num_nodes {
            for t in 0..self.num_patches {
                if self.is_masked(i, t) {
                    out.push((i, t));
                }
            }
        }
        out
    }

    /// Cells scored by the loss and metrics.
    pub fn eval_cells(&self) -> Vec<(usize, usize)> {
        match &self.eval_cells {
            Some(c) => c.clone(),
            None => self.masked_cells(),
        }
    }

    pub fn masked_fraction(&self) -> f64 {
        1.0 - (self.num_nodes_unmasked() * self.num_steps_unmasked()) as f64 / (self.num_nodes * self.num_patches) as f64
    }
}

/// `floor(x + 0.5)`, tolerant of representation error just below a half.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Random spatio-temporal mask. The per-axis ratio `r` satisfies
/// `(1 − r)² = 1 − total_ratio`, and each axis masks `round_half_up(r · size)`
/// indices drawn uniformly without replacement.
pub fn sample_random_mask<R: Rng + ?Sized>(num_nodes: usize, num_patches: usize, total_ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&total_ratio) {
        return Err(DataError::InvalidMask(format!("masking ratio {total_ratio} outside [0, 1)")));
    }
    let r = 1.0 - (1.0 - total_ratio).sqrt();
    let n_s = round_half_up(r * num_nodes as f64);
    let n_t = round_half_up(r * num_patches as f64);
    if n_s >= num_nodes || n_t >= num_patches {
        return Err(DataError::InvalidMask(format!(
            "ratio {total_ratio} masks {n_s}/{num_nodes} nodes and {n_t}/{num_patches} steps, leaving no encoder input"
        )));
    }
    let nodes = rand::seq::index::sample(rng, num_nodes, n_s).into_vec();
    let steps = rand::seq::index::sample(rng, num_patches, n_t).into_vec();
    MaskSpec::new(num_nodes, num_patches, nodes, steps)
}

/// Unmasked sub-block of a `N × T_p × d` array plus the index maps that
/// place it back.
#[derive(Debug, Clone, PartialEq)]
pub struct Gathered {
    pub block: Array3<f64>,
    pub node_map: Vec<usize>,
    pub step_map: Vec<usize>,
}

pub fn gather_unmasked(full: &Array3<f64>, mask: &MaskSpec) -> Result<Gathered> {
    let (n, t, _) = full.dim();
    if n != mask.num_nodes || t != mask.num_patches {
        return Err(DataError::DimensionMismatch(format!("block {n}x{t} vs mask {}x{}", mask.num_nodes, mask.num_patches)));
    }
    let node_map = mask.unmasked_nodes();
    let step_map = mask.unmasked_steps();
    let block = full.select(ndarray::Axis(0), &node_map).select(ndarray::Axis(1), &step_map);
    Ok(Gathered { block, node_map, step_map })
}

/// Writes the gathered block back into `full` at its original positions.
pub fn scatter_unmasked(gathered: &Gathered, full: &mut Array3<f64>) {
    for (a, &i) in gathered.node_map.iter().enumerate() {
        for (b, &t) in gathered.step_map.iter().enumerate() {
            full.slice_mut(ndarray::s![i, t, ..]).assign(&gathered.block.slice(ndarray::s![a, b, ..]));
        }
    }
}

//! AdamW with global-norm gradient clipping.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::params::ParamStore;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: i32,
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step as usize
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (name, g) in grads {
            let param = store.get_mut(name).unwrap_or_else(|| panic!("optimizer: unknown parameter `{name}`"));
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            Zip::from(param).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + EPS);
                *p -= self.lr * (update + self.weight_decay * *p);
            });
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Array2<f64>>) -> f64 {
    grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array2<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Array2::from_elem((1, 2), 1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ndarray::array![[0.5, -3.0]]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &grads);
        let w = store.expect("w");
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Array2::from_elem((1, 1), 2.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array2::zeros((1, 1)));
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut store, &grads);
        assert!((store.expect("w")[[0, 0]] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn untouched_parameters_stay_bitwise() {
        let mut store = ParamStore::new();
        store.insert("a", Array2::from_elem((1, 1), 0.3));
        store.insert("b", Array2::from_elem((1, 1), 0.7));
        let before = store.clone();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Array2::from_elem((1, 1), 1.0));
        AdamW::new(0.01, 1e-4).step(&mut store, &grads);
        assert_eq!(before.changed_names(&store), vec!["a".to_string()]);
    }

    #[test]
    fn clipping() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), ndarray::array![[3.0, 4.0]]);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
    }
}

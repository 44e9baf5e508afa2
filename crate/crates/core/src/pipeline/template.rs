//! Task templates: every downstream problem is a particular mask.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{PipelineError, Result};
use crate::data::{round_half_up, sample_random_mask, MaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskKind {
    Forecast,
    Kriging,
    Extrapolation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [Self::Forecast, Self::Kriging, Self::Extrapolation];

    pub fn name(self) -> &'static str {
        match self {
            Self::Forecast => "forecast",
            Self::Kriging => "kriging",
            Self::Extrapolation => "extrapolation",
        }
    }

    /// Whether the task predicts nodes without history.
    pub fn is_spatial(self) -> bool {
        !matches!(self, Self::Forecast)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown task `{s}` (forecast|kriging|extrapolation)"))
    }
}

/// Whether unobserved nodes stay in the graph during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    /// Position in the graph known, signals always masked.
    Transductive,
    /// Removed from graph and data until prediction.
    Inductive,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskTemplate {
    Pretrain { total_ratio: f64 },
    Forecast { hist: usize, pred: usize },
    Kriging { unobserved: Vec<usize>, setting: Setting },
    Extrapolation { unobserved: Vec<usize>, hist: usize, pred: usize },
}

impl TaskTemplate {
    pub fn kind(&self) -> Option<TaskKind> {
        match self {
            Self::Pretrain { .. } => None,
            Self::Forecast { .. } => Some(TaskKind::Forecast),
            Self::Kriging { .. } => Some(TaskKind::Kriging),
            Self::Extrapolation { .. } => Some(TaskKind::Extrapolation),
        }
    }
}

fn check_horizon(hist: usize, pred: usize, t_p: usize) -> Result<()> {
    if hist + pred != t_p || hist == 0 || pred == 0 {
        return Err(PipelineError::Template(format!("history {hist} + horizon {pred} must equal {t_p} patches, both positive")));
    }
    Ok(())
}

fn check_unobserved(unobserved: &[usize], n: usize) -> Result<()> {
    if unobserved.is_empty() || unobserved.iter().any(|&i| i >= n) {
        return Err(PipelineError::Template(format!("unobserved nodes must be a non-empty subset of 0..{n}")));
    }
    let mut u = unobserved.to_vec();
    u.sort_unstable();
    u.dedup();
    if u.len() >= n {
        return Err(PipelineError::Template("unobserved nodes must be a proper subset".into()));
    }
    Ok(())
}

/// The evaluation mask of a template on an `n × t_p` grid. Only `Pretrain`
/// draws from `rng`.
pub fn task_mask<R: Rng + ?Sized>(template: &TaskTemplate, n: usize, t_p: usize, rng: &mut R) -> Result<MaskSpec> {
    let mask = match template {
        TaskTemplate::Pretrain { total_ratio } => sample_random_mask(n, t_p, *total_ratio, rng)?,
        TaskTemplate::Forecast { hist, pred } => {
            check_horizon(*hist, *pred, t_p)?;
            MaskSpec::new(n, t_p, [], *hist..t_p)?
        }
        TaskTemplate::Kriging { unobserved, .. } => {
            check_unobserved(unobserved, n)?;
            MaskSpec::new(n, t_p, unobserved.iter().copied(), [])?
        }
        TaskTemplate::Extrapolation { unobserved, hist, pred } => {
            check_horizon(*hist, *pred, t_p)?;
            check_unobserved(unobserved, n)?;
            let m = MaskSpec::new(n, t_p, unobserved.iter().copied(), *hist..t_p)?;
            let cells = m.masked_nodes.iter().flat_map(|&i| (*hist..t_p).map(move |t| (i, t))).collect();
            m.with_eval_cells(cells)?
        }
    };
    Ok(mask)
}

/// How training masks are drawn in a stage. `hidden` nodes (unobserved nodes
/// kept in the graph) are masked in every draw and never scored.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainMasking {
    /// Random spatio-temporal masking at `ratio`, scored on every masked cell
    /// outside `hidden`.
    Random { ratio: f64, hidden: Vec<usize> },
    /// A task template on pseudo-unobserved nodes drawn from the observed
    /// ones (`pseudo_fraction` of them) for spatial tasks.
    Task { kind: TaskKind, hidden: Vec<usize>, pseudo_fraction: f64, hist: usize, pred: usize },
}

impl TrainMasking {
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, t_p: usize, rng: &mut R) -> Result<MaskSpec> {
        match self {
            Self::Random { ratio, hidden } if hidden.is_empty() => Ok(sample_random_mask(n, t_p, *ratio, rng)?),
            Self::Random { ratio, hidden } => {
                let free: Vec<usize> = (0..n).filter(|i| !hidden.contains(i)).collect();
                let r = 1.0 - (1.0 - ratio).sqrt();
                let k_s = round_half_up(r * free.len() as f64).min(free.len().saturating_sub(1));
                let k_t = round_half_up(r * t_p as f64).min(t_p - 1);
                let nodes = rand::seq::index::sample(rng, free.len(), k_s).into_iter().map(|j| free[j]);
                let steps = rand::seq::index::sample(rng, t_p, k_t).into_vec();
                let m = MaskSpec::new(n, t_p, nodes.chain(hidden.iter().copied()), steps)?;
                let cells = m.masked_cells().into_iter().filter(|(i, _)| !hidden.contains(i)).collect();
                Ok(m.with_eval_cells(cells)?)
            }
            Self::Task { kind: TaskKind::Forecast, hidden, hist, pred, .. } => {
                check_horizon(*hist, *pred, t_p)?;
                let m = MaskSpec::new(n, t_p, hidden.iter().copied(), *hist..t_p)?;
                let cells = m.masked_cells().into_iter().filter(|(i, _)| !hidden.contains(i)).collect();
                Ok(m.with_eval_cells(cells)?)
            }
            Self::Task { kind, hidden, pseudo_fraction, hist, pred } => {
                let free: Vec<usize> = (0..n).filter(|i| !hidden.contains(i)).collect();
                if free.len() < 2 {
                    return Err(PipelineError::Template("spatial task training needs at least two observed nodes".into()));
                }
                let k = round_half_up(pseudo_fraction * free.len() as f64).clamp(1, free.len() - 1);
                let mut pseudo: Vec<usize> = rand::seq::index::sample(rng, free.len(), k).into_iter().map(|j| free[j]).collect();
                pseudo.sort_unstable();
                let steps: Vec<usize> = match kind {
                    TaskKind::Extrapolation => {
                        check_horizon(*hist, *pred, t_p)?;
                        (*hist..t_p).collect()
                    }
                    _ => vec![],
                };
                let m = MaskSpec::new(n, t_p, pseudo.iter().chain(hidden).copied(), steps.iter().copied())?;
                let cells = pseudo
                    .iter()
                    .flat_map(|&i| {
                        let steps = &steps;
                        (0..t_p).filter(move |t| steps.is_empty() || steps.contains(t)).map(move |t| (i, t))
                    })
                    .collect();
                Ok(m.with_eval_cells(cells)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn forecast_masks_last_patch() {
        let m = task_mask(&TaskTemplate::Forecast { hist: 24, pred: 1 }, 7, 25, &mut rng()).unwrap();
        assert_eq!(m.masked_steps, vec![24]);
        assert!(m.masked_nodes.is_empty());
        assert_eq!(m.eval_cells().len(), 7);
    }

    #[test]
    fn kriging_two_to_one() {
        let u = crate::pipeline::split_nodes(9, 1.0 / 3.0, 7);
        assert_eq!(u.len(), 3);
        let m = task_mask(&TaskTemplate::Kriging { unobserved: u.clone(), setting: Setting::Transductive }, 9, 25, &mut rng()).unwrap();
        assert_eq!(m.masked_nodes, u);
        assert!(m.masked_steps.is_empty());
    }

    #[test]
    fn extrapolation_scores_cross_cells_only() {
        let m = task_mask(&TaskTemplate::Extrapolation { unobserved: vec![2], hist: 24, pred: 1 }, 3, 25, &mut rng()).unwrap();
        assert_eq!(m.masked_nodes, vec![2]);
        assert_eq!(m.masked_steps, vec![24]);
        assert_eq!(m.eval_cells(), vec![(2, 24)]);
        assert_eq!(m.masked_cells().len(), 25 + 2);
    }

    #[test]
    fn degenerate_templates_rejected() {
        let mut r = rng();
        assert!(task_mask(&TaskTemplate::Forecast { hist: 20, pred: 1 }, 3, 25, &mut r).is_err());
        assert!(task_mask(&TaskTemplate::Kriging { unobserved: vec![], setting: Setting::Inductive }, 3, 25, &mut r).is_err());
        assert!(task_mask(&TaskTemplate::Kriging { unobserved: vec![0, 1, 2], setting: Setting::Inductive }, 3, 25, &mut r).is_err());
        assert!(task_mask(&TaskTemplate::Kriging { unobserved: vec![3], setting: Setting::Inductive }, 3, 25, &mut r).is_err());
    }

    #[test]
    fn hidden_nodes_masked_but_never_scored() {
        let hidden = vec![1, 4];
        let mut r = rng();
        for masking in [
            TrainMasking::Random { ratio: 0.75, hidden: hidden.clone() },
            TrainMasking::Task { kind: TaskKind::Kriging, hidden: hidden.clone(), pseudo_fraction: 1.0 / 3.0, hist: 5, pred: 1 },
            TrainMasking::Task { kind: TaskKind::Extrapolation, hidden: hidden.clone(), pseudo_fraction: 1.0 / 3.0, hist: 5, pred: 1 },
            TrainMasking::Task { kind: TaskKind::Forecast, hidden: hidden.clone(), pseudo_fraction: 0.0, hist: 5, pred: 1 },
        ] {
            for _ in 0..50 {
                let m = masking.draw(8, 6, &mut r).unwrap();
                assert!(hidden.iter().all(|i| m.masked_nodes.contains(i)));
                let cells = m.eval_cells();
                assert!(!cells.is_empty());
                assert!(cells.iter().all(|(i, t)| !hidden.contains(i) && m.is_masked(*i, *t)));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn templates_are_sound(n in 2usize..40, t_p in 2usize..40, frac in 0.0f64..1.0, kind in 0usize..3, seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let hist = 1 + (frac * (t_p - 1) as f64) as usize % (t_p - 1);
            let pred = t_p - hist;
            let k = 1 + (frac * (n - 1) as f64) as usize % (n - 1);
            let unobserved: Vec<usize> = rand::seq::index::sample(&mut r, n, k).into_vec();
            let template = match kind {
                0 => TaskTemplate::Forecast { hist, pred },
                1 => TaskTemplate::Kriging { unobserved: unobserved.clone(), setting: Setting::Transductive },
                _ => TaskTemplate::Extrapolation { unobserved: unobserved.clone(), hist, pred },
            };
            let m = task_mask(&template, n, t_p, &mut r).unwrap();
            // union structure
            for i in 0..n {
                for t in 0..t_p {
                    prop_assert_eq!(m.is_masked(i, t), m.masked_nodes.contains(&i) || m.masked_steps.contains(&t));
                }
            }
            let cells = m.eval_cells();
            prop_assert!(!cells.is_empty());
            prop_assert!(cells.iter().all(|&(i, t)| m.is_masked(i, t)));
            match template {
                TaskTemplate::Forecast { .. } => prop_assert_eq!(m.masked_steps.clone(), (hist..t_p).collect::<Vec<_>>()),
                TaskTemplate::Kriging { .. } => prop_assert!(m.masked_steps.is_empty()),
                _ => prop_assert_eq!(cells.len(), m.masked_nodes.len() * pred),
            }
        }
    }
}

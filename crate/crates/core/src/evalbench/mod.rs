//! Metrics, statistical baselines, the synthetic multi-domain generator and
//! the experiment runner with its report files.

mod baselines;
mod experiment;
mod report;
mod synth;

pub use baselines::{baseline_ha, baseline_knn, baseline_mean, BaselineMethod};
pub use experiment::{encoder_embeddings, run_experiment, run_seed, task_config, test_windows, Ablation, ExperimentSpec, MetricRow, RunOutcome, TaskScore, TestSet};
pub use report::{merge_reports, read_metrics_csv, svg_line_plot, write_report, Report, REPORTED_PER_STAGE};
pub use synth::{distribution_distance, generate_synthetic, Shift, SynthSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need non-empty aligned inputs (got {pred} predictions, {truth} targets)")]
    Misaligned { pred: usize, truth: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// `(MAE, RMSE)` of aligned slices.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(EvalError::Misaligned { pred: pred.len(), truth: truth.len() });
    }
    let n = pred.len() as f64;
    let (abs, sq) = pred.iter().zip(truth).fold((0.0, 0.0), |(a, s), (p, t)| {
        let d = p - t;
        (a + d.abs(), s + d * d)
    });
    Ok((abs / n, (sq / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let (mae, rmse) = metrics(&[1.0, 2.0], &[1.0, 4.0]).unwrap();
        assert_eq!(mae, 1.0);
        assert!((rmse - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(metrics(&[3.0, -1.0], &[3.0, -1.0]).unwrap(), (0.0, 0.0));
        let (mae, rmse) = metrics(&[2.5, 0.5, 7.5], &[0.0, -2.0, 5.0]).unwrap();
        assert_eq!((mae, rmse), (2.5, 2.5));
        assert!(metrics(&[], &[]).is_err());
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
    }
}

//! Reconstruction accuracy against ground truth: per-frame mean vertex
//! error and its aggregate over a sequence.

use nalgebra::Point3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frame {frame} has {got} vertices, ground truth has {expected}")]
    ShapeMismatch { frame: usize, got: usize, expected: usize },
    #[error("empty sequence")]
    EmptySequence,
}

/// Tracking-error report: e_t = (1/N) sum_n ||v_hat - v||_2 per frame and
/// the mean/std over frames.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub per_frame_error: Vec<f64>,
    pub sequence_mean: f64,
    pub sequence_std: f64,
}

pub fn evaluate(
    estimates: &[Vec<Point3<f64>>],
    ground_truth: &[Vec<Point3<f64>>],
) -> Result<EvalReport, EvalError> {
    if estimates.len() != ground_truth.len() {
        return Err(EvalError::ShapeMismatch {
            frame: estimates.len().min(ground_truth.len()),
            got: estimates.len(),
            expected: ground_truth.len(),
        });
    }
    if estimates.is_empty() {
        return Err(EvalError::EmptySequence);
    }
    let mut per_frame_error = Vec::with_capacity(estimates.len());
    for (t, (est, gt)) in estimates.iter().zip(ground_truth).enumerate() {
        if est.len() != gt.len() || gt.is_empty() {
            return Err(EvalError::ShapeMismatch { frame: t, got: est.len(), expected: gt.len() });
        }
        let sum: f64 = est.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum();
        per_frame_error.push(sum / gt.len() as f64);
    }
    let n = per_frame_error.len() as f64;
    let mean = per_frame_error.iter().sum::<f64>() / n;
    let var = per_frame_error.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(EvalReport { per_frame_error, sequence_mean: mean, sequence_std: var.sqrt() })
}

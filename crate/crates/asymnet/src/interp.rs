//! Linear interpolation in parameter space: loss barriers, monotonicity and
//! convexity statistics, and parameter-distance diagnostics.

use crate::checkpoint::{hex, ModelCheckpoint};
use crate::data::Dataset;
use crate::nn::{build_model, NnError};
use crate::train::evaluate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("incompatible checkpoints: asym hash {a} vs {b}")]
    HashMismatch { a: String, b: String },
    #[error("architectures differ: {a:?} vs {b:?}")]
    ArchMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("need at least 3 interpolation points, got {0}")]
    TooFewPoints(usize),
    #[error("non-uniform alpha grid at index {0}")]
    NonUniformGrid(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type Result<T> = std::result::Result<T, InterpError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpCurve {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl InterpCurve {
    /// CSV with the fixed column order `alpha,loss,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,loss,accuracy\n");
        for i in 0..self.alphas.len() {
            out.push_str(&format!("{},{},{}\n", self.alphas[i], self.losses[i], self.accuracies[i]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MliReport {
    pub delta: f64,
    pub monotone: bool,
    pub local_convexity: f64,
    pub global_convexity: f64,
}

fn check_compatible(a: &ModelCheckpoint, b: &ModelCheckpoint) -> Result<()> {
    if a.config.widths != b.config.widths {
        return Err(InterpError::ArchMismatch {
            a: a.config.widths.clone(),
            b: b.config.widths.clone(),
        });
    }
    if a.asym_hash != b.asym_hash {
        return Err(InterpError::HashMismatch {
            a: hex(&a.asym_hash),
            b: hex(&b.asym_hash),
        });
    }
    Ok(())
}

/// `(1-alpha)*thetaA + alpha*thetaB` over the flat trainable parameters.
/// Masks and fixed payloads are shared by precondition, so the combination is
/// well-defined entrywise.
pub fn interpolate_params(a: &ModelCheckpoint, b: &ModelCheckpoint, alpha: f64) -> Result<Vec<f64>> {
    check_compatible(a, b)?;
    Ok(a.params
        .iter()
        .zip(&b.params)
        .map(|(&pa, &pb)| (1.0 - alpha) * pa + alpha * pb)
        .collect())
}

fn eval_at(a: &ModelCheckpoint, b: &ModelCheckpoint, alpha: f64, data: &Dataset) -> Result<(f64, f64)> {
    let params = interpolate_params(a, b, alpha)?;
    let mut model = build_model(&a.config)?;
    model.set_params_from_flat(&params);
    Ok(evaluate(&model, data, 256)?)
}

/// Midpoint loss minus mean endpoint loss on the given evaluation split.
pub fn barrier(a: &ModelCheckpoint, b: &ModelCheckpoint, data: &Dataset) -> Result<f64> {
    let (mid, _) = eval_at(a, b, 0.5, data)?;
    let (la, _) = eval_at(a, b, 0.0, data)?;
    let (lb, _) = eval_at(a, b, 1.0, data)?;
    Ok(mid - 0.5 * (la + lb))
}

/// Losses and accuracies at `n_points` uniformly spaced alphas, endpoints
/// included.
pub fn curve(a: &ModelCheckpoint, b: &ModelCheckpoint, data: &Dataset, n_points: usize) -> Result<InterpCurve> {
    if n_points < 3 {
        return Err(InterpError::TooFewPoints(n_points));
    }
    let mut alphas = Vec::with_capacity(n_points);
    let mut losses = Vec::with_capacity(n_points);
    let mut accuracies = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let alpha = i as f64 / (n_points - 1) as f64;
        let (l, acc) = eval_at(a, b, alpha, data)?;
        alphas.push(alpha);
        losses.push(l);
        accuracies.push(acc);
    }
    Ok(InterpCurve { alphas, losses, accuracies })
}

/// Monotonicity and convexity statistics of an interpolation curve:
/// delta is the maximum adjacent increase; monotone means delta <= 0 (closed
/// so a flat self-curve counts); local convexity is the interior fraction
/// with nonnegative centered second difference; global convexity is the
/// fraction of all points on or below the endpoint chord.
pub fn mli_metrics(curve: &InterpCurve) -> Result<MliReport> {
    let n = curve.alphas.len();
    if n < 3 {
        return Err(InterpError::TooFewPoints(n));
    }
    let h = curve.alphas[1] - curve.alphas[0];
    for i in 1..n {
        if (curve.alphas[i] - curve.alphas[i - 1] - h).abs() > 1e-12 {
            return Err(InterpError::NonUniformGrid(i));
        }
    }
    let l = &curve.losses;
    let delta = (1..n).map(|i| l[i] - l[i - 1]).fold(f64::NEG_INFINITY, f64::max);
    let local = (1..n - 1).filter(|&i| l[i + 1] - 2.0 * l[i] + l[i - 1] >= 0.0).count();
    let global = (0..n)
        .filter(|&i| {
            let chord = (1.0 - curve.alphas[i]) * l[0] + curve.alphas[i] * l[n - 1];
            l[i] <= chord + 1e-12
        })
        .count();
    Ok(MliReport {
        delta,
        monotone: delta <= 0.0,
        local_convexity: local as f64 / (n - 2) as f64,
        global_convexity: global as f64 / n as f64,
    })
}

/// L2 distance between trainable parameter vectors divided by the
/// trainable-parameter count. Masked weight entries store zero in both
/// checkpoints, so summing over the flat vector only counts trainable ones.
pub fn distance_per_parameter(a: &ModelCheckpoint, b: &ModelCheckpoint) -> Result<f64> {
    check_compatible(a, b)?;
    let sq: f64 = a.params.iter().zip(&b.params).map(|(&x, &y)| (x - y) * (x - y)).sum();
    let count = build_model(&a.config)?.trainable_count();
    Ok(sq.sqrt() / count as f64)
}

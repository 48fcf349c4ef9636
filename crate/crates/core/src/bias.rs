//! Three-branch bias correction on top of a frozen predictor head.
//!
//! Scores above `alpha` get `b̂_a` added, scores below `beta` get `b̂_s`
//! subtracted, and anything in `[beta, alpha]` passes through unchanged.
//! Both offsets are linear in the head's feature vector.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::heads::{HeadInput, PredictorHead};
use crate::metrics;
use crate::training::{self, Dataset, Objective, TrainConfig, TrainingLog};

pub const DEFAULT_ALPHA: f64 = 4.0;
pub const DEFAULT_BETA: f64 = 2.0;

pub const NUM_SEGMENTS: usize = 16;
pub const SEGMENT_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct BiasBranch {
    pub alpha: f64,
    pub beta: f64,
    pub add_weights: Vec<f32>,
    pub add_bias: f32,
    pub sub_weights: Vec<f32>,
    pub sub_bias: f32,
}

pub fn check_thresholds(alpha: f64, beta: f64) -> Result<()> {
    if 1.0 < beta && beta < alpha && alpha < 5.0 {
        Ok(())
    } else {
        Err(Error::InvalidThresholds { alpha, beta })
    }
}

pub fn apply_bias(y_hat: f64, b_a: f64, b_s: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_thresholds(alpha, beta)?;
    Ok(select(y_hat, b_a, b_s, alpha, beta))
}

fn select(y_hat: f64, b_a: f64, b_s: f64, alpha: f64, beta: f64) -> f64 {
    if y_hat > alpha {
        y_hat + b_a
    } else if y_hat < beta {
        y_hat - b_s
    } else {
        y_hat
    }
}

fn affine(w: &[f32], b: f32, v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(&w, x)| f64::from(w) * x).sum::<f64>() + f64::from(b)
}

impl BiasBranch {
    pub fn zeros(dim: usize, alpha: f64, beta: f64) -> Result<Self> {
        check_thresholds(alpha, beta)?;
        Ok(Self {
            alpha,
            beta,
            add_weights: vec![0.0; dim],
            add_bias: 0.0,
            sub_weights: vec![0.0; dim],
            sub_bias: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.add_weights.len()
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        check_thresholds(self.alpha, self.beta)?;
        for len in [self.add_weights.len(), self.sub_weights.len()] {
            if len != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: len,
                });
            }
        }
        let params = self
            .add_weights
            .iter()
            .chain(&self.sub_weights)
            .chain([&self.add_bias, &self.sub_bias]);
        if params.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bias branch parameter"));
        }
        Ok(())
    }

    /// `(b̂_a, b̂_s)` for a feature vector.
    pub fn offsets(&self, v: &[f64]) -> Result<(f64, f64)> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok((
            affine(&self.add_weights, self.add_bias, v),
            affine(&self.sub_weights, self.sub_bias, v),
        ))
    }

    fn to_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.add_weights.iter().map(|&w| f64::from(w)).collect();
        p.push(f64::from(self.add_bias));
        p.extend(self.sub_weights.iter().map(|&w| f64::from(w)));
        p.push(f64::from(self.sub_bias));
        p
    }

    fn from_params(p: &[f64], alpha: f64, beta: f64) -> Self {
        let d = (p.len() - 2) / 2;
        let f = |s: &[f64]| s.iter().map(|&x| x as f32).collect();
        Self {
            alpha,
            beta,
            add_weights: f(&p[..d]),
            add_bias: p[d] as f32,
            sub_weights: f(&p[d + 1..2 * d + 1]),
            sub_bias: p[2 * d + 1] as f32,
        }
    }
}

pub fn forward_corrected(head: &PredictorHead, branch: &BiasBranch, v: &[f64]) -> Result<f64> {
    let y_hat = head.forward(v)?;
    let (b_a, b_s) = branch.offsets(v)?;
    apply_bias(y_hat, b_a, b_s, branch.alpha, branch.beta)
}

/// Frozen-head example: feature vector and base score.
struct Frozen {
    v: Vec<f64>,
    y_hat: f64,
}

struct BranchObjective {
    dim: usize,
    alpha: f64,
    beta: f64,
}

impl Objective for BranchObjective {
    type Input = Frozen;

    fn predict(&self, p: &[f64], x: &Frozen) -> f64 {
        let d = self.dim;
        if x.y_hat > self.alpha {
            x.y_hat + x.v.iter().zip(&p[..d]).map(|(a, b)| a * b).sum::<f64>() + p[d]
        } else if x.y_hat < self.beta {
            let sub = &p[d + 1..2 * d + 1];
            x.y_hat - x.v.iter().zip(sub).map(|(a, b)| a * b).sum::<f64>() - p[2 * d + 1]
        } else {
            x.y_hat
        }
    }

    fn accumulate_gradient(&self, _: &[f64], x: &Frozen, s: f64, g: &mut [f64]) {
        let d = self.dim;
        let (base, sign) = if x.y_hat > self.alpha {
            (0, 1.0)
        } else if x.y_hat < self.beta {
            (d + 1, -1.0)
        } else {
            return;
        };
        for (gi, vi) in g[base..base + d].iter_mut().zip(&x.v) {
            *gi += sign * s * vi;
        }
        g[base + d] += sign * s;
    }
}

fn freeze(head: &PredictorHead, data: &Dataset<HeadInput>) -> Result<Dataset<Frozen>> {
    let inputs = data
        .inputs
        .iter()
        .map(|x| {
            let v = head.feature_vector(x)?;
            let y_hat = head.forward(&v)?;
            Ok(Frozen { v, y_hat })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(inputs, data.labels.clone(), data.systems.clone())
}

/// Trains the add/sub branches with the head held fixed.
///
/// When no training example falls outside `[beta, alpha]` the zero branch is
/// returned together with a log holding only the epoch-0 evaluation.
pub fn train_bias_branch(
    head: &PredictorHead,
    train: &Dataset<HeadInput>,
    val: &Dataset<HeadInput>,
    alpha: f64,
    beta: f64,
    cfg: &TrainConfig,
) -> Result<(BiasBranch, TrainingLog)> {
    check_thresholds(alpha, beta)?;
    cfg.validate()?;
    training::check_splits(train, val)?;
    let dim = head.config.feature_dim();
    let objective = BranchObjective { dim, alpha, beta };
    let train = freeze(head, train)?;
    let val = freeze(head, val)?;
    let zeros = BiasBranch::zeros(dim, alpha, beta)?;

    let active = train
        .inputs
        .iter()
        .any(|x| x.y_hat > alpha || x.y_hat < beta);
    if !active {
        log::warn!("no training score outside [{beta}, {alpha}]; bias branch left at zero");
        let record = training::evaluate(&objective, &zeros.to_params(), 0, &train, &val)?;
        return Ok((
            zeros,
            TrainingLog {
                epochs: vec![record],
                best_epoch: 0,
            },
        ));
    }
    let (params, log) = training::fit(&objective, zeros.to_params(), &train, &val, cfg)?;
    Ok((BiasBranch::from_params(&params, alpha, beta), log))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentError {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for a segment without labels.
    pub mse: Option<f64>,
}

pub fn segment_index(label: f64) -> Option<usize> {
    if !(1.0..=5.0).contains(&label) {
        return None;
    }
    Some((((label - 1.0) / SEGMENT_WIDTH).floor() as usize).min(NUM_SEGMENTS - 1))
}

/// Per-segment MSE over 16 label intervals of width 0.25 on [1, 5].
/// Labels outside [1, 5] are not counted.
pub fn segment_mse(predictions: &[f64], labels: &[f64]) -> Result<Vec<SegmentError>> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    let mut sums = [0.0; NUM_SEGMENTS];
    let mut counts = [0usize; NUM_SEGMENTS];
    for (&p, &y) in predictions.iter().zip(labels) {
        if let Some(k) = segment_index(y) {
            sums[k] += (p - y) * (p - y);
            counts[k] += 1;
        }
    }
    Ok((0..NUM_SEGMENTS)
        .map(|k| SegmentError {
            lo: 1.0 + SEGMENT_WIDTH * k as f64,
            hi: 1.0 + SEGMENT_WIDTH * (k + 1) as f64,
            count: counts[k],
            mse: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        })
        .collect())
}

pub const SEGMENT_CSV_HEADER: &str = "segment_lo,segment_hi,count,mse";

/// Empty segments leave the `mse` field blank.
pub fn segments_to_csv(segments: &[SegmentError]) -> String {
    let mut out = String::from(SEGMENT_CSV_HEADER);
    out.push('\n');
    for s in segments {
        let mse = s.mse.map(metrics::format_value).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", s.lo, s.hi, s.count, mse);
    }
    out
}

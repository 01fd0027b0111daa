//! Reference kernels for the paraphraser's training objective: the DPO loss
//! and the LoRA-adapted linear map. Used to check external trainer logs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// DPO temperature used when a log line does not carry its own.
pub const DEFAULT_BETA: f64 = 0.1;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sequence-level log-probabilities of a preference pair under the policy
/// and the frozen reference model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogProbs {
    pub logp_chosen_policy: f64,
    pub logp_rejected_policy: f64,
    pub logp_chosen_ref: f64,
    pub logp_rejected_ref: f64,
    pub beta: f64,
}

impl PolicyLogProbs {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.logp_chosen_policy,
            self.logp_rejected_policy,
            self.logp_chosen_ref,
            self.logp_rejected_ref,
            self.beta,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        if self.beta <= 0.0 {
            return Err(Error::invalid("beta must be positive"));
        }
        Ok(())
    }

    /// The same pair with chosen and rejected exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            logp_chosen_policy: self.logp_rejected_policy,
            logp_rejected_policy: self.logp_chosen_policy,
            logp_chosen_ref: self.logp_rejected_ref,
            logp_rejected_ref: self.logp_chosen_ref,
            beta: self.beta,
        }
    }
}

/// Implicit reward difference `β·(log-ratio chosen − log-ratio rejected)`.
pub fn reward_margin(lp: &PolicyLogProbs) -> f64 {
    let chosen = lp.logp_chosen_policy - lp.logp_chosen_ref;
    let rejected = lp.logp_rejected_policy - lp.logp_rejected_ref;
    lp.beta * chosen - lp.beta * rejected
}

/// `−ln σ(margin)`, evaluated as `softplus(−margin)`.
pub fn dpo_loss(lp: &PolicyLogProbs) -> f64 {
    softplus(-reward_margin(lp))
}

/// Frozen weight `W0` (d×k) with a rank-r update `B·A`, `B` d×r, `A` r×k.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    pub w0: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearOperator {
    pub fn new(w0: DMatrix<f64>, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let (d, k) = w0.shape();
        let r = a.nrows();
        if a.ncols() != k {
            return Err(Error::DimensionMismatch { expected: k, actual: a.ncols() });
        }
        if b.nrows() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: b.nrows() });
        }
        if b.ncols() != r {
            return Err(Error::DimensionMismatch { expected: r, actual: b.ncols() });
        }
        if r == 0 || r > d.min(k) {
            return Err(Error::invalid(format!("rank {r} must lie in 1..={}", d.min(k))));
        }
        Ok(Self { w0, a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }
}

/// `W0·x + B·(A·x)` without forming `B·A`.
pub fn lora_forward(op: &LinearOperator, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != op.w0.ncols() {
        return Err(Error::DimensionMismatch {
            expected: op.w0.ncols(),
            actual: x.len(),
        });
    }
    let low = &op.a * x;
    Ok(&op.w0 * x + &op.b * low)
}

/// One trainer-log line; `beta` falls back to the caller's default and
/// `loss`, when present, is the trainer's own value to compare against.
#[derive(Debug, Clone, Deserialize)]
pub struct TrainerLogLine {
    pub logp_chosen_policy: f64,
    pub logp_rejected_policy: f64,
    pub logp_chosen_ref: f64,
    pub logp_rejected_ref: f64,
    pub beta: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckedLine {
    pub line: usize,
    pub loss: f64,
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logged_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpoCheck {
    pub lines: Vec<CheckedLine>,
    pub mean_loss: f64,
    pub mean_margin: f64,
    /// Largest |recomputed − logged| over lines that logged a loss.
    pub max_abs_error: Option<f64>,
}

/// Recomputes loss and margin for every line of a trainer log.
pub fn check_trainer_log(path: &Path, default_beta: f64) -> Result<DpoCheck> {
    let rows: Vec<(usize, TrainerLogLine)> = jsonl::read(path)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    let mut lines = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let lp = PolicyLogProbs {
            logp_chosen_policy: row.logp_chosen_policy,
            logp_rejected_policy: row.logp_rejected_policy,
            logp_chosen_ref: row.logp_chosen_ref,
            logp_rejected_ref: row.logp_rejected_ref,
            beta: row.beta.unwrap_or(default_beta),
        };
        lp.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let loss = dpo_loss(&lp);
        lines.push(CheckedLine {
            line,
            loss,
            margin: reward_margin(&lp),
            logged_loss: row.loss,
            abs_error: row.loss.map(|l| (l - loss).abs()),
        });
    }
    let n = lines.len() as f64;
    Ok(DpoCheck {
        mean_loss: lines.iter().map(|l| l.loss).sum::<f64>() / n,
        mean_margin: lines.iter().map(|l| l.margin).sum::<f64>() / n,
        max_abs_error: lines.iter().filter_map(|l| l.abs_error).reduce(f64::max),
        lines,
    })
}

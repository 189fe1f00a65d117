//! Permutation-invariant bag pooling operators.
//!
//! Each operator maps instance scores `z_1..z_K` in `[0, 1]` to the bag
//! probability `theta` in `[0, 1]`:
//!
//! * `Max`: `max_k z_k`, with a subgradient on the first maximizer.
//! * `NoisyOr`: `1 - prod_k (1 - z_k)`, evaluated in log space.
//! * `Isr`: `S / (1 + S)` with odds sum `S = sum_k z_k / (1 - z_k)`.
//! * `Lse`: `(1/r) ln((1/K) sum_k exp(r z_k))`, evaluated with a max shift.
//!
//! Noisy-Or and ISR clamp scores to `[epsilon, 1 - epsilon]` first; both are
//! singular or saturated at the unit score otherwise. Gradients are taken at
//! the clamped scores and passed straight through the clamp.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    NoisyOr,
    Isr,
    Lse,
}

impl PoolKind {
    pub const ALL: [PoolKind; 4] = [PoolKind::Max, PoolKind::NoisyOr, PoolKind::Isr, PoolKind::Lse];

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Max => "max",
            PoolKind::NoisyOr => "nor",
            PoolKind::Isr => "isr",
            PoolKind::Lse => "lse",
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown pooling operator {s:?}; expected one of max, nor, isr, lse"
            ))
        })
    }
}

pub const DEFAULT_LSE_R: f64 = 10.0;
pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingConfig {
    pub kind: PoolKind,
    /// LSE sharpness; ignored by the other operators.
    pub r: f64,
    /// Clamp margin for Noisy-Or/ISR scores and for the bag likelihood.
    pub epsilon: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig::new(PoolKind::NoisyOr)
    }
}

impl PoolingConfig {
    pub fn new(kind: PoolKind) -> Self {
        PoolingConfig {
            kind,
            r: DEFAULT_LSE_R,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn lse(r: f64) -> Self {
        PoolingConfig {
            r,
            ..PoolingConfig::new(PoolKind::Lse)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PoolKind::Lse && !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::config(format!(
                "LSE sharpness r must be positive, got {}",
                self.r
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.01) {
            return Err(Error::config(format!(
                "epsilon must lie in (0, 0.01], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn clamps(&self) -> bool {
        matches!(self.kind, PoolKind::NoisyOr | PoolKind::Isr)
    }
}

/// Instance scores of one bag: at least one value, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::domain("score vector is empty"));
        }
        if let Some(bad) = scores.iter().find(|z| !(0.0..=1.0).contains(*z)) {
            return Err(Error::domain(format!("score {bad} outside [0, 1]")));
        }
        Ok(ScoreVector(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn effective_scores(config: &PoolingConfig, z: &ScoreVector) -> Vec<f64> {
    if config.clamps() {
        let (lo, hi) = (config.epsilon, 1.0 - config.epsilon);
        z.0.iter().map(|v| v.clamp(lo, hi)).collect()
    } else {
        z.0.clone()
    }
}

fn first_argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Bag probability `theta = g(z)`.
pub fn pool(config: &PoolingConfig, z: &ScoreVector) -> Result<f64> {
    config.validate()?;
    let z = effective_scores(config, z);
    let theta = match config.kind {
        PoolKind::Max => z[first_argmax(&z)],
        PoolKind::NoisyOr => {
            let log_none: f64 = z.iter().map(|v| (-v).ln_1p()).sum();
            -log_none.exp_m1()
        }
        PoolKind::Isr => {
            if let [single] = z[..] {
                // odds and back cancel exactly for one instance
                single
            } else {
                let odds: f64 = z.iter().map(|v| v / (1.0 - v)).sum();
                odds / (1.0 + odds)
            }
        }
        PoolKind::Lse => {
            let r = config.r;
            let m = z[first_argmax(&z)];
            let mean_exp = z.iter().map(|v| (r * (v - m)).exp()).sum::<f64>() / z.len() as f64;
            m + mean_exp.ln() / r
        }
    };
    Ok(theta.clamp(0.0, 1.0))
}

/// `upstream * d theta / d z_j` for every instance.
pub fn pool_grad(config: &PoolingConfig, z: &ScoreVector, upstream: f64) -> Result<Vec<f64>> {
    config.validate()?;
    let z = effective_scores(config, z);
    let grad = match config.kind {
        PoolKind::Max => {
            let best = first_argmax(&z);
            (0..z.len()).map(|i| if i == best { upstream } else { 0.0 }).collect()
        }
        PoolKind::NoisyOr => {
            let logs: Vec<f64> = z.iter().map(|v| (-v).ln_1p()).collect();
            let total: f64 = logs.iter().sum();
            logs.iter().map(|l| upstream * (total - l).exp()).collect()
        }
        PoolKind::Isr => {
            let odds: f64 = z.iter().map(|v| v / (1.0 - v)).sum();
            let denom = (1.0 + odds) * (1.0 + odds);
            z.iter().map(|v| upstream / (denom * (1.0 - v) * (1.0 - v))).collect()
        }
        PoolKind::Lse => {
            let r = config.r;
            let m = z[first_argmax(&z)];
            let w: Vec<f64> = z.iter().map(|v| (r * (v - m)).exp()).collect();
            let total: f64 = w.iter().sum();
            w.iter().map(|e| upstream * e / total).collect()
        }
    };
    Ok(grad)
}

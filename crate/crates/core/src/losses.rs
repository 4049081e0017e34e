//! Pairwise and batch contrastive ranking losses over similarity scores,
//! with analytic gradients with respect to those scores.
//!
//! Every function here is pure `f64` math: embedding lookups, sampling and
//! parameter updates live in the trainer.  All formulas are written in a
//! shifted/log domain so that values and gradients stay finite for score
//! magnitudes up to at least 700 in either direction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::Score;
use crate::error::{Error, Result};

/// Which training objective to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bpr,
    Infonce,
    Dcl,
    Hcl,
    Proposed,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Bpr,
        LossKind::Infonce,
        LossKind::Dcl,
        LossKind::Hcl,
        LossKind::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bpr => "bpr",
            LossKind::Infonce => "infonce",
            LossKind::Dcl => "dcl",
            LossKind::Hcl => "hcl",
            LossKind::Proposed => "proposed",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpr" => Ok(LossKind::Bpr),
            "infonce" => Ok(LossKind::Infonce),
            "dcl" => Ok(LossKind::Dcl),
            "hcl" => Ok(LossKind::Hcl),
            "proposed" => Ok(LossKind::Proposed),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss '{other}' (expected bpr, infonce, dcl, hcl or proposed)"
            ))),
        }
    }
}

/// A loss evaluation: the scalar value plus gradients with respect to the
/// positive score and each negative score, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_pos: f64,
    pub grad_negs: Vec<f64>,
}

/// `ln(1 + e^z)` without overflow for any finite `z`.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic function, evaluated from the side that avoids `e^{+|z|}`.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn max_score(pos: f64, rest: &[Score]) -> f64 {
    rest.iter().fold(pos, |m, s| m.max(s.0))
}

/// Pairwise logistic ranking loss `-ln sigma(x_pos - x_neg)`.
pub fn loss_bpr(x_pos: Score, x_neg: Score) -> LossValue {
    pairwise_logistic(x_pos.0, x_neg.0)
}

///// The augmented objective's final form: identical shape to the pairwise
/// logistic loss, but evaluated on the interest-center score and the
/// labeled negative's score.
pub fn loss_proposed(x_up: Score, x_uq: Score) -> LossValue {
    pairwise_logistic(x_up.0, x_uq.0)
}

fn pairwise_logistic(pos: f64, neg: f64) -> LossValue {
    debug_assert!(pos.is_finite() && neg.is_finite());
    let margin = neg - pos;
    let s = sigmoid(margin);
    LossValue {
        value: softplus(margin),
        grad_pos: -s,
        grad_negs: vec![s],
    }
}

/// Batch contrastive loss: `-ln(e^{x_pos} / (e^{x_pos} + sum_n e^{x_n}))`,
/// evaluated via a max-shifted log-sum-exp.
pub fn loss_infonce(x_pos: Score, x_negs: &[Score]) -> Result<LossValue> {
    if x_negs.is_empty() {
        return Err(Error::InvalidConfig(
            "infonce needs at least one negative score".into(),
        ));
    }
    let pos = x_pos.0;
    let m = max_score(pos, x_negs);
    let e_pos = (pos - m).exp();
    let mut z = e_pos;
    let mut e_negs = Vec::with_capacity(x_negs.len());
    for s in x_negs {
        let e = (s.0 - m).exp();
        e_negs.push(e);
        z += e;
    }
    Ok(LossValue {
        value: z.ln() - (pos - m),
        grad_pos: e_pos / z - 1.0,
        grad_negs: e_negs.into_iter().map(|e| e / z).collect(),
    })
}

fn check_contrastive_params(tau_plus: f64, tau: f64) -> Result<()> {
    if !(0.0..1.0).contains(&tau_plus) {
        return Err(Error::InvalidConfig(format!(
            "tau_plus must lie in [0, 1), got {tau_plus}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Shared tail of the debiased losses.  Given `ln(phi)` for the corrected
/// per-negative weight `phi`, the loss is
/// `ln(e^{x_pos} + N * phi) - x_pos = softplus(ln N + ln phi - x_pos)`.
struct DebiasedFrame {
    value: f64,
    grad_pos: f64,
    /// `1 / ((1 - tau_plus) * D)` expressed as `exp(-x_pos - softplus(t))
    /// / (1 - tau_plus)`; multiplying by `d phi/d x_n` (times `N`) yields
    /// the per-negative gradient.
    neg_scale: f64,
}

fn debiased_frame(pos: f64, ln_phi: f64, n: usize, tau_plus: f64) -> DebiasedFrame {
    let t = (n as f64).ln() + ln_phi - pos;
    let sp = softplus(t);
    DebiasedFrame {
        value: sp,
        grad_pos: -sigmoid(t),
        neg_scale: (-pos - sp).exp() / (1.0 - tau_plus),
    }
}

/// Clamped logarithm of the debiased weight.  `phi_shifted_raw` is the raw
/// corrected weight in a frame shifted by `e^{-g}`; the absolute weight is
/// floored at `e^{-1/tau}`.  Returns `(ln phi, clamped)`.
fn ln_phi_clamped(phi_shifted_raw: f64, g: f64, tau: f64) -> (f64, bool) {
    let floor = -1.0 / tau;
    if phi_shifted_raw > 0.0 {
        let ln_raw = g + phi_shifted_raw.ln();
        if ln_raw > floor {
            (ln_raw, false)
        } else {
            (floor, true)
        }
    } else {
        (floor, true)
    }
}

/// Debiased contrastive loss.  The per-negative weight is replaced by
/// `phi = ((1/N) sum_n e^{x_n} - tau_plus * (1/K) sum_k e^{x_extra_k})
/// / (1 - tau_plus)`, clamped from below at `e^{-1/tau}`.  The extra
/// positive scores enter as a fixed correction estimate: gradients are
/// reported for the anchor positive and the negatives only.
pub fn loss_dcl(
    x_pos: Score,
    x_negs: &[Score],
    x_extra_pos: &[Score],
    tau_plus: f64,
    tau: f64,
) -> Result<LossValue> {
    if x_negs.is_empty() {
        return Err(Error::InvalidConfig(
            "dcl needs at least one negative score".into(),
        ));
    }
    if x_extra_pos.is_empty() {
        return Err(Error::InvalidConfig(
            "dcl needs at least one extra positive score".into(),
        ));
    }
    check_contrastive_params(tau_plus, tau)?;

    let pos = x_pos.0;
    let n = x_negs.len();
    let g = max_score(max_score(pos, x_negs), x_extra_pos);
    let mean_neg: f64 =
        x_negs.iter().map(|s| (s.0 - g).exp()).sum::<f64>() / n as f64;
    let mean_extra: f64 = x_extra_pos.iter().map(|s| (s.0 - g).exp()).sum::<f64>()
        / x_extra_pos.len() as f64;
    let phi_shifted_raw = (mean_neg - tau_plus * mean_extra) / (1.0 - tau_plus);
    let (ln_phi, clamped) = ln_phi_clamped(phi_shifted_raw, g, tau);

    let frame = debiased_frame(pos, ln_phi, n, tau_plus);
    let grad_negs = x_negs
        .iter()
        .map(|s| {
            if clamped {
                0.0
            } else {
                // d(N * phi)/d x_n = e^{x_n} / (1 - tau_plus).
                (s.0 + frame.neg_scale.ln()).exp()
            }
        })
        .collect();
    Ok(LossValue {
        value: frame.value,
        grad_pos: frame.grad_pos,
        grad_negs,
    })
}

/// Hardness-weighted contrastive loss.  Negatives are reweighted in
/// proportion to `e^{beta * x_n}`, turning the plain mean of `e^{x_n}`
/// into `e_w = sum_n e^{(1+beta) x_n} / sum_n e^{beta x_n}`; the debiasing
/// correction then uses the anchor positive itself as the extra positive
/// estimate.  `beta = 0` gives the same value as [`loss_dcl`] with a
/// single extra positive equal to `x_pos` — but because the correction
/// here reuses the anchor, `grad_pos` carries an extra factor
/// `1 + tau_plus * e^{x_pos} / ((1 - tau_plus) * phi)` that `loss_dcl`,
/// whose extra positives are independent inputs, does not have.
pub fn loss_hcl(
    x_pos: Score,
    x_negs: &[Score],
    beta: f64,
    tau_plus: f64,
    tau: f64,
) -> Result<LossValue> {
    if x_negs.is_empty() {
        return Err(Error::InvalidConfig(
            "hcl needs at least one negative score".into(),
        ));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    check_contrastive_params(tau_plus, tau)?;

    let pos = x_pos.0;
    let n = x_negs.len();
    let m_x = max_score(f64::NEG_INFINITY, x_negs);
    // a_n = e^{beta (x_n - m_x)}, b_n = e^{(1+beta)(x_n - m_x)}; both <= 1.
    let a: Vec<f64> = x_negs.iter().map(|s| (beta * (s.0 - m_x)).exp()).collect();
    let b: Vec<f64> = x_negs
        .iter()
        .map(|s| ((1.0 + beta) * (s.0 - m_x)).exp())
        .collect();
    let sum_a: f64 = a.iter().sum();
    let sum_b: f64 = b.iter().sum();
    // Weighted mean of e^{x_n}: e_w = e^{m_x} * sum_b / sum_a.
    let ln_ew = m_x + sum_b.ln() - sum_a.ln();

    let g = pos.max(m_x);
    let phi_shifted_raw =
        ((ln_ew - g).exp() - tau_plus * (pos - g).exp()) / (1.0 - tau_plus);
    let (ln_phi, clamped) = ln_phi_clamped(phi_shifted_raw, g, tau);

    let frame = debiased_frame(pos, ln_phi, n, tau_plus);
    let grad_negs = (0..n)
        .map(|i| {
            if clamped {
                0.0
            } else {
                // d e_w/d x_n = e^{m_x} ((1+beta) b_n A - beta a_n B) / A^2.
                let shape =
                    ((1.0 + beta) * b[i] * sum_a - beta * a[i] * sum_b) / (sum_a * sum_a);
                n as f64 * (m_x + frame.neg_scale.ln()).exp() * shape
            }
        })
        .collect();
    // The anchor also sits inside the correction term, so unless the floor
    // is active its gradient gains d ln(phi)/d x_pos = -tau_plus * e^{x_pos}
    // / ((1 - tau_plus) * phi) on top of the shared -sigmoid(t).  Evaluated
    // in log space: the clamp rule keeps x_pos - ln(phi) small enough that
    // the exponential cannot overflow.
    let grad_pos = if clamped || tau_plus == 0.0 {
        frame.grad_pos
    } else {
        let ratio = ((tau_plus / (1.0 - tau_plus)).ln() + pos - ln_phi).exp();
        frame.grad_pos * (1.0 + ratio)
    };
    Ok(LossValue {
        value: frame.value,
        grad_pos,
        grad_negs,
    })
}

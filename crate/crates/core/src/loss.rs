//! Weighted asymmetric absolute loss (the pinball loss) and the ordering
//! penalty used when training interval bounds against a median model.
//!
//! For a quantile level `alpha`, under-prediction (`y > yhat`) costs
//! `alpha * |y - yhat|` and over-prediction costs `(1 - alpha) * |y - yhat|`.
//! The expected-loss minimizer over `yhat` is the `alpha`-quantile of `y`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A probability level strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::InvalidArgument(format!(
                "quantile level must lie in (0, 1), got {alpha}"
            )))
        }
    }

    pub const MEDIAN: QuantileLevel = QuantileLevel(0.5);

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// The level `1 - alpha`.
    pub fn complement(self) -> Self {
        Self(1.0 - self.0)
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

impl fmt::Display for QuantileLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Which side of the reference (median) prediction a bound must stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingSide {
    /// Must stay at or below the reference.
    LowerBound,
    /// Must stay at or above the reference.
    UpperBound,
}

/// Pinball loss of predicting `yhat` when `y` is observed.
#[inline]
pub fn pinball(y: f64, yhat: f64, alpha: QuantileLevel) -> f64 {
    let r = y - yhat;
    if r < 0.0 {
        (1.0 - alpha.0) * -r
    } else {
        alpha.0 * r
    }
}

/// Subgradient of [`pinball`] with respect to `yhat`.
///
/// At `y == yhat` this returns `-alpha`, the slope of the `y >= yhat` branch.
#[inline]
pub fn pinball_grad(y: f64, yhat: f64, alpha: QuantileLevel) -> f64 {
    if y < yhat {
        1.0 - alpha.0
    } else {
        -alpha.0
    }
}

/// Hinge penalty, zero whenever `bound` sits on the correct side of `reference`.
#[inline]
pub fn ordering_penalty(bound: f64, reference: f64, side: OrderingSide, lambda: f64) -> f64 {
    match side {
        OrderingSide::UpperBound => lambda * (reference - bound).max(0.0),
        OrderingSide::LowerBound => lambda * (bound - reference).max(0.0),
    }
}

/// Subgradient of [`ordering_penalty`] with respect to `bound`; zero at equality.
#[inline]
pub fn ordering_penalty_grad(bound: f64, reference: f64, side: OrderingSide, lambda: f64) -> f64 {
    match side {
        OrderingSide::UpperBound if bound < reference => -lambda,
        OrderingSide::LowerBound if bound > reference => lambda,
        _ => 0.0,
    }
}

/// Pinball loss plus the ordering penalty against `reference`.
#[inline]
pub fn bound_loss(
    y: f64,
    yhat: f64,
    alpha: QuantileLevel,
    reference: f64,
    side: OrderingSide,
    lambda: f64,
) -> f64 {
    pinball(y, yhat, alpha) + ordering_penalty(yhat, reference, side, lambda)
}

/// Subgradient of [`bound_loss`] with respect to `yhat`.
#[inline]
pub fn bound_loss_grad(
    y: f64,
    yhat: f64,
    alpha: QuantileLevel,
    reference: f64,
    side: OrderingSide,
    lambda: f64,
) -> f64 {
    pinball_grad(y, yhat, alpha) + ordering_penalty_grad(yhat, reference, side, lambda)
}

/// Mean pinball loss over paired targets and predictions.
pub fn mean_pinball(ys: &[f64], yhats: &[f64], alpha: QuantileLevel) -> f64 {
    assert_eq!(ys.len(), yhats.len());
    if ys.is_empty() {
        return 0.0;
    }
    let total: f64 = ys.iter().zip(yhats).map(|(&y, &p)| pinball(y, p, alpha)).sum();
    total / ys.len() as f64
}

//! Ground-truth quantiles used to check trained models.
//!
//! Everything here is independent of the network code: order statistics,
//! exhaustive grid search over the summed pinball loss, and closed-form or
//! near-exact inverse CDFs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{pinball, QuantileLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Gaussian,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    pub location: f64,
    pub scale: f64,
}

impl DistributionSpec {
    pub fn new(kind: DistributionKind, location: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || !location.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "distribution needs finite location and positive scale, got ({location}, {scale})"
            )));
        }
        Ok(Self {
            kind,
            location,
            scale,
        })
    }

    pub fn laplace(location: f64, scale: f64) -> Result<Self> {
        Self::new(DistributionKind::Laplace, location, scale)
    }

    pub fn gaussian(location: f64, scale: f64) -> Result<Self> {
        Self::new(DistributionKind::Gaussian, location, scale)
    }

    /// Draw one standardized variate (location 0, scale 1).
    fn standard_draw(&self, rng: &mut impl Rng) -> f64 {
        match self.kind {
            DistributionKind::Laplace => {
                let u = open_unit(rng) - 0.5;
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            DistributionKind::Gaussian => {
                // Box-Muller; the second variate of the pair is discarded so
                // each draw consumes a fixed number of random words.
                let u1 = open_unit(rng);
                let u2 = open_unit(rng);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            }
        }
    }

    pub(crate) fn draw(&self, rng: &mut impl Rng) -> f64 {
        self.location + self.scale * self.standard_draw(rng)
    }
}

/// Parses `kind:scale` or `kind:location:scale`, e.g. `laplace:1`, `gaussian:0:2`.
impl FromStr for DistributionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let kind = match parts[0].trim().to_ascii_lowercase().as_str() {
            "laplace" => DistributionKind::Laplace,
            "gaussian" | "normal" => DistributionKind::Gaussian,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown distribution kind `{other}` (expected laplace or gaussian)"
                )))
            }
        };
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number `{t}` in distribution `{s}`")))
        };
        let (location, scale) = match parts.len() {
            1 => (0.0, 1.0),
            2 => (0.0, num(parts[1])?),
            3 => (num(parts[1])?, num(parts[2])?),
            _ => return Err(Error::InvalidArgument(format!("malformed distribution `{s}`"))),
        };
        Self::new(kind, location, scale)
    }
}

impl fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            DistributionKind::Gaussian => "gaussian",
            DistributionKind::Laplace => "laplace",
        };
        write!(f, "{kind}:{}:{}", self.location, self.scale)
    }
}

/// Uniform draw in the open interval (0, 1) with 53 random bits.
pub(crate) fn open_unit(rng: &mut impl Rng) -> f64 {
    ((rng.gen::<u64>() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// `n` i.i.d. draws, deterministic per `seed`.
pub fn sample(dist: &DistributionSpec, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| dist.draw(&mut rng)).collect()
}

/// 1-based rank `ceil(alpha * n)`, treating products within 1e-9 of an
/// integer as that integer.
fn type1_rank(alpha: QuantileLevel, n: usize) -> usize {
    let raw = alpha.value() * n as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (k as usize).clamp(1, n)
}

/// Type-1 sample quantile: the `ceil(alpha * n)`-th order statistic.
pub fn empirical_quantile(samples: &[f64], alpha: QuantileLevel) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("empirical_quantile needs at least one sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[type1_rank(alpha, sorted.len()) - 1])
}

/// The closed interval of minimizers of the summed pinball loss over `samples`.
///
/// When `alpha * n` is an integer `k` the loss is flat between the `k`-th and
/// `(k+1)`-th order statistics; otherwise the minimizer is unique.
pub fn minimizer_interval(samples: &[f64], alpha: QuantileLevel) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("minimizer_interval needs at least one sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let raw = alpha.value() * n as f64;
    let k = type1_rank(alpha, n);
    if (raw - raw.round()).abs() < 1e-9 && k < n {
        Ok((sorted[k - 1], sorted[k]))
    } else {
        Ok((sorted[k - 1], sorted[k - 1]))
    }
}

pub fn total_pinball(samples: &[f64], yhat: f64, alpha: QuantileLevel) -> f64 {
    samples.iter().map(|&y| pinball(y, yhat, alpha)).sum()
}

/// Exhaustive search of `lo, lo + step, ...` up to `hi` for the point with the
/// smallest summed pinball loss. Ties go to the smallest grid point.
pub fn minimize_loss_grid(samples: &[f64], alpha: QuantileLevel, lo: f64, hi: f64, step: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("minimize_loss_grid needs at least one sample"));
    }
    if !(lo < hi) || !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grid needs lo < hi and step > 0, got [{lo}, {hi}] step {step}"
        )));
    }
    let (min, max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo > max || hi < min {
        return Err(Error::SuspectRange { lo, hi, min, max });
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    let mut best = (lo, total_pinball(samples, lo, alpha));
    for i in 1..=count {
        let x = lo + i as f64 * step;
        let l = total_pinball(samples, x, alpha);
        if l < best.1 {
            best = (x, l);
        }
    }
    Ok(best.0)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal inverse CDF: Acklam's rational approximation followed by
/// one Halley refinement against [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// The `alpha`-quantile of `dist`.
pub fn analytic_quantile(dist: &DistributionSpec, alpha: QuantileLevel) -> f64 {
    let a = alpha.value();
    let z = match dist.kind {
        DistributionKind::Laplace => {
            if a <= 0.5 {
                (2.0 * a).ln()
            } else {
                -(2.0 * (1.0 - a)).ln()
            }
        }
        DistributionKind::Gaussian => normal_quantile(a),
    };
    dist.location + dist.scale * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(a: f64) -> QuantileLevel {
        QuantileLevel::new(a).unwrap()
    }

    fn one_to_ten() -> Vec<f64> {
        (1..=10).map(f64::from).collect()
    }

    #[test]
    fn type1_quantiles_of_one_to_ten() {
        assert_eq!(empirical_quantile(&one_to_ten(), q(0.5)).unwrap(), 5.0);
        assert_eq!(empirical_quantile(&one_to_ten(), q(0.9)).unwrap(), 9.0);
        assert_eq!(empirical_quantile(&one_to_ten(), q(0.7)).unwrap(), 7.0);
        assert_eq!(empirical_quantile(&one_to_ten(), q(0.71)).unwrap(), 8.0);
        for a in [0.01, 0.5, 0.99] {
            assert_eq!(empirical_quantile(&[7.0], q(a)).unwrap(), 7.0);
        }
        assert!(matches!(empirical_quantile(&[], q(0.5)), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn grid_minimizer_on_one_to_ten() {
        let x = minimize_loss_grid(&one_to_ten(), q(0.5), 0.0, 11.0, 1e-3).unwrap();
        assert!((5.0 - 1e-3..=6.0 + 1e-3).contains(&x), "{x}");
        assert_eq!(minimizer_interval(&one_to_ten(), q(0.5)).unwrap(), (5.0, 6.0));

        let x = minimize_loss_grid(&[3.0], q(0.7), 2.0, 4.0, 0.01).unwrap();
        assert!((x - 3.0).abs() <= 0.01);
    }

    #[test]
    fn grid_rejects_range_missing_samples() {
        let s = [1.0, 2.0];
        assert!(matches!(
            minimize_loss_grid(&s, q(0.5), 5.0, 6.0, 0.1),
            Err(Error::SuspectRange { .. })
        ));
        assert!(matches!(
            minimize_loss_grid(&s, q(0.5), -3.0, 0.5, 0.1),
            Err(Error::SuspectRange { .. })
        ));
        assert!(minimize_loss_grid(&s, q(0.5), 1.0, 0.0, 0.1).is_err());
        assert!(minimize_loss_grid(&s, q(0.5), 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn laplace_closed_form() {
        let d = DistributionSpec::laplace(0.0, 1.0).unwrap();
        assert_eq!(analytic_quantile(&d, q(0.5)), 0.0);
        assert!((analytic_quantile(&d, q(0.95)) - 10f64.ln()).abs() < 1e-6);
        assert!((analytic_quantile(&d, q(0.05)) + 10f64.ln()).abs() < 1e-6);
        let d = DistributionSpec::laplace(2.0, 3.0).unwrap();
        assert!((analytic_quantile(&d, q(0.1)) - (2.0 + 3.0 * 0.2f64.ln())).abs() < 1e-12);
    }

    /// Normal CDF by composite Simpson quadrature of the density from 0.
    fn simpson_cdf(z: f64) -> f64 {
        let n = 20_000;
        let h = z / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(z);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if simpson_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn gaussian_quantile_matches_bisection_oracle() {
        let d = DistributionSpec::gaussian(0.0, 1.0).unwrap();
        assert!((analytic_quantile(&d, q(0.95)) - 1.644854).abs() < 1e-5);
        for &a in &[0.001, 0.01, 0.025, 0.05, 0.2, 0.5, 0.77, 0.95, 0.99, 0.999] {
            let got = analytic_quantile(&d, q(a));
            let want = bisect_quantile(a);
            assert!((got - want).abs() < 1e-6, "alpha={a}: {got} vs {want}");
        }
    }

    #[test]
    fn sampling_properties() {
        let d = DistributionSpec::laplace(0.0, 1.0).unwrap();
        let s = sample(&d, 10_000, 11);
        assert!(empirical_quantile(&s, q(0.5)).unwrap().abs() < 0.05);
        assert_eq!(sample(&d, 1, 3).len(), 1);
        assert_eq!(sample(&d, 50, 3), sample(&d, 50, 3));

        let d3 = DistributionSpec::laplace(0.0, 3.5).unwrap();
        let scaled: Vec<f64> = sample(&d, 100, 8).iter().map(|v| 3.5 * v).collect();
        assert_eq!(sample(&d3, 100, 8), scaled);
    }

    #[test]
    fn analytic_vs_empirical_large_n() {
        for d in [
            DistributionSpec::laplace(0.0, 1.0).unwrap(),
            DistributionSpec::gaussian(0.0, 1.0).unwrap(),
        ] {
            let s = sample(&d, 50_000, 2024);
            for a in [0.05, 0.5, 0.95] {
                let e = empirical_quantile(&s, q(a)).unwrap();
                let t = analytic_quantile(&d, q(a));
                assert!((e - t).abs() < 0.05, "{d} alpha={a}: {e} vs {t}");
            }
        }
    }

    #[test]
    fn parse_distribution_specs() {
        let d: DistributionSpec = "laplace:1".parse().unwrap();
        assert_eq!(d, DistributionSpec::laplace(0.0, 1.0).unwrap());
        let d: DistributionSpec = "gaussian:2:0.5".parse().unwrap();
        assert_eq!(d, DistributionSpec::gaussian(2.0, 0.5).unwrap());
        assert!("cauchy:1".parse::<DistributionSpec>().is_err());
        assert!("laplace:0".parse::<DistributionSpec>().is_err());
        assert!("laplace:x".parse::<DistributionSpec>().is_err());
    }

    proptest! {
        #[test]
        fn quantiles_monotone_in_alpha(
            s in proptest::collection::vec(-50f64..50.0, 1..100),
            a1 in 0.01f64..0.99,
            a2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(empirical_quantile(&s, q(lo)).unwrap() <= empirical_quantile(&s, q(hi)).unwrap());
            if lo < hi {
                for d in [DistributionSpec::laplace(0.3, 2.0).unwrap(), DistributionSpec::gaussian(-1.0, 0.5).unwrap()] {
                    prop_assert!(analytic_quantile(&d, q(lo)) < analytic_quantile(&d, q(hi)));
                }
            }
        }

        #[test]
        fn type1_quantile_minimizes_total_pinball(
            s in proptest::collection::vec(-20f64..20.0, 1..60),
            a in 0.01f64..0.99,
            probe in -25f64..25.0,
        ) {
            let eq = empirical_quantile(&s, q(a)).unwrap();
            let at_eq = total_pinball(&s, eq, q(a));
            prop_assert!(at_eq <= total_pinball(&s, probe, q(a)) + 1e-9);
        }

        #[test]
        fn quantile_equivariant_under_increasing_affine_maps(
            s in proptest::collection::vec(-20f64..20.0, 1..60),
            a in 0.01f64..0.99,
            scale in 0.01f64..100.0,
            shift in -100f64..100.0,
        ) {
            let mapped: Vec<f64> = s.iter().map(|v| scale * v + shift).collect();
            let lhs = empirical_quantile(&mapped, q(a)).unwrap();
            let rhs = scale * empirical_quantile(&s, q(a)).unwrap() + shift;
            prop_assert_eq!(lhs, rhs);
        }
    }
}

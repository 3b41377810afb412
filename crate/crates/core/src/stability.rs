//! Quadratic Lyapunov function for the closed-loop tracking error and a
//! sampling-based certificate of its decrease over a bounded region.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{closed_loop_rhs, ControlError, ErrorVector, Gains, SINGULARITY_EPS};
use crate::reference::ReferenceState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("Lyapunov weights are not positive definite: leading principal minor {minor} = {value}")]
    InvalidWeights { minor: usize, value: f64 },
    #[error("invalid stability region: {0}")]
    InvalidRegion(String),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Weights of `V(e) = ½ eᵀ M e` with `M = [[δ,0,0],[0,δ₁,1],[0,1,1]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovWeights {
    pub delta: f64,
    pub delta1: f64,
}

impl LyapunovWeights {
    pub const fn new(delta: f64, delta1: f64) -> Self {
        Self { delta, delta1 }
    }

    /// Weights that certify the TurtleBot3 gains over `‖e‖∞ ≤ 0.2`, `|x3*| ≤ 30°`, `u* ∈ [0.1, 0.5]`.
    pub const CERTIFIED: LyapunovWeights = LyapunovWeights { delta: 100.0, delta1: 10.0 };

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.delta, 0.0, 0.0], [0.0, self.delta1, 1.0], [0.0, 1.0, 1.0]]
    }

    /// Eigenvalues of `M` in ascending order.
    pub fn eigenvalues(&self) -> [f64; 3] {
        let mid = 0.5 * (self.delta1 + 1.0);
        let rad = 0.5 * ((self.delta1 - 1.0).powi(2) + 4.0).sqrt();
        let mut ev = [self.delta, mid - rad, mid + rad];
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }
}

impl Default for LyapunovWeights {
    fn default() -> Self {
        Self::CERTIFIED
    }
}

/// Sylvester-criterion result for `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefinitenessCheck {
    pub positive_definite: bool,
    pub minors: [f64; 3],
    /// 1-based index of the first non-positive leading minor.
    pub failed_minor: Option<usize>,
}

pub fn is_positive_definite(w: &LyapunovWeights) -> DefinitenessCheck {
    let minors = [w.delta, w.delta * w.delta1, w.delta * (w.delta1 - 1.0)];
    let failed_minor = minors.iter().position(|m| m.is_nan() || *m <= 0.0).map(|i| i + 1);
    DefinitenessCheck { positive_definite: failed_minor.is_none(), minors, failed_minor }
}

fn require_pd(w: &LyapunovWeights) -> Result<(), StabilityError> {
    let check = is_positive_definite(w);
    match check.failed_minor {
        Some(minor) => Err(StabilityError::InvalidWeights { minor, value: check.minors[minor - 1] }),
        None => Ok(()),
    }
}

pub fn lyapunov_value(e: &ErrorVector, w: &LyapunovWeights) -> Result<f64, StabilityError> {
    require_pd(w)?;
    Ok(quadratic_form(e, w))
}

pub(crate) fn quadratic_form(e: &ErrorVector, w: &LyapunovWeights) -> f64 {
    0.5 * (w.delta * e.e1 * e.e1 + w.delta1 * e.e2 * e.e2 + 2.0 * e.e2 * e.e3 + e.e3 * e.e3)
}

/// `∇V = M e`.
pub fn lyapunov_gradient(e: &ErrorVector, w: &LyapunovWeights) -> [f64; 3] {
    [w.delta * e.e1, w.delta1 * e.e2 + e.e3, e.e2 + e.e3]
}

/// `V̇ = ∇V(e)ᵀ ė` along the closed-loop error dynamics.
pub fn lyapunov_rate(
    e: &ErrorVector,
    reference: &ReferenceState,
    gains: &Gains,
    w: &LyapunovWeights,
) -> Result<f64, StabilityError> {
    require_pd(w)?;
    let g = lyapunov_gradient(e, w);
    let f = closed_loop_rhs(e, reference, gains)?;
    Ok(g[0] * f.e1 + g[1] * f.e2 + g[2] * f.e3)
}

/// Term-by-term expansion of `V̇` with `σ = λ3 tan(e3 + x3*)`, `ψ = u*/cos(e3 + x3*)`,
/// lateral gain `a = λ1` and heading gain `b = λ2`.
pub fn lyapunov_rate_expanded(
    e: &ErrorVector,
    reference: &ReferenceState,
    gains: &Gains,
    w: &LyapunovWeights,
) -> Result<f64, StabilityError> {
    require_pd(w)?;
    let theta = e.e3 + reference.x3s;
    let c = theta.cos();
    if c.abs() < SINGULARITY_EPS {
        return Err(ControlError::HeadingSingularity(c.abs()).into());
    }
    let sigma = gains.lambda3 * theta.tan();
    let psi = reference.u_ref / c;
    let (a, b) = (gains.lambda1, gains.lambda2);
    let (e1, e2, e3) = (e.e1, e.e2, e.e3);
    let s3 = e3.sin();
    Ok(-w.delta * gains.lambda3 * e1 * e1 - w.delta1 * sigma * e1 * e2 - sigma * e1 * e3
        + w.delta1 * psi * e2 * s3
        + psi * e3 * s3
        - a * e2 * e2
        - b * e3 * e3
        - a * e2 * e3
        - b * e2 * e3)
}

/// Box in error space crossed with reference heading and speed ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRegion {
    pub e1_max: f64,
    pub e2_max: f64,
    pub e3_max: f64,
    pub x3s_max: f64,
    pub u_ref_range: [f64; 2],
}

impl StabilityRegion {
    pub fn validate(&self) -> Result<(), StabilityError> {
        let fields = [self.e1_max, self.e2_max, self.e3_max, self.x3s_max];
        if fields.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(StabilityError::InvalidRegion("all bounds must be finite and positive".into()));
        }
        let [lo, hi] = self.u_ref_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(StabilityError::InvalidRegion(format!("u_ref_range [{lo}, {hi}] is not an interval")));
        }
        if (self.x3s_max + self.e3_max).cos() < SINGULARITY_EPS {
            return Err(StabilityError::InvalidRegion(format!(
                "x3s_max + e3_max = {:.4} rad reaches the heading singularity",
                self.x3s_max + self.e3_max
            )));
        }
        Ok(())
    }

    fn point(&self, unit: [f64; 5]) -> (ErrorVector, ReferenceState) {
        let span = |m: f64, t: f64| m * (2.0 * t - 1.0);
        let e = ErrorVector::new(span(self.e1_max, unit[0]), span(self.e2_max, unit[1]), span(self.e3_max, unit[2]));
        let [lo, hi] = self.u_ref_range;
        let reference =
            ReferenceState { x1s: 0.0, x2s: 0.0, x3s: span(self.x3s_max, unit[3]), u_ref: lo + (hi - lo) * unit[4], w_ref: 0.0 };
        (e, reference)
    }
}

/// Constants of `α‖e‖² ≤ V ≤ β‖e‖²` and `V̇ ≤ -ρ‖e‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialBoundEstimate {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub e: ErrorVector,
    pub x3s: f64,
    pub u_ref: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Certification {
    Certified { bounds: ExponentialBoundEstimate, samples: usize },
    /// The sample with the largest `V̇/‖e‖²` among `violations` offending samples.
    Counterexample { worst: Counterexample, violations: usize, samples: usize },
}

impl Certification {
    pub fn is_certified(&self) -> bool {
        matches!(self, Certification::Certified { .. })
    }
}

/// Largest odd `m` with `m^5 <= budget`.
fn grid_side(budget: usize) -> usize {
    let mut m = 1usize;
    while (m + 2).pow(5) <= budget {
        m += 2;
    }
    m
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Checks `V̇ < 0` on a regular grid (corners included) plus a Halton fill of the region.
pub fn certify_region(
    region: &StabilityRegion,
    gains: &Gains,
    w: &LyapunovWeights,
    n_samples: usize,
) -> Result<Certification, StabilityError> {
    region.validate()?;
    require_pd(w)?;
    if n_samples < 1000 {
        return Err(StabilityError::InvalidRegion(format!("need at least 1000 samples, got {n_samples}")));
    }
    let side = grid_side(n_samples / 2);
    let grid_count = side.pow(5);
    let mut rho = f64::INFINITY;
    let mut violations = 0usize;
    let mut worst: Option<Counterexample> = None;

    let mut visit = |unit: [f64; 5]| -> Result<(), StabilityError> {
        let (e, reference) = region.point(unit);
        let n2 = e.e1 * e.e1 + e.e2 * e.e2 + e.e3 * e.e3;
        if n2 == 0.0 {
            return Ok(());
        }
        let rate = lyapunov_rate(&e, &reference, gains, w)?;
        let ratio = -rate / n2;
        rho = rho.min(ratio);
        if rate >= 0.0 {
            violations += 1;
            if worst.is_none_or(|c| rate / n2 > c.rate / (c.e.norm().powi(2))) {
                worst = Some(Counterexample { e, x3s: reference.x3s, u_ref: reference.u_ref, rate });
            }
        }
        Ok(())
    };

    for idx in 0..grid_count {
        let mut unit = [0.5; 5];
        let mut rem = idx;
        if side > 1 {
            for u in unit.iter_mut() {
                *u = (rem % side) as f64 / (side - 1) as f64;
                rem /= side;
            }
        }
        visit(unit)?;
    }
    const BASES: [u64; 5] = [2, 3, 5, 7, 11];
    for i in 0..(n_samples - grid_count) {
        let k = (i + 20) as u64;
        let unit = BASES.map(|b| radical_inverse(k, b));
        visit(unit)?;
    }

    let ev = w.eigenvalues();
    Ok(match worst {
        Some(worst) => Certification::Counterexample { worst, violations, samples: n_samples },
        None => Certification::Certified {
            bounds: ExponentialBoundEstimate { alpha: 0.5 * ev[0], beta: 0.5 * ev[2], rho },
            samples: n_samples,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn value_examples() {
        let w = LyapunovWeights::new(2.0, 3.0);
        assert_eq!(lyapunov_value(&ErrorVector::ZERO, &w).unwrap(), 0.0);
        assert_eq!(lyapunov_value(&ErrorVector::new(1.0, 0.0, 0.0), &w).unwrap(), 1.0);
        let w = LyapunovWeights::new(2.0, 2.0);
        assert_eq!(lyapunov_value(&ErrorVector::new(0.0, 1.0, 1.0), &w).unwrap(), 2.5);
    }

    #[test]
    fn value_rejects_indefinite_weights() {
        let w = LyapunovWeights::new(2.0, 0.5);
        assert_eq!(
            lyapunov_value(&ErrorVector::ZERO, &w),
            Err(StabilityError::InvalidWeights { minor: 3, value: -1.0 })
        );
    }

    #[test]
    fn definiteness_examples() {
        let c = is_positive_definite(&LyapunovWeights::new(2.0, 2.0));
        assert!(c.positive_definite);
        assert_eq!(c.minors, [2.0, 4.0, 2.0]);
        let c = is_positive_definite(&LyapunovWeights::new(2.0, 0.5));
        assert_eq!(c.failed_minor, Some(3));
        assert_abs_diff_eq!(c.minors[2] / 2.0, -0.5);
        assert_eq!(is_positive_definite(&LyapunovWeights::new(0.0, 3.0)).failed_minor, Some(1));
    }

    #[test]
    fn rate_examples() {
        let w = LyapunovWeights::new(2.0, 3.0);
        let g = Gains::new(4.5, 7.5, 2.5);
        let r = ReferenceState { x1s: 0.0, x2s: 0.0, x3s: 0.0, u_ref: 0.3, w_ref: 0.0 };
        assert_eq!(lyapunov_rate(&ErrorVector::ZERO, &r, &g, &w).unwrap(), 0.0);
        let rate = lyapunov_rate(&ErrorVector::new(0.1, 0.0, 0.0), &r, &g, &w).unwrap();
        assert_abs_diff_eq!(rate, -0.05, epsilon = 1e-15);
        let rate = lyapunov_rate_expanded(&ErrorVector::new(0.1, 0.0, 0.0), &r, &g, &w).unwrap();
        assert_abs_diff_eq!(rate, -0.05, epsilon = 1e-15);
    }

    #[test]
    fn eigenvalues_match_characteristic_polynomial() {
        let w = LyapunovWeights::new(2.0, 3.0);
        let ev = w.eigenvalues();
        assert!(ev[0] <= ev[1] && ev[1] <= ev[2]);
        // det(M - λI) = (δ - λ)((δ₁ - λ)(1 - λ) - 1)
        for l in ev {
            let p = (w.delta - l) * ((w.delta1 - l) * (1.0 - l) - 1.0);
            assert_abs_diff_eq!(p, 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(ev[0], 2.0 - 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(ev[2], 2.0 + 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn region_validation() {
        let ok = StabilityRegion { e1_max: 0.2, e2_max: 0.2, e3_max: 0.2, x3s_max: 0.5, u_ref_range: [0.1, 0.5] };
        assert!(ok.validate().is_ok());
        let steep = StabilityRegion { x3s_max: 1.5, ..ok };
        assert!(matches!(steep.validate(), Err(StabilityError::InvalidRegion(_))));
        let flipped = StabilityRegion { u_ref_range: [0.5, 0.1], ..ok };
        assert!(flipped.validate().is_err());
        let g = Gains::TURTLEBOT3;
        assert!(certify_region(&ok, &g, &LyapunovWeights::CERTIFIED, 10).is_err());
    }

    #[test]
    fn grid_side_is_odd_and_fits() {
        assert_eq!(grid_side(500), 3);
        assert_eq!(grid_side(50_000), 7);
        assert_eq!(grid_side(1), 1);
    }
}

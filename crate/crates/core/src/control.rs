//! Tracking errors, the feedback law and its closed-loop error dynamics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{wrap, AgentState, ControlInput};
use crate::reference::ReferenceState;

/// Lower bound on `|cos|` in the control and closed-loop denominators.
pub const SINGULARITY_EPS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("heading singularity: |cos(x3* + e3)| = {0:.4} < {SINGULARITY_EPS}")]
    HeadingSingularity(f64),
    #[error("reference heading singularity: |cos(x3*)| = {0:.4} < {SINGULARITY_EPS}")]
    TanSingularity(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorVector {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
}

impl ErrorVector {
    pub const ZERO: ErrorVector = ErrorVector { e1: 0.0, e2: 0.0, e3: 0.0 };

    pub fn new(e1: f64, e2: f64, e3: f64) -> Self {
        Self { e1, e2, e3 }
    }

    pub fn norm(&self) -> f64 {
        (self.e1 * self.e1 + self.e2 * self.e2 + self.e3 * self.e3).sqrt()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.e1, self.e2, self.e3]
    }

    fn is_finite(&self) -> bool {
        self.e1.is_finite() && self.e2.is_finite() && self.e3.is_finite()
    }
}

/// Feedback gains; `lambda1` weights lateral error, `lambda2` heading error and
/// `lambda3` longitudinal error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Gains {
    pub const TURTLEBOT3: Gains = Gains { lambda1: 4.5, lambda2: 7.5, lambda3: 2.5 };
    pub const LAIKAGO: Gains = Gains { lambda1: 4.5, lambda2: 1.5, lambda3: 2.5 };
    pub const MIXED: Gains = Gains { lambda1: 5.0, lambda2: 1.0, lambda3: 1.5 };

    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        Self { lambda1, lambda2, lambda3 }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.lambda1) && ok(self.lambda2) && ok(self.lambda3) {
            Ok(())
        } else {
            Err(format!(
                "gains must be finite and strictly positive (lambda1={}, lambda2={}, lambda3={})",
                self.lambda1, self.lambda2, self.lambda3
            ))
        }
    }
}

fn ref_finite(r: &ReferenceState) -> bool {
    [r.x1s, r.x2s, r.x3s, r.u_ref, r.w_ref].iter().all(|v| v.is_finite())
}

/// `e = (x1 - x1*, x2 - x2*, wrap(x3 - x3*))`, both poses in the same frame.
pub fn compute_error(state: &AgentState, reference: &ReferenceState) -> Result<ErrorVector, ControlError> {
    if !state.is_finite() || !ref_finite(reference) {
        return Err(ControlError::NonFiniteInput);
    }
    Ok(ErrorVector { e1: state.x1 - reference.x1s, e2: state.x2 - reference.x2s, e3: wrap(state.x3 - reference.x3s) })
}

fn heading_cos(e: &ErrorVector, reference: &ReferenceState) -> Result<f64, ControlError> {
    let c = (reference.x3s + e.e3).cos();
    if c.abs() < SINGULARITY_EPS {
        return Err(ControlError::HeadingSingularity(c.abs()));
    }
    Ok(c)
}

/// `u = (u* cos x3* - λ3 e1) / cos(x3* + e3)`, `ω = ω* - λ2 e3 - λ1 e2`.
pub fn control_law(e: &ErrorVector, reference: &ReferenceState, gains: &Gains) -> Result<ControlInput, ControlError> {
    if !e.is_finite() || !ref_finite(reference) {
        return Err(ControlError::NonFiniteInput);
    }
    let c = heading_cos(e, reference)?;
    let u = (reference.u_ref * reference.x3s.cos() - gains.lambda3 * e.e1) / c;
    let omega = reference.w_ref - gains.lambda2 * e.e3 - gains.lambda1 * e.e2;
    Ok(ControlInput { u, omega })
}

/// Open-loop error derivative for arbitrary inputs: `ė = f(x, u) - f(x*, u*)`.
pub fn error_rhs(e: &ErrorVector, reference: &ReferenceState, input: ControlInput) -> ErrorVector {
    let x3 = reference.x3s + e.e3;
    ErrorVector {
        e1: input.u * x3.cos() - reference.u_ref * reference.x3s.cos(),
        e2: input.u * x3.sin() - reference.u_ref * reference.x3s.sin(),
        e3: input.omega - reference.w_ref,
    }
}

/// Closed-loop error derivative with the feedback law substituted analytically.
pub fn closed_loop_rhs(e: &ErrorVector, reference: &ReferenceState, gains: &Gains) -> Result<ErrorVector, ControlError> {
    if !e.is_finite() || !ref_finite(reference) {
        return Err(ControlError::NonFiniteInput);
    }
    let c = heading_cos(e, reference)?;
    let c_ref = reference.x3s.cos();
    if c_ref.abs() < SINGULARITY_EPS {
        return Err(ControlError::TanSingularity(c_ref.abs()));
    }
    let tan_actual = (reference.x3s + e.e3).sin() / c;
    Ok(ErrorVector {
        e1: -gains.lambda3 * e.e1,
        e2: -gains.lambda3 * e.e1 * tan_actual + reference.u_ref * e.e3.sin() / c,
        e3: -gains.lambda1 * e.e2 - gains.lambda2 * e.e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn reference(x3s: f64, u_ref: f64, w_ref: f64) -> ReferenceState {
        ReferenceState { x1s: 0.0, x2s: 0.0, x3s, u_ref, w_ref }
    }

    #[test]
    fn error_examples() {
        let r = ReferenceState { x1s: 0.5, x2s: 2.5, x3s: -0.1, u_ref: 0.0, w_ref: 0.0 };
        let s = AgentState::at_pose(1.0, 2.0, 0.1);
        let e = compute_error(&s, &r).unwrap();
        assert_abs_diff_eq!(e.e1, 0.5);
        assert_abs_diff_eq!(e.e2, -0.5);
        assert_abs_diff_eq!(e.e3, 0.2, epsilon = 1e-15);

        let same = AgentState::at_pose(0.5, 2.5, -0.1);
        assert_eq!(compute_error(&same, &r).unwrap(), ErrorVector::ZERO);

        let wrapped = compute_error(&AgentState::at_pose(0.0, 0.0, 3.0), &reference(-3.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(wrapped.e3, 6.0 - 2.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrapped.e3, -0.2832, epsilon = 1e-4);
    }

    #[test]
    fn control_law_examples() {
        let g = Gains::TURTLEBOT3;
        let r = reference(0.3, 0.7, 0.2);
        let c = control_law(&ErrorVector::ZERO, &r, &g).unwrap();
        assert_abs_diff_eq!(c.u, 0.7, epsilon = 1e-15);
        assert_eq!(c.omega, 0.2);

        let r = reference(0.0, 1.0, 0.4);
        let c = control_law(&ErrorVector::new(0.5, 0.0, 0.0), &r, &g).unwrap();
        assert_abs_diff_eq!(c.u, -0.25, epsilon = 1e-15);
        assert_eq!(c.omega, 0.4);

        let r = reference(FRAC_PI_2, 1.0, 0.0);
        assert!(matches!(control_law(&ErrorVector::ZERO, &r, &g), Err(ControlError::HeadingSingularity(_))));
    }

    #[test]
    fn closed_loop_examples() {
        let g = Gains::TURTLEBOT3;
        let r = reference(0.4, 0.6, -0.3);
        assert_eq!(closed_loop_rhs(&ErrorVector::ZERO, &r, &g).unwrap(), ErrorVector::ZERO);
        let d = closed_loop_rhs(&ErrorVector::new(1.0, 0.0, 0.0), &reference(0.0, 0.5, 0.0), &g).unwrap();
        assert_eq!((d.e1, d.e2, d.e3), (-2.5, 0.0, 0.0));
    }

    #[test]
    fn closed_loop_guards() {
        let g = Gains::LAIKAGO;
        let e = ErrorVector::new(0.1, 0.0, FRAC_PI_2 - 0.2);
        assert!(matches!(closed_loop_rhs(&e, &reference(0.2, 0.5, 0.0), &g), Err(ControlError::HeadingSingularity(_))));
        let e = ErrorVector::new(0.1, 0.0, -1.0);
        assert!(matches!(
            closed_loop_rhs(&e, &reference(FRAC_PI_2 - 0.01, 0.5, 0.0), &g),
            Err(ControlError::TanSingularity(_))
        ));
    }

    #[test]
    fn gains_validation() {
        assert!(Gains::MIXED.validate().is_ok());
        assert!(Gains::new(1.0, 0.0, 1.0).validate().is_err());
        assert!(Gains::new(1.0, 1.0, f64::NAN).validate().is_err());
    }
}

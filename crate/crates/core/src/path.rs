//! Reference curves expressed as `y = g(x)` in a rotatable local frame.
//!
//! A [`PathModel`] interpolates an ordered list of waypoints whose abscissae are
//! strictly increasing. The default interpolant is a clamped cubic B-spline
//! (not-a-knot knot vector, so it passes through every waypoint); a global
//! barycentric polynomial is available for comparison. Because the curve is a
//! function of `x`, steep sections are handled by re-expressing the waypoints in a
//! rotated frame rather than by a parametric representation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Heading above which the local frame must be rotated (60°).
pub const DEFAULT_STEEP_THRESHOLD: f64 = std::f64::consts::FRAC_PI_3;
/// Leader-local heading after a frame rotation (15°).
pub const DEFAULT_ROTATION_TARGET: f64 = std::f64::consts::PI / 12.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PathError {
    #[error("need at least 4 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoint abscissae must be strictly increasing (violated at index {0})")]
    NonMonotoneAbscissae(usize),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("abscissa {x} outside path domain [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
    #[error("commanded heading {heading:.4} rad exceeds steep threshold {threshold:.4} rad")]
    SteepHeading { heading: f64, threshold: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, PathError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Interpolation point in the path's local frame.
pub type Waypoint = Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplineKind {
    #[default]
    ClampedCubicBSpline,
    Barycentric,
}

/// Maps local-frame coordinates to the global frame: `global = origin + R(rotation) * local`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub rotation: f64,
    pub origin: Point,
}

impl Default for FrameTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl FrameTransform {
    pub const IDENTITY: FrameTransform = FrameTransform { rotation: 0.0, origin: Point::new(0.0, 0.0) };

    pub fn new(rotation: f64, origin: Point) -> Self {
        Self { rotation, origin }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.origin.x == 0.0 && self.origin.y == 0.0
    }

    pub fn to_global(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        Point::new(self.origin.x + c * p.x - s * p.y, self.origin.y + s * p.x + c * p.y)
    }

    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let dx = p.x - self.origin.x;
        let dy = p.y - self.origin.y;
        Point::new(c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn heading_to_global(&self, heading: f64) -> f64 {
        heading + self.rotation
    }

    pub fn heading_to_local(&self, heading: f64) -> f64 {
        heading - self.rotation
    }
}

/// Value and first two derivatives of `g` at one abscissa.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub y: f64,
    pub dy_dx: f64,
    pub d2y_dx2: f64,
}

impl PathSample {
    /// Signed curvature `g'' / (1 + g'^2)^(3/2)`.
    pub fn curvature(&self) -> f64 {
        self.d2y_dx2 / (1.0 + self.dy_dx * self.dy_dx).powf(1.5)
    }

    pub fn heading(&self) -> f64 {
        self.dy_dx.atan()
    }
}

/// Tuning for [`PathModel::replan`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplanParams {
    /// Abscissa span covered by the new waypoints ahead of the anchor.
    pub lookahead: f64,
    pub n_new_waypoints: usize,
    /// Arc length of existing geometry kept behind the anchor.
    pub retain_length: f64,
    /// Abscissa span behind the anchor over which the old curve is blended into the new heading.
    pub blend_length: f64,
    pub steep_threshold: f64,
}

impl Default for ReplanParams {
    fn default() -> Self {
        Self {
            lookahead: 2.0,
            n_new_waypoints: 8,
            retain_length: 4.0,
            blend_length: 0.5,
            steep_threshold: DEFAULT_STEEP_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
enum Curve {
    BSpline(CubicBSpline),
    Barycentric(BarycentricPoly),
}

#[derive(Debug, Clone)]
pub struct PathModel {
    waypoints: Vec<Waypoint>,
    kind: SplineKind,
    frame: FrameTransform,
    curve: Curve,
}

impl PartialEq for PathModel {
    fn eq(&self, other: &Self) -> bool {
        self.waypoints == other.waypoints && self.kind == other.kind && self.frame == other.frame
    }
}

impl PathModel {
    pub fn build(waypoints: Vec<Waypoint>, kind: SplineKind) -> Result<Self> {
        Self::build_in_frame(waypoints, kind, FrameTransform::IDENTITY)
    }

    pub fn build_in_frame(waypoints: Vec<Waypoint>, kind: SplineKind, frame: FrameTransform) -> Result<Self> {
        if !frame.rotation.is_finite() || !frame.origin.is_finite() {
            return Err(PathError::NonFiniteInput);
        }
        if waypoints.iter().any(|p| !p.is_finite()) {
            return Err(PathError::NonFiniteInput);
        }
        if waypoints.len() < 4 {
            return Err(PathError::TooFewWaypoints(waypoints.len()));
        }
        if let Some(i) = waypoints.windows(2).position(|w| w[1].x <= w[0].x) {
            return Err(PathError::NonMonotoneAbscissae(i + 1));
        }
        let xs: Vec<f64> = waypoints.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = waypoints.iter().map(|p| p.y).collect();
        let curve = match kind {
            SplineKind::ClampedCubicBSpline => Curve::BSpline(CubicBSpline::interpolate(&xs, &ys)?),
            SplineKind::Barycentric => Curve::Barycentric(BarycentricPoly::new(xs, ys)),
        };
        Ok(Self { waypoints, kind, frame, curve })
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn kind(&self) -> SplineKind {
        self.kind
    }

    pub fn frame(&self) -> FrameTransform {
        self.frame
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.waypoints[0].x, self.waypoints[self.waypoints.len() - 1].x)
    }

    pub fn contains(&self, x: f64) -> bool {
        let (lo, hi) = self.domain();
        x >= lo && x <= hi
    }

    /// Knot vector of the B-spline interpolant (`None` for barycentric paths).
    pub fn knots(&self) -> Option<&[f64]> {
        match &self.curve {
            Curve::BSpline(s) => Some(&s.knots),
            Curve::Barycentric(_) => None,
        }
    }

    /// B-spline coefficients (`None` for barycentric paths).
    pub fn coefficients(&self) -> Option<&[f64]> {
        match &self.curve {
            Curve::BSpline(s) => Some(&s.coeffs),
            Curve::Barycentric(_) => None,
        }
    }

    fn check(&self, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(PathError::NonFiniteInput);
        }
        let (lo, hi) = self.domain();
        if x < lo || x > hi {
            return Err(PathError::OutOfDomain { x, lo, hi });
        }
        Ok(())
    }

    fn sample_unchecked(&self, x: f64) -> PathSample {
        match &self.curve {
            Curve::BSpline(s) => s.eval(x),
            Curve::Barycentric(b) => b.eval(x),
        }
    }

    fn slope_unchecked(&self, x: f64) -> f64 {
        match &self.curve {
            Curve::BSpline(s) => s.slope(x),
            Curve::Barycentric(b) => b.eval(x).dy_dx,
        }
    }

    pub fn eval(&self, x: f64) -> Result<PathSample> {
        self.check(x)?;
        Ok(self.sample_unchecked(x))
    }

    pub fn curvature(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.curvature())
    }

    pub fn heading(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.heading())
    }

    /// Local-frame point on the curve at abscissa `x`.
    pub fn point(&self, x: f64) -> Result<Point> {
        Ok(Point::new(x, self.eval(x)?.y))
    }

    /// Arc length between two abscissae (negative when `x_to < x_from`).
    pub fn arc_length(&self, x_from: f64, x_to: f64) -> Result<f64> {
        self.check(x_from)?;
        self.check(x_to)?;
        if x_from == x_to {
            return Ok(0.0);
        }
        if x_to < x_from {
            return Ok(-self.arc_length(x_to, x_from)?);
        }
        // Integrate piecewise between waypoint abscissae, where the integrand is smooth.
        let mut total = 0.0;
        let mut a = x_from;
        for w in self.waypoints.iter().map(|p| p.x).filter(|&k| k > x_from && k < x_to) {
            total += self.integrate_piece(a, w);
            a = w;
        }
        total += self.integrate_piece(a, x_to);
        Ok(total)
    }

    fn integrate_piece(&self, a: f64, b: f64) -> f64 {
        let f = |x: f64| {
            let d = self.slope_unchecked(x);
            (1.0 + d * d).sqrt()
        };
        let fa = f(a);
        let fb = f(b);
        let m = 0.5 * (a + b);
        let fm = f(m);
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        adaptive_simpson(&f, a, b, fa, fm, fb, whole, 1e-12 * (b - a).max(1e-3), 48)
    }

    /// Abscissa whose arc-length distance from `x_anchor` is `s`; positive `s` lies
    /// behind the anchor (smaller `x`), negative `s` ahead of it.
    pub fn point_at_arc_length(&self, x_anchor: f64, s: f64) -> Result<f64> {
        self.check(x_anchor)?;
        if !s.is_finite() {
            return Err(PathError::NonFiniteInput);
        }
        if s == 0.0 {
            return Ok(x_anchor);
        }
        let (lo, hi) = self.domain();
        let target = s.abs();
        // Arc length is at least the abscissa span, so the answer lies within |s| of the anchor.
        let (mut a, mut b) = if s > 0.0 {
            let avail = self.arc_length(lo, x_anchor)?;
            if avail + 1e-12 < target {
                return Err(PathError::OutOfDomain { x: x_anchor - target, lo, hi });
            }
            ((x_anchor - target).max(lo), x_anchor)
        } else {
            let avail = self.arc_length(x_anchor, hi)?;
            if avail + 1e-12 < target {
                return Err(PathError::OutOfDomain { x: x_anchor + target, lo, hi });
            }
            (x_anchor, (x_anchor + target).min(hi))
        };
        // distance(x) - target is monotone over [a, b]
        let dist = |x: f64| -> f64 {
            let len = if s > 0.0 { self.arc_length(x, x_anchor) } else { self.arc_length(x_anchor, x) };
            len.unwrap_or(f64::NAN) - target
        };
        let behind = s > 0.0;
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            let fm = dist(m);
            if fm.abs() <= 1e-10 || (b - a) <= 4.0 * f64::EPSILON * m.abs().max(1.0) {
                return Ok(m);
            }
            // Behind the anchor the distance shrinks as x grows; ahead it grows.
            if (fm > 0.0) == behind {
                a = m;
            } else {
                b = m;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// Builds a new path that keeps the geometry behind `anchor_x`, passes through
    /// the anchor point and continues along `heading_command` (local frame).
    pub fn replan(&self, anchor_x: f64, heading_command: f64, params: &ReplanParams) -> Result<PathModel> {
        self.check(anchor_x)?;
        if !heading_command.is_finite() {
            return Err(PathError::NonFiniteInput);
        }
        if !(params.lookahead.is_finite() && params.lookahead > 0.0) {
            return Err(PathError::InvalidParameter(format!("lookahead must be > 0, got {}", params.lookahead)));
        }
        if params.n_new_waypoints < 3 {
            return Err(PathError::InvalidParameter(format!(
                "n_new_waypoints must be >= 3, got {}",
                params.n_new_waypoints
            )));
        }
        if heading_command.abs() >= params.steep_threshold {
            return Err(PathError::SteepHeading { heading: heading_command, threshold: params.steep_threshold });
        }
        let (lo, _) = self.domain();
        let spacing = params.lookahead / params.n_new_waypoints as f64;
        let slope = heading_command.tan();
        let anchor = self.sample_unchecked(anchor_x);

        let blend = params.blend_length.max(0.0).min(anchor_x - lo);
        let blend_start = anchor_x - blend;
        let tail = match self.point_at_arc_length(anchor_x, params.retain_length.max(0.0)) {
            Ok(x) => x,
            Err(PathError::OutOfDomain { .. }) => lo,
            Err(e) => return Err(e),
        };

        let mut pts = Vec::new();
        let history = blend_start - tail;
        if history > 1e-9 {
            let m = (history / spacing).ceil().max(1.0) as usize;
            for i in 0..m {
                let x = tail + history * i as f64 / m as f64;
                pts.push(Point::new(x, self.sample_unchecked(x).y));
            }
        }
        if blend > 1e-9 {
            let start = self.sample_unchecked(blend_start);
            let blend_fn = QuinticBlend {
                x0: blend_start,
                h: blend,
                y0: start.y,
                m0: start.dy_dx,
                c0: start.d2y_dx2,
                y1: anchor.y,
                m1: slope,
                c1: 0.0,
            };
            let sub = spacing / 4.0;
            let m = (blend / sub).ceil().max(1.0) as usize;
            for i in 0..m {
                let x = blend_start + blend * i as f64 / m as f64;
                pts.push(Point::new(x, blend_fn.value(x)));
            }
        }
        pts.push(Point::new(anchor_x, anchor.y));
        for j in 1..=params.n_new_waypoints {
            let dx = spacing * j as f64;
            pts.push(Point::new(anchor_x + dx, anchor.y + dx * slope));
        }
        PathModel::build_in_frame(pts, self.kind, self.frame)
    }

    /// Rotates the local frame about the point at `pivot_x` by `delta` radians.
    ///
    /// The returned transform is the new local-to-global frame; waypoints keep their
    /// global positions.
    pub fn rotated(&self, pivot_x: f64, delta: f64) -> Result<(PathModel, FrameTransform)> {
        self.check(pivot_x)?;
        if !delta.is_finite() {
            return Err(PathError::NonFiniteInput);
        }
        if delta == 0.0 {
            return Ok((self.clone(), self.frame));
        }
        let pivot = self.frame.to_global(Point::new(pivot_x, self.sample_unchecked(pivot_x).y));
        let frame = FrameTransform::new(self.frame.rotation + delta, pivot);
        let pts: Vec<Point> = self.waypoints.iter().map(|p| frame.to_local(self.frame.to_global(*p))).collect();
        if let Some(i) = pts.windows(2).position(|w| w[1].x <= w[0].x) {
            return Err(PathError::DegenerateGeometry(format!(
                "waypoint {} folds back after rotating by {:.4} rad",
                i + 1,
                delta
            )));
        }
        let path = PathModel::build_in_frame(pts, self.kind, frame)?;
        Ok((path, frame))
    }

    /// Rotates the frame when the local heading at `leader_x` exceeds `target`, so that
    /// the leader-local heading becomes `±target`. Returns an unchanged path otherwise.
    pub fn rotate_frame(&self, leader_x: f64, target: f64) -> Result<(PathModel, FrameTransform)> {
        let heading = self.heading(leader_x)?;
        if heading.abs() <= target {
            return Ok((self.clone(), self.frame));
        }
        self.rotated(leader_x, heading - target.copysign(heading))
    }

    /// Drops waypoints that lie entirely behind `x_keep`, keeping at least four.
    pub fn trimmed(&self, x_keep: f64) -> Result<PathModel> {
        let first = self.waypoints.iter().rposition(|p| p.x <= x_keep).unwrap_or(0);
        let first = first.min(self.waypoints.len().saturating_sub(4));
        if first == 0 {
            return Ok(self.clone());
        }
        PathModel::build_in_frame(self.waypoints[first..].to_vec(), self.kind, self.frame)
    }

    /// Samples the curve at `n` evenly spaced abscissae (global frame).
    pub fn polyline(&self, n: usize) -> Vec<Point> {
        let (lo, hi) = self.domain();
        let n = n.max(2);
        (0..n)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                self.frame.to_global(Point::new(x, self.sample_unchecked(x).y))
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Quintic Hermite segment matching value, slope and second derivative at both ends.
struct QuinticBlend {
    x0: f64,
    h: f64,
    y0: f64,
    m0: f64,
    c0: f64,
    y1: f64,
    m1: f64,
    c1: f64,
}

impl QuinticBlend {
    fn value(&self, x: f64) -> f64 {
        let t = (x - self.x0) / self.h;
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let t5 = t4 * t;
        let h00 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
        let h10 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
        let h20 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5;
        let h01 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
        let h11 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
        let h21 = 0.5 * t3 - t4 + 0.5 * t5;
        let h = self.h;
        h00 * self.y0 + h10 * h * self.m0 + h20 * h * h * self.c0 + h01 * self.y1 + h11 * h * self.m1 + h21 * h * h * self.c1
    }
}

/// Cubic B-spline `y(x)` interpolating the data with a not-a-knot clamped knot vector.
#[derive(Debug, Clone)]
struct CubicBSpline {
    knots: Vec<f64>,
    coeffs: Vec<f64>,
    d1_coeffs: Vec<f64>,
    d2_coeffs: Vec<f64>,
}

impl CubicBSpline {
    fn interpolate(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let n = xs.len();
        let mut knots = Vec::with_capacity(n + 4);
        knots.extend_from_slice(&[xs[0]; 4]);
        knots.extend_from_slice(&xs[2..n - 2]);
        knots.extend_from_slice(&[xs[n - 1]; 4]);

        // Collocation matrix is banded (at most 4 nonzeros per row) and totally
        // positive, so elimination without pivoting is stable.
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0; n]; n];
        for (i, &x) in xs.iter().enumerate() {
            let span = find_span(&knots, n, 3, x);
            let basis = basis_funs(&knots, span, 3, x);
            for (r, b) in basis.iter().enumerate() {
                rows[i][span - 3 + r] = *b;
            }
        }
        let mut rhs = ys.to_vec();
        for k in 0..n {
            let pivot = rows[k][k];
            if pivot.abs() < 1e-14 {
                return Err(PathError::DegenerateGeometry("singular collocation matrix".into()));
            }
            let end = (k + 4).min(n);
            for i in (k + 1)..end {
                let factor = rows[i][k] / pivot;
                if factor == 0.0 {
                    continue;
                }
                let (upper, lower) = rows.split_at_mut(i);
                for (dst, src) in lower[0][k..end].iter_mut().zip(&upper[k][k..end]) {
                    *dst -= factor * src;
                }
                rhs[i] -= factor * rhs[k];
            }
        }
        let mut coeffs = vec![0.0; n];
        for k in (0..n).rev() {
            let end = (k + 4).min(n);
            let mut acc = rhs[k];
            for j in (k + 1)..end {
                acc -= rows[k][j] * coeffs[j];
            }
            coeffs[k] = acc / rows[k][k];
        }

        let d1_coeffs: Vec<f64> =
            (0..n - 1).map(|j| 3.0 * (coeffs[j + 1] - coeffs[j]) / (knots[j + 4] - knots[j + 1])).collect();
        let d2_coeffs: Vec<f64> =
            (0..n - 2).map(|j| 2.0 * (d1_coeffs[j + 1] - d1_coeffs[j]) / (knots[j + 4] - knots[j + 2])).collect();
        Ok(Self { knots, coeffs, d1_coeffs, d2_coeffs })
    }

    fn eval(&self, x: f64) -> PathSample {
        PathSample {
            y: de_boor(&self.knots, &self.coeffs, 3, x),
            dy_dx: de_boor(&self.knots[1..self.knots.len() - 1], &self.d1_coeffs, 2, x),
            d2y_dx2: de_boor(&self.knots[2..self.knots.len() - 2], &self.d2_coeffs, 1, x),
        }
    }

    fn slope(&self, x: f64) -> f64 {
        de_boor(&self.knots[1..self.knots.len() - 1], &self.d1_coeffs, 2, x)
    }
}

/// Knot span index `l` with `knots[l] <= x < knots[l + 1]`, restricted to `[degree, n - 1]`.
fn find_span(knots: &[f64], n: usize, degree: usize, x: f64) -> usize {
    if x >= knots[n] {
        return n - 1;
    }
    if x <= knots[degree] {
        return degree;
    }
    let (mut lo, mut hi) = (degree, n);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Nonzero basis functions `N_{span-degree..=span}` at `x`.
fn basis_funs(knots: &[f64], span: usize, degree: usize, x: f64) -> [f64; 4] {
    let mut n = [0.0; 4];
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

fn de_boor(knots: &[f64], coeffs: &[f64], degree: usize, x: f64) -> f64 {
    let n = coeffs.len();
    let span = find_span(knots, n, degree, x);
    let mut d = [0.0; 4];
    d[..=degree].copy_from_slice(&coeffs[span - degree..=span]);
    for r in 1..=degree {
        for j in (r..=degree).rev() {
            let i = span - degree + j;
            let denom = knots[i + degree + 1 - r] - knots[i];
            let alpha = if denom == 0.0 { 0.0 } else { (x - knots[i]) / denom };
            d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j];
        }
    }
    d[degree]
}

/// Global interpolating polynomial in second-kind barycentric form.
#[derive(Debug, Clone)]
struct BarycentricPoly {
    xs: Vec<f64>,
    ys: Vec<f64>,
    weights: Vec<f64>,
    node_slopes: Vec<f64>,
}

impl BarycentricPoly {
    fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        let scale = (xs[n - 1] - xs[0]) / 4.0;
        let mut weights: Vec<f64> = (0..n)
            .map(|j| {
                1.0 / (0..n).filter(|&k| k != j).map(|k| (xs[j] - xs[k]) / scale).product::<f64>()
            })
            .collect();
        let wmax = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        weights.iter_mut().for_each(|w| *w /= wmax);
        let mut poly = Self { xs, ys, weights, node_slopes: Vec::new() };
        poly.node_slopes = (0..n).map(|k| poly.diff_at_node(k, &poly.ys)).collect();
        poly
    }

    /// Applies the barycentric differentiation matrix row `k` to `vals`.
    fn diff_at_node(&self, k: usize, vals: &[f64]) -> f64 {
        (0..self.xs.len())
            .filter(|&j| j != k)
            .map(|j| (self.weights[j] / self.weights[k]) * (vals[j] - vals[k]) / (self.xs[k] - self.xs[j]))
            .sum()
    }

    fn eval(&self, x: f64) -> PathSample {
        let width = self.xs[self.xs.len() - 1] - self.xs[0];
        if let Some(k) = self.xs.iter().position(|&xk| (x - xk).abs() <= 1e-9 * width) {
            return PathSample {
                y: self.ys[k],
                dy_dx: self.node_slopes[k],
                d2y_dx2: self.diff_at_node(k, &self.node_slopes),
            };
        }
        let (mut s1, mut num) = (0.0, 0.0);
        for ((&xj, &yj), &wj) in self.xs.iter().zip(&self.ys).zip(&self.weights) {
            let t = wj / (x - xj);
            s1 += t;
            num += t * yj;
        }
        let y = num / s1;
        let (mut s2, mut a, mut b) = (0.0, 0.0, 0.0);
        for ((&xj, &yj), &wj) in self.xs.iter().zip(&self.ys).zip(&self.weights) {
            let inv = 1.0 / (x - xj);
            s2 += wj * inv * inv;
            a += wj * (y - yj) * inv * inv;
            b += wj * (y - yj) * inv * inv * inv;
        }
        let dy = a / s1;
        let d2y = (2.0 * dy * s2 - 2.0 * b) / s1;
        PathSample { y, dy_dx: dy, d2y_dx2: d2y }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn line(xs: &[f64], slope: f64) -> PathModel {
        PathModel::build(xs.iter().map(|&x| Point::new(x, slope * x)).collect(), SplineKind::ClampedCubicBSpline)
            .unwrap()
    }

    fn parabola() -> PathModel {
        let pts = (0..=6).map(|i| i as f64 * 0.5).map(|x| Point::new(x, 0.5 * x * x)).collect();
        PathModel::build(pts, SplineKind::ClampedCubicBSpline).unwrap()
    }

    #[test]
    fn build_rejects_bad_input() {
        let pts = vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(2.0, 0.0)];
        assert_eq!(PathModel::build(pts, SplineKind::default()), Err(PathError::TooFewWaypoints(3)));
        let pts = vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 0.5), Point::new(2.0, 0.0)];
        assert_eq!(PathModel::build(pts, SplineKind::default()), Err(PathError::NonMonotoneAbscissae(2)));
        let pts = vec![Point::new(0.0, 0.0), Point::new(1.0, f64::NAN), Point::new(2.0, 0.0), Point::new(3.0, 0.0)];
        assert_eq!(PathModel::build(pts, SplineKind::default()), Err(PathError::NonFiniteInput));
    }

    #[test]
    fn straight_line_has_zero_slope_and_curvature() {
        let p = line(&[0.0, 1.0, 2.0, 3.0], 0.0);
        let s = p.eval(1.5).unwrap();
        assert_eq!((s.y, s.dy_dx, s.d2y_dx2), (0.0, 0.0, 0.0));
        for i in 0..=30 {
            assert_abs_diff_eq!(p.curvature(i as f64 * 0.1).unwrap(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn parabola_endpoints_and_curvature() {
        let p = parabola();
        assert_abs_diff_eq!(p.eval(0.0).unwrap().y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.eval(3.0).unwrap().y, 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.eval(0.0).unwrap().d2y_dx2, 1.0, epsilon = 5e-3);
        assert_abs_diff_eq!(p.curvature(0.0).unwrap(), 1.0, epsilon = 5e-3);
    }

    #[test]
    fn eval_outside_domain_is_an_error() {
        let p = parabola();
        assert!(matches!(p.eval(3.0001), Err(PathError::OutOfDomain { .. })));
        assert!(matches!(p.eval(-1e-9), Err(PathError::OutOfDomain { .. })));
        assert!(matches!(p.curvature(4.0), Err(PathError::OutOfDomain { .. })));
    }

    #[test]
    fn interpolates_every_waypoint() {
        let pts: Vec<Point> = (0..12).map(|i| i as f64 * 0.4).map(|x| Point::new(x, (1.3 * x).sin())).collect();
        for kind in [SplineKind::ClampedCubicBSpline, SplineKind::Barycentric] {
            let p = PathModel::build(pts.clone(), kind).unwrap();
            for w in &pts {
                assert_abs_diff_eq!(p.eval(w.x).unwrap().y, w.y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn circle_curvature_at_apex() {
        // Lower half of a circle of radius 2 centred at (0, 2), central 60° arc.
        let r = 2.0;
        let pts = (0..=12)
            .map(|i| -PI / 6.0 + i as f64 * (PI / 3.0) / 12.0)
            .map(|a| Point::new(r * a.sin(), r - r * a.cos()))
            .collect();
        let p = PathModel::build(pts, SplineKind::ClampedCubicBSpline).unwrap();
        assert_abs_diff_eq!(p.curvature(0.0).unwrap().abs(), 0.5, epsilon = 2e-2);
        assert!(p.curvature(0.0).unwrap() > 0.0);
    }

    #[test]
    fn arc_length_examples() {
        let p = line(&[0.0, 1.0, 2.0, 3.0], 0.0);
        assert_abs_diff_eq!(p.arc_length(0.0, 3.0).unwrap(), 3.0, epsilon = 1e-12);
        assert_eq!(p.arc_length(1.2, 1.2).unwrap(), 0.0);
        let d = line(&[0.0, 0.5, 1.0, 1.5, 2.0], 1.0);
        assert_abs_diff_eq!(d.arc_length(0.0, 1.0).unwrap(), 2f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn arc_length_inversion_examples() {
        let p = line(&[0.0, 1.0, 2.0, 3.0], 0.0);
        assert_abs_diff_eq!(p.point_at_arc_length(2.0, 0.5).unwrap(), 1.5, epsilon = 1e-9);
        let d = line(&[0.0, 0.5, 1.0, 1.5, 2.0], 1.0);
        assert_abs_diff_eq!(d.point_at_arc_length(1.0, 2f64.sqrt()).unwrap(), 0.0, epsilon = 1e-6);
        assert!(matches!(p.point_at_arc_length(1.0, 1.5), Err(PathError::OutOfDomain { .. })));
        // negative distances walk forward
        assert_abs_diff_eq!(p.point_at_arc_length(1.0, -1.25).unwrap(), 2.25, epsilon = 1e-9);
    }

    #[test]
    fn replan_without_heading_change_is_a_no_op_on_a_line() {
        let xs: Vec<f64> = (0..=20).map(|i| i as f64 * 0.5).collect();
        let p = line(&xs, 0.0);
        let q = p.replan(6.0, 0.0, &ReplanParams::default()).unwrap();
        let (lo, _) = q.domain();
        let hi = p.domain().1.min(q.domain().1);
        let mut x = lo;
        while x <= hi {
            assert_abs_diff_eq!(q.eval(x).unwrap().y, p.eval(x).unwrap().y, epsilon = 1e-6);
            x += 0.01;
        }
    }

    #[test]
    fn replan_sets_slope_at_anchor() {
        let xs: Vec<f64> = (0..=20).map(|i| i as f64 * 0.5).collect();
        let p = line(&xs, 0.0);
        let heading = 15f64.to_radians();
        let q = p.replan(6.0, heading, &ReplanParams::default()).unwrap();
        assert_abs_diff_eq!(q.eval(6.0).unwrap().y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.eval(6.0).unwrap().dy_dx, heading.tan(), epsilon = 2e-2);
        let (_, hi) = q.domain();
        assert_abs_diff_eq!(hi, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.eval(hi).unwrap().y, 2.0 * heading.tan(), epsilon = 1e-9);
        // history kept behind the blend window
        assert_abs_diff_eq!(q.eval(4.0).unwrap().y, 0.0, epsilon = 1e-4);
    }

    #[test]
    fn replan_rejects_steep_heading_and_bad_params() {
        let p = line(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.0);
        let r = p.replan(2.0, 85f64.to_radians(), &ReplanParams::default());
        assert!(matches!(r, Err(PathError::SteepHeading { .. })));
        let bad = ReplanParams { n_new_waypoints: 2, ..Default::default() };
        assert!(matches!(p.replan(2.0, 0.0, &bad), Err(PathError::InvalidParameter(_))));
        let bad = ReplanParams { lookahead: 0.0, ..Default::default() };
        assert!(matches!(p.replan(2.0, 0.0, &bad), Err(PathError::InvalidParameter(_))));
    }

    #[test]
    fn frame_round_trip() {
        let f = FrameTransform::new(1.234, Point::new(-3.0, 7.5));
        for p in [Point::new(0.0, 0.0), Point::new(12.5, -4.25), Point::new(-1e3, 2e3)] {
            let q = f.to_local(f.to_global(p));
            assert!(p.distance(&q) <= 1e-12 * (1.0 + p.x.abs().max(p.y.abs())));
        }
    }

    #[test]
    fn rotate_frame_identity_when_flat() {
        let p = line(&[0.0, 1.0, 2.0, 3.0], 0.0);
        let (q, f) = p.rotate_frame(1.0, DEFAULT_ROTATION_TARGET).unwrap();
        assert!(f.is_identity());
        assert_eq!(q, p);
    }

    #[test]
    fn rotate_frame_on_steep_line() {
        let slope = 75f64.to_radians().tan();
        let xs: Vec<f64> = (0..8).map(|i| i as f64 * 0.25).collect();
        let p = line(&xs, slope);
        let (q, f) = p.rotate_frame(1.0, DEFAULT_ROTATION_TARGET).unwrap();
        assert_abs_diff_eq!(f.rotation, 60f64.to_radians(), epsilon = 1e-12);
        assert_abs_diff_eq!(q.heading(q.waypoints()[3].x).unwrap(), 15f64.to_radians(), epsilon = 1e-9);
        for (a, b) in p.waypoints().iter().zip(q.waypoints()) {
            let ga = p.frame().to_global(*a);
            let gb = q.frame().to_global(*b);
            assert!(ga.distance(&gb) <= 1e-9);
        }
    }

    #[test]
    fn rotating_a_vertical_fold_is_degenerate() {
        let pts = vec![Point::new(0.0, 0.0), Point::new(1.0, -2.0), Point::new(2.0, 0.0), Point::new(3.0, 3.0)];
        let p = PathModel::build(pts, SplineKind::ClampedCubicBSpline).unwrap();
        assert!(matches!(p.rotated(2.0, FRAC_PI_2 * 0.9), Err(PathError::DegenerateGeometry(_))));
    }

    #[test]
    fn trimmed_keeps_at_least_four_points() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let p = line(&xs, 0.5);
        let q = p.trimmed(4.5).unwrap();
        assert_eq!(q.domain(), (4.0, 9.0));
        let q = p.trimmed(8.5).unwrap();
        assert_eq!(q.waypoints().len(), 4);
    }
}

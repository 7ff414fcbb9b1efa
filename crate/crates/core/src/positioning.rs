//! Range estimation from received power and lateration.
//!
//! Each luminaire's total received power is inverted through the LOS
//! channel model to a slant distance, projected to a horizontal range using
//! the known mounting height difference, and the receiver's horizontal
//! position is then solved for either by the linearised least-squares system
//! or by minimising the range residuals directly with a bounded trust-region
//! iteration.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::PowerReport;
use crate::geometry::{Luminaire, RoomScenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PositioningError {
    #[error("no signal: received power {0} W is not positive")]
    NoSignal(f64),
    #[error("singular anchor geometry: the linear system has rank < 2")]
    SingularGeometry,
    #[error("insufficient anchors: need {needed}, have {available}")]
    InsufficientAnchors { needed: usize, available: usize },
    #[error("unknown luminaire id {0}")]
    UnknownLuminaire(u32),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Parameters of the LOS model that the receiver inverts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangingParams {
    pub lambertian_order: f64,
    pub area: f64,
    pub filter_gain: f64,
    pub concentrator_gain: f64,
    pub transmit_power: f64,
    /// Vertical separation between luminaire and receiver plane.
    pub height: f64,
}

impl RangingParams {
    pub fn for_luminaire(scenario: &RoomScenario, luminaire: &Luminaire) -> Self {
        Self {
            lambertian_order: luminaire.lambertian_order,
            area: scenario.receiver.area,
            filter_gain: scenario.receiver.filter_gain,
            concentrator_gain: scenario.receiver.concentrator_gain,
            transmit_power: luminaire.power,
            height: luminaire.position.z - scenario.receiver_plane_height,
        }
    }
}

/// Slant distance implied by `received` watts under the LOS model of a
/// downward-facing emitter and upward-facing receiver.
pub fn estimate_distance(received: f64, params: &RangingParams) -> Result<f64, PositioningError> {
    if !(received > 0.0) {
        return Err(PositioningError::NoSignal(received));
    }
    let numerator = (params.lambertian_order + 1.0)
        * params.area
        * params.filter_gain
        * params.concentrator_gain
        * params.transmit_power
        * params.height
        * params.height;
    Ok((numerator / (2.0 * PI * received)).sqrt().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizontalRange {
    pub range: f64,
    /// Set when the slant distance was shorter than the height and the range
    /// was clamped to zero.
    pub clamped: bool,
}

pub fn horizontal_range(distance: f64, height: f64) -> HorizontalRange {
    if distance >= height {
        HorizontalRange {
            range: (distance * distance - height * height).sqrt(),
            clamped: false,
        }
    } else {
        HorizontalRange {
            range: 0.0,
            clamped: true,
        }
    }
}

/// A luminaire whose signal was detected, with its known coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub luminaire_id: u32,
    pub x: f64,
    pub y: f64,
    pub power: f64,
}

/// Anchor coordinates with an estimated horizontal range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub x: f64,
    pub y: f64,
    pub range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Linear,
    Nonlinear,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Nonlinear => "nonlinear",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Method::Linear),
            "nonlinear" => Ok(Method::Nonlinear),
            other => Err(format!(
                "unknown method `{other}` (expected linear or nonlinear)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub x: f64,
    pub y: f64,
    pub method: Method,
    pub anchors_used: usize,
    pub iterations: usize,
    /// Sum of squared range residuals at the estimate, in m^2.
    pub final_residual: f64,
    pub used_centroid_fallback: bool,
    /// Number of anchors whose horizontal range was clamped to zero.
    pub clamped_ranges: usize,
}

/// Sum of squared differences between geometric and measured ranges.
pub fn range_objective(measurements: &[RangeMeasurement], x: f64, y: f64) -> f64 {
    measurements
        .iter()
        .map(|m| {
            let r = (x - m.x).hypot(y - m.y) - m.range;
            r * r
        })
        .sum()
}

/// Linearised lateration: subtracts every circle equation from the first
/// one and solves the resulting overdetermined system by normal equations.
pub fn linear_least_squares(
    measurements: &[RangeMeasurement],
) -> Result<PositionEstimate, PositioningError> {
    if measurements.len() < 3 {
        return Err(PositioningError::InsufficientAnchors {
            needed: 3,
            available: measurements.len(),
        });
    }
    let first = measurements[0];
    let k1 = first.x * first.x + first.y * first.y;
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for m in &measurements[1..] {
        let ax = m.x - first.x;
        let ay = m.y - first.y;
        let b = 0.5 * (first.range * first.range - m.range * m.range + m.x * m.x + m.y * m.y - k1);
        a11 += ax * ax;
        a12 += ax * ay;
        a22 += ay * ay;
        b1 += ax * b;
        b2 += ay * b;
    }
    let det = a11 * a22 - a12 * a12;
    let scale = (a11 + a22) * (a11 + a22);
    if !(det > 1e-10 * scale) {
        return Err(PositioningError::SingularGeometry);
    }
    let x = (a22 * b1 - a12 * b2) / det;
    let y = (a11 * b2 - a12 * b1) / det;
    Ok(PositionEstimate {
        x,
        y,
        method: Method::Linear,
        anchors_used: measurements.len(),
        iterations: 1,
        final_residual: range_objective(measurements, x, y),
        used_centroid_fallback: false,
        clamped_ranges: 0,
    })
}

/// Axis-aligned search box for the nonlinear solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn footprint(scenario: &RoomScenario) -> Self {
        Self {
            x_min: 0.0,
            x_max: scenario.length,
            y_min: 0.0,
            y_max: scenario.width,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x.clamp(self.x_min, self.x_max),
            y.clamp(self.y_min, self.y_max),
        )
    }

    /// Folds a point that overshot the box back inside, mirroring at the walls.
    fn reflect(&self, x: f64, y: f64) -> (f64, f64) {
        fn fold(v: f64, lo: f64, hi: f64) -> f64 {
            let v = if v < lo { 2.0 * lo - v } else { v };
            let v = if v > hi { 2.0 * hi - v } else { v };
            v.clamp(lo, hi)
        }
        (
            fold(x, self.x_min, self.x_max),
            fold(y, self.y_min, self.y_max),
        )
    }

    fn diagonal(&self) -> f64 {
        (self.x_max - self.x_min).hypot(self.y_max - self.y_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionOptions {
    /// Stop once an accepted step is shorter than this (metres).
    pub step_tolerance: f64,
    /// Stop once a full model step decreases the objective by less than this (m^2).
    pub objective_tolerance: f64,
    pub max_iterations: usize,
    pub initial_radius: f64,
}

impl Default for TrustRegionOptions {
    fn default() -> Self {
        Self {
            step_tolerance: 1e-9,
            objective_tolerance: 1e-12,
            max_iterations: 100,
            initial_radius: 1.0,
        }
    }
}

/// Residuals, gradient `J^T r` and Gauss-Newton matrix `J^T J` at `(x, y)`.
struct Linearization {
    objective: f64,
    grad: [f64; 2],
    hess: [[f64; 2]; 2],
}

fn linearize(measurements: &[RangeMeasurement], x: f64, y: f64) -> Linearization {
    let mut lin = Linearization {
        objective: 0.0,
        grad: [0.0; 2],
        hess: [[0.0; 2]; 2],
    };
    for m in measurements {
        let (dx, dy) = (x - m.x, y - m.y);
        let dist = dx.hypot(dy);
        let r = dist - m.range;
        lin.objective += r * r;
        if dist > 0.0 {
            let (jx, jy) = (dx / dist, dy / dist);
            lin.grad[0] += jx * r;
            lin.grad[1] += jy * r;
            lin.hess[0][0] += jx * jx;
            lin.hess[0][1] += jx * jy;
            lin.hess[1][1] += jy * jy;
        }
    }
    lin.hess[1][0] = lin.hess[0][1];
    lin
}

/// Decrease of the quadratic model `|r + J p|^2` for step `p`.
fn predicted_decrease(lin: &Linearization, p: [f64; 2]) -> f64 {
    let h = &lin.hess;
    let quad = p[0] * (h[0][0] * p[0] + h[0][1] * p[1]) + p[1] * (h[1][0] * p[0] + h[1][1] * p[1]);
    -(2.0 * (lin.grad[0] * p[0] + lin.grad[1] * p[1]) + quad)
}

/// Minimiser of the Gauss-Newton model inside a ball of radius `radius`.
///
/// Solves `(J^T J + lambda I) p = -J^T r` with the smallest `lambda >= 0`
/// that keeps `|p| <= radius`, using the eigen-decomposition of the 2x2
/// matrix.
fn trust_region_step(lin: &Linearization, radius: f64) -> [f64; 2] {
    let [[a, b], [_, c]] = lin.hess;
    let mean = 0.5 * (a + c);
    let spread = (0.5 * (a - c)).hypot(b);
    let (e1, e2) = (mean - spread, mean + spread);
    // eigenvector of e2 (the other is its perpendicular)
    let v2 = if spread > 0.0 {
        let (vx, vy) = if (a - c) >= 0.0 {
            (a - e1, b)
        } else {
            (b, c - e1)
        };
        let n = vx.hypot(vy);
        if n > 0.0 {
            [vx / n, vy / n]
        } else {
            [1.0, 0.0]
        }
    } else {
        [1.0, 0.0]
    };
    let v1 = [-v2[1], v2[0]];
    let g1 = v1[0] * lin.grad[0] + v1[1] * lin.grad[1];
    let g2 = v2[0] * lin.grad[0] + v2[1] * lin.grad[1];

    let step = |lambda: f64| -> [f64; 2] {
        let s1 = if e1 + lambda > 0.0 {
            -g1 / (e1 + lambda)
        } else {
            0.0
        };
        let s2 = if e2 + lambda > 0.0 {
            -g2 / (e2 + lambda)
        } else {
            0.0
        };
        [s1 * v1[0] + s2 * v2[0], s1 * v1[1] + s2 * v2[1]]
    };
    let norm = |p: [f64; 2]| p[0].hypot(p[1]);

    let tiny = 1e-14 * e2.abs().max(1.0);
    if e1 > tiny {
        let p = step(0.0);
        if norm(p) <= radius {
            return p;
        }
    }
    let gnorm = lin.grad[0].hypot(lin.grad[1]);
    if gnorm == 0.0 {
        return [0.0, 0.0];
    }
    // |p(lambda)| decreases monotonically in lambda
    let mut lo = e1.max(0.0).max(tiny) - e1.min(0.0);
    let mut hi = lo + gnorm / radius + e2.abs();
    if norm(step(lo)) <= radius {
        return step(lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm(step(mid)) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    step(hi)
}

/// Minimises the range-residual objective within `bounds` starting at `init`.
///
/// A trust-region iteration on the Gauss-Newton model; steps leaving the box
/// are mirrored back at the boundary, falling back to projection when the
/// mirrored step does not decrease the model. The returned estimate is the
/// best iterate and never has a larger objective than `init`.
pub fn nonlinear_least_squares(
    measurements: &[RangeMeasurement],
    init: (f64, f64),
    bounds: &Bounds,
) -> Result<PositionEstimate, PositioningError> {
    nonlinear_least_squares_with(measurements, init, bounds, &TrustRegionOptions::default())
}

pub fn nonlinear_least_squares_with(
    measurements: &[RangeMeasurement],
    init: (f64, f64),
    bounds: &Bounds,
    options: &TrustRegionOptions,
) -> Result<PositionEstimate, PositioningError> {
    if measurements.len() < 2 {
        return Err(PositioningError::InsufficientAnchors {
            needed: 2,
            available: measurements.len(),
        });
    }
    if !bounds.contains(init.0, init.1) {
        return Err(PositioningError::InvalidArgument(format!(
            "initial point ({}, {}) lies outside the bounds",
            init.0, init.1
        )));
    }
    let (mut x, mut y) = init;
    let mut lin = linearize(measurements, x, y);
    let mut radius = options.initial_radius;
    let max_radius = bounds.diagonal().max(options.initial_radius);
    let mut iterations = 0;

    while iterations < options.max_iterations {
        if lin.objective == 0.0 || lin.grad[0].hypot(lin.grad[1]) == 0.0 {
            break;
        }
        iterations += 1;
        let p = trust_region_step(&lin, radius);
        let p_norm = p[0].hypot(p[1]);
        let interior = p_norm < 0.99 * radius;

        let mut candidate = bounds.reflect(x + p[0], y + p[1]);
        let mut step = [candidate.0 - x, candidate.1 - y];
        let mut predicted = predicted_decrease(&lin, step);
        if !(predicted > 0.0) {
            candidate = bounds.clamp(x + p[0], y + p[1]);
            step = [candidate.0 - x, candidate.1 - y];
            predicted = predicted_decrease(&lin, step);
        }
        let step_norm = step[0].hypot(step[1]);
        if !(predicted > 0.0) || step_norm == 0.0 {
            // stationary with respect to the box
            break;
        }

        let trial = linearize(measurements, candidate.0, candidate.1);
        let actual = lin.objective - trial.objective;
        let ratio = actual / predicted;

        if ratio < 0.25 {
            radius = 0.25 * step_norm;
        } else if ratio > 0.75 && p_norm >= 0.99 * radius {
            radius = (2.0 * radius).min(max_radius);
        }

        if ratio > 1e-4 && actual > 0.0 {
            (x, y) = candidate;
            lin = trial;
            if step_norm < options.step_tolerance
                || (interior && actual < options.objective_tolerance)
            {
                break;
            }
        } else if radius < options.step_tolerance {
            break;
        }
    }

    Ok(PositionEstimate {
        x,
        y,
        method: Method::Nonlinear,
        anchors_used: measurements.len(),
        iterations,
        final_residual: lin.objective,
        used_centroid_fallback: false,
        clamped_ranges: 0,
    })
}

fn by_power_then_id(a: &Anchor, b: &Anchor) -> Ordering {
    b.power
        .partial_cmp(&a.power)
        .unwrap_or(Ordering::Equal)
        .then(a.luminaire_id.cmp(&b.luminaire_id))
}

/// Anchors with positive received power, strongest first (ties: lower id).
pub fn detectable_anchors(report: &PowerReport) -> Vec<Anchor> {
    let mut anchors: Vec<Anchor> = report
        .rows
        .iter()
        .filter(|r| r.total() > 0.0)
        .map(|r| Anchor {
            luminaire_id: r.luminaire_id,
            x: r.x,
            y: r.y,
            power: r.total(),
        })
        .collect();
    anchors.sort_by(by_power_then_id);
    anchors
}

/// The `k` strongest detectable anchors.
pub fn select_strongest(report: &PowerReport, k: usize) -> Result<Vec<Anchor>, PositioningError> {
    if k < 3 {
        return Err(PositioningError::InvalidArgument(format!(
            "at least 3 anchors must be selected, got {k}"
        )));
    }
    let mut anchors = detectable_anchors(report);
    if anchors.len() < k {
        return Err(PositioningError::InsufficientAnchors {
            needed: k,
            available: anchors.len(),
        });
    }
    anchors.truncate(k);
    Ok(anchors)
}

/// Arithmetic mean of the anchor coordinates.
pub fn centroid_fallback(anchors: &[Anchor]) -> Result<(f64, f64), PositioningError> {
    if anchors.is_empty() {
        return Err(PositioningError::InsufficientAnchors {
            needed: 1,
            available: 0,
        });
    }
    let n = anchors.len() as f64;
    let (sx, sy) = anchors
        .iter()
        .fold((0.0, 0.0), |(sx, sy), a| (sx + a.x, sy + a.y));
    Ok((sx / n, sy / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Every detectable luminaire.
    All,
    /// The `k` strongest luminaires.
    Strongest(usize),
}

impl Selection {
    pub fn label(&self) -> String {
        match self {
            Selection::All => "all".into(),
            Selection::Strongest(k) => k.to_string(),
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            return Ok(Selection::All);
        }
        s.parse::<usize>()
            .map(Selection::Strongest)
            .map_err(|_| format!("invalid selection `{s}` (expected `all` or a count)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocateOptions {
    pub method: Method,
    pub selection: Selection,
    /// For the linear method, return the anchor centroid instead of failing
    /// on singular geometry. The nonlinear method always falls back.
    pub linear_fallback: bool,
}

impl LocateOptions {
    pub fn new(method: Method, selection: Selection) -> Self {
        Self {
            method,
            selection,
            linear_fallback: false,
        }
    }
}

/// Full receiver pipeline: anchor selection, ranging, lateration.
pub fn locate(
    report: &PowerReport,
    scenario: &RoomScenario,
    options: &LocateOptions,
) -> Result<PositionEstimate, PositioningError> {
    let anchors = match options.selection {
        Selection::All => {
            let a = detectable_anchors(report);
            if a.len() < 3 {
                return Err(PositioningError::InsufficientAnchors {
                    needed: 3,
                    available: a.len(),
                });
            }
            a
        }
        Selection::Strongest(k) => select_strongest(report, k)?,
    };

    let mut clamped = 0;
    let measurements = anchors
        .iter()
        .map(|a| {
            let lum = scenario
                .luminaire(a.luminaire_id)
                .ok_or(PositioningError::UnknownLuminaire(a.luminaire_id))?;
            let params = RangingParams::for_luminaire(scenario, lum);
            let d = estimate_distance(a.power, &params)?;
            let r = horizontal_range(d, params.height);
            clamped += r.clamped as usize;
            Ok(RangeMeasurement {
                x: a.x,
                y: a.y,
                range: r.range,
            })
        })
        .collect::<Result<Vec<_>, PositioningError>>()?;

    let linear = linear_least_squares(&measurements);
    let mut estimate = match (options.method, linear) {
        (Method::Linear, Ok(est)) => est,
        (Method::Linear, Err(PositioningError::SingularGeometry)) if options.linear_fallback => {
            let (x, y) = centroid_fallback(&anchors)?;
            PositionEstimate {
                x,
                y,
                method: Method::Linear,
                anchors_used: measurements.len(),
                iterations: 1,
                final_residual: range_objective(&measurements, x, y),
                used_centroid_fallback: true,
                clamped_ranges: 0,
            }
        }
        (Method::Linear, Err(e)) => return Err(e),
        (Method::Nonlinear, linear) => {
            let bounds = Bounds::footprint(scenario);
            let (init, fallback) = match linear {
                Ok(est) => (bounds.clamp(est.x, est.y), false),
                Err(PositioningError::SingularGeometry) => {
                    let c = centroid_fallback(&anchors)?;
                    (bounds.clamp(c.0, c.1), true)
                }
                Err(e) => return Err(e),
            };
            let mut est = nonlinear_least_squares(&measurements, init, &bounds)?;
            est.used_centroid_fallback = fallback;
            est
        }
    };
    estimate.clamped_ranges = clamped;
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{OrderPowers, PowerRow};
    use proptest::prelude::*;

    fn table2_params() -> RangingParams {
        RangingParams {
            lambertian_order: 1.0,
            area: 1e-4,
            filter_gain: 1.0,
            concentrator_gain: 2.5481,
            transmit_power: 4.0,
            height: 2.1,
        }
    }

    fn exact(anchors: &[(f64, f64)], truth: (f64, f64)) -> Vec<RangeMeasurement> {
        anchors
            .iter()
            .map(|&(x, y)| RangeMeasurement {
                x,
                y,
                range: (x - truth.0).hypot(y - truth.1),
            })
            .collect()
    }

    const SQUARE: [(f64, f64); 4] = [(1.0, 1.0), (1.0, 3.0), (3.0, 1.0), (3.0, 3.0)];

    #[test]
    fn distance_inverts_coaxial_power() {
        let p = 2.0 * 1e-4 * 2.5481 * 4.0 / (2.0 * PI * 2.1 * 2.1);
        let d = estimate_distance(p, &table2_params()).unwrap();
        assert!((d - 2.1).abs() < 1e-12);
        let d = estimate_distance(7.357e-5, &table2_params()).unwrap();
        assert!((d - 2.1).abs() < 1e-4);
    }

    #[test]
    fn doubling_power_shrinks_distance() {
        let d1 = estimate_distance(1e-5, &table2_params()).unwrap();
        let d2 = estimate_distance(2e-5, &table2_params()).unwrap();
        assert!((d2 / d1 - 2f64.powf(-0.25)).abs() < 1e-12);
    }

    #[test]
    fn no_signal_rejected() {
        assert!(matches!(
            estimate_distance(0.0, &table2_params()),
            Err(PositioningError::NoSignal(_))
        ));
    }

    #[test]
    fn horizontal_ranges() {
        assert_eq!(
            horizontal_range(2.1, 2.1),
            HorizontalRange {
                range: 0.0,
                clamped: false
            }
        );
        let r = horizontal_range(5.41f64.sqrt(), 2.1);
        assert!((r.range - 1.0).abs() < 1e-12 && !r.clamped);
        assert!((horizontal_range(2.32594, 2.1).range - 1.0).abs() < 1e-4);
        assert_eq!(
            horizontal_range(2.0, 2.1),
            HorizontalRange {
                range: 0.0,
                clamped: true
            }
        );
    }

    #[test]
    fn linear_symmetric_square() {
        let est = linear_least_squares(&exact(&SQUARE, (2.0, 2.0))).unwrap();
        assert!((est.x - 2.0).abs() < 1e-12 && (est.y - 2.0).abs() < 1e-12);
        assert_eq!(est.iterations, 1);
    }

    #[test]
    fn linear_collinear_is_singular() {
        let m = exact(&[(1.0, 1.0), (3.0, 1.0), (5.0, 1.0)], (2.0, 2.0));
        assert_eq!(
            linear_least_squares(&m),
            Err(PositioningError::SingularGeometry)
        );
    }

    #[test]
    fn linear_recovers_offset_point() {
        let est = linear_least_squares(&exact(&SQUARE, (1.7, 2.4))).unwrap();
        assert!((est.x - 1.7).abs() < 1e-9 && (est.y - 2.4).abs() < 1e-9);
    }

    #[test]
    fn nonlinear_starting_at_truth_stays() {
        let m = exact(&SQUARE, (1.7, 2.4));
        let b = Bounds {
            x_min: 0.0,
            x_max: 8.0,
            y_min: 0.0,
            y_max: 8.0,
        };
        let est = nonlinear_least_squares(&m, (1.7, 2.4), &b).unwrap();
        assert!(est.iterations <= 1);
        assert!((est.x - 1.7).abs() < 1e-12 && (est.y - 2.4).abs() < 1e-12);
    }

    #[test]
    fn nonlinear_from_centre() {
        let m = exact(&SQUARE, (1.7, 2.4));
        let b = Bounds {
            x_min: 0.0,
            x_max: 8.0,
            y_min: 0.0,
            y_max: 8.0,
        };
        let est = nonlinear_least_squares(&m, (4.0, 4.0), &b).unwrap();
        assert!(
            (est.x - 1.7).abs() < 1e-6 && (est.y - 2.4).abs() < 1e-6,
            "{est:?}"
        );
    }

    #[test]
    fn nonlinear_never_worse_than_linear_init() {
        let mut m = exact(&SQUARE, (1.7, 2.4));
        for x in &mut m {
            x.range *= 1.05;
        }
        let lin = linear_least_squares(&m).unwrap();
        let b = Bounds {
            x_min: 0.0,
            x_max: 8.0,
            y_min: 0.0,
            y_max: 8.0,
        };
        let nl = nonlinear_least_squares(&m, (lin.x, lin.y), &b).unwrap();
        assert!(nl.final_residual <= range_objective(&m, lin.x, lin.y));
        assert!(nl.final_residual <= lin.final_residual);
    }

    #[test]
    fn nonlinear_respects_bounds() {
        // ranges pull the optimum outside the box
        let m = exact(&SQUARE, (-1.0, 2.0));
        let b = Bounds {
            x_min: 0.0,
            x_max: 8.0,
            y_min: 0.0,
            y_max: 8.0,
        };
        let est = nonlinear_least_squares(&m, (4.0, 4.0), &b).unwrap();
        assert!(b.contains(est.x, est.y));
        assert!(est.x.abs() < 1e-6);
        assert!(nonlinear_least_squares(&m, (9.0, 1.0), &b).is_err());
    }

    fn report(rows: &[(u32, f64, f64, f64)]) -> PowerReport {
        PowerReport {
            rows: rows
                .iter()
                .map(|&(id, x, y, p)| PowerRow {
                    luminaire_id: id,
                    x,
                    y,
                    powers: OrderPowers::from_orders(vec![p]),
                })
                .collect(),
        }
    }

    #[test]
    fn strongest_selection_and_ties() {
        let r = report(&[
            (1, 0.0, 0.0, 1.0),
            (2, 1.0, 0.0, 3.0),
            (3, 2.0, 0.0, 2.0),
            (4, 3.0, 0.0, 2.0),
            (5, 4.0, 0.0, 0.0),
        ]);
        let all = select_strongest(&r, 4).unwrap();
        assert_eq!(
            all.iter().map(|a| a.luminaire_id).collect::<Vec<_>>(),
            vec![2, 3, 4, 1]
        );
        let three = select_strongest(&r, 3).unwrap();
        assert_eq!(
            three.iter().map(|a| a.luminaire_id).collect::<Vec<_>>(),
            vec![2, 3, 4]
        );
        let r = report(&[
            (7, 0.0, 0.0, 5.0),
            (2, 1.0, 0.0, 1.0),
            (9, 2.0, 0.0, 1.0),
            (3, 3.0, 0.0, 1.0),
        ]);
        let three = select_strongest(&r, 3).unwrap();
        assert_eq!(
            three.iter().map(|a| a.luminaire_id).collect::<Vec<_>>(),
            vec![7, 2, 3]
        );
        assert!(matches!(
            select_strongest(&r, 5),
            Err(PositioningError::InsufficientAnchors {
                needed: 5,
                available: 4
            })
        ));
    }

    #[test]
    fn centroids() {
        let a = |x, y| Anchor {
            luminaire_id: 0,
            x,
            y,
            power: 1.0,
        };
        assert_eq!(
            centroid_fallback(&[a(1.0, 1.0), a(3.0, 1.0), a(5.0, 1.0), a(3.0, 3.0)]).unwrap(),
            (3.0, 1.5)
        );
        assert_eq!(centroid_fallback(&[a(2.5, 7.0)]).unwrap(), (2.5, 7.0));
        let grid: Vec<_> = RoomScenario::grid16()
            .luminaires
            .iter()
            .map(|l| a(l.position.x, l.position.y))
            .collect();
        assert_eq!(centroid_fallback(&grid).unwrap(), (4.0, 4.0));
    }

    /// Normal equations assembled from explicit matrices and solved with
    /// partial pivoting.
    fn brute_force_linear(m: &[RangeMeasurement]) -> (f64, f64) {
        let rows: Vec<[f64; 2]> = m[1..]
            .iter()
            .map(|a| [a.x - m[0].x, a.y - m[0].y])
            .collect();
        let rhs: Vec<f64> = m[1..]
            .iter()
            .map(|a| {
                0.5 * ((m[0].range.powi(2) - a.range.powi(2)) + (a.x.powi(2) + a.y.powi(2))
                    - (m[0].x.powi(2) + m[0].y.powi(2)))
            })
            .collect();
        let mut ata = [[0.0; 2]; 2];
        let mut atb = [0.0; 2];
        for i in 0..2 {
            for j in 0..2 {
                ata[i][j] = rows.iter().map(|r| r[i] * r[j]).sum();
            }
            atb[i] = rows.iter().zip(&rhs).map(|(r, b)| r[i] * b).sum();
        }
        if ata[1][0].abs() > ata[0][0].abs() {
            ata.swap(0, 1);
            atb.swap(0, 1);
        }
        let f = ata[1][0] / ata[0][0];
        let y = (atb[1] - f * atb[0]) / (ata[1][1] - f * ata[0][1]);
        let x = (atb[0] - ata[0][1] * y) / ata[0][0];
        (x, y)
    }

    proptest! {
        #[test]
        fn linear_matches_brute_force(
            pts in prop::collection::vec((0.0f64..8.0, 0.0f64..8.0, 0.0f64..4.0), 4..=8)
        ) {
            let m: Vec<_> = pts.iter().map(|&(x, y, r)| RangeMeasurement { x, y, range: r }).collect();
            if let Ok(est) = linear_least_squares(&m) {
                let (bx, by) = brute_force_linear(&m);
                let scale = 1.0 + bx.abs().max(by.abs());
                prop_assert!((est.x - bx).abs() < 1e-9 * scale);
                prop_assert!((est.y - by).abs() < 1e-9 * scale);
            }
        }

        #[test]
        fn translation_equivariance(
            tx in 0.5f64..7.5, ty in 0.5f64..7.5, dx in -50.0f64..50.0, dy in -50.0f64..50.0,
            noise in prop::collection::vec(-0.2f64..0.2, 4),
        ) {
            let mut m = exact(&SQUARE, (tx, ty));
            for (x, n) in m.iter_mut().zip(&noise) { x.range = (x.range + n).abs(); }
            let shifted: Vec<_> = m.iter().map(|a| RangeMeasurement { x: a.x + dx, y: a.y + dy, range: a.range }).collect();
            let a = linear_least_squares(&m).unwrap();
            let b = linear_least_squares(&shifted).unwrap();
            prop_assert!((b.x - a.x - dx).abs() < 1e-8 && (b.y - a.y - dy).abs() < 1e-8);

            let bounds = Bounds { x_min: -100.0, x_max: 100.0, y_min: -100.0, y_max: 100.0 };
            let sb = Bounds { x_min: -100.0 + dx, x_max: 100.0 + dx, y_min: -100.0 + dy, y_max: 100.0 + dy };
            let na = nonlinear_least_squares(&m, (a.x, a.y), &bounds).unwrap();
            let nb = nonlinear_least_squares(&shifted, (b.x, b.y), &sb).unwrap();
            prop_assert!((nb.x - na.x - dx).abs() < 1e-6 && (nb.y - na.y - dy).abs() < 1e-6);
        }

        #[test]
        fn added_power_never_lengthens_range(p in 1e-7f64..1e-4, extra in 0.0f64..1e-4) {
            let params = table2_params();
            prop_assert!(estimate_distance(p + extra, &params).unwrap() <= estimate_distance(p, &params).unwrap());
        }
    }
}

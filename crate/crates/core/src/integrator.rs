//! Embedded Dormand–Prince 5(4) integrator with PI step control, cubic
//! Hermite dense output and terminal/non-terminal event location.
//!
//! Everything here is a pure function of its inputs. The right-hand side is
//! written into a caller-provided buffer so that the inner loop does not
//! allocate per stage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("invalid integration config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("t_end = {t_end} lies on the wrong side of t0 = {t0} for {direction:?} integration")]
    WrongDirection { t0: f64, t_end: f64, direction: Direction },
    #[error("step size must be non-zero")]
    ZeroStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// An autonomous or non-autonomous first-order system `y' = rhs(t, y)`.
pub struct OdeProblem<F> {
    pub dim: usize,
    pub rhs: F,
    pub direction: Direction,
}

impl<F> OdeProblem<F>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    pub fn new(dim: usize, direction: Direction, rhs: F) -> Self {
        Self { dim, rhs, direction }
    }

    fn eval(&self, t: f64, y: &[f64], out: &mut [f64]) {
        (self.rhs)(t, y, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    pub event_tol: f64,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-10, h_init: 1e-3, h_min: 1e-14, h_max: 1e10, max_steps: 200_000, event_tol: 1e-12 }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<(), IntegrationError> {
        let ok = |c: bool, msg: &str| {
            if c {
                Ok(())
            } else {
                Err(IntegrationError::InvalidConfig(msg.to_string()))
            }
        };
        ok(self.rtol > 0.0 && self.rtol.is_finite(), "rtol must be positive")?;
        ok(self.atol > 0.0 && self.atol.is_finite(), "atol must be positive")?;
        ok(self.event_tol > 0.0 && self.event_tol.is_finite(), "event_tol must be positive")?;
        ok(self.h_min > 0.0, "h_min must be positive")?;
        ok(self.h_min <= self.h_init && self.h_init <= self.h_max, "require 0 < h_min <= h_init <= h_max")?;
        ok(self.max_steps > 0, "max_steps must be positive")
    }

    /// Same config with both tolerances scaled by `factor`.
    pub fn scaled_tolerances(&self, factor: f64) -> Self {
        Self { rtol: self.rtol * factor, atol: self.atol * factor, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventDirection {
    Any,
    Decreasing,
    Increasing,
}

pub type EventFn = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// A scalar event function. `direction` refers to the change of `g` as the
/// integration progresses, so "decreasing" during a backward integration
/// means `g` goes from positive to negative as `t` decreases.
pub struct EventSpec {
    pub g: EventFn,
    pub direction: EventDirection,
    pub terminal: bool,
    pub label: String,
}

impl EventSpec {
    pub fn new(
        label: impl Into<String>,
        direction: EventDirection,
        terminal: bool,
        g: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { g: Box::new(g), direction, terminal, label: label.into() }
    }

    fn crosses(&self, g_old: f64, g_new: f64) -> bool {
        let down = g_old > 0.0 && g_new <= 0.0;
        let up = g_old < 0.0 && g_new >= 0.0;
        match self.direction {
            EventDirection::Any => down || up,
            EventDirection::Decreasing => down,
            EventDirection::Increasing => up,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub index: usize,
    pub label: String,
    pub t: f64,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IntegrationStatus {
    EventHit(EventRecord),
    MaxSteps,
    StepFloor,
    NonFinite,
    ReachedTEnd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationStats {
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub rhs_evals: usize,
}

impl std::ops::AddAssign for IntegrationStats {
    fn add_assign(&mut self, rhs: Self) {
        self.steps_accepted += rhs.steps_accepted;
        self.steps_rejected += rhs.steps_rejected;
        self.rhs_evals += rhs.rhs_evals;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationOutcome {
    pub status: IntegrationStatus,
    /// Accepted points `(t, y)`, starting with `(t0, y0)`. On an event hit the
    /// last sample is the located event point.
    pub samples: Vec<(f64, Vec<f64>)>,
    /// `rhs(t, y)` at every sample, kept for dense output.
    pub derivatives: Vec<Vec<f64>>,
    /// Non-terminal event crossings in integration order.
    pub crossings: Vec<EventRecord>,
    pub stats: IntegrationStats,
}

impl IntegrationOutcome {
    pub fn last(&self) -> (f64, &[f64]) {
        let (t, y) = self.samples.last().expect("outcome always holds y0");
        (*t, y.as_slice())
    }

    /// Cubic Hermite interpolation of the solution at `t`. Returns `None`
    /// outside the integrated span.
    pub fn dense(&self, t: f64) -> Option<Vec<f64>> {
        let n = self.samples.len();
        if n == 0 {
            return None;
        }
        if n == 1 {
            return (t == self.samples[0].0).then(|| self.samples[0].1.clone());
        }
        let forward = self.samples[n - 1].0 > self.samples[0].0;
        let key = |s: f64| if forward { s } else { -s };
        let kt = key(t);
        if kt < key(self.samples[0].0) || kt > key(self.samples[n - 1].0) {
            return None;
        }
        // first sample whose time is >= t in the integration order
        let idx = self.samples.partition_point(|(s, _)| key(*s) < kt).clamp(1, n - 1);
        let (t0, y0) = &self.samples[idx - 1];
        let (t1, y1) = &self.samples[idx];
        Some(hermite(*t0, y0, &self.derivatives[idx - 1], *t1, y1, &self.derivatives[idx], t))
    }
}

/// Cubic Hermite interpolant on `[t0, t1]` from values and slopes.
pub fn hermite(t0: f64, y0: &[f64], f0: &[f64], t1: f64, y1: &[f64], f1: &[f64], t: f64) -> Vec<f64> {
    let h = t1 - t0;
    if h == 0.0 {
        return y0.to_vec();
    }
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    (0..y0.len()).map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i]).collect()
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedStep {
    pub y_high: Vec<f64>,
    pub err_estimate: Vec<f64>,
}

struct Workspace {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
    err: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n], y_new: vec![0.0; n], err: vec![0.0; n] }
    }
}

/// One Dormand–Prince step given `k[0] = f(t, y)`. Fills `y_new`, `err` and
/// `k[6] = f(t + h, y_new)`. Returns false if any stage is non-finite.
fn dopri_stages<F>(p: &OdeProblem<F>, t: f64, y: &[f64], h: f64, ws: &mut Workspace) -> bool
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let Workspace { k, tmp, y_new, err } = ws;
    let [k1, k2, k3, k4, k5, k6, k7] = k;

    for i in 0..n {
        tmp[i] = y[i] + h * A21 * k1[i];
    }
    p.eval(t + C2 * h, tmp, k2);
    for i in 0..n {
        tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
    }
    p.eval(t + C3 * h, tmp, k3);
    for i in 0..n {
        tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
    }
    p.eval(t + C4 * h, tmp, k4);
    for i in 0..n {
        tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
    }
    p.eval(t + C5 * h, tmp, k5);
    for i in 0..n {
        tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
    }
    p.eval(t + h, tmp, k6);
    for i in 0..n {
        y_new[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
    }
    p.eval(t + h, y_new, k7);
    for i in 0..n {
        err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
    }
    y_new.iter().chain(k7.iter()).chain(err.iter()).all(|v| v.is_finite())
        && [&*k2, &*k3, &*k4, &*k5, &*k6].iter().all(|s| s.iter().all(|v| v.is_finite()))
}

/// Single embedded step from `(t, y)` with signed step `h`.
pub fn step_embedded<F>(problem: &OdeProblem<F>, t: f64, y: &[f64], h: f64) -> Result<EmbeddedStep, IntegrationError>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if h == 0.0 {
        return Err(IntegrationError::ZeroStep);
    }
    if y.len() != problem.dim {
        return Err(IntegrationError::Dimension { expected: problem.dim, got: y.len() });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(IntegrationError::NonFinite { t });
    }
    let mut ws = Workspace::new(y.len());
    problem.eval(t, y, &mut ws.k[0]);
    if ws.k[0].iter().any(|v| !v.is_finite()) || !dopri_stages(problem, t, y, h, &mut ws) {
        return Err(IntegrationError::NonFinite { t });
    }
    Ok(EmbeddedStep { y_high: ws.y_new, err_estimate: ws.err })
}

fn error_norm(y: &[f64], y_new: &[f64], err: &[f64], cfg: &IntegrationConfig) -> f64 {
    let n = y.len() as f64;
    let sum: f64 = y
        .iter()
        .zip(y_new)
        .zip(err)
        .map(|((a, b), e)| {
            let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;

/// Adaptive integration from `(t0, y0)` towards `t_end` (may be infinite),
/// stopping early at the first terminal event.
pub fn integrate<F>(
    problem: &OdeProblem<F>,
    y0: &[f64],
    t0: f64,
    t_end: f64,
    config: &IntegrationConfig,
    events: &[EventSpec],
) -> Result<IntegrationOutcome, IntegrationError>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    config.validate()?;
    let n = problem.dim;
    if y0.len() != n {
        return Err(IntegrationError::Dimension { expected: n, got: y0.len() });
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(IntegrationError::NonFinite { t: t0 });
    }
    let dir = problem.direction.sign();
    if t_end.is_nan() || (t_end - t0) * dir < 0.0 {
        return Err(IntegrationError::WrongDirection { t0, t_end, direction: problem.direction });
    }

    let mut stats = IntegrationStats::default();
    let mut ws = Workspace::new(n);
    let mut t = t0;
    let mut y = y0.to_vec();
    problem.eval(t, &y, &mut ws.k[0]);
    stats.rhs_evals += 1;
    if ws.k[0].iter().any(|v| !v.is_finite()) {
        return Err(IntegrationError::NonFinite { t });
    }

    let mut samples = vec![(t, y.clone())];
    let mut derivatives = vec![ws.k[0].clone()];
    let mut crossings = Vec::new();
    let mut g_old: Vec<f64> = events.iter().map(|e| (e.g)(t, &y)).collect();

    let mut h_abs = config.h_init.min(config.h_max);
    let mut err_prev: f64 = 1e-4;
    let mut rejected_last = false;

    let finish = |status, samples, derivatives, crossings, stats| {
        Ok(IntegrationOutcome { status, samples, derivatives, crossings, stats })
    };

    if t == t_end {
        return finish(IntegrationStatus::ReachedTEnd, samples, derivatives, crossings, stats);
    }

    loop {
        if stats.steps_accepted + stats.steps_rejected >= config.max_steps {
            return finish(IntegrationStatus::MaxSteps, samples, derivatives, crossings, stats);
        }
        let remaining = (t_end - t).abs();
        let last_step = h_abs >= remaining;
        let h = if last_step { remaining * dir } else { h_abs * dir };

        let finite = dopri_stages(problem, t, &y, h, &mut ws);
        stats.rhs_evals += 6;
        if !finite {
            stats.steps_rejected += 1;
            rejected_last = true;
            h_abs *= FAC_MIN;
            if h_abs < config.h_min {
                return finish(IntegrationStatus::NonFinite, samples, derivatives, crossings, stats);
            }
            continue;
        }
        let err = error_norm(&y, &ws.y_new, &ws.err, config);
        if err > 1.0 {
            stats.steps_rejected += 1;
            let fac = (SAFETY * err.powf(-ALPHA)).max(FAC_MIN);
            h_abs *= fac;
            rejected_last = true;
            if h_abs < config.h_min {
                return finish(IntegrationStatus::StepFloor, samples, derivatives, crossings, stats);
            }
            continue;
        }

        // accepted
        stats.steps_accepted += 1;
        let t_new = if last_step { t_end } else { t + h };

        // events
        let g_new: Vec<f64> = events.iter().map(|e| (e.g)(t_new, &ws.y_new)).collect();
        let mut hits: Vec<(f64, usize, Vec<f64>)> = Vec::new();
        for (i, ev) in events.iter().enumerate() {
            if ev.crosses(g_old[i], g_new[i]) {
                let (te, ye, evals) = locate_event(problem, ev, t, &y, h, g_old[i], &ws.k[0], config.event_tol);
                stats.rhs_evals += evals;
                hits.push((te, i, ye));
            }
        }
        // order by time along the integration direction, ties by index
        hits.sort_by(|a, b| ((a.0 - t) * dir).total_cmp(&((b.0 - t) * dir)).then(a.1.cmp(&b.1)));
        let first_terminal = hits.iter().position(|(_, i, _)| events[*i].terminal);
        if let Some(pos) = first_terminal {
            for (te, i, ye) in hits.iter().take(pos) {
                crossings.push(EventRecord { index: *i, label: events[*i].label.clone(), t: *te, y: ye.clone() });
            }
            let (te, i, ye) = hits.swap_remove(pos);
            let mut fe = vec![0.0; n];
            problem.eval(te, &ye, &mut fe);
            stats.rhs_evals += 1;
            samples.push((te, ye.clone()));
            derivatives.push(fe);
            let rec = EventRecord { index: i, label: events[i].label.clone(), t: te, y: ye };
            return finish(IntegrationStatus::EventHit(rec), samples, derivatives, crossings, stats);
        }
        for (te, i, ye) in hits {
            crossings.push(EventRecord { index: i, label: events[i].label.clone(), t: te, y: ye });
        }

        t = t_new;
        y.copy_from_slice(&ws.y_new);
        let k7 = ws.k[6].clone();
        ws.k[0].copy_from_slice(&k7);
        samples.push((t, y.clone()));
        derivatives.push(k7);
        g_old = g_new;

        if last_step {
            return finish(IntegrationStatus::ReachedTEnd, samples, derivatives, crossings, stats);
        }

        let mut fac = SAFETY * err.max(1e-300).powf(-ALPHA) * err_prev.powf(BETA);
        fac = fac.clamp(FAC_MIN, FAC_MAX);
        if rejected_last {
            fac = fac.min(1.0);
        }
        err_prev = err.max(1e-4);
        rejected_last = false;
        h_abs = (h_abs * fac).min(config.h_max).max(config.h_min);
    }
}

/// Bisection on the step fraction. Each trial state is an actual
/// Dormand–Prince sub-step from the start of the accepted step, so the located
/// point carries the full order of the method. Returns the post-crossing end
/// of the final bracket.
#[allow(clippy::too_many_arguments)]
fn locate_event<F>(
    problem: &OdeProblem<F>,
    ev: &EventSpec,
    t: f64,
    y: &[f64],
    h: f64,
    g_start: f64,
    f_start: &[f64],
    event_tol: f64,
) -> (f64, Vec<f64>, usize)
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut ws = Workspace::new(n);
    let mut evals = 0;
    let mut sub = |theta: f64, ws: &mut Workspace| -> Vec<f64> {
        ws.k[0].copy_from_slice(f_start);
        dopri_stages(problem, t, y, theta * h, ws);
        evals += 6;
        ws.y_new.clone()
    };
    let before = |g: f64| if g_start > 0.0 { g > 0.0 } else { g < 0.0 };
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    let mut y_hi = sub(1.0, &mut ws);
    let max_iter = 200;
    for _ in 0..max_iter {
        if (hi - lo) * h.abs() <= event_tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let y_mid = sub(mid, &mut ws);
        let g_mid = (ev.g)(t + mid * h, &y_mid);
        if before(g_mid) {
            lo = mid;
        } else {
            hi = mid;
            y_hi = y_mid;
        }
    }
    (t + hi * h, y_hi, evals)
}

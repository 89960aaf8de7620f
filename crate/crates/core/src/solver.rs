//! Root finding on the connection maps: the classification boundary `x0*`
//! of the backward map, inversion of the forward map `A_plus -> x0`,
//! whole-`m` solves and continuation sweeps in `m`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{far_to_near, Branch, CenterSeries, ModelParams, NearState};
use crate::shooting::{fit_intercept, shoot_minus, shoot_plus, ShootConfig, ShootError, ShotRecord, TerminationKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Shoot(#[from] ShootError),
    #[error("residual at x0 = {x0} is not evaluable: shot ended with {kind}")]
    NonEvaluable { x0: f64, kind: String },
    #[error("no sign change of the residual on [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },
    #[error("ambiguous root in [{lo}, {hi}]: {reason}")]
    AmbiguousRoot { lo: f64, hi: f64, reason: String },
    #[error("x0 target {target} not straddled: A_plus in [{lo}, {hi}] gives x0 in [{x_lo}, {x_hi}]")]
    NoStraddle { target: f64, lo: f64, hi: f64, x_lo: f64, x_hi: f64 },
    #[error("x0 target {target} against x_Q = {x_q} needs an A_plus bracket of the other sign")]
    SignConsistency { target: f64, x_q: f64 },
    #[error("bracket search failed: {0}")]
    BracketSearch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn need(params: &ModelParams, branch: Branch) -> Result<(), SolveError> {
    if params.branch != branch {
        return Err(ShootError::WrongBranch { expected: branch }.into());
    }
    Ok(())
}

/// Signed encoding of the two exits of the backward map.
pub fn residual_of(kind: &TerminationKind) -> Option<f64> {
    match *kind {
        TerminationKind::HitW0 { u, .. } => Some(u),
        TerminationKind::HitU0 { w, .. } => Some(-w),
        TerminationKind::NearEquilibrium { .. } => Some(0.0),
        TerminationKind::Diverged | TerminationKind::BudgetExhausted => None,
    }
}

fn residual_from(x0: f64, rec: &ShotRecord) -> Result<f64, SolveError> {
    residual_of(&rec.termination.kind)
        .ok_or_else(|| SolveError::NonEvaluable { x0, kind: rec.termination.kind.label().to_string() })
}

/// `+u` at a `w = 0` exit, `-w` at a `u = 0` exit, `0` on landing.
pub fn residual_minus(params: &ModelParams, x0: f64, cfg: &ShootConfig) -> Result<f64, SolveError> {
    need(params, Branch::Minus)?;
    let rec = shoot_minus(params, x0, cfg)?;
    residual_from(x0, &rec)
}

/// How `A_minus` was read off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AReadout {
    /// A shot landed within `eq_tol` of the line of equilibria.
    Landing,
    /// The limiting shots passed within `APPROACH_TOL` of it.
    Approach,
    /// Linear extrapolation of `u(xi)` from the limiting shots.
    Extrapolated,
    /// `xi` at the closest approach, used when the extrapolation fit is
    /// rejected (the shots barely leave the line of equilibria).
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootEstimate {
    pub x0_star: f64,
    pub a_minus: f64,
    pub readout: AReadout,
    /// Final bisection bracket.
    pub lo: f64,
    pub hi: f64,
}

/// Limiting shots closer than this to `(xi, 0, 0)` read `A_minus` directly.
pub const APPROACH_TOL: f64 = 1e-4;

/// Relative bracket width at which bisection stops.
pub const BISECTION_RTOL: f64 = 1e-13;

/// Point of the near-field leg closest to the line of equilibria.
fn closest_approach(rec: &ShotRecord) -> Option<NearState> {
    rec.near_leg().iter().map(|(_, s)| *s).min_by(|a, b| a.u.max(a.w.abs()).total_cmp(&b.u.max(b.w.abs())))
}

/// Index in the near leg where the shot leaves the center manifold: the
/// minimum of `w`.
fn departure_index(rec: &ShotRecord) -> usize {
    rec.near_leg().iter().enumerate().min_by(|a, b| a.1 .1.w.total_cmp(&b.1 .1.w)).map(|(i, _)| i).unwrap_or(0)
}

/// `A_minus` from the two limiting shots on either side of `x0*`.
pub fn read_a_minus(a: &ShotRecord, b: &ShotRecord) -> Result<(f64, AReadout), SolveError> {
    for r in [a, b] {
        if let TerminationKind::NearEquilibrium { a } = r.termination.kind {
            return Ok((a, AReadout::Landing));
        }
    }
    let ca = closest_approach(a);
    let cb = closest_approach(b);
    if let (Some(ca), Some(cb)) = (ca, cb) {
        let (best, d) = if ca.u.max(ca.w.abs()) <= cb.u.max(cb.w.abs()) {
            (ca, ca.u.max(ca.w.abs()))
        } else {
            (cb, cb.u.max(cb.w.abs()))
        };
        if d <= APPROACH_TOL {
            return Ok((best.xi, AReadout::Approach));
        }
    }
    let u_dep = [a, b]
        .iter()
        .map(|r| r.near_leg().get(departure_index(r)).map(|(_, s)| s.u).unwrap_or(0.0))
        .fold(0.0_f64, f64::max);
    let window = (u_dep, 2.0 * u_dep);
    let mut pts: Vec<(f64, f64)> = [a, b]
        .iter()
        .flat_map(|r| {
            let leg = r.near_leg();
            leg[..=departure_index(r).min(leg.len().saturating_sub(1))].iter()
        })
        .filter(|(_, s)| s.u >= window.0 && s.u <= window.1)
        .map(|(_, s)| (s.xi, s.u))
        .collect();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0));
    match (fit_intercept(&pts, window), ca.or(cb)) {
        (Ok(a_minus), _) => Ok((a_minus, AReadout::Extrapolated)),
        (Err(_), Some(_)) => {
            let best = [ca, cb]
                .into_iter()
                .flatten()
                .min_by(|a, b| a.u.max(a.w.abs()).total_cmp(&b.u.max(b.w.abs())))
                .expect("at least one approach");
            Ok((best.xi, AReadout::Nearest))
        }
        (Err(e), None) => Err(e.into()),
    }
}

/// Bisection on the sign of [`residual_minus`] down to a relative bracket
/// width of [`BISECTION_RTOL`].
pub fn find_x0_star(params: &ModelParams, bracket: (f64, f64), cfg: &ShootConfig) -> Result<RootEstimate, SolveError> {
    need(params, Branch::Minus)?;
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) || !hi.is_finite() {
        return Err(SolveError::InvalidInput(format!("bracket ({lo}, {hi}) must satisfy 0 < lo < hi")));
    }
    let mut rec_lo = shoot_minus(params, lo, cfg)?;
    let mut rec_hi = shoot_minus(params, hi, cfg)?;
    let r_lo = residual_from(lo, &rec_lo)?;
    let r_hi = residual_from(hi, &rec_hi)?;
    for (x, r, rec) in [(lo, r_lo, &rec_lo), (hi, r_hi, &rec_hi)] {
        if r == 0.0 {
            let (a_minus, readout) = read_a_minus(rec, rec)?;
            return Ok(RootEstimate { x0_star: x, a_minus, readout, lo: x, hi: x });
        }
    }
    if r_lo.signum() == r_hi.signum() {
        return Err(SolveError::NoSignChange { lo, hi });
    }
    while hi - lo > BISECTION_RTOL * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let rec = shoot_minus(params, mid, cfg)?;
        let r = residual_of(&rec.termination.kind).ok_or_else(|| SolveError::AmbiguousRoot {
            lo,
            hi,
            reason: format!("shot at {mid} ended with {}", rec.termination.kind.label()),
        })?;
        if r == 0.0 {
            let (a_minus, readout) = read_a_minus(&rec, &rec)?;
            return Ok(RootEstimate { x0_star: mid, a_minus, readout, lo: mid, hi: mid });
        }
        if r.signum() == r_lo.signum() {
            lo = mid;
            rec_lo = rec;
        } else {
            hi = mid;
            rec_hi = rec;
        }
    }
    let (a_minus, readout) = read_a_minus(&rec_lo, &rec_hi)?;
    Ok(RootEstimate { x0_star: 0.5 * (lo + hi), a_minus, readout, lo, hi })
}

/// One point of a traced connection map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum ConnectionMapSample {
    /// Backward map: `x0` and how the shot ended.
    Backward { x0: f64, termination: TerminationKind },
    /// Forward map: `A_plus` and the far-field limit `x0`.
    Forward { a_plus: f64, x0_estimate: f64 },
    /// A point where the shot itself failed.
    Gap { sweep_var: f64, reason: String },
}

impl ConnectionMapSample {
    pub fn sweep_var(&self) -> f64 {
        match self {
            ConnectionMapSample::Backward { x0, .. } => *x0,
            ConnectionMapSample::Forward { a_plus, .. } => *a_plus,
            ConnectionMapSample::Gap { sweep_var, .. } => *sweep_var,
        }
    }
}

fn check_grid(grid: &[f64], positive: bool) -> Result<(), SolveError> {
    if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SolveError::InvalidInput("grid must be finite and strictly increasing".into()));
    }
    if positive && grid.first().is_some_and(|v| !(*v > 0.0)) {
        return Err(SolveError::InvalidInput("grid must be positive".into()));
    }
    Ok(())
}

/// One backward shot per grid point, in parallel; output keeps grid order.
pub fn trace_map_minus(
    params: &ModelParams,
    x0_grid: &[f64],
    cfg: &ShootConfig,
) -> Result<Vec<ConnectionMapSample>, SolveError> {
    need(params, Branch::Minus)?;
    check_grid(x0_grid, true)?;
    cfg.validate()?;
    Ok(x0_grid
        .par_iter()
        .map(|&x0| match shoot_minus(params, x0, cfg) {
            Ok(rec) => ConnectionMapSample::Backward { x0, termination: rec.termination.kind },
            Err(e) => ConnectionMapSample::Gap { sweep_var: x0, reason: e.to_string() },
        })
        .collect())
}

/// One forward shot per grid point, in parallel; output keeps grid order.
pub fn trace_map_plus(
    params: &ModelParams,
    a_grid: &[f64],
    cfg: &ShootConfig,
) -> Result<Vec<ConnectionMapSample>, SolveError> {
    need(params, Branch::Plus)?;
    check_grid(a_grid, false)?;
    cfg.validate()?;
    Ok(a_grid
        .par_iter()
        .map(|&a_plus| match shoot_plus(params, a_plus, cfg) {
            Ok((x0_estimate, _)) => ConnectionMapSample::Forward { a_plus, x0_estimate },
            Err(e) => ConnectionMapSample::Gap { sweep_var: a_plus, reason: e.to_string() },
        })
        .collect())
}

/// Absolute tolerance on the far-field limit when matching.
pub const MATCH_TOL: f64 = 1e-8;

fn forward_x0(params: &ModelParams, a: f64, cfg: &ShootConfig) -> Result<f64, SolveError> {
    Ok(shoot_plus(params, a, cfg)?.0)
}

/// `A_plus` whose forward shot tends to `x0_target`. Secant steps inside a
/// maintained bracket, with bisection whenever a secant step stalls or
/// leaves the bracket.
pub fn match_plus(
    params: &ModelParams,
    x0_target: f64,
    bracket: (f64, f64),
    cfg: &ShootConfig,
) -> Result<f64, SolveError> {
    need(params, Branch::Plus)?;
    let (mut lo, mut hi) = bracket;
    if !(x0_target > 0.0) || !x0_target.is_finite() {
        return Err(SolveError::InvalidInput(format!("x0 target {x0_target} must be positive")));
    }
    if !(hi > lo) || lo == 0.0 || hi == 0.0 || lo.signum() != hi.signum() {
        return Err(SolveError::InvalidInput(format!("bracket ({lo}, {hi}) must be increasing and exclude 0")));
    }
    let x_q = params.x_q();
    if (x0_target > x_q && hi < 0.0) || (x0_target < x_q && lo > 0.0) {
        return Err(SolveError::SignConsistency { target: x0_target, x_q });
    }
    let mut f_lo = forward_x0(params, lo, cfg)? - x0_target;
    let mut f_hi = forward_x0(params, hi, cfg)? - x0_target;
    if f_lo.abs() <= MATCH_TOL {
        return Ok(lo);
    }
    if f_hi.abs() <= MATCH_TOL {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(SolveError::NoStraddle {
            target: x0_target,
            lo,
            hi,
            x_lo: f_lo + x0_target,
            x_hi: f_hi + x0_target,
        });
    }
    let mut use_bisection = false;
    for _ in 0..200 {
        let secant = lo - f_lo * (hi - lo) / (f_hi - f_lo);
        let width = hi - lo;
        let a = if use_bisection || !(secant > lo && secant < hi) { 0.5 * (lo + hi) } else { secant };
        let f = forward_x0(params, a, cfg)? - x0_target;
        if f.abs() <= MATCH_TOL {
            return Ok(a);
        }
        if f.signum() == f_lo.signum() {
            lo = a;
            f_lo = f;
        } else {
            hi = a;
            f_hi = f;
        }
        // fall back to bisection when a step fails to halve the bracket
        use_bisection = hi - lo > 0.5 * width;
        if hi - lo <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()) {
            break;
        }
    }
    let a = if f_lo.abs() <= f_hi.abs() { lo } else { hi };
    let f = if f_lo.abs() <= f_hi.abs() { f_lo } else { f_hi };
    if f.abs() <= 1e3 * MATCH_TOL {
        Ok(a)
    } else {
        Err(SolveError::BracketSearch(format!(
            "secant/bisection stalled at A_plus = {a} with |x0 - target| = {:.3e}",
            f.abs()
        )))
    }
}

/// Automatic bracket for [`match_plus`]: positive targets start from
/// `(1e-4, 1)`, negative ones from `(-1, -1e-4)`, and the outer end doubles
/// until the target is straddled.
pub fn auto_bracket_plus(params: &ModelParams, x0_target: f64, cfg: &ShootConfig) -> Result<(f64, f64), SolveError> {
    need(params, Branch::Plus)?;
    let x_q = params.x_q();
    let positive = x0_target > x_q;
    let (mut inner, mut outer) = if positive { (1e-4, 1.0) } else { (-1e-4, -1.0) };
    let f = |a: f64| forward_x0(params, a, cfg).map(|x| x - x0_target);
    let mut f_inner = f(inner)?;
    while (positive && f_inner > 0.0) || (!positive && f_inner < 0.0) {
        inner *= 0.1;
        if inner.abs() < 1e-12 {
            return Err(SolveError::BracketSearch(format!("target {x0_target} too close to x_Q = {x_q}")));
        }
        f_inner = f(inner)?;
    }
    let mut f_outer = f(outer)?;
    let mut doublings = 0;
    while f_outer.signum() == f_inner.signum() {
        inner = outer;
        f_inner = f_outer;
        outer *= 2.0;
        doublings += 1;
        if doublings > 40 {
            return Err(SolveError::BracketSearch(format!("no A_plus found for target {x0_target}")));
        }
        f_outer = f(outer)?;
    }
    Ok(if positive { (inner, outer) } else { (outer, inner) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    Reversing,
    AntiReversing,
    Stationary,
}

/// Strictly increasing samples of `H(xi)` from the interface `a` outwards,
/// with the far-field label `x0` used beyond the last sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub m: f64,
    pub a: f64,
    pub x0: f64,
    pub xi: Vec<f64>,
    pub h: Vec<f64>,
}

impl Profile {
    /// Builds a profile from trajectory samples, keeping only points that
    /// extend the strictly increasing envelope, starting at `(a, 0)`.
    pub fn from_states<'a>(m: f64, a: f64, x0: f64, states: impl IntoIterator<Item = &'a NearState>) -> Self {
        let mut pts: Vec<(f64, f64)> = states
            .into_iter()
            .filter(|s| s.xi > a && s.u > 0.0 && s.xi.is_finite() && s.u.is_finite())
            .map(|s| (s.xi, s.u))
            .collect();
        pts.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut xi = vec![a];
        let mut h = vec![0.0];
        for (x, u) in pts {
            if x > *xi.last().unwrap() && u > *h.last().unwrap() {
                xi.push(x);
                h.push(u);
            }
        }
        Self { m, a, x0, xi, h }
    }

    /// Far-field power law `(xi/x0)^{2/(m+1)}`.
    pub fn far_law(&self, xi: f64) -> f64 {
        (xi / self.x0).powf(2.0 / (self.m + 1.0))
    }

    pub fn xi_max(&self) -> f64 {
        *self.xi.last().unwrap_or(&self.a)
    }

    /// `H(xi)`: zero left of the interface, monotone cubic Hermite in the
    /// sampled range, far-field power law beyond it.
    pub fn eval(&self, xi: f64) -> f64 {
        if xi <= self.a {
            return 0.0;
        }
        if xi >= self.xi_max() {
            return if self.xi.len() > 1 { self.far_law(xi) } else { 0.0 };
        }
        let i = self.xi.partition_point(|&v| v <= xi);
        let (x0, x1) = (self.xi[i - 1], self.xi[i]);
        let (h0, h1) = (self.h[i - 1], self.h[i]);
        let dx = x1 - x0;
        let t = (xi - x0) / dx;
        let (d0, d1) = (self.slope(i - 1) * dx, self.slope(i) * dx);
        let t2 = t * t;
        let t3 = t2 * t;
        h0 * (2.0 * t3 - 3.0 * t2 + 1.0) + d0 * (t3 - 2.0 * t2 + t) + h1 * (3.0 * t2 - 2.0 * t3) + d1 * (t3 - t2)
    }

    fn secant(&self, k: usize) -> f64 {
        (self.h[k + 1] - self.h[k]) / (self.xi[k + 1] - self.xi[k])
    }

    /// Fritsch-Butland node slope; keeps the interpolant monotone.
    fn slope(&self, k: usize) -> f64 {
        let n = self.xi.len();
        if n < 3 {
            return self.secant(0);
        }
        let end = |k0: usize, k1: usize, w0: f64, w1: f64| {
            let (s0, s1) = (self.secant(k0), self.secant(k1));
            let d = ((2.0 * w0 + w1) * s0 - w0 * s1) / (w0 + w1);
            if d.signum() != s0.signum() {
                0.0
            } else if s0.signum() != s1.signum() && d.abs() > 3.0 * s0.abs() {
                3.0 * s0
            } else {
                d
            }
        };
        if k == 0 {
            return end(0, 1, self.xi[1] - self.xi[0], self.xi[2] - self.xi[1]);
        }
        if k == n - 1 {
            return end(n - 2, n - 3, self.xi[n - 1] - self.xi[n - 2], self.xi[n - 2] - self.xi[n - 3]);
        }
        let (s0, s1) = (self.secant(k - 1), self.secant(k));
        if s0 * s1 <= 0.0 {
            return 0.0;
        }
        let (w0, w1) = (self.xi[k] - self.xi[k - 1], self.xi[k + 1] - self.xi[k]);
        let (a, b) = (2.0 * w1 + w0, w1 + 2.0 * w0);
        (a + b) / (a / s0 + b / s1)
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.xi.windows(2).all(|w| w[1] > w[0]) && self.h.windows(2).all(|w| w[1] > w[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySolution {
    pub m: f64,
    pub a_minus: f64,
    pub a_plus: f64,
    pub x0_star: f64,
    pub kind: SolutionKind,
    /// `A_minus` and `A_plus` of opposite signs: not an admissible pair.
    pub rejected: bool,
    pub a_minus_readout: AReadout,
    pub profile_minus: Profile,
    pub profile_plus: Profile,
}

impl SimilaritySolution {
    pub fn profile(&self, branch: Branch) -> &Profile {
        match branch {
            Branch::Minus => &self.profile_minus,
            Branch::Plus => &self.profile_plus,
        }
    }

    /// `H_+ / H_-` at the largest `xi` sampled by both profiles.
    pub fn far_field_ratio(&self) -> f64 {
        let xi = self.profile_minus.xi_max().min(self.profile_plus.xi_max());
        self.profile_plus.eval(xi) / self.profile_minus.eval(xi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub shoot: ShootConfig,
    pub scan_lo: f64,
    pub scan_hi: f64,
    pub per_decade: usize,
    /// Roots within this relative distance of `x_Q` are the exact solution.
    pub stationary_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { shoot: ShootConfig::default(), scan_lo: 0.02, scan_hi: 3.0, per_decade: 400, stationary_tol: 1e-3 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        self.shoot.validate()?;
        if !(self.scan_lo > 0.0 && self.scan_hi > self.scan_lo && self.scan_hi.is_finite()) {
            return Err(SolveError::InvalidInput("scan range must satisfy 0 < lo < hi".into()));
        }
        if self.per_decade < 2 {
            return Err(SolveError::InvalidInput("per_decade must be at least 2".into()));
        }
        Ok(())
    }

    /// Log scan for exponent `m`, refined around `x_Q` where branches
    /// leave the stationary solution in pairs closer than one log cell.
    pub fn scan_grid(&self, m: f64) -> Vec<f64> {
        let x_q = (2.0 / (m + 1.0)).sqrt();
        let mut grid = log_grid(self.scan_lo, self.scan_hi, self.per_decade);
        grid.extend(
            (0..=X_Q_PATCH_POINTS)
                .map(|i| x_q * (1.0 + X_Q_PATCH * (2.0 * i as f64 / X_Q_PATCH_POINTS as f64 - 1.0)))
                .filter(|x| *x > self.scan_lo && *x < self.scan_hi),
        );
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid
    }
}

/// Relative half-width of the dense patch around `x_Q`.
const X_Q_PATCH: f64 = 0.02;
const X_Q_PATCH_POINTS: usize = 200;

/// `per_decade` log-spaced points per decade covering `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let n = ((decades * per_decade as f64).ceil() as usize).max(1);
    (0..=n).map(|i| lo * (hi / lo).powf(i as f64 / n as f64)).collect()
}

/// Brackets `(lo, hi)` across which the scanned residual changes sign.
/// Non-evaluable points split the scan: no bracket spans a gap.
pub fn sign_change_brackets(samples: &[ConnectionMapSample]) -> Vec<(f64, f64)> {
    let vals: Vec<(f64, Option<f64>)> = samples
        .iter()
        .map(|s| match s {
            ConnectionMapSample::Backward { x0, termination } => (*x0, residual_of(termination)),
            other => (other.sweep_var(), None),
        })
        .collect();
    let mut out = Vec::new();
    for w in vals.windows(2) {
        if let ((a, Some(ra)), (b, Some(rb))) = (w[0], w[1]) {
            if ra == 0.0 {
                continue;
            }
            if rb == 0.0 || ra.signum() != rb.signum() {
                out.push((a, b));
            }
        }
    }
    out
}

/// All classification boundaries of the backward map found by a coarse
/// log scan followed by bisection, in increasing `x0*`.
pub fn find_all_roots(m: f64, search: &SearchConfig) -> Result<Vec<RootEstimate>, SolveError> {
    search.validate()?;
    let params = ModelParams::new(m, Branch::Minus).map_err(|e| SolveError::InvalidInput(e.to_string()))?;
    let scan = trace_map_minus(&params, &search.scan_grid(m), &search.shoot)?;
    let roots = roots_in(&params, &sign_change_brackets(&scan), &search.shoot)?;
    Ok(merge_stationary(m, roots, search.stationary_tol))
}

fn roots_in(params: &ModelParams, brackets: &[(f64, f64)], cfg: &ShootConfig) -> Result<Vec<RootEstimate>, SolveError> {
    let found: Vec<Result<RootEstimate, SolveError>> =
        brackets.par_iter().map(|&b| find_x0_star(params, b, cfg)).collect();
    let mut roots = Vec::new();
    for r in found {
        match r {
            Ok(r) => roots.push(r),
            Err(SolveError::AmbiguousRoot { .. }) | Err(SolveError::NoSignChange { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    roots.sort_by(|a, b| a.x0_star.total_cmp(&b.x0_star));
    // landings stop the bisection anywhere inside the landing set
    roots.dedup_by(|a, b| (a.x0_star - b.x0_star).abs() <= 1e-6 * b.x0_star);
    Ok(roots)
}

/// Keeps one root, the closest to `x_Q`, among those resolved as the
/// stationary solution. Branches crossing `x_Q` merge with it there.
fn merge_stationary(m: f64, mut roots: Vec<RootEstimate>, tol: f64) -> Vec<RootEstimate> {
    let x_q = (2.0 / (m + 1.0)).sqrt();
    let keep = roots
        .iter()
        .enumerate()
        .filter(|(_, r)| is_stationary(m, r, tol))
        .min_by(|a, b| (a.1.x0_star - x_q).abs().total_cmp(&(b.1.x0_star - x_q).abs()))
        .map(|(i, _)| i);
    let mut i = 0;
    roots.retain(|r| {
        let ok = Some(i) == keep || !is_stationary(m, r, tol);
        i += 1;
        ok
    });
    roots
}

fn is_stationary(m: f64, root: &RootEstimate, tol: f64) -> bool {
    let x_q = (2.0 / (m + 1.0)).sqrt();
    (root.x0_star - x_q).abs() <= tol * x_q
}

/// Series points appended beyond the backward seed, ten per decade of `z`.
const FAR_SERIES_POINTS: usize = 60;

/// Limiting backward shot for the `H_-` profile, trimmed where it leaves
/// the center manifold.
fn minus_profile(params: &ModelParams, root: &RootEstimate, cfg: &ShootConfig) -> Result<Profile, SolveError> {
    let rec = shoot_minus(params, root.lo, cfg)?;
    let leg_start = rec.switch_index;
    let cut = leg_start + departure_index(&rec);
    let mut states: Vec<NearState> =
        rec.trajectory[..=cut.min(rec.trajectory.len() - 1)].iter().map(|(_, s)| *s).collect();
    // continue past the seed along the center-manifold series
    let series = CenterSeries::new(params, root.x0_star);
    for k in 1..=FAR_SERIES_POINTS {
        let z = cfg.delta * 10f64.powf(-(k as f64) / 10.0);
        if let Ok(s) = far_to_near(params, series.point(z, cfg.seed_order)) {
            states.push(s);
        }
    }
    Ok(Profile::from_states(params.m, root.a_minus, root.x0_star, states.iter()))
}

fn plus_profile(params: &ModelParams, a_plus: f64, x0: f64, cfg: &ShootConfig) -> Result<Profile, SolveError> {
    let (_, rec) = shoot_plus(params, a_plus, cfg)?;
    Ok(Profile::from_states(params.m, a_plus, x0, rec.trajectory.iter().map(|(_, s)| s)))
}

/// Builds the matched pair for one root of the backward map.
pub fn solution_for_root(m: f64, root: &RootEstimate, search: &SearchConfig) -> Result<SimilaritySolution, SolveError> {
    let minus = ModelParams::new(m, Branch::Minus).map_err(|e| SolveError::InvalidInput(e.to_string()))?;
    let plus = minus.with_branch(Branch::Plus);
    let cfg = &search.shoot;
    if is_stationary(m, root, search.stationary_tol) {
        let x_q = minus.x_q();
        let exact = |branch| {
            let p = minus.with_branch(branch);
            // u^{m+1} = (m+1)/2 xi^2 along the exact solution
            let xi: Vec<f64> = (0..=400).map(|i| 1e-6 * 1e12_f64.powf(i as f64 / 400.0)).collect();
            let states: Vec<NearState> =
                xi.iter().map(|&x| NearState::new(x, (p.p() * x * x).powf(1.0 / (m + 1.0)), x)).collect();
            Profile::from_states(m, 0.0, x_q, states.iter())
        };
        return Ok(SimilaritySolution {
            m,
            a_minus: 0.0,
            a_plus: 0.0,
            x0_star: x_q,
            kind: SolutionKind::Stationary,
            rejected: false,
            a_minus_readout: root.readout,
            profile_minus: exact(Branch::Minus),
            profile_plus: exact(Branch::Plus),
        });
    }
    let bracket = auto_bracket_plus(&plus, root.x0_star, cfg)?;
    let a_plus = match_plus(&plus, root.x0_star, bracket, cfg)?;
    let (kind, rejected) = match (root.a_minus > 0.0, a_plus > 0.0) {
        (true, true) => (SolutionKind::Reversing, false),
        (false, false) => (SolutionKind::AntiReversing, false),
        (true, false) => (SolutionKind::Reversing, true),
        (false, true) => (SolutionKind::AntiReversing, true),
    };
    Ok(SimilaritySolution {
        m,
        a_minus: root.a_minus,
        a_plus,
        x0_star: root.x0_star,
        kind,
        rejected,
        a_minus_readout: root.readout,
        profile_minus: minus_profile(&minus, root, cfg)?,
        profile_plus: plus_profile(&plus, a_plus, root.x0_star, cfg)?,
    })
}

/// Every matched pair for exponent `m`, including the stationary exact
/// solution, ordered by `x0*`. Mixed-sign pairs are kept with `rejected`.
pub fn solve_pair(m: f64, search: &SearchConfig) -> Result<Vec<SimilaritySolution>, SolveError> {
    let roots = find_all_roots(m, search)?;
    roots.par_iter().map(|r| solution_for_root(m, r, search)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub m: f64,
    pub x0_star: f64,
    pub a_minus: f64,
    pub branch_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum BranchEvent {
    /// A branch first seen at this `m`; `onset_m` brackets the birth more
    /// tightly by bisection on the number of roots with the same sign of
    /// `A_minus`.
    Birth { m: f64, onset_m: f64, branch_label: String, x0_star: f64 },
    /// A branch that could not be followed past `m`.
    Break { m: f64, branch_label: String, x0_star: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<BranchPoint>,
    pub events: Vec<BranchEvent>,
}

impl SweepReport {
    pub fn branch(&self, label: &str) -> Vec<&BranchPoint> {
        self.points.iter().filter(|p| p.branch_label == label).collect()
    }

    /// Refined onset of the first branch with `A_minus > 0`.
    pub fn positive_onset(&self) -> Option<f64> {
        self.events.iter().find_map(|e| match e {
            BranchEvent::Birth { onset_m, branch_label, .. } if branch_label.starts_with("pos") => Some(*onset_m),
            _ => None,
        })
    }

    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = Vec::new();
        for p in &self.points {
            if !labels.contains(&p.branch_label) {
                labels.push(p.branch_label.clone());
            }
        }
        labels
    }
}

/// Relative `x0*` change allowed between consecutive sweep steps on one branch.
const CONTINUATION_TOL: f64 = 0.1;

fn sign_class(a: f64) -> &'static str {
    if a > 0.0 {
        "pos"
    } else {
        "neg"
    }
}

/// Continuation in `m` over `[m_lo, m_hi]`. At each step the previous
/// roots seed local brackets and a fresh coarse scan catches new branches;
/// roots are linked to branches by nearest `x0*` with the same sign of
/// `A_minus`.
pub fn sweep_branches(m_range: (f64, f64), m_step: f64, search: &SearchConfig) -> Result<SweepReport, SolveError> {
    let (m_lo, m_hi) = m_range;
    if !(m_lo > 1.0 && m_hi <= 8.0 && m_hi >= m_lo) {
        return Err(SolveError::InvalidInput(format!("m range ({m_lo}, {m_hi}) must lie in (1, 8]")));
    }
    if !(m_step > 0.0) {
        return Err(SolveError::InvalidInput("m step must be positive".into()));
    }
    search.validate()?;
    let n = ((m_hi - m_lo) / m_step + 1e-9).floor() as usize;
    let ms: Vec<f64> = (0..=n).map(|i| m_lo + i as f64 * m_step).collect();

    let mut points = Vec::new();
    let mut events = Vec::new();
    // (label, last x0*)
    let mut active: Vec<(String, f64)> = Vec::new();
    let mut counters = std::collections::BTreeMap::<&'static str, usize>::new();
    let mut prev: Option<(f64, Vec<RootEstimate>)> = None;

    for &m in &ms {
        let params = ModelParams::new(m, Branch::Minus).map_err(|e| SolveError::InvalidInput(e.to_string()))?;
        let scan = trace_map_minus(&params, &search.scan_grid(m), &search.shoot)?;
        let mut brackets = sign_change_brackets(&scan);
        for (_, x) in &active {
            let local: Vec<f64> = (0..=40).map(|i| x * (0.9 + 0.2 * i as f64 / 40.0)).collect();
            let samples = trace_map_minus(&params, &local, &search.shoot)?;
            brackets.extend(sign_change_brackets(&samples));
        }
        let roots = merge_stationary(m, roots_in(&params, &brackets, &search.shoot)?, search.stationary_tol);

        let mut taken = vec![false; roots.len()];
        let mut next_active = Vec::new();
        for (label, x_prev) in &active {
            let class = label_class(label);
            let best = roots
                .iter()
                .enumerate()
                .filter(|(i, r)| {
                    !taken[*i]
                        && (r.x0_star - x_prev).abs() <= CONTINUATION_TOL * x_prev
                        && root_class(m, r, search) == class
                })
                .min_by(|a, b| (a.1.x0_star - x_prev).abs().total_cmp(&(b.1.x0_star - x_prev).abs()));
            match best {
                Some((i, r)) => {
                    taken[i] = true;
                    let point = branch_point(&params, r, label, search);
                    next_active.push((label.clone(), point.x0_star));
                    points.push(point);
                }
                None => events.push(BranchEvent::Break { m, branch_label: label.clone(), x0_star: *x_prev }),
            }
        }
        let mut onsets = std::collections::BTreeMap::<&'static str, f64>::new();
        for (i, r) in roots.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let class = root_class(m, r, search);
            let label = if class == "stationary" {
                "stationary".to_string()
            } else {
                let c = counters.entry(class).or_insert(0);
                *c += 1;
                format!("{class}-{c}")
            };
            let onset_m = match &prev {
                Some((m_prev, prev_roots)) if class != "stationary" => match onsets.get(class) {
                    Some(v) => *v,
                    None => {
                        let base = prev_roots.iter().filter(|r| root_class(*m_prev, r, search) == class).count();
                        let v = refine_onset(class, base, (*m_prev, m), search)?;
                        onsets.insert(class, v);
                        v
                    }
                },
                _ => m,
            };
            events.push(BranchEvent::Birth { m, onset_m, branch_label: label.clone(), x0_star: r.x0_star });
            let point = branch_point(&params, r, &label, search);
            next_active.push((label, point.x0_star));
            points.push(point);
        }
        active = next_active;
        prev = Some((m, roots));
    }
    Ok(SweepReport { points, events })
}

/// Stationary roots are recorded at the exact solution.
fn branch_point(params: &ModelParams, r: &RootEstimate, label: &str, search: &SearchConfig) -> BranchPoint {
    let (x0_star, a_minus) =
        if is_stationary(params.m, r, search.stationary_tol) { (params.x_q(), 0.0) } else { (r.x0_star, r.a_minus) };
    BranchPoint { m: params.m, x0_star, a_minus, branch_label: label.to_string() }
}

/// Bisection steps used to localize a branch birth inside one sweep step.
const ONSET_BISECTIONS: usize = 6;

/// Smallest `m` in `(m_lo, m_hi]`, to within `(m_hi - m_lo) / 64`, at which
/// more than `base` roots of `class` exist.
fn refine_onset(class: &str, base: usize, (m_lo, m_hi): (f64, f64), search: &SearchConfig) -> Result<f64, SolveError> {
    let (mut lo, mut hi) = (m_lo, m_hi);
    for _ in 0..ONSET_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let n = find_all_roots(mid, search)?.iter().filter(|r| root_class(mid, r, search) == class).count();
        if n > base {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn label_class(label: &str) -> &str {
    label.split('-').next().unwrap_or(label)
}

fn root_class(m: f64, r: &RootEstimate, search: &SearchConfig) -> &'static str {
    if is_stationary(m, r, search.stationary_tol) {
        "stationary"
    } else {
        sign_class(r.a_minus)
    }
}

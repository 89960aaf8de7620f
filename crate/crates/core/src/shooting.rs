//! Seeds, the backward shot for `H_-` (far field towards the near field) and
//! the forward shot for `H_+` (near field towards the far field).
//!
//! Both shots run in two legs joined by the exact change of variables. The
//! far-field leg carries the near-field clock `tau` as a fourth component
//! (`dtau/ds = y^{(m+1)/2}`) so the stitched trajectory has one clock.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    center_manifold_limit, far_field, far_to_near, near_field, near_to_far, slow_manifold_slope, Branch, CenterSeries,
    DynamicsError, FarState, ModelParams, NearState, MAX_SERIES_ORDER,
};
use crate::integrator::{
    integrate, Direction, EventDirection, EventSpec, IntegrationConfig, IntegrationError, IntegrationOutcome,
    IntegrationStatus, OdeProblem,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShootError {
    #[error("invalid shooting configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid seed: {0}")]
    InvalidSeed(String),
    #[error("operation needs the {expected:?} branch")]
    WrongBranch { expected: Branch },
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("w = {w} <= 0 at tau = {tau} on a forward shot")]
    MonotonicityViolated { tau: f64, w: f64 },
    #[error("forward shot did not reach the far field: {0:?}")]
    NotConverged(TerminationKind),
    #[error("extrapolation failed: {0}")]
    Extrapolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShootConfig {
    /// Far-field seed offset along the center manifold.
    pub delta: f64,
    /// Near-field seed offset.
    pub eps: f64,
    /// Frame switch at `xi = switch_xi`.
    pub switch_xi: f64,
    /// Horizon of the forward shot, measured in the far-field clock `s`.
    pub tau_inf: f64,
    pub eq_tol: f64,
    /// Number of series terms in the far-field seed (1 = linear seed).
    pub seed_order: usize,
    pub u_floor: f64,
    pub overflow_guard: f64,
    pub integ: IntegrationConfig,
}

impl Default for ShootConfig {
    fn default() -> Self {
        Self {
            delta: 5e-3,
            eps: 1e-6,
            switch_xi: 20.0,
            tau_inf: 1e4,
            eq_tol: 1e-8,
            seed_order: 8,
            u_floor: 1e-12,
            overflow_guard: 1e12,
            integ: IntegrationConfig::default(),
        }
    }
}

impl ShootConfig {
    pub fn validate(&self) -> Result<(), ShootError> {
        let bad = |s: &str| Err(ShootError::InvalidConfig(s.to_string()));
        if !(self.delta > 0.0 && self.delta <= 0.1) {
            return bad("delta must lie in (0, 0.1]");
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad("eps must lie in (0, 1)");
        }
        if !(self.switch_xi > 1.0) || !self.switch_xi.is_finite() {
            return bad("switch_xi must exceed 1");
        }
        if !(self.tau_inf >= 1e3) || !self.tau_inf.is_finite() {
            return bad("tau_inf must be at least 1e3");
        }
        if !(self.eq_tol > 0.0) {
            return bad("eq_tol must be positive");
        }
        if !(1..=MAX_SERIES_ORDER).contains(&self.seed_order) {
            return bad("seed_order must be 1..=12");
        }
        if !(self.u_floor > 0.0 && self.u_floor < self.eq_tol) {
            return bad("u_floor must be positive and below eq_tol");
        }
        if !(self.overflow_guard > 1.0) {
            return bad("overflow_guard must exceed 1");
        }
        self.integ.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminationKind {
    HitU0 { xi: f64, w: f64 },
    HitW0 { xi: f64, u: f64 },
    NearEquilibrium { a: f64 },
    Diverged,
    BudgetExhausted,
}

impl TerminationKind {
    pub fn label(&self) -> &'static str {
        match self {
            TerminationKind::HitU0 { .. } => "hit_u0",
            TerminationKind::HitW0 { .. } => "hit_w0",
            TerminationKind::NearEquilibrium { .. } => "near_equilibrium",
            TerminationKind::Diverged => "diverged",
            TerminationKind::BudgetExhausted => "budget_exhausted",
        }
    }

    /// Terminal `xi`, when the kind carries one.
    pub fn xi(&self) -> Option<f64> {
        match *self {
            TerminationKind::HitU0 { xi, .. } | TerminationKind::HitW0 { xi, .. } => Some(xi),
            TerminationKind::NearEquilibrium { a } => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub kind: TerminationKind,
    /// Near-field clock at termination.
    pub at_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Seed {
    X0(f64),
    APlus(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub params: ModelParams,
    pub seed: Seed,
    pub termination: Termination,
    /// Whole shot in near-field variables, in integration order, against `tau`.
    pub trajectory: Vec<(f64, NearState)>,
    /// Far-field leg against the far-field clock `s`.
    pub far_trace: Vec<(f64, FarState)>,
    /// Index in `trajectory` where the near-field leg starts (backward shot)
    /// or ends (forward shot).
    pub switch_index: usize,
    /// Integration steps over all legs, accepted and rejected.
    pub steps: usize,
}

impl ShotRecord {
    /// The part of the trajectory integrated in near-field variables.
    pub fn near_leg(&self) -> &[(f64, NearState)] {
        match self.seed {
            Seed::X0(_) => &self.trajectory[self.switch_index..],
            Seed::APlus(_) => &self.trajectory[..=self.switch_index],
        }
    }
}

/// Near the line of equilibria `u` and `w` become arbitrarily small; with a
/// finite absolute tolerance their errors go unseen and the explicit stepper
/// stalls at its stability limit. Near-field legs use relative control.
const NEAR_LEG_ATOL: f64 = 1e-300;

fn require(params: &ModelParams, branch: Branch) -> Result<(), ShootError> {
    if params.branch != branch {
        return Err(ShootError::WrongBranch { expected: branch });
    }
    Ok(())
}

/// Linear seed on the far-field center manifold of `(x0, 0, 0)`.
pub fn seed_far_minus(params: &ModelParams, x0: f64, delta: f64) -> Result<FarState, ShootError> {
    seed_far_minus_order(params, x0, delta, 1)
}

/// Far-field seed keeping `order` terms of the center-manifold series.
pub fn seed_far_minus_order(params: &ModelParams, x0: f64, delta: f64, order: usize) -> Result<FarState, ShootError> {
    require(params, Branch::Minus)?;
    if !(x0 > 0.0) || !x0.is_finite() {
        return Err(ShootError::InvalidSeed(format!("x0 = {x0} must be positive")));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(ShootError::InvalidSeed(format!("delta = {delta} must be non-negative")));
    }
    Ok(CenterSeries::new(params, x0).point(delta, order))
}

/// Near-field seed leaving `(A_plus, 0, 0)`: along the center manifold for
/// `A_plus > 0`, along the unstable manifold for `A_plus < 0`.
pub fn seed_near_plus(params: &ModelParams, a_plus: f64, eps: f64) -> Result<NearState, ShootError> {
    require(params, Branch::Plus)?;
    if a_plus == 0.0 || !a_plus.is_finite() {
        return Err(ShootError::InvalidSeed(format!("A_plus = {a_plus} must be finite and nonzero")));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(ShootError::InvalidSeed(format!("eps = {eps} must be non-negative")));
    }
    let m = params.m;
    let pa = params.p() * a_plus.abs();
    if a_plus > 0.0 {
        Ok(NearState::new(a_plus + eps, eps / pa, pa.powf(-(m + 1.0)) * eps.powf(m)))
    } else {
        let c = pa * m;
        let e = eps.powf(1.0 / m);
        Ok(NearState::new(a_plus + eps, c.powf(1.0 / m) * e, c.powf((m + 1.0) / m) * e / m))
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, b| a.max(b.abs()))
}

/// Far-field leg with the near clock appended: `[x, y, z, tau]`.
fn far_leg_rhs(params: ModelParams, reversed: bool) -> impl Fn(f64, &[f64], &mut [f64]) {
    let p = params.p();
    move |_, v, out| {
        far_field(&params, &v[..3], &mut out[..3]);
        out[3] = v[1].max(0.0).powf(p);
        if reversed {
            for o in out.iter_mut() {
                *o = -*o;
            }
        }
    }
}

fn push_far_samples(
    params: &ModelParams,
    outcome: &IntegrationOutcome,
    s_sign: f64,
    far_trace: &mut Vec<(f64, FarState)>,
    trajectory: &mut Vec<(f64, NearState)>,
) {
    for (s, v) in &outcome.samples {
        let f = FarState::new(v[0], v[1], v[2]);
        far_trace.push((s_sign * s, f));
        if let Ok(n) = far_to_near(params, f) {
            trajectory.push((v[3], n));
        }
    }
}

fn status_kind(status: &IntegrationStatus) -> Option<TerminationKind> {
    match status {
        IntegrationStatus::MaxSteps => Some(TerminationKind::BudgetExhausted),
        IntegrationStatus::StepFloor | IntegrationStatus::NonFinite => Some(TerminationKind::Diverged),
        _ => None,
    }
}

/// Backward shot: from the far-field seed at `x0`, through the frame
/// switch, until the near-field trajectory reaches `u = 0`, `w = 0` or the
/// line of equilibria.
pub fn shoot_minus(params: &ModelParams, x0: f64, cfg: &ShootConfig) -> Result<ShotRecord, ShootError> {
    require(params, Branch::Minus)?;
    cfg.validate()?;
    let seed = seed_far_minus_order(params, x0, cfg.delta, cfg.seed_order)?;
    let p = params.p();
    let mut far_trace = Vec::new();
    let mut trajectory = Vec::new();

    let far = OdeProblem::new(4, Direction::Forward, far_leg_rhs(*params, true));
    let switch_xi = cfg.switch_xi;
    let guard = cfg.overflow_guard;
    let far_events = vec![
        EventSpec::new("switch", EventDirection::Decreasing, true, move |_, v: &[f64]| {
            v[0] - switch_xi * v[1].max(0.0).powf(p)
        }),
        EventSpec::new("w0", EventDirection::Decreasing, true, |_, v: &[f64]| v[2]),
        EventSpec::new("guard", EventDirection::Increasing, true, move |_, v: &[f64]| max_abs(&v[..3]) - guard),
    ];
    let out = integrate(&far, &[seed.x, seed.y, seed.z, 0.0], 0.0, f64::INFINITY, &cfg.integ, &far_events)?;
    push_far_samples(params, &out, -1.0, &mut far_trace, &mut trajectory);
    let far_steps = out.stats.steps_accepted + out.stats.steps_rejected;
    let finish = |kind, at_time, trajectory, far_trace, switch_index, steps| ShotRecord {
        params: *params,
        seed: Seed::X0(x0),
        termination: Termination { kind, at_time },
        trajectory,
        far_trace,
        switch_index,
        steps,
    };
    let (_, last) = out.last();
    let tau_switch = last[3];
    if let Some(kind) = status_kind(&out.status) {
        let n = trajectory.len().saturating_sub(1);
        return Ok(finish(kind, tau_switch, trajectory, far_trace, n, far_steps));
    }
    let start = match &out.status {
        IntegrationStatus::EventHit(ev) if ev.label == "switch" => {
            far_to_near(params, FarState::new(ev.y[0], ev.y[1], ev.y[2]))?
        }
        IntegrationStatus::EventHit(ev) if ev.label == "w0" => {
            let n = far_to_near(params, FarState::new(ev.y[0], ev.y[1], ev.y[2]))?;
            let i = trajectory.len().saturating_sub(1);
            let kind = TerminationKind::HitW0 { xi: n.xi, u: n.u };
            return Ok(finish(kind, tau_switch, trajectory, far_trace, i, far_steps));
        }
        _ => {
            let i = trajectory.len().saturating_sub(1);
            return Ok(finish(TerminationKind::Diverged, tau_switch, trajectory, far_trace, i, far_steps));
        }
    };
    // the switch point is pushed again as the first near-leg sample
    trajectory.pop();
    let switch_index = trajectory.len();

    let near_params = *params;
    let near =
        OdeProblem::new(3, Direction::Backward, move |_, v: &[f64], out: &mut [f64]| near_field(&near_params, v, out));
    let eq_tol = cfg.eq_tol;
    let u_floor = cfg.u_floor;
    let near_events = vec![
        EventSpec::new("equilibrium", EventDirection::Decreasing, true, move |_, v: &[f64]| {
            v[1].max(v[2].abs()) - eq_tol
        }),
        EventSpec::new("u0", EventDirection::Decreasing, true, move |_, v: &[f64]| v[1] - u_floor),
        EventSpec::new("w0", EventDirection::Decreasing, true, |_, v: &[f64]| v[2]),
        EventSpec::new("guard", EventDirection::Increasing, true, move |_, v: &[f64]| max_abs(v) - guard),
    ];
    let budget = IntegrationConfig {
        max_steps: cfg.integ.max_steps.saturating_sub(far_steps).max(1),
        atol: NEAR_LEG_ATOL,
        ..cfg.integ
    };
    let out = integrate(&near, &start.to_array(), tau_switch, f64::NEG_INFINITY, &budget, &near_events)?;
    trajectory.extend(out.samples.iter().map(|(t, v)| (*t, NearState::from_slice(v))));
    let (t_end, last) = out.last();
    let kind = match &out.status {
        IntegrationStatus::EventHit(ev) => match ev.label.as_str() {
            "equilibrium" => TerminationKind::NearEquilibrium { a: ev.y[0] },
            "u0" => TerminationKind::HitU0 { xi: ev.y[0], w: ev.y[2] },
            "w0" => TerminationKind::HitW0 { xi: ev.y[0], u: ev.y[1].max(0.0) },
            _ => TerminationKind::Diverged,
        },
        status => status_kind(status).unwrap_or(TerminationKind::Diverged),
    };
    debug_assert!(last.len() == 3);
    let steps = far_steps + out.stats.steps_accepted + out.stats.steps_rejected;
    Ok(finish(kind, t_end, trajectory, far_trace, switch_index, steps))
}

/// Forward shot from `(A_plus, 0, 0)`. The near-field leg runs until
/// `xi >= switch_xi` with `u >= 1`; the far-field leg then runs for
/// `tau_inf` units of `s`. Returns the limit `x0` of the far-field
/// trajectory, read off through the center-manifold series.
pub fn shoot_plus(params: &ModelParams, a_plus: f64, cfg: &ShootConfig) -> Result<(f64, ShotRecord), ShootError> {
    require(params, Branch::Plus)?;
    cfg.validate()?;
    let (slow, mut budget_used) = slow_leg(params, a_plus, cfg)?;
    let seed = *slow.last().map(|(_, s)| s).expect("slow leg is never empty");
    let tau0 = slow.last().map(|(t, _)| *t).unwrap_or(0.0);
    let guard = cfg.overflow_guard;
    let switch_xi = cfg.switch_xi;

    let near_params = *params;
    let near =
        OdeProblem::new(3, Direction::Forward, move |_, v: &[f64], out: &mut [f64]| near_field(&near_params, v, out));
    let near_events = vec![
        EventSpec::new("switch", EventDirection::Increasing, true, move |_, v: &[f64]| {
            (v[0] - switch_xi).min(v[1] - 1.0)
        }),
        EventSpec::new("w0", EventDirection::Decreasing, true, |_, v: &[f64]| v[2]),
        EventSpec::new("guard", EventDirection::Increasing, true, move |_, v: &[f64]| max_abs(v) - guard),
    ];
    let budget = IntegrationConfig {
        max_steps: cfg.integ.max_steps.saturating_sub(budget_used).max(1),
        atol: NEAR_LEG_ATOL,
        ..cfg.integ
    };
    let out = integrate(&near, &seed.to_array(), tau0, f64::INFINITY, &budget, &near_events)?;
    budget_used += out.stats.steps_accepted + out.stats.steps_rejected;
    let mut trajectory = slow;
    trajectory.pop();
    trajectory.extend(out.samples.iter().map(|(t, v)| (*t, NearState::from_slice(v))));
    let (tau_switch, last) = out.last();
    let last = NearState::from_slice(last);
    match &out.status {
        IntegrationStatus::EventHit(ev) if ev.label == "switch" => {}
        IntegrationStatus::EventHit(ev) if ev.label == "w0" => {
            return Err(ShootError::MonotonicityViolated { tau: ev.t, w: ev.y[2] });
        }
        status => {
            return Err(ShootError::NotConverged(status_kind(status).unwrap_or(TerminationKind::Diverged)));
        }
    }
    if let Some((t, s)) = trajectory.iter().find(|(_, s)| !(s.w > 0.0)) {
        return Err(ShootError::MonotonicityViolated { tau: *t, w: s.w });
    }
    let switch_index = trajectory.len() - 1;

    let start = near_to_far(params, last)?;
    let far = OdeProblem::new(4, Direction::Forward, far_leg_rhs(*params, false));
    let far_events = vec![
        EventSpec::new("w0", EventDirection::Decreasing, true, |_, v: &[f64]| v[2]),
        EventSpec::new("guard", EventDirection::Increasing, true, move |_, v: &[f64]| max_abs(&v[..3]) - guard),
    ];
    let budget = IntegrationConfig { max_steps: cfg.integ.max_steps.saturating_sub(budget_used).max(1), ..cfg.integ };
    let out = integrate(&far, &[start.x, start.y, start.z, tau_switch], 0.0, cfg.tau_inf, &budget, &far_events)?;
    budget_used += out.stats.steps_accepted + out.stats.steps_rejected;
    let mut far_trace = Vec::new();
    let mut far_near = Vec::new();
    push_far_samples(params, &out, 1.0, &mut far_trace, &mut far_near);
    trajectory.extend(far_near.into_iter().skip(1));
    match &out.status {
        IntegrationStatus::ReachedTEnd => {}
        IntegrationStatus::EventHit(ev) if ev.label == "w0" => {
            return Err(ShootError::MonotonicityViolated { tau: ev.y[3], w: ev.y[2] });
        }
        status => {
            return Err(ShootError::NotConverged(status_kind(status).unwrap_or(TerminationKind::Diverged)));
        }
    }
    let (_, end) = out.last();
    let end_far = FarState::new(end[0], end[1], end[2]);
    let x0 = center_manifold_limit(params, end_far);
    let record = ShotRecord {
        params: *params,
        seed: Seed::APlus(a_plus),
        termination: Termination { kind: TerminationKind::NearEquilibrium { a: x0 }, at_time: end[3] },
        trajectory,
        far_trace,
        switch_index,
        steps: budget_used,
    };
    Ok((x0, record))
}

/// Amplitude where the forward shot with `A_plus > 0` leaves the reduced
/// center-manifold flow: the first correction to the slope has relative size
/// `m u^{m-1} / ((m+1)/2 A)^2 = 1e-3` there.
pub fn slow_leg_exit(params: &ModelParams, a_plus: f64) -> f64 {
    let pa = params.p() * a_plus;
    (1e-3 * pa * pa / params.m).powf(1.0 / (params.m - 1.0)).min(0.5)
}

/// Start of the forward shot. For `A_plus > 0` the near field is stiff along
/// the attracting center manifold, so the seed is carried along the reduced
/// flow `du/dxi = g(xi, u)` (in the clock `ln u`) up to [`slow_leg_exit`].
fn slow_leg(
    params: &ModelParams,
    a_plus: f64,
    cfg: &ShootConfig,
) -> Result<(Vec<(f64, NearState)>, usize), ShootError> {
    if !(a_plus > 0.0) {
        let seed = seed_near_plus(params, a_plus, cfg.eps)?;
        return Ok((vec![(0.0, seed)], 0));
    }
    let u_exit = slow_leg_exit(params, a_plus);
    let eps = cfg.eps.min(1e-3 * params.p() * a_plus * u_exit);
    let seed = seed_near_plus(params, a_plus, eps)?;
    let m = params.m;
    let pr = *params;
    let reduced = OdeProblem::new(2, Direction::Forward, move |sigma: f64, v: &[f64], out: &mut [f64]| {
        let u = sigma.exp();
        let g = slow_manifold_slope(&pr, v[0], u);
        out[0] = u / g;
        out[1] = u.powf(1.0 - m) / g;
    });
    let out = integrate(&reduced, &[seed.xi, 0.0], seed.u.ln(), u_exit.ln(), &cfg.integ, &[])?;
    if out.status != IntegrationStatus::ReachedTEnd {
        return Err(ShootError::NotConverged(status_kind(&out.status).unwrap_or(TerminationKind::Diverged)));
    }
    let leg = out
        .samples
        .iter()
        .map(|(sigma, v)| {
            let u = sigma.exp();
            (v[1], NearState::new(v[0], u, u.powf(m) * slow_manifold_slope(params, v[0], u)))
        })
        .collect();
    Ok((leg, out.stats.steps_accepted + out.stats.steps_rejected))
}

/// Default extrapolation window: `u` between 5% and 25% of the largest `u`
/// on the near-field leg.
pub fn default_fit_window(record: &ShotRecord) -> (f64, f64) {
    let u_max = record.near_leg().iter().fold(0.0_f64, |a, (_, s)| a.max(s.u));
    (0.05 * u_max, 0.25 * u_max)
}

/// Least-squares line `u = c (xi - A)` through the samples with `u` inside
/// `fit_window`; returns the `xi`-intercept `A`.
pub fn extrapolate_a_minus(record: &ShotRecord, fit_window: (f64, f64)) -> Result<f64, ShootError> {
    let pts: Vec<(f64, f64)> = record
        .near_leg()
        .iter()
        .filter(|(_, s)| s.u >= fit_window.0 && s.u <= fit_window.1)
        .map(|(_, s)| (s.xi, s.u))
        .collect();
    fit_intercept(&pts, fit_window)
}

/// `xi`-intercept of the least-squares line through `(xi, u)` points.
pub fn fit_intercept(pts: &[(f64, f64)], fit_window: (f64, f64)) -> Result<f64, ShootError> {
    let (lo, hi) = fit_window;
    if !(hi > lo) {
        return Err(ShootError::Extrapolation(format!("empty window ({lo}, {hi})")));
    }
    if pts.len() < 8 {
        return Err(ShootError::Extrapolation(format!("{} samples in window, need 8", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mu = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxu: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - mu)).sum();
    if !(sxx > 0.0) {
        return Err(ShootError::Extrapolation("degenerate xi range".into()));
    }
    let slope = sxu / sxx;
    if slope == 0.0 {
        return Err(ShootError::Extrapolation("zero slope".into()));
    }
    let icpt = mu - slope * mx;
    let worst = pts.iter().map(|p| (p.1 - icpt - slope * p.0).abs()).fold(0.0, f64::max);
    if worst > 0.05 * (hi - lo) {
        return Err(ShootError::Extrapolation(format!("fit residual {worst:.3e} exceeds 5% of window height")));
    }
    Ok(-icpt / slope)
}

//! Near-field and far-field vector fields for the self-similar profile
//! equations with `n = 0`, the coordinate maps between them, the energy-like
//! function of the `t > 0` system and the closed-form reference solutions.
//!
//! Near field, in the unfolded clock `tau`:
//!
//! ```text
//! xi' = u^m,  u' = w,  w' = u^m (1 ± u) ∓ (m+1)/2 xi w
//! ```
//!
//! Far field, with `xi = x y^{-(m+1)/2}`, `u = 1/y`, `w = z y^{-(m+3)/2}` and
//! clock `s`:
//!
//! ```text
//! x' = y − (m+1)/2 x z,  y' = −z y,
//! z' = y (±1 + y) ∓ (m+1)/2 x z − (m+3)/2 z²
//! ```
//!
//! The upper sign is [`Branch::Plus`] (`t > 0`), the lower one
//! [`Branch::Minus`] (`t < 0`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("diffusion exponent must satisfy m > 1 (got {0})")]
    InvalidExponent(f64),
    #[error("negative amplitude u = {0} with non-integer exponent")]
    NegativeAmplitude(f64),
    #[error("coordinate map is singular at {0}")]
    SingularTransform(&'static str),
    #[error("{what} = {value} outside the domain of the exact solution")]
    OutsideDomain { what: &'static str, value: f64 },
    #[error("non-finite state")]
    NonFinite,
}

/// Which of the two time branches: `Plus` for `t > 0`, `Minus` for `t < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    /// `+1` for the upper sign, `-1` for the lower sign.
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Branch::Plus => 1.0,
            Branch::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub m: f64,
    pub branch: Branch,
}

impl ModelParams {
    pub fn new(m: f64, branch: Branch) -> Result<Self, DynamicsError> {
        if !(m > 1.0) || !m.is_finite() {
            return Err(DynamicsError::InvalidExponent(m));
        }
        Ok(Self { m, branch })
    }

    pub fn with_branch(self, branch: Branch) -> Self {
        Self { branch, ..self }
    }

    /// `(m+1)/2`
    #[inline]
    pub fn p(&self) -> f64 {
        0.5 * (self.m + 1.0)
    }

    /// `(m+3)/2`
    #[inline]
    pub fn q(&self) -> f64 {
        0.5 * (self.m + 3.0)
    }

    /// Far-field coordinate of the stationary exact solution, `sqrt(2/(m+1))`.
    pub fn x_q(&self) -> f64 {
        (2.0 / (self.m + 1.0)).sqrt()
    }

    fn is_integer_exponent(&self) -> bool {
        self.m.fract() == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearState {
    pub xi: f64,
    pub u: f64,
    pub w: f64,
}

impl NearState {
    pub fn new(xi: f64, u: f64, w: f64) -> Self {
        Self { xi, u, w }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.xi, self.u, self.w]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.xi.is_finite() && self.u.is_finite() && self.w.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl FarState {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct EnergyValue(pub f64);

/// Near-field vector field on a raw state slice. `u` is clamped at zero:
/// trial stages of an explicit step may dip below the `u = 0` event surface,
/// and the fractional power must never see a negative base.
#[inline]
pub fn near_field(params: &ModelParams, y: &[f64], out: &mut [f64]) {
    let (xi, u, w) = (y[0], y[1].max(0.0), y[2]);
    let um = u.powf(params.m);
    let sg = params.branch.sign();
    out[0] = um;
    out[1] = w;
    out[2] = um * (1.0 + sg * u) - sg * params.p() * xi * w;
}

/// Far-field vector field on a raw state slice.
#[inline]
pub fn far_field(params: &ModelParams, v: &[f64], out: &mut [f64]) {
    let (x, y, z) = (v[0], v[1], v[2]);
    let sg = params.branch.sign();
    let p = params.p();
    out[0] = y - p * x * z;
    out[1] = -z * y;
    out[2] = y * (sg + y) - sg * p * x * z - params.q() * z * z;
}

/// Near-field rate of change per unit `tau`.
pub fn near_rhs(params: &ModelParams, state: NearState) -> Result<NearState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    if state.u < 0.0 && !params.is_integer_exponent() {
        return Err(DynamicsError::NegativeAmplitude(state.u));
    }
    let um = if params.is_integer_exponent() { state.u.powi(params.m as i32) } else { state.u.powf(params.m) };
    let sg = params.branch.sign();
    Ok(NearState::new(um, state.w, um * (1.0 + sg * state.u) - sg * params.p() * state.xi * state.w))
}

/// Far-field rate of change per unit `s`.
pub fn far_rhs(params: &ModelParams, state: FarState) -> Result<FarState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    let mut out = [0.0; 3];
    far_field(params, &state.to_array(), &mut out);
    Ok(FarState::from_slice(&out))
}

/// The `t < 0` far-field system written in the reversed clock `-s`, i.e. the
/// negation of [`far_rhs`] for [`Branch::Minus`]. The branch stored in
/// `params` is ignored.
pub fn far_rhs_reversed(params: &ModelParams, state: FarState) -> Result<FarState, DynamicsError> {
    let r = far_rhs(&params.with_branch(Branch::Minus), state)?;
    Ok(FarState::new(-r.x, -r.y, -r.z))
}

pub fn near_to_far(params: &ModelParams, state: NearState) -> Result<FarState, DynamicsError> {
    if !(state.u > 0.0) || !state.is_finite() {
        return Err(DynamicsError::SingularTransform("u = 0"));
    }
    Ok(FarState::new(state.xi * state.u.powf(-params.p()), 1.0 / state.u, state.w * state.u.powf(-params.q())))
}

pub fn far_to_near(params: &ModelParams, state: FarState) -> Result<NearState, DynamicsError> {
    if !(state.y > 0.0) || !state.is_finite() {
        return Err(DynamicsError::SingularTransform("y = 0"));
    }
    Ok(NearState::new(state.x * state.y.powf(-params.p()), 1.0 / state.y, state.z * state.y.powf(-params.q())))
}

/// `E = w²/2 − u^{m+1}/(m+1) − u^{m+2}/(m+2)`; non-increasing along `t > 0`
/// trajectories with `xi > 0`.
pub fn energy(params: &ModelParams, state: NearState) -> EnergyValue {
    let m = params.m;
    let u = state.u.max(0.0);
    EnergyValue(0.5 * state.w * state.w - u.powf(m + 1.0) / (m + 1.0) - u.powf(m + 2.0) / (m + 2.0))
}

/// Exact near-field solution with `xi = w` and `u^{m+1} = (m+1)/2 xi²`,
/// valid for `tau < 1/a`. It solves both branches.
pub fn exact_near(params: &ModelParams, a: f64, tau: f64) -> Result<NearState, DynamicsError> {
    if !(a > 0.0) {
        return Err(DynamicsError::OutsideDomain { what: "a", value: a });
    }
    if !(tau < 1.0 / a) {
        return Err(DynamicsError::OutsideDomain { what: "tau", value: tau });
    }
    let m = params.m;
    let base = a / (1.0 - tau * a);
    let c_xi = (2.0_f64.powf(m) * (m + 1.0) / (m - 1.0).powf(m + 1.0)).powf(1.0 / (m - 1.0));
    let c_u = (2.0 * (m + 1.0) / (m - 1.0).powi(2)).powf(1.0 / (m - 1.0));
    let xi = c_xi * base.powf((m + 1.0) / (m - 1.0));
    let u = c_u * base.powf(2.0 / (m - 1.0));
    Ok(NearState::new(xi, u, xi))
}

/// Largest component of `d/dtau exact_near - near_rhs(exact_near)`, relative
/// to the size of the vector field.
pub fn exact_near_residual(params: &ModelParams, a: f64, tau: f64) -> Result<f64, DynamicsError> {
    let s = exact_near(params, a, tau)?;
    let m = params.m;
    let base = a / (1.0 - tau * a);
    // d(base)/dtau = base²
    let dxi = s.xi * (m + 1.0) / (m - 1.0) * base;
    let du = s.u * 2.0 / (m - 1.0) * base;
    let f = near_rhs(params, s)?;
    let scale = f.xi.abs().max(f.u.abs()).max(f.w.abs()).max(1.0);
    Ok([dxi - f.xi, du - f.u, dxi - f.w].iter().fold(0.0_f64, |a, d| a.max(d.abs())) / scale)
}

/// Largest component of `d/ds exact_far - far_rhs(exact_far)`, relative to
/// the size of the vector field.
pub fn exact_far_residual(params: &ModelParams, b: f64, s: f64) -> Result<f64, DynamicsError> {
    let st = exact_far(params, b, s)?;
    let dz = -st.z * st.z;
    let dy = dz / params.x_q();
    let f = far_rhs(params, st)?;
    let scale = f.x.abs().max(f.y.abs()).max(f.z.abs()).max(1.0);
    Ok([f.x, dy - f.y, dz - f.z].iter().fold(0.0_f64, |a, d| a.max(d.abs())) / scale)
}

/// Exact far-field solution sitting at `x = x_Q`, valid for `s > -1/b`.
pub fn exact_far(params: &ModelParams, b: f64, s: f64) -> Result<FarState, DynamicsError> {
    if !(b > 0.0) {
        return Err(DynamicsError::OutsideDomain { what: "b", value: b });
    }
    if !(s > -1.0 / b) {
        return Err(DynamicsError::OutsideDomain { what: "s", value: s });
    }
    let xq = params.x_q();
    let z = b / (1.0 + s * b);
    Ok(FarState::new(xq, z / xq, z))
}

/// Explicit one-dimensional manifold of `(x0, 0, 0)` inside the invariant
/// plane `y = 0`: stable for `Plus`, unstable for `Minus`.
pub fn stable_manifold_psi(params: &ModelParams, x: f64, x0: f64) -> f64 {
    let p = params.p();
    -params.branch.sign() * p * x * (1.0 - (x / x0).powf(1.0 / p))
}

/// Slope `du/dxi = w/u^m` on the attracting center manifold of `(A, 0, 0)`,
/// `A > 0`, of the `t > 0` near field, with the first correction in
/// `u^{m-1}`. Relative error is `O(u^{2(m-1)})`.
pub fn slow_manifold_slope(params: &ModelParams, xi: f64, u: f64) -> f64 {
    let m = params.m;
    let p = params.p();
    let u = u.max(0.0);
    let g0 = (1.0 + u) / (p * xi);
    let g0_xi = -(1.0 + u) / (p * xi * xi);
    let g0_u = 1.0 / (p * xi);
    ((1.0 + u) - m * u.powf(m - 1.0) * g0 * g0 - u.powf(m) * (g0_xi + g0 * g0_u)) / (p * xi)
}

/// Highest order kept in [`CenterSeries`].
pub const MAX_SERIES_ORDER: usize = 12;

/// Power-series coefficients of the unique center-manifold trajectory that
/// tends to `(x0, 0, 0)` as `s → +∞`, parameterized by `z`:
/// `x = x0 + Σ a_k z^k`, `y = Σ b_k z^k`, `k = 1 ..= MAX_SERIES_ORDER`.
///
/// The series is asymptotic for small `x0`: keep `z` and the order modest.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSeries {
    pub x0: f64,
    /// `a[k - 1] = a_k`
    pub a: Vec<f64>,
    /// `b[k - 1] = b_k`
    pub b: Vec<f64>,
}

impl CenterSeries {
    /// Coefficients from the invariance equations `x'(z) ż = ẋ`,
    /// `y'(z) ż = ẏ`, solved order by order. With `b1 = p x0` the linear part
    /// of `ż` vanishes and its quadratic coefficient is `-1`; at each higher
    /// order the `y` equation fixes the next coefficient of `ż`, after which
    /// the `x` equation is linear in `a_{n-1}` and gives `b_n` with it.
    pub fn new(params: &ModelParams, x0: f64) -> Self {
        let n_max = MAX_SERIES_ORDER + 1;
        let sg = params.branch.sign();
        let p = params.p();
        let q = params.q();
        // index k holds the z^k coefficient
        let mut a = vec![0.0; n_max + 1];
        let mut b = vec![0.0; n_max + 1];
        let mut zc = vec![0.0; n_max + 1];
        a[0] = x0;
        b[1] = p * x0;
        zc[2] = -1.0;
        a[1] = sg * (b[1] * b[1] - q + 1.0);
        b[2] = (p - 1.0) * a[1];
        for n in 3..=n_max {
            let s: f64 = (1..n).map(|i| b[i] * b[n - i]).sum();
            let tail_b: f64 = (2..n - 1).map(|k| k as f64 * b[k] * zc[n + 1 - k]).sum();
            zc[n] = ((n as f64 - 2.0) * b[n - 1] - tail_b) / b[1];
            let tail_a: f64 = (2..n - 1).map(|k| k as f64 * a[k] * zc[n + 1 - k]).sum();
            let r = a[1] * zc[n] + tail_a;
            a[n - 1] = (r - sg * (zc[n] - s)) / (n as f64 - 1.0);
            b[n] = sg * (zc[n] - s) + p * a[n - 1];
        }
        Self { x0, a: a[1..=MAX_SERIES_ORDER].to_vec(), b: b[1..=MAX_SERIES_ORDER].to_vec() }
    }

    /// Point of the series at parameter `z`, keeping terms through `z^order`
    /// (clamped to `1 ..= MAX_SERIES_ORDER`).
    pub fn point(&self, z: f64, order: usize) -> FarState {
        let order = order.clamp(1, MAX_SERIES_ORDER);
        let mut x = self.x0;
        let mut y = 0.0;
        let mut zk = 1.0;
        for k in 0..order {
            zk *= z;
            x += self.a[k] * zk;
            y += self.b[k] * zk;
        }
        FarState::new(x, y, z)
    }

    /// Derivative of the series point with respect to `z`.
    pub fn tangent(&self, z: f64, order: usize) -> FarState {
        let order = order.clamp(1, MAX_SERIES_ORDER);
        let mut dx = 0.0;
        let mut dy = 0.0;
        let mut zk = 1.0;
        for k in 0..order {
            let c = (k + 1) as f64;
            dx += c * self.a[k] * zk;
            dy += c * self.b[k] * zk;
            zk *= z;
        }
        FarState::new(dx, dy, 1.0)
    }
}

const LIMIT_ORDER: usize = 8;

/// Inverts the center-manifold series: the limit `x0` of a far-field state
/// assumed to lie on the center manifold, read off from its `(x, z)`.
pub fn center_manifold_limit(params: &ModelParams, state: FarState) -> f64 {
    let mut x0 = state.x;
    for _ in 0..50 {
        let s = CenterSeries::new(params, x0);
        let next = state.x - (s.point(state.z, LIMIT_ORDER).x - x0);
        if (next - x0).abs() <= 1e-16 * x0.abs() {
            return next;
        }
        x0 = next;
    }
    x0
}

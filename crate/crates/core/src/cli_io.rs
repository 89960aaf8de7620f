//! Command-line surface, physical-space reconstruction of `h(x, t)` and
//! CSV/JSON export with run manifests.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{exact_far_residual, exact_near_residual, far_to_near, near_to_far, Branch, ModelParams};
use crate::shooting::{shoot_minus, shoot_plus, ShootConfig, ShootError, ShotRecord, TerminationKind};
use crate::solver::{
    auto_bracket_plus, find_x0_star, match_plus, solve_pair, sweep_branches, trace_map_minus, trace_map_plus,
    ConnectionMapSample, SearchConfig, SimilaritySolution, SolutionKind, SolveError,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{found} samples near the interface, need {need}")]
    InsufficientSamples { found: usize, need: usize },
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Shoot(#[from] ShootError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Snapshot of `h(x, t)` at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldFrame {
    pub t: f64,
    pub ell: f64,
    /// `(x, h)` pairs in grid order.
    pub samples: Vec<(f64, f64)>,
}

fn time_scale(m: f64, t: f64) -> f64 {
    t.abs().powf((m + 1.0) / 2.0)
}

/// `h(x, t) = |t| H(x |t|^{-(m+1)/2})`, with `H_-` for `t < 0` and `H_+` for
/// `t > 0`, and interface `ell = A |t|^{(m+1)/2}`.
pub fn reconstruct_h(
    solution: &SimilaritySolution,
    t_list: &[f64],
    x_grid: &[f64],
) -> Result<Vec<FieldFrame>, IoError> {
    t_list
        .iter()
        .map(|&t| {
            if t == 0.0 || !t.is_finite() {
                return Err(IoError::Domain(format!("t = {t}: frames need finite t != 0")));
            }
            let branch = if t < 0.0 { Branch::Minus } else { Branch::Plus };
            let profile = solution.profile(branch);
            let scale = time_scale(solution.m, t);
            let samples = x_grid.iter().map(|&x| (x, t.abs() * profile.eval(x / scale))).collect();
            Ok(FieldFrame { t, ell: profile.a * scale, samples })
        })
        .collect()
}

/// Width of the near-interface fit window in similarity units.
pub const INTERFACE_WINDOW_XI: f64 = 1e-2;

/// Samples required inside the fit window.
pub const MIN_INTERFACE_SAMPLES: usize = 20;

/// `n` log-spaced points covering the fit window right of `ell` at time `t`,
/// from `1e-4` of the window outwards.
pub fn interface_grid(m: f64, t: f64, ell: f64, n: usize) -> Vec<f64> {
    let w = INTERFACE_WINDOW_XI * time_scale(m, t);
    (0..n).map(|i| ell + w * 10f64.powf(-4.0 + 4.0 * i as f64 / (n.max(2) - 1) as f64)).collect()
}

/// Sign of `d ell / dt` for the solution at time `t`.
pub fn interface_rate_sign(solution: &SimilaritySolution, t: f64) -> f64 {
    if t < 0.0 {
        -solution.a_minus.signum()
    } else {
        solution.a_plus.signum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformReport {
    pub t: f64,
    pub advancing: bool,
    pub alpha: f64,
    /// `1/m` when advancing, `1` when receding.
    pub expected: f64,
    pub relative_error: f64,
    pub passed: bool,
    pub samples_used: usize,
}

/// Least-squares fit of `h ~ C (x - ell)^alpha` on the samples within the
/// interface window. An interface with `d ell/dt < 0` is advancing.
pub fn verify_local_waveforms(frame: &FieldFrame, m: f64, ell_rate_sign: f64) -> Result<WaveformReport, IoError> {
    let w = INTERFACE_WINDOW_XI * time_scale(m, frame.t);
    let pts: Vec<(f64, f64)> = frame
        .samples
        .iter()
        .filter(|(x, h)| *x > frame.ell && *x - frame.ell <= w && *h > 0.0)
        .map(|(x, h)| ((x - frame.ell).ln(), h.ln()))
        .collect();
    if pts.len() < MIN_INTERFACE_SAMPLES {
        return Err(IoError::InsufficientSamples { found: pts.len(), need: MIN_INTERFACE_SAMPLES });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let alpha = sxy / sxx;
    let advancing = ell_rate_sign < 0.0;
    let expected = if advancing { 1.0 / m } else { 1.0 };
    let relative_error = (alpha - expected).abs() / expected;
    Ok(WaveformReport {
        t: frame.t,
        advancing,
        alpha,
        expected,
        relative_error,
        passed: relative_error <= 0.1,
        samples_used: pts.len(),
    })
}

/// Largest `|h_a - h_b|` on the common support of two frames sampled on the
/// same grid, relative to the largest `h` there.
pub fn frame_gap(a: &FieldFrame, b: &FieldFrame) -> Result<f64, IoError> {
    if a.samples.len() != b.samples.len() || a.samples.iter().zip(&b.samples).any(|(p, q)| p.0 != q.0) {
        return Err(IoError::Domain("frames are sampled on different grids".into()));
    }
    let left = a.ell.max(b.ell);
    let (mut gap, mut top) = (0.0_f64, 0.0_f64);
    for (p, q) in a.samples.iter().zip(&b.samples) {
        if p.0 > left {
            gap = gap.max((p.1 - q.1).abs());
            top = top.max(p.1.max(q.1));
        }
    }
    if !(top > 0.0) {
        return Err(IoError::Domain("frames have no common support".into()));
    }
    Ok(gap / top)
}

/// Log-log slope of `|ell|` against `|t|` over the frames.
pub fn interface_exponent(frames: &[FieldFrame]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        frames.iter().filter(|f| f.ell != 0.0).map(|f| (f.t.abs().ln(), f.ell.abs().ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Serialize)]
struct TrajectoryRow {
    clock: f64,
    frame: &'static str,
    xi: Option<f64>,
    u: Option<f64>,
    w: Option<f64>,
    x: Option<f64>,
    y: Option<f64>,
    z: Option<f64>,
}

/// Trajectory CSV: `clock, frame, xi, u, w, x, y, z`, legs in integration
/// order. Coordinates of the other frame are filled where the transform is
/// defined.
pub fn write_trajectory_csv<W: Write>(record: &ShotRecord, out: W) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(out);
    let params = &record.params;
    let near_rows = record.near_leg().iter().map(|(tau, s)| {
        let f = near_to_far(params, *s).ok();
        TrajectoryRow {
            clock: *tau,
            frame: "near",
            xi: Some(s.xi),
            u: Some(s.u),
            w: Some(s.w),
            x: f.map(|f| f.x),
            y: f.map(|f| f.y),
            z: f.map(|f| f.z),
        }
    });
    let far_rows = record.far_trace.iter().map(|(s, f)| {
        let n = far_to_near(params, *f).ok();
        TrajectoryRow {
            clock: *s,
            frame: "far",
            xi: n.map(|n| n.xi),
            u: n.map(|n| n.u),
            w: n.map(|n| n.w),
            x: Some(f.x),
            y: Some(f.y),
            z: Some(f.z),
        }
    });
    let rows: Vec<TrajectoryRow> = match params.branch {
        Branch::Minus => far_rows.chain(near_rows).collect(),
        Branch::Plus => near_rows.chain(far_rows).collect(),
    };
    if rows.is_empty() {
        wtr.write_record(["clock", "frame", "xi", "u", "w", "x", "y", "z"])?;
    }
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct MapRow<'a> {
    sweep_var: f64,
    kind: &'a str,
    xi_term: Option<f64>,
    val_term: Option<f64>,
}

/// Map CSV: `sweep_var, kind, xi_term, val_term`. Backward samples carry the
/// terminal `xi` and the terminal `u` (at `w = 0`) or `w` (at `u = 0`);
/// forward samples carry `x0` in `val_term`.
pub fn write_map_csv<W: Write>(samples: &[ConnectionMapSample], out: W) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["sweep_var", "kind", "xi_term", "val_term"])?;
    let mut wtr =
        csv::WriterBuilder::new().has_headers(false).from_writer(wtr.into_inner().map_err(|e| e.into_error())?);
    for s in samples {
        let row = match s {
            ConnectionMapSample::Backward { x0, termination } => {
                let val = match *termination {
                    TerminationKind::HitU0 { w, .. } => Some(w),
                    TerminationKind::HitW0 { u, .. } => Some(u),
                    TerminationKind::NearEquilibrium { .. } => Some(0.0),
                    _ => None,
                };
                MapRow { sweep_var: *x0, kind: termination.label(), xi_term: termination.xi(), val_term: val }
            }
            ConnectionMapSample::Forward { a_plus, x0_estimate } => {
                MapRow { sweep_var: *a_plus, kind: "x0", xi_term: None, val_term: Some(*x0_estimate) }
            }
            ConnectionMapSample::Gap { sweep_var, .. } => {
                MapRow { sweep_var: *sweep_var, kind: "gap", xi_term: None, val_term: None }
            }
        };
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Frame CSV: `t, x, h`.
pub fn write_frames_csv<W: Write>(frames: &[FieldFrame], out: W) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["t", "x", "h"])?;
    let mut wtr =
        csv::WriterBuilder::new().has_headers(false).from_writer(wtr.into_inner().map_err(|e| e.into_error())?);
    for f in frames {
        for (x, h) in &f.samples {
            wtr.serialize((f.t, x, h))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn write_rows<W: Write, R: Serialize>(header: &[&str], rows: &[R], out: W) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(header)?;
    let mut wtr =
        csv::WriterBuilder::new().has_headers(false).from_writer(wtr.into_inner().map_err(|e| e.into_error())?);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BranchArg {
    Minus,
    Plus,
}

#[derive(Debug, Parser)]
#[command(name = "selfsim", version, about = "Self-similar interface solutions of slow diffusion with absorption")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Backward shot from the far field at x0 (t < 0 profile).
    ShootMinus(Opts),
    /// Forward shot from the interface at A_plus (t > 0 profile).
    ShootPlus(Opts),
    /// Classification boundary x0* inside --bracket.
    Find(Opts),
    /// A_plus whose forward shot tends to --x0.
    Match(Opts),
    /// Backward (x0 grid) or forward (A_plus grid) map over --bracket.
    TraceMap(Opts),
    /// Branch continuation over --m-range.
    Sweep(Opts),
    /// All matched pairs for --m.
    Solve(Opts),
    /// Frames h(x, t) of a matched pair.
    Reconstruct(Opts),
    /// Residuals of the exact solutions in both systems.
    VerifyExact(Opts),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::ShootMinus(_) => "shoot-minus",
            Command::ShootPlus(_) => "shoot-plus",
            Command::Find(_) => "find",
            Command::Match(_) => "match",
            Command::TraceMap(_) => "trace-map",
            Command::Sweep(_) => "sweep",
            Command::Solve(_) => "solve",
            Command::Reconstruct(_) => "reconstruct",
            Command::VerifyExact(_) => "verify-exact",
        }
    }

    fn opts(&self) -> &Opts {
        match self {
            Command::ShootMinus(o)
            | Command::ShootPlus(o)
            | Command::Find(o)
            | Command::Match(o)
            | Command::TraceMap(o)
            | Command::Sweep(o)
            | Command::Solve(o)
            | Command::Reconstruct(o)
            | Command::VerifyExact(o) => o,
        }
    }
}

/// Flags shared by every subcommand. A `--config` JSON file uses the same
/// names in snake case; flags win over the file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Opts {
    /// JSON file with default values for any of the other flags.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long, value_enum)]
    branch: Option<BranchArg>,
    #[arg(long)]
    x0: Option<f64>,
    #[arg(long = "a-plus", allow_negative_numbers = true)]
    a_plus: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    bracket: Option<Vec<f64>>,
    /// Grid size: map points, per-decade scan density for solve/sweep, or
    /// frame points for reconstruct.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long = "m-range", num_args = 2, value_names = ["LO", "HI"])]
    m_range: Option<Vec<f64>>,
    #[arg(long = "m-step")]
    m_step: Option<f64>,
    /// Frame times for reconstruct (t != 0).
    #[arg(long = "t", num_args = 1.., allow_negative_numbers = true)]
    t: Option<Vec<f64>>,
    #[arg(long = "x-range", num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    x_range: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long = "switch-xi")]
    switch_xi: Option<f64>,
    #[arg(long = "tau-inf")]
    tau_inf: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    threads: Option<usize>,
}

macro_rules! merge {
    ($cli:expr, $file:expr, $($f:ident),*) => {
        Opts { config: None, $($f: $cli.$f.clone().or($file.$f.clone()),)* }
    };
}

impl Opts {
    fn merged_with(&self, file: &Opts) -> Opts {
        merge!(
            self, file, m, branch, x0, a_plus, bracket, grid, m_range, m_step, t, x_range, delta, eps, switch_xi,
            tau_inf, rtol, atol, out, format, threads
        )
    }
}

/// Fully resolved parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub m: Option<f64>,
    pub branch: Option<BranchArg>,
    pub x0: Option<f64>,
    pub a_plus: Option<f64>,
    pub bracket: Option<(f64, f64)>,
    pub grid: Option<usize>,
    pub m_range: Option<(f64, f64)>,
    pub m_step: Option<f64>,
    pub t_list: Option<Vec<f64>>,
    pub x_range: Option<(f64, f64)>,
    pub shoot: ShootConfig,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub threads: Option<usize>,
}

fn pair(v: &Option<Vec<f64>>, name: &str) -> Result<Option<(f64, f64)>, IoError> {
    match v {
        None => Ok(None),
        Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
        Some(_) => Err(IoError::Usage(format!("--{name} takes two values"))),
    }
}

impl RunConfig {
    fn resolve(command: &str, o: &Opts, mut shoot: ShootConfig) -> Result<Self, IoError> {
        if let Some(v) = o.delta {
            shoot.delta = v;
        }
        if let Some(v) = o.eps {
            shoot.eps = v;
        }
        if let Some(v) = o.switch_xi {
            shoot.switch_xi = v;
        }
        if let Some(v) = o.tau_inf {
            shoot.tau_inf = v;
        }
        if let Some(v) = o.rtol {
            shoot.integ.rtol = v;
        }
        if let Some(v) = o.atol {
            shoot.integ.atol = v;
        }
        let mut cfg = RunConfig {
            command: command.to_string(),
            m: o.m,
            branch: o.branch,
            x0: o.x0,
            a_plus: o.a_plus,
            bracket: pair(&o.bracket, "bracket")?,
            grid: o.grid,
            m_range: pair(&o.m_range, "m-range")?,
            m_step: o.m_step,
            t_list: o.t.clone(),
            x_range: pair(&o.x_range, "x-range")?,
            shoot,
            out: o.out.clone(),
            format: o.format.unwrap_or(Format::Json),
            threads: o.threads,
        };
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Command defaults are written into the config so the manifest records
    /// what actually ran.
    fn fill_defaults(&mut self) {
        match self.command.as_str() {
            "trace-map" => {
                self.branch.get_or_insert(BranchArg::Minus);
                self.grid.get_or_insert(200);
            }
            "sweep" => {
                self.m_range.get_or_insert((2.5, 3.5));
                self.m_step.get_or_insert(0.05);
                self.grid.get_or_insert(SearchConfig::default().per_decade);
            }
            "solve" => {
                self.grid.get_or_insert(SearchConfig::default().per_decade);
            }
            "reconstruct" => {
                self.grid.get_or_insert(401);
                self.t_list.get_or_insert_with(|| vec![-1e-2, -1e-3, 1e-3, 1e-2]);
                self.x_range.get_or_insert((-1.0, 1.0));
            }
            _ => {}
        }
    }

    /// Every numeric field finite and the shooting parameters admissible.
    pub fn validate(&self) -> Result<(), IoError> {
        let mut nums: Vec<f64> = [self.m, self.x0, self.a_plus, self.m_step].iter().flatten().copied().collect();
        for (a, b) in [self.bracket, self.m_range, self.x_range].iter().flatten() {
            nums.push(*a);
            nums.push(*b);
        }
        nums.extend(self.t_list.iter().flatten());
        if let Some(v) = nums.iter().find(|v| !v.is_finite()) {
            return Err(IoError::Usage(format!("non-finite value {v}")));
        }
        if self.t_list.iter().flatten().any(|t| *t == 0.0) {
            return Err(IoError::Usage("frame times must be nonzero".into()));
        }
        if self.threads == Some(0) {
            return Err(IoError::Usage("--threads must be at least 1".into()));
        }
        self.shoot.validate().map_err(|e| IoError::Usage(e.to_string()))?;
        Ok(())
    }

    fn params(&self, branch: Branch) -> Result<ModelParams, IoError> {
        let m = self.m.ok_or_else(|| IoError::Usage("--m is required".into()))?;
        ModelParams::new(m, branch).map_err(|e| IoError::Usage(e.to_string()))
    }

    fn search(&self) -> SearchConfig {
        SearchConfig {
            shoot: self.shoot,
            per_decade: self.grid.unwrap_or(SearchConfig::default().per_decade),
            ..SearchConfig::default()
        }
    }

    /// SHA-256 of the canonical JSON of this config.
    pub fn input_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub input_hash: String,
    pub wall_time_s: f64,
    pub stats: serde_json::Value,
}

/// Output of one command before serialization.
struct Output {
    json: serde_json::Value,
    csv: Vec<u8>,
    summary: String,
    stats: serde_json::Value,
    ok: bool,
}

fn shot_stats(rec: &ShotRecord) -> serde_json::Value {
    serde_json::json!({
        "termination": rec.termination,
        "steps": rec.steps,
        "samples": rec.trajectory.len(),
        "far_samples": rec.far_trace.len(),
    })
}

fn need<T: Copy>(v: Option<T>, flag: &str) -> Result<T, IoError> {
    v.ok_or_else(|| IoError::Usage(format!("--{flag} is required")))
}

fn run_command(cfg: &RunConfig) -> Result<Output, IoError> {
    let shoot = &cfg.shoot;
    match cfg.command.as_str() {
        "shoot-minus" => {
            let params = cfg.params(Branch::Minus)?;
            let rec = shoot_minus(&params, need(cfg.x0, "x0")?, shoot)?;
            let mut csv = Vec::new();
            write_trajectory_csv(&rec, &mut csv)?;
            Ok(Output {
                summary: format!("termination: {}", serde_json::to_string(&rec.termination.kind)?),
                stats: shot_stats(&rec),
                json: serde_json::to_value(&rec)?,
                csv,
                ok: true,
            })
        }
        "shoot-plus" => {
            let params = cfg.params(Branch::Plus)?;
            let (x0, rec) = shoot_plus(&params, need(cfg.a_plus, "a-plus")?, shoot)?;
            let mut csv = Vec::new();
            write_trajectory_csv(&rec, &mut csv)?;
            Ok(Output {
                summary: format!("x0 = {x0}"),
                stats: shot_stats(&rec),
                json: serde_json::json!({ "x0_estimate": x0, "record": rec }),
                csv,
                ok: true,
            })
        }
        "find" => {
            let params = cfg.params(Branch::Minus)?;
            let root = find_x0_star(&params, need(cfg.bracket, "bracket")?, shoot)?;
            let mut csv = Vec::new();
            write_rows(
                &["x0_star", "a_minus", "readout", "lo", "hi"],
                &[(root.x0_star, root.a_minus, root.readout, root.lo, root.hi)],
                &mut csv,
            )?;
            Ok(Output {
                summary: format!("x0* = {}, A_minus = {}", root.x0_star, root.a_minus),
                stats: serde_json::json!({ "readout": root.readout }),
                json: serde_json::to_value(&root)?,
                csv,
                ok: true,
            })
        }
        "match" => {
            let params = cfg.params(Branch::Plus)?;
            let target = need(cfg.x0, "x0")?;
            let bracket = match cfg.bracket {
                Some(b) => b,
                None => auto_bracket_plus(&params, target, shoot)?,
            };
            let a_plus = match_plus(&params, target, bracket, shoot)?;
            let mut csv = Vec::new();
            write_rows(&["x0_target", "a_plus"], &[(target, a_plus)], &mut csv)?;
            Ok(Output {
                summary: format!("A_plus = {a_plus}"),
                stats: serde_json::json!({ "bracket": bracket }),
                json: serde_json::json!({ "x0_target": target, "a_plus": a_plus, "bracket": bracket }),
                csv,
                ok: true,
            })
        }
        "trace-map" => {
            let branch = need(cfg.branch, "branch")?;
            let (lo, hi) = need(cfg.bracket, "bracket")?;
            let n = need(cfg.grid, "grid")?;
            if n < 2 || !(hi > lo) {
                return Err(IoError::Usage("trace-map needs --grid >= 2 and LO < HI".into()));
            }
            let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
            let samples = match branch {
                BranchArg::Minus => trace_map_minus(&cfg.params(Branch::Minus)?, &grid, shoot)?,
                BranchArg::Plus => trace_map_plus(&cfg.params(Branch::Plus)?, &grid, shoot)?,
            };
            let gaps = samples.iter().filter(|s| matches!(s, ConnectionMapSample::Gap { .. })).count();
            let mut csv = Vec::new();
            write_map_csv(&samples, &mut csv)?;
            Ok(Output {
                summary: format!("{} samples, {gaps} gaps", samples.len()),
                stats: serde_json::json!({ "samples": samples.len(), "gaps": gaps }),
                json: serde_json::to_value(&samples)?,
                csv,
                ok: true,
            })
        }
        "sweep" => {
            let range = need(cfg.m_range, "m-range")?;
            let step = need(cfg.m_step, "m-step")?;
            let report = sweep_branches(range, step, &cfg.search())?;
            let rows: Vec<_> =
                report.points.iter().map(|p| (p.m, p.x0_star, p.a_minus, p.branch_label.clone())).collect();
            let mut csv = Vec::new();
            write_rows(&["m", "x0_star", "a_minus", "branch_label"], &rows, &mut csv)?;
            Ok(Output {
                summary: format!(
                    "{} branch points on {} branches; onset of A_minus > 0: {:?}",
                    report.points.len(),
                    report.labels().len(),
                    report.positive_onset()
                ),
                stats: serde_json::json!({ "points": report.points.len(), "events": report.events.len() }),
                json: serde_json::to_value(&report)?,
                csv,
                ok: true,
            })
        }
        "solve" => {
            let m = cfg.params(Branch::Minus)?.m;
            let sols = solve_pair(m, &cfg.search())?;
            let rows: Vec<_> = sols.iter().map(|s| (s.m, s.kind, s.rejected, s.x0_star, s.a_minus, s.a_plus)).collect();
            let mut csv = Vec::new();
            write_rows(&["m", "kind", "rejected", "x0_star", "a_minus", "a_plus"], &rows, &mut csv)?;
            let summary = sols
                .iter()
                .map(|s| {
                    format!(
                        "{:?}{}: x0* = {}, A_minus = {}, A_plus = {}",
                        s.kind,
                        if s.rejected { " (rejected)" } else { "" },
                        s.x0_star,
                        s.a_minus,
                        s.a_plus
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Output {
                summary,
                stats: serde_json::json!({ "solutions": sols.len() }),
                json: serde_json::to_value(&sols)?,
                csv,
                ok: true,
            })
        }
        "reconstruct" => {
            let m = cfg.params(Branch::Minus)?.m;
            let sols = solve_pair(m, &cfg.search())?;
            let sol = pick_solution(&sols, cfg.x0)
                .ok_or_else(|| IoError::Solve(SolveError::InvalidInput(format!("no matched pair for m = {m}"))))?;
            let t_list = cfg.t_list.clone().unwrap_or_default();
            let (lo, hi) = need(cfg.x_range, "x-range")?;
            let n = need(cfg.grid, "grid")?.max(2);
            let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
            let frames = reconstruct_h(sol, &t_list, &grid)?;
            let mut waveforms = Vec::new();
            for f in &frames {
                let fine = reconstruct_h(sol, &[f.t], &interface_grid(m, f.t, f.ell, 4 * MIN_INTERFACE_SAMPLES))?;
                waveforms.push(verify_local_waveforms(&fine[0], m, interface_rate_sign(sol, f.t))?);
            }
            let mut csv = Vec::new();
            write_frames_csv(&frames, &mut csv)?;
            Ok(Output {
                summary: waveforms
                    .iter()
                    .map(|w| format!("t = {}: alpha = {} (expected {})", w.t, w.alpha, w.expected))
                    .collect::<Vec<_>>()
                    .join("\n"),
                stats: serde_json::json!({ "frames": frames.len(), "interface_exponent": interface_exponent(&frames) }),
                json: serde_json::json!({
                    "solution": { "m": sol.m, "kind": sol.kind, "x0_star": sol.x0_star, "a_minus": sol.a_minus, "a_plus": sol.a_plus },
                    "frames": frames,
                    "waveforms": waveforms,
                }),
                csv,
                ok: true,
            })
        }
        "verify-exact" => {
            let report = exact_report(cfg.params(Branch::Minus)?.m)?;
            let ok = report.iter().all(|r| r.max_residual < EXACT_RESIDUAL_TOL);
            let mut csv = Vec::new();
            write_rows(&["system", "branch", "max_residual"], &report, &mut csv)?;
            Ok(Output {
                summary: report
                    .iter()
                    .map(|r| format!("{} {:?}: {:e}", r.system, r.branch, r.max_residual))
                    .collect::<Vec<_>>()
                    .join("\n"),
                stats: serde_json::json!({ "passed": ok }),
                json: serde_json::to_value(&report)?,
                csv,
                ok,
            })
        }
        other => Err(IoError::Usage(format!("unknown command {other}"))),
    }
}

/// The matched pair nearest `x0` if given, else the first admissible
/// non-stationary one.
fn pick_solution(sols: &[SimilaritySolution], x0: Option<f64>) -> Option<&SimilaritySolution> {
    match x0 {
        Some(x) => sols.iter().min_by(|a, b| (a.x0_star - x).abs().total_cmp(&(b.x0_star - x).abs())),
        None => sols.iter().find(|s| !s.rejected && s.kind != SolutionKind::Stationary),
    }
}

pub const EXACT_RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactResidual {
    pub system: String,
    pub branch: Branch,
    pub max_residual: f64,
}

/// Largest residual of the exact near- and far-field solutions over a
/// sample of times, for both branches.
pub fn exact_report(m: f64) -> Result<Vec<ExactResidual>, IoError> {
    let mut out = Vec::new();
    for branch in [Branch::Minus, Branch::Plus] {
        let params = ModelParams::new(m, branch).map_err(|e| IoError::Usage(e.to_string()))?;
        let mut near = 0.0_f64;
        let mut far = 0.0_f64;
        for &a in &[0.1, 1.0, 3.0] {
            for i in 0..50 {
                let tau = -5.0 / a + (5.9 / a) * i as f64 / 49.0;
                near = near.max(exact_near_residual(&params, a, tau).map_err(|e| IoError::Domain(e.to_string()))?);
                let s = -0.9 / a + 100.0 * i as f64 / 49.0;
                far = far.max(exact_far_residual(&params, a, s).map_err(|e| IoError::Domain(e.to_string()))?);
            }
        }
        out.push(ExactResidual { system: "near".into(), branch, max_residual: near });
        out.push(ExactResidual { system: "far".into(), branch, max_residual: far });
    }
    Ok(out)
}

fn write_output(cfg: &RunConfig, out: &Output, wall: f64) -> Result<(), IoError> {
    let body = match cfg.format {
        Format::Json => {
            let mut v = serde_json::to_vec_pretty(&out.json)?;
            v.push(b'\n');
            v
        }
        Format::Csv => out.csv.clone(),
    };
    match &cfg.out {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path)?);
            f.write_all(&body)?;
            f.flush()?;
            let manifest = RunManifest {
                tool: "selfsim".to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: cfg.clone(),
                input_hash: cfg.input_hash(),
                wall_time_s: wall,
                stats: out.stats.clone(),
            };
            let mut mf = BufWriter::new(File::create(manifest_path(path))?);
            serde_json::to_writer_pretty(&mut mf, &manifest)?;
            mf.write_all(b"\n")?;
            mf.flush()?;
            println!("{}", out.summary);
        }
        None => {
            io::stdout().write_all(&body)?;
            eprintln!("{}", out.summary);
        }
    }
    Ok(())
}

/// `<out>.manifest.json` next to the output file.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

impl From<&RunConfig> for Opts {
    fn from(c: &RunConfig) -> Self {
        let v = |p: Option<(f64, f64)>| p.map(|(a, b)| vec![a, b]);
        Opts {
            m: c.m,
            branch: c.branch,
            x0: c.x0,
            a_plus: c.a_plus,
            bracket: v(c.bracket),
            grid: c.grid,
            m_range: v(c.m_range),
            m_step: c.m_step,
            t: c.t_list.clone(),
            x_range: v(c.x_range),
            out: c.out.clone(),
            format: Some(c.format),
            threads: c.threads,
            ..Default::default()
        }
    }
}

/// A `--config` file: flag values, or the resolved config of a manifest,
/// which also fixes the shooting parameters that have no flag.
fn load_file(path: &Path, command: &str) -> Result<(Opts, ShootConfig), IoError> {
    let bad = |e: &dyn std::fmt::Display| IoError::Usage(format!("{}: {e}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(&e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
    if value.get("command").is_some() {
        let rc: RunConfig = serde_json::from_value(value).map_err(|e| bad(&e))?;
        if rc.command != command {
            return Err(bad(&format!("config is for `{}`, not `{command}`", rc.command)));
        }
        Ok((Opts::from(&rc), rc.shoot))
    } else {
        Ok((serde_json::from_value(value).map_err(|e| bad(&e))?, ShootConfig::default()))
    }
}

fn run(cli: Cli) -> Result<bool, IoError> {
    let name = cli.command.name();
    let opts = cli.command.opts();
    let (merged, shoot) = match &opts.config {
        Some(p) => {
            let (file, shoot) = load_file(p, name)?;
            (opts.merged_with(&file), shoot)
        }
        None => (opts.clone(), ShootConfig::default()),
    };
    let cfg = RunConfig::resolve(name, &merged, shoot)?;
    let start = Instant::now();
    let go = || run_command(&cfg);
    let out = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| IoError::Usage(e.to_string()))?
            .install(go)?,
        None => go()?,
    };
    write_output(&cfg, &out, start.elapsed().as_secs_f64())?;
    Ok(out.ok)
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on solver error or failed check, 2 on
/// usage error.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ IoError::Usage(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Profile;

    fn toy_solution(m: f64, a_minus: f64, a_plus: f64) -> SimilaritySolution {
        let profile = |a: f64| {
            let xi: Vec<f64> = (0..=200).map(|i| a + 1e-6 * 1e8_f64.powf(i as f64 / 200.0)).collect();
            let h: Vec<f64> = xi.iter().map(|x| (x - a).powf(0.5)).collect();
            Profile { m, a, x0: 1.0, xi: [vec![a], xi].concat(), h: [vec![0.0], h].concat() }
        };
        SimilaritySolution {
            m,
            a_minus,
            a_plus,
            x0_star: 1.0,
            kind: SolutionKind::Reversing,
            rejected: false,
            a_minus_readout: crate::solver::AReadout::Landing,
            profile_minus: profile(a_minus),
            profile_plus: profile(a_plus),
        }
    }

    #[test]
    fn unit_time_collapses_scaling() {
        let sol = toy_solution(3.0, 0.129, 0.154);
        let grid = [0.1, 0.2, 0.5, 1.0];
        let f = &reconstruct_h(&sol, &[-1.0], &grid).unwrap()[0];
        assert_eq!(f.ell, 0.129);
        for (x, h) in &f.samples {
            assert_eq!(*h, sol.profile_minus.eval(*x));
        }
        assert_eq!(f.samples[0].1, 0.0);
    }

    #[test]
    fn interface_position_scaling() {
        let sol = toy_solution(4.0, 0.386, 0.794);
        let f = &reconstruct_h(&sol, &[-0.25], &[0.5]).unwrap()[0];
        // oracle: 0.25^2.5 = 1/32
        assert!((f.ell - 0.386 / 32.0).abs() < 1e-15);
        assert!((f.ell - 0.012063).abs() < 1e-6);
    }

    #[test]
    fn zero_time_rejected() {
        let sol = toy_solution(3.0, 0.1, 0.1);
        assert!(matches!(reconstruct_h(&sol, &[0.0], &[0.1]), Err(IoError::Domain(_))));
    }

    #[test]
    fn waveform_fit_recovers_exponent() {
        let m = 3.0;
        let t = -1e-2;
        let ell = 0.2;
        let samples = interface_grid(m, t, ell, 40).into_iter().map(|x| (x, 2.0 * (x - ell).powf(1.0 / m))).collect();
        let frame = FieldFrame { t, ell, samples };
        let r = verify_local_waveforms(&frame, m, -1.0).unwrap();
        assert!((r.alpha - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.passed && r.advancing);
        let r = verify_local_waveforms(&frame, m, 1.0).unwrap();
        assert!(!r.passed && !r.advancing);
    }

    #[test]
    fn waveform_fit_needs_samples() {
        let frame = FieldFrame { t: -1.0, ell: 0.0, samples: vec![(1e-3, 1.0); 5] };
        assert!(matches!(
            verify_local_waveforms(&frame, 3.0, -1.0),
            Err(IoError::InsufficientSamples { found: 5, .. })
        ));
    }

    #[test]
    fn interface_law_exponent() {
        let sol = toy_solution(4.0, 0.386, 0.794);
        let frames = reconstruct_h(&sol, &[-1e-1, -1e-2, -1e-3], &[0.5]).unwrap();
        assert!((interface_exponent(&frames).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn manifest_name() {
        assert_eq!(manifest_path(Path::new("/tmp/a.json")), PathBuf::from("/tmp/a.json.manifest.json"));
    }

    #[test]
    fn flags_override_file() {
        let cli = Opts { m: Some(3.0), delta: None, ..Default::default() };
        let file = Opts { m: Some(4.0), delta: Some(2e-3), ..Default::default() };
        let merged = cli.merged_with(&file);
        assert_eq!(merged.m, Some(3.0));
        assert_eq!(merged.delta, Some(2e-3));
    }

    #[test]
    fn exact_residuals_small() {
        for r in exact_report(3.0).unwrap() {
            assert!(r.max_residual < EXACT_RESIDUAL_TOL, "{r:?}");
        }
    }
}

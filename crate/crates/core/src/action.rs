//! The stochastic action of the natural Lagrangian, its first variation
//! along N¹ bumps and Λ¹ bridges, and Euler–Lagrange residuals.
//!
//! Time integrals run over an equally spaced subset of the recorded steps
//! with composite Simpson weights.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, LabError, Result};
use crate::fields::{
    add, dot, mat_vec, norm, scale, sub, ScalarField, TimeReversible, Vector, VectorField, DEFAULT_STEP, ZERO,
};
use crate::nelson::{kernel_regression, mu_combine_vectors, silverman_bandwidth, VelocityModel};
use crate::paths::{substream, ClassTag, PathEnsemble, Provenance};
use crate::stats::{mean_se, quadrature_weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureSign {
    /// `L = |v|²/2 − p`
    MinusP,
    /// `L = |v|²/2 + p̄` with `p̄ = φp = −p(T − t, ·)`
    PlusPBar,
}

/// Natural Lagrangian `L(t, x, v) = |v|²/2 + ℓ(t, x)`.
#[derive(Clone)]
pub struct LagrangianSpec {
    pub pressure: ScalarField,
    pub sign: PressureSign,
    potential: ScalarField,
}

impl std::fmt::Debug for LagrangianSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LagrangianSpec")
            .field("pressure", &self.pressure.name())
            .field("sign", &self.sign)
            .finish()
    }
}

impl LagrangianSpec {
    pub fn new(pressure: ScalarField, sign: PressureSign) -> Self {
        let potential = match sign {
            PressureSign::MinusP => pressure.scaled(-1.0),
            PressureSign::PlusPBar => pressure.time_reversed(true),
        };
        Self {
            pressure,
            sign,
            potential,
        }
    }

    pub fn free(dim: usize, horizon: f64) -> Self {
        Self::new(ScalarField::zero(dim, horizon), PressureSign::MinusP)
    }

    pub fn horizon(&self) -> f64 {
        self.pressure.horizon()
    }

    pub fn dim(&self) -> usize {
        self.pressure.dim()
    }

    /// The state-dependent part `ℓ`.
    pub fn potential(&self) -> &ScalarField {
        &self.potential
    }

    pub fn value(&self, t: f64, x: &Vector, v: &Vector) -> f64 {
        0.5 * dot(v, v) + self.potential.eval(t, x)
    }

    pub fn d_x(&self, t: f64, x: &Vector) -> Vector {
        self.potential.jet(t, x, DEFAULT_STEP).gradient
    }

    pub fn d_v(&self, v: &Vector) -> Vector {
        *v
    }
}

/// Variation families. Bumps use `g_m(t) = sin(mπt/T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum VariationSpec {
    N1Bump { m: u32, direction: Vec<f64>, eps: f64 },
    Lambda1Bridge { scale: f64, direction: Vec<f64>, eps: f64, stream: u64 },
}

impl VariationSpec {
    pub fn bump(m: u32, direction: &[f64], eps: f64) -> Self {
        Self::N1Bump {
            m,
            direction: direction.to_vec(),
            eps,
        }
    }

    pub fn bridge(scale: f64, direction: &[f64], eps: f64, stream: u64) -> Self {
        Self::Lambda1Bridge {
            scale,
            direction: direction.to_vec(),
            eps,
            stream,
        }
    }

    pub fn eps(&self) -> f64 {
        match self {
            Self::N1Bump { eps, .. } | Self::Lambda1Bridge { eps, .. } => *eps,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, Self::N1Bump { .. })
    }

    pub fn label(&self) -> String {
        match self {
            Self::N1Bump { m, direction, eps } => format!("bump(m={m}, e={direction:?}, eps={eps})"),
            Self::Lambda1Bridge { scale, direction, eps, stream } => {
                format!("bridge(scale={scale}, e={direction:?}, eps={eps}, stream={stream})")
            }
        }
    }

    fn direction(&self, dim: usize) -> Result<Vector> {
        let d = match self {
            Self::N1Bump { direction, .. } | Self::Lambda1Bridge { direction, .. } => direction,
        };
        if d.len() != dim {
            return arg(format!("variation direction has {} components, ensemble has {dim}", d.len()));
        }
        let mut e = ZERO;
        e[..dim].copy_from_slice(d);
        if (norm(&e) - 1.0).abs() > 1e-9 {
            return arg("variation direction must be a unit vector");
        }
        Ok(e)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.direction(dim)?;
        if !self.eps().is_finite() || self.eps() < 0.0 {
            return arg("variation amplitude must be finite and non-negative");
        }
        if let Self::N1Bump { m, .. } = self {
            if *m == 0 {
                return arg("bump index m must be at least 1");
            }
        }
        Ok(())
    }

    /// Bump profile `g(t)` and `g'(t)`.
    fn profile(m: u32, t: f64, horizon: f64) -> (f64, f64) {
        let w = m as f64 * std::f64::consts::PI / horizon;
        ((w * t).sin(), w * (w * t).cos())
    }
}

/// `m = 1..=4` crossed with the coordinate directions.
pub fn default_bumps(dim: usize, eps: f64) -> Vec<VariationSpec> {
    let mut out = Vec::new();
    for m in 1..=4 {
        for a in 0..dim {
            let mut e = vec![0.0; dim];
            e[a] = 1.0;
            out.push(VariationSpec::bump(m, &e, eps));
        }
    }
    out
}

/// Equally spaced recorded steps covering a time window, with quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub steps: Vec<usize>,
    pub weights: Vec<f64>,
    pub dt: f64,
}

impl QuadratureGrid {
    /// Uses the finest stride dividing the step count whose multiples are all recorded.
    pub fn from_ensemble(ens: &PathEnsemble, window: (f64, f64)) -> Result<Self> {
        let m = ens.n_steps();
        let recorded = ens.steps();
        let stride = (1..=m)
            .filter(|s| m.is_multiple_of(*s))
            .find(|&s| (0..=m).step_by(s).all(|k| recorded.binary_search(&k).is_ok()))
            .ok_or_else(|| LabError::Argument("no equally spaced recorded grid".into()))?;
        Self::with_stride(ens, stride, window)
    }

    pub fn with_stride(ens: &PathEnsemble, stride: usize, window: (f64, f64)) -> Result<Self> {
        let dt = ens.dt();
        let (t0, t1) = window;
        if !(t0 >= -1e-12 && t1 <= ens.horizon() + 1e-12 && t0 < t1) {
            return arg(format!("bad integration window [{t0}, {t1}]"));
        }
        let h = stride as f64 * dt;
        let first = ((t0 / h) - 1e-9).ceil().max(0.0) as usize * stride;
        let last = (((t1 / h) + 1e-9).floor() as usize * stride).min(ens.n_steps());
        if last <= first {
            return arg("integration window holds fewer than two nodes");
        }
        let steps: Vec<usize> = (first..=last).step_by(stride).collect();
        for &k in &steps {
            ens.slot(k)?;
        }
        let weights = quadrature_weights(steps.len() - 1, h);
        Ok(Self { steps, weights, dt })
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|&k| k as f64 * self.dt)
    }
}

/// States and `D_μ` velocities of a process, slice by slice.
#[derive(Clone)]
pub enum Kinematics<'a> {
    /// The process itself; velocities from a closed-form drift or a KDE plug-in.
    Diffusion {
        ens: &'a PathEnsemble,
        model: VelocityModel,
        bandwidth: Option<f64>,
    },
    /// A bridge-driven process: the state argument is `σ_b B_t` and the
    /// velocity is `u(t, σ_b B_t)`.
    BridgeDriven {
        bridge: &'a PathEnsemble,
        u: VectorField,
        sigma_b: f64,
    },
}

/// One time slice of [`Kinematics`].
#[derive(Debug, Clone)]
pub struct KinematicSlice {
    pub t: f64,
    pub states: Vec<Vector>,
    pub velocity: Vec<Vector>,
    pub reliable: Vec<bool>,
}

impl<'a> Kinematics<'a> {
    pub fn diffusion(ens: &'a PathEnsemble) -> Result<Self> {
        Ok(Self::Diffusion {
            ens,
            model: VelocityModel::from_ensemble(ens)?,
            bandwidth: None,
        })
    }

    pub fn ensemble(&self) -> &PathEnsemble {
        match self {
            Self::Diffusion { ens, .. } => ens,
            Self::BridgeDriven { bridge, .. } => bridge,
        }
    }

    pub fn slice(&self, step: usize, mu: f64) -> Result<KinematicSlice> {
        match self {
            Self::Diffusion { ens, model, bandwidth } => {
                let t = ens.time_of_step(step);
                if let Some(v) = model.field(mu) {
                    let states = ens.slice(step)?;
                    let velocity = states.par_iter().map(|x| v.eval(t, x)).collect();
                    let n = states.len();
                    return Ok(KinematicSlice {
                        t,
                        states,
                        velocity,
                        reliable: vec![true; n],
                    });
                }
                let d = model.at_step(ens, step, *bandwidth)?;
                let velocity = (0..d.states.len()).map(|p| d.d_mu(p, mu)).collect();
                Ok(KinematicSlice {
                    t,
                    states: d.states,
                    velocity,
                    reliable: d.reliable,
                })
            }
            Self::BridgeDriven { bridge, u, sigma_b } => {
                let t = bridge.time_of_step(step);
                let states: Vec<Vector> = bridge.slice(step)?.iter().map(|b| scale(*sigma_b, b)).collect();
                let velocity = states.par_iter().map(|x| u.eval(t, x)).collect();
                let n = states.len();
                Ok(KinematicSlice {
                    t,
                    states,
                    velocity,
                    reliable: vec![true; n],
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Integrates a per-path integrand over the quadrature grid; returns per-path integrals.
fn integrate_paths<F>(kin: &Kinematics, grid: &QuadratureGrid, mu: f64, n_out: usize, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(usize, &KinematicSlice, &mut [Vec<f64>]) -> Result<()>,
{
    let n = kin.ensemble().n_paths();
    let mut acc = vec![vec![0.0; n]; n_out];
    for (j, &k) in grid.steps.iter().enumerate() {
        let s = kin.slice(k, mu)?;
        let mut local = vec![vec![0.0; n]; n_out];
        f(j, &s, &mut local)?;
        let w = grid.weights[j];
        for (a, l) in acc.iter_mut().zip(&local) {
            a.par_iter_mut().zip(l).for_each(|(a, l)| *a += w * l);
        }
    }
    Ok(acc)
}

fn check_horizon(kin: &Kinematics, lag: &LagrangianSpec) -> Result<()> {
    let ens = kin.ensemble();
    if (ens.horizon() - lag.horizon()).abs() > 1e-12 || ens.dim() != lag.dim() {
        return arg("ensemble and Lagrangian disagree on horizon or dimension");
    }
    Ok(())
}

/// `E ∫ L(X_t, D_μX_t) dt` over `window`.
pub fn action_value(kin: &Kinematics, lag: &LagrangianSpec, mu: f64, window: (f64, f64)) -> Result<Estimate> {
    check_horizon(kin, lag)?;
    let grid = QuadratureGrid::from_ensemble(kin.ensemble(), window)?;
    let per_path = integrate_paths(kin, &grid, mu, 1, |_, s, out| {
        out[0].par_iter_mut().enumerate().for_each(|(p, o)| {
            *o = lag.value(s.t, &s.states[p], &s.velocity[p]);
        });
        if let Some(p) = out[0].iter().position(|v| !v.is_finite()) {
            return Err(LabError::NotIntegrable { path: p, t: s.t });
        }
        Ok(())
    })?;
    let (value, stderr) = mean_se(&per_path[0]);
    Ok(Estimate { value, stderr })
}

/// Action over the interior window `[t_buffer, T − t_buffer]`.
pub fn action_value_buffered(kin: &Kinematics, lag: &LagrangianSpec, mu: f64, t_buffer: f64) -> Result<Estimate> {
    let big_t = kin.ensemble().horizon();
    action_value(kin, lag, mu, (t_buffer, big_t - t_buffer))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationResult {
    pub label: String,
    pub eps: f64,
    pub df: f64,
    pub stderr: f64,
    /// `E ∫ |Z_t| dt`
    pub norm_z: f64,
}

/// Per-path bridge samples on the quadrature nodes, pinned at 0 at both ends.
fn bridge_values(seed: u64, stream: u64, n: usize, times: &[f64], horizon: f64) -> Vec<Vec<f64>> {
    let name = format!("lambda1_{stream}");
    (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = substream(seed, &name, p as u64);
            let mut b = 0.0;
            let mut prev = 0.0;
            let mut out = Vec::with_capacity(times.len());
            // Nodes before t = 0+ and the pinned end are exact zeros.
            for &t in times {
                if t <= 1e-12 || t >= horizon - 1e-12 {
                    out.push(0.0);
                    prev = t;
                    b = 0.0;
                    continue;
                }
                let gap = t - prev;
                let rem = horizon - prev;
                let mean = b * (horizon - t) / rem;
                let var = gap * (horizon - t) / rem;
                let z: f64 = rng.sample(StandardNormal);
                b = mean + var.sqrt() * z;
                prev = t;
                out.push(b);
            }
            out
        })
        .collect()
}

/// Values of `Z` and `D_μZ` for one variation at one node.
enum VariationData {
    Bump { e: Vector, m: u32, eps: f64 },
    Bridge { e: Vector, amp: f64, values: Vec<Vec<f64>> },
}

impl VariationData {
    fn build(z: &VariationSpec, dim: usize, seed: u64, n: usize, times: &[f64], horizon: f64) -> Result<Self> {
        z.validate(dim)?;
        let e = z.direction(dim)?;
        Ok(match z {
            VariationSpec::N1Bump { m, eps, .. } => Self::Bump { e, m: *m, eps: *eps },
            VariationSpec::Lambda1Bridge { scale, eps, stream, .. } => Self::Bridge {
                e,
                amp: scale * eps,
                values: bridge_values(seed, *stream, n, times, horizon),
            },
        })
    }

    /// `(Z, D_μZ)` at node `j`, path `p`.
    fn at(&self, j: usize, p: usize, t: f64, horizon: f64, mu: f64) -> (Vector, Vector) {
        match self {
            Self::Bump { e, m, eps } => {
                let (g, dg) = VariationSpec::profile(*m, t, horizon);
                (scale(eps * g, e), scale(eps * dg, e))
            }
            Self::Bridge { e, amp, values } => {
                let z = amp * values[p][j];
                let fwd = if horizon - t > 1e-12 { -z / (horizon - t) } else { 0.0 };
                let bwd = if t > 1e-12 { z / t } else { 0.0 };
                let (a, b) = crate::nelson::mu_weights(mu);
                (scale(z, e), scale(a * fwd + b * bwd, e))
            }
        }
    }
}

/// Window for a variation family: bridges have singular drifts at the ends.
pub fn variation_window(z: &VariationSpec, horizon: f64, t_buffer: f64) -> (f64, f64) {
    if z.is_deterministic() {
        (0.0, horizon)
    } else {
        (t_buffer, horizon - t_buffer)
    }
}

/// `dF = E ∫ [∂_xL·Z + ∂_vL·D_μZ] dt` for each variation.
pub fn first_variations(
    kin: &Kinematics,
    lag: &LagrangianSpec,
    variations: &[VariationSpec],
    mu: f64,
    t_buffer: f64,
    seed: u64,
) -> Result<Vec<VariationResult>> {
    check_horizon(kin, lag)?;
    let ens = kin.ensemble();
    let horizon = ens.horizon();
    let mut out = Vec::with_capacity(variations.len());
    // Variations sharing a window share the velocity slices.
    let mut windows: Vec<(f64, f64)> = Vec::new();
    for z in variations {
        let w = variation_window(z, horizon, t_buffer);
        if !windows.contains(&w) {
            windows.push(w);
        }
    }
    let mut results: Vec<Option<VariationResult>> = vec![None; variations.len()];
    for w in windows {
        let idx: Vec<usize> = (0..variations.len())
            .filter(|&i| variation_window(&variations[i], horizon, t_buffer) == w)
            .collect();
        let grid = QuadratureGrid::from_ensemble(ens, w)?;
        let times: Vec<f64> = grid.times().collect();
        let data = idx
            .iter()
            .map(|&i| VariationData::build(&variations[i], ens.dim(), seed, ens.n_paths(), &times, horizon))
            .collect::<Result<Vec<_>>>()?;
        let nv = idx.len();
        let per_path = integrate_paths(kin, &grid, mu, 2 * nv, |j, s, outs| {
            let (df_part, z_part) = outs.split_at_mut(nv);
            let dxl: Vec<Vector> = s.states.par_iter().map(|x| lag.d_x(s.t, x)).collect();
            for (v, d) in data.iter().enumerate() {
                df_part[v]
                    .par_iter_mut()
                    .zip(z_part[v].par_iter_mut())
                    .enumerate()
                    .for_each(|(p, (df, zn))| {
                        let (z, dz) = d.at(j, p, s.t, horizon, mu);
                        *df = dot(&dxl[p], &z) + dot(&lag.d_v(&s.velocity[p]), &dz);
                        *zn = norm(&z);
                    });
            }
            Ok(())
        })?;
        for (v, &i) in idx.iter().enumerate() {
            let (df, stderr) = if variations[i].eps() == 0.0 { (0.0, 0.0) } else { mean_se(&per_path[v]) };
            let norm_z = per_path[nv + v].iter().sum::<f64>() / ens.n_paths() as f64;
            results[i] = Some(VariationResult {
                label: variations[i].label(),
                eps: variations[i].eps(),
                df,
                stderr,
                norm_z,
            });
        }
    }
    for r in results {
        out.push(r.expect("every variation belongs to a window"));
    }
    Ok(out)
}

pub fn first_variation(
    kin: &Kinematics,
    lag: &LagrangianSpec,
    z: &VariationSpec,
    mu: f64,
    t_buffer: f64,
    seed: u64,
) -> Result<VariationResult> {
    Ok(first_variations(kin, lag, std::slice::from_ref(z), mu, t_buffer, seed)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteDifferenceResult {
    pub eps_list: Vec<f64>,
    /// `[F(X + εZ) − F(X)]/ε` for each ε.
    pub quotients: Vec<f64>,
    /// Intercept of the linear fit in ε, i.e. the slope at ε = 0.
    pub slope: f64,
    pub stderr: f64,
}

/// Direct `[F(X + εZ) − F(X)]/ε` on common random numbers, extrapolated to
/// `ε → 0` by a least-squares line. `Z` is deterministic, so
/// `D_μ(X + εZ) = D_μX + εż`. Integrates over the full horizon.
pub fn finite_difference_variation(
    kin: &Kinematics,
    lag: &LagrangianSpec,
    z: &VariationSpec,
    mu: f64,
    eps_list: &[f64],
) -> Result<FiniteDifferenceResult> {
    check_horizon(kin, lag)?;
    let (m, e) = match z {
        VariationSpec::N1Bump { m, .. } => (*m, z.direction(kin.ensemble().dim())?),
        _ => return arg("finite-difference variation needs a deterministic (N1 bump) variation"),
    };
    if eps_list.is_empty() || eps_list.iter().any(|&x| !(x > 0.0)) {
        return arg("eps_list must hold positive amplitudes");
    }
    let horizon = kin.ensemble().horizon();
    let grid = QuadratureGrid::from_ensemble(kin.ensemble(), (0.0, horizon))?;
    let ne = eps_list.len();
    // Unit-amplitude profile; each ε scales it.
    let per_path = integrate_paths(kin, &grid, mu, ne, |_, s, outs| {
        let (g, dg) = VariationSpec::profile(m, s.t, horizon);
        for (i, &eps) in eps_list.iter().enumerate() {
            outs[i].par_iter_mut().enumerate().for_each(|(p, o)| {
                let x = s.states[p];
                let v = s.velocity[p];
                let xs = add(&x, &scale(eps * g, &e));
                let vs = add(&v, &scale(eps * dg, &e));
                *o = (lag.value(s.t, &xs, &vs) - lag.value(s.t, &x, &v)) / eps;
            });
        }
        Ok(())
    })?;
    let quotients: Vec<f64> = per_path.iter().map(|q| mean_se(q).0).collect();
    let fit = |ys: &[f64]| -> f64 {
        if ne == 1 {
            return ys[0];
        }
        let xm = eps_list.iter().sum::<f64>() / ne as f64;
        let ym = ys.iter().sum::<f64>() / ne as f64;
        let sxx: f64 = eps_list.iter().map(|x| (x - xm).powi(2)).sum();
        let sxy: f64 = eps_list.iter().zip(ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
        ym - sxy / sxx * xm
    };
    let n = kin.ensemble().n_paths();
    let intercepts: Vec<f64> = (0..n)
        .map(|p| {
            let ys: Vec<f64> = per_path.iter().map(|q| q[p]).collect();
            fit(&ys)
        })
        .collect();
    let (slope, stderr) = mean_se(&intercepts);
    Ok(FiniteDifferenceResult {
        eps_list: eps_list.to_vec(),
        quotients,
        slope,
        stderr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElForm {
    /// Outer derivative `D_μ`.
    Sel,
    /// Outer derivative `D_{−μ}`.
    Gsel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualParams {
    pub probe_times: [f64; 3],
    /// Quotient lag for the empirical residual.
    pub h: f64,
    /// Regression kernel width; `None` selects Silverman's rule.
    pub bandwidth: Option<f64>,
    /// Use every k-th path for the closed-form residual samples.
    pub subsample: usize,
}

impl ResidualParams {
    pub fn for_ensemble(ens: &PathEnsemble) -> Self {
        let t = ens.horizon();
        Self {
            probe_times: [0.25 * t, 0.5 * t, 0.75 * t],
            h: 4.0 * ens.dt(),
            bandwidth: None,
            subsample: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualGridRow {
    pub t: f64,
    pub x: Vector,
    /// Regression of the chain-rule residual samples.
    pub closed_form: Vector,
    /// Regression of `∂_xL − quotient`.
    pub empirical: Vector,
    pub stderr: Vector,
}

#[derive(Debug, Clone, Serialize)]
pub struct ElResidualReport {
    pub form: ElForm,
    pub mu: f64,
    pub outer_mu: f64,
    pub rows: Vec<ResidualGridRow>,
    /// Ensemble-L² norm of the chain-rule residual over probe times and paths.
    pub norm: f64,
    /// Grid RMS of the empirical residual.
    pub empirical_norm: f64,
    /// Grid RMS of the empirical residual's standard error.
    pub empirical_stderr: f64,
    /// RMS over probe times of `|E[∂_xL − quotient]|`, without kernel weights.
    pub mean_gap: f64,
    pub mean_gap_stderr: f64,
    /// Ensemble-L² norm of `∂_xL`.
    pub pressure_scale: f64,
    /// Paths excluded because the plug-in density was too thin.
    pub excluded: usize,
}

/// Stochastic Euler–Lagrange residual `∂_xL − D_{±μ}(∂_vL)` of a diffusion
/// ensemble, where the inner velocity `D_μX` is a known field.
///
/// The closed-form residual applies the chain rule to the inner field with
/// the outer drift from the velocity model (a KDE plug-in where needed).
/// The empirical residual regresses difference quotients of `D_μX_t` on the
/// state, with the Itô martingale term removed where the outer drift is known.
pub fn el_residual(
    ens: &PathEnsemble,
    lag: &LagrangianSpec,
    mu: f64,
    form: ElForm,
    points: &[Vector],
    params: &ResidualParams,
) -> Result<ElResidualReport> {
    let model = VelocityModel::from_ensemble(ens)?;
    if let Provenance::Simulated(spec) = ens.provenance() {
        if spec.class == ClassTag::LambdaB {
            return arg("residuals need a LambdaC or Lambda0 ensemble");
        }
    }
    if (ens.horizon() - lag.horizon()).abs() > 1e-12 {
        return arg("ensemble and Lagrangian disagree on horizon");
    }
    let inner = model
        .field(mu)
        .ok_or_else(|| LabError::Argument("inner velocity D_mu X must be known in closed form".into()))?;
    let outer = match form {
        ElForm::Sel => mu,
        ElForm::Gsel => -mu,
    };
    let a = model.sigma * model.sigma;
    let dt = ens.dt();
    let lag_steps = ((params.h / dt).round() as usize).max(1);
    let h = lag_steps as f64 * dt;
    let (wf, wb) = crate::nelson::mu_weights(outer);
    let known_f = model.forward.is_some();
    let known_b = model.backward.is_some();

    let mut rows = Vec::new();
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut scale_sq = 0.0;
    let mut excluded = 0usize;
    let mut gaps = Vec::new();
    let mut gap_se = Vec::new();
    for &t in &params.probe_times {
        let k = ens.step_at(t);
        if k < lag_steps || k + lag_steps > ens.n_steps() {
            return arg(format!("probe time {t} too close to the boundary for lag {h}"));
        }
        let tk = ens.time_of_step(k);
        let drifts = model.at_step(ens, k, params.bandwidth)?;
        let n = drifts.states.len();
        let (sp, s0, sm) = (ens.slot(k + lag_steps)?, ens.slot(k)?, ens.slot(k - lag_steps)?);
        // (closed-form residual, empirical residual, d_x L) per path
        let samples: Vec<(Vector, Vector, Vector, bool)> = (0..n)
            .into_par_iter()
            .map(|p| {
                let x0 = ens.state(p, s0);
                let j = inner.jet(tk, &x0, DEFAULT_STEP);
                let dxl = lag.d_x(tk, &x0);
                let w = mu_combine_vectors(&drifts.forward[p], &drifts.backward[p], outer);
                let mut d_outer = add(&j.dt, &mat_vec(&j.jacobian, &w));
                d_outer = add(&d_outer, &scale(0.5 * outer * a, &j.laplacian));
                let closed = sub(&dxl, &d_outer);

                let y0 = j.value;
                let xp = ens.state(p, sp);
                let xm = ens.state(p, sm);
                let mut qf = scale(1.0 / h, &sub(&inner.eval(tk + h, &xp), &y0));
                let mut qb = scale(1.0 / h, &sub(&y0, &inner.eval(tk - h, &xm)));
                if known_f {
                    let noise = sub(&sub(&xp, &x0), &scale(h, &drifts.forward[p]));
                    qf = sub(&qf, &scale(1.0 / h, &mat_vec(&j.jacobian, &noise)));
                }
                if known_b {
                    let noise = sub(&sub(&x0, &xm), &scale(h, &drifts.backward[p]));
                    qb = sub(&qb, &scale(1.0 / h, &mat_vec(&j.jacobian, &noise)));
                }
                let q = add(&scale(wf, &qf), &scale(wb, &qb));
                (closed, sub(&dxl, &q), dxl, drifts.reliable[p])
            })
            .collect();

        let step = params.subsample.max(1);
        for (i, s) in samples.iter().enumerate() {
            if i % step != 0 {
                continue;
            }
            if !s.3 {
                excluded += 1;
                continue;
            }
            sq += dot(&s.0, &s.0);
            scale_sq += dot(&s.2, &s.2);
            count += 1;
        }
        let emp: Vec<Vector> = samples.iter().map(|s| s.1).collect();
        let (m, se) = crate::stats::mean_se_vec(&emp);
        gaps.push(norm(&m));
        gap_se.push(norm(&se));

        let xs = ens.slice(k)?;
        let bw = params.bandwidth.unwrap_or_else(|| silverman_bandwidth(&xs, ens.dim()));
        let reliable_x: Vec<Vector> = xs.iter().zip(&samples).filter(|(_, s)| s.3).map(|(x, _)| *x).collect();
        let closed_y: Vec<Vector> = samples.iter().filter(|s| s.3).map(|s| s.0).collect();
        let fit_c = kernel_regression(&reliable_x, &closed_y, points, bw, 20.0);
        let fit_e = kernel_regression(&xs, &emp, points, bw, 20.0);
        for ((g, c), e) in points.iter().zip(fit_c).zip(fit_e) {
            if let (Some(c), Some(e)) = (c, e) {
                rows.push(ResidualGridRow {
                    t: tk,
                    x: *g,
                    closed_form: c.value,
                    empirical: e.value,
                    stderr: e.stderr,
                });
            }
        }
    }
    if count == 0 {
        return Err(LabError::Degenerate("no reliable residual samples".into()));
    }
    let nr = rows.len().max(1) as f64;
    let empirical_norm = (rows.iter().map(|r| dot(&r.empirical, &r.empirical)).sum::<f64>() / nr).sqrt();
    let empirical_stderr = (rows.iter().map(|r| dot(&r.stderr, &r.stderr)).sum::<f64>() / nr).sqrt();
    let np = gaps.len() as f64;
    Ok(ElResidualReport {
        form,
        mu,
        outer_mu: outer,
        rows,
        norm: (sq / count as f64).sqrt(),
        empirical_norm,
        empirical_stderr,
        mean_gap: (gaps.iter().map(|g| g * g).sum::<f64>() / np).sqrt(),
        mean_gap_stderr: (gap_se.iter().map(|g| g * g).sum::<f64>() / np).sqrt(),
        pressure_scale: (scale_sq / count as f64).sqrt(),
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Multiple of the standard error always tolerated.
    pub n_stderr: f64,
    /// Relative tolerance against `‖Z‖·scale`.
    pub relative: f64,
    /// Fixed scale; `None` uses `rms|∂_xL|`, or `rms|v|` when the potential is flat.
    pub scale: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            n_stderr: 3.0,
            relative: 0.02,
            scale: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Critical,
    NotCritical,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationVerdict {
    #[serde(flatten)]
    pub result: VariationResult,
    pub threshold: f64,
    /// `|dF| / threshold`
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionReport {
    pub instance: String,
    pub mu: f64,
    pub f_value: Estimate,
    pub variations: Vec<VariationVerdict>,
    pub residual_norms: Option<ResidualNorms>,
    pub verdict: Verdict,
    pub thresholds: Thresholds,
    pub scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualNorms {
    pub closed_form: f64,
    pub empirical: f64,
    pub pressure_scale: f64,
}

impl From<&ElResidualReport> for ResidualNorms {
    fn from(r: &ElResidualReport) -> Self {
        Self {
            closed_form: r.norm,
            empirical: r.empirical_norm,
            pressure_scale: r.pressure_scale,
        }
    }
}

/// `rms|∂_xL|` over the quadrature nodes, or `rms|v|` where that vanishes.
pub fn lagrangian_scale(kin: &Kinematics, lag: &LagrangianSpec, mu: f64) -> Result<f64> {
    let grid = QuadratureGrid::from_ensemble(kin.ensemble(), (0.0, kin.ensemble().horizon()))?;
    let (mut sp, mut sv, mut n) = (0.0, 0.0, 0usize);
    for &k in &grid.steps {
        let s = kin.slice(k, mu)?;
        let g: Vec<(f64, f64)> = s
            .states
            .par_iter()
            .zip(&s.velocity)
            .map(|(x, v)| {
                let d = lag.d_x(s.t, x);
                (dot(&d, &d), dot(v, v))
            })
            .collect();
        for (a, b) in g {
            sp += a;
            sv += b;
            n += 1;
        }
    }
    let p = (sp / n as f64).sqrt();
    Ok(if p > 1e-12 { p } else { (sv / n as f64).sqrt() })
}

/// Verdict from variation results.
pub fn judge(results: &[VariationResult], thresholds: &Thresholds, scale: f64) -> (Verdict, Vec<VariationVerdict>) {
    let verdicts: Vec<VariationVerdict> = results
        .iter()
        .map(|r| {
            let threshold = (thresholds.n_stderr * r.stderr).max(thresholds.relative * r.norm_z * scale);
            let ratio = if threshold > 0.0 { r.df.abs() / threshold } else { 0.0 };
            VariationVerdict {
                result: r.clone(),
                threshold,
                ratio,
            }
        })
        .collect();
    if results.is_empty() || results.iter().all(|r| r.eps == 0.0) {
        return (Verdict::Inconclusive, verdicts);
    }
    let active: Vec<&VariationVerdict> = verdicts.iter().filter(|v| v.result.eps > 0.0).collect();
    if active.iter().any(|v| v.result.df.abs() >= 3.0 * v.threshold) {
        return (Verdict::NotCritical, verdicts);
    }
    let noise_dominated = active
        .iter()
        .all(|v| thresholds.n_stderr * v.result.stderr > 4.0 * thresholds.relative * v.result.norm_z * scale);
    if !noise_dominated && active.iter().all(|v| v.result.df.abs() <= v.threshold) {
        return (Verdict::Critical, verdicts);
    }
    (Verdict::Inconclusive, verdicts)
}

/// Runs every variation and classifies the ensemble as critical or not.
#[allow(clippy::too_many_arguments)]
pub fn criticality_test(
    instance: &str,
    kin: &Kinematics,
    lag: &LagrangianSpec,
    variations: &[VariationSpec],
    mu: f64,
    thresholds: &Thresholds,
    t_buffer: f64,
    seed: u64,
) -> Result<ActionReport> {
    if variations.len() < 8 {
        return arg(format!("criticality needs at least 8 variations, got {}", variations.len()));
    }
    let results = first_variations(kin, lag, variations, mu, t_buffer, seed)?;
    let scale = match thresholds.scale {
        Some(s) => s,
        None => lagrangian_scale(kin, lag, mu)?,
    };
    let f_value = action_value_buffered(kin, lag, mu, t_buffer)?;
    let (verdict, variations) = judge(&results, thresholds, scale);
    Ok(ActionReport {
        instance: instance.to_string(),
        mu,
        f_value,
        variations,
        residual_norms: None,
        verdict,
        thresholds: *thresholds,
        scale,
        seed,
    })
}

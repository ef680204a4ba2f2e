//! Nelson forward and backward derivatives of simulated processes.
//!
//! Conditional expectations given the past (or future) are replaced by
//! Gaussian-kernel regression on the current state `X_t`. The limits in the
//! definitions are explicit functions of `(t, X_t)`, so the Markov projection
//! loses nothing.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{arg, LabError, Result};
use crate::fields::{
    add, dot, scale, sub, ScalarField, SpaceTimePoint, TimeReversible, Vector, VectorField, DEFAULT_STEP,
    MAX_DIM, ZERO,
};
use crate::paths::{reverse_ensemble, ClassTag, PathEnsemble, Provenance};
use crate::stats::mean_se;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NelsonParams {
    /// Difference-quotient lag, a multiple of `dt`.
    pub h: f64,
    /// Kernel width; `None` selects Silverman's rule per time slice.
    pub bandwidth: Option<f64>,
    /// Exclusion margin near `t = 0` and `t = T`.
    pub t_buffer: f64,
    pub mu: f64,
    /// Minimum effective sample count for a reported point.
    pub n_min: f64,
    /// Subtract the Itô martingale increment `∇f·(ΔX − drift·h)` from
    /// quotients of functions of the state (chain-rule checks only).
    pub martingale_correction: bool,
}

impl NelsonParams {
    pub fn for_grid(dt: f64, horizon: f64) -> Self {
        Self {
            h: 4.0 * dt,
            bandwidth: None,
            t_buffer: (8.0 * dt).max(0.05 * horizon),
            mu: 1.0,
            n_min: 20.0,
            martingale_correction: true,
        }
    }

    pub fn for_ensemble(ens: &PathEnsemble) -> Self {
        Self::for_grid(ens.dt(), ens.horizon())
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn with_bandwidth(mut self, bw: f64) -> Self {
        self.bandwidth = Some(bw);
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_t_buffer(mut self, t_buffer: f64) -> Self {
        self.t_buffer = t_buffer;
        self
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        if self.h < dt * (1.0 - 1e-9) {
            return arg(format!("lag h = {} is below dt = {dt}", self.h));
        }
        if self.t_buffer < self.h * (1.0 - 1e-9) {
            return arg(format!("t_buffer = {} is below h = {}", self.t_buffer, self.h));
        }
        if let Some(bw) = self.bandwidth {
            if !(bw > 0.0) {
                return arg("bandwidth must be positive");
            }
        }
        if ![-1.0, 0.0, 1.0].contains(&self.mu) {
            return arg(format!("mu must be -1, 0 or 1, got {}", self.mu));
        }
        Ok(())
    }

    fn lag_steps(&self, dt: f64) -> usize {
        ((self.h / dt).round() as usize).max(1)
    }
}

/// One regression point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftPoint {
    pub x: Vector,
    pub value: Vector,
    pub stderr: Vector,
    pub n_eff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftEstimate {
    pub t: f64,
    pub direction: Direction,
    pub dim: usize,
    /// Requested grid, including dropped points.
    pub grid: Vec<Vector>,
    pub points: Vec<DriftPoint>,
    /// Grid points without enough local samples.
    pub dropped: Vec<Vector>,
}

impl DriftEstimate {
    pub fn get(&self, x: &Vector) -> Option<&DriftPoint> {
        self.points.iter().find(|p| p.x == *x)
    }

    /// Largest `|value − reference(x)|` over the reported points, with the
    /// stderr norm at the maximiser.
    pub fn max_error(&self, reference: impl Fn(&Vector) -> Vector) -> (f64, f64) {
        self.points
            .iter()
            .map(|p| {
                let e = crate::fields::norm(&sub(&p.value, &reference(&p.x)));
                (e, crate::fields::norm(&p.stderr))
            })
            .fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a })
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.dim;
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.extend((1..=d).map(|i| format!("v{i}")));
        header.extend((1..=d).map(|i| format!("stderr{i}")));
        header.push("n_eff".into());
        w.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![format!("{:.16e}", self.t)];
            row.extend(p.x[..d].iter().map(|v| format!("{v:.16e}")));
            row.extend(p.value[..d].iter().map(|v| format!("{v:.16e}")));
            row.extend(p.stderr[..d].iter().map(|v| format!("{v:.16e}")));
            row.push(format!("{:.6}", p.n_eff));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Silverman's rule of thumb for a Gaussian kernel.
pub fn silverman_bandwidth(samples: &[Vector], dim: usize) -> f64 {
    let n = samples.len() as f64;
    let mut spread = 0.0;
    for i in 0..dim {
        let m = samples.iter().map(|x| x[i]).sum::<f64>() / n;
        let v = samples.iter().map(|x| (x[i] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        spread += v.sqrt();
    }
    spread /= dim as f64;
    spread * (4.0 / ((dim as f64 + 2.0) * n)).powf(1.0 / (dim as f64 + 4.0))
}

/// Nadaraya–Watson regression of `values` on `xs` at each grid point.
///
/// The standard error comes from the weighted residual variance,
/// `Σ w² (y − m)² / (Σ w)²`.
pub fn kernel_regression(
    xs: &[Vector],
    values: &[Vector],
    grid: &[Vector],
    bandwidth: f64,
    n_min: f64,
) -> Vec<Option<DriftPoint>> {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    grid.par_iter()
        .map(|g| {
            let mut sw = 0.0;
            let mut sw2 = 0.0;
            let mut swy = ZERO;
            for (x, y) in xs.iter().zip(values) {
                let d = sub(x, g);
                let w = (-dot(&d, &d) * inv).exp();
                sw += w;
                sw2 += w * w;
                for i in 0..MAX_DIM {
                    swy[i] += w * y[i];
                }
            }
            if sw <= 0.0 {
                return None;
            }
            let n_eff = sw * sw / sw2;
            if n_eff < n_min {
                return None;
            }
            let mean = scale(1.0 / sw, &swy);
            let mut ss = ZERO;
            for (x, y) in xs.iter().zip(values) {
                let d = sub(x, g);
                let w = (-dot(&d, &d) * inv).exp();
                for i in 0..MAX_DIM {
                    ss[i] += w * w * (y[i] - mean[i]).powi(2);
                }
            }
            let stderr = ss.map(|s| s.sqrt() / sw);
            Some(DriftPoint {
                x: *g,
                value: mean,
                stderr,
                n_eff,
            })
        })
        .collect()
}

fn collect_estimate(
    t: f64,
    direction: Direction,
    dim: usize,
    grid: &[Vector],
    fitted: Vec<Option<DriftPoint>>,
) -> DriftEstimate {
    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for (g, f) in grid.iter().zip(fitted) {
        match f {
            Some(p) => points.push(p),
            None => dropped.push(*g),
        }
    }
    DriftEstimate {
        t,
        direction,
        dim,
        grid: grid.to_vec(),
        points,
        dropped,
    }
}

/// Grid step of a probe time after checking the endpoint buffer and that the
/// lagged step is recorded.
fn probe_step(ens: &PathEnsemble, t: f64, params: &NelsonParams, direction: Option<Direction>) -> Result<(usize, usize)> {
    params.validate(ens.dt())?;
    let tol = 1e-9 * ens.horizon();
    if t < params.t_buffer - tol || t > ens.horizon() - params.t_buffer + tol {
        return arg(format!(
            "probe time {t} outside [{}, {}]",
            params.t_buffer,
            ens.horizon() - params.t_buffer
        ));
    }
    let k = ens.step_at(t);
    let lag = params.lag_steps(ens.dt());
    ens.slot(k)?;
    match direction {
        Some(Direction::Forward) => {
            ens.slot(k + lag)?;
        }
        Some(Direction::Backward) => {
            ens.slot(k - lag)?;
        }
        None => {
            ens.slot(k + lag)?;
            ens.slot(k - lag)?;
        }
    }
    Ok((k, lag))
}

/// Forward `(X_{t+h} − X_t)/h` or backward `(X_t − X_{t−h})/h` quotients, per path.
pub fn difference_quotients(ens: &PathEnsemble, k: usize, lag: usize, direction: Direction) -> Result<Vec<Vector>> {
    let h = lag as f64 * ens.dt();
    let now = ens.slot(k)?;
    Ok(match direction {
        Direction::Forward => {
            let next = ens.slot(k + lag)?;
            (0..ens.n_paths())
                .map(|p| scale(1.0 / h, &sub(&ens.state(p, next), &ens.state(p, now))))
                .collect()
        }
        Direction::Backward => {
            let prev = ens.slot(k - lag)?;
            (0..ens.n_paths())
                .map(|p| scale(1.0 / h, &sub(&ens.state(p, now), &ens.state(p, prev))))
                .collect()
        }
    })
}

fn bandwidth_for(params: &NelsonParams, xs: &[Vector], dim: usize) -> Result<f64> {
    let bw = params.bandwidth.unwrap_or_else(|| silverman_bandwidth(xs, dim));
    if !(bw > 0.0) {
        return Err(LabError::Degenerate("zero spread, no default bandwidth".into()));
    }
    Ok(bw)
}

/// Kernel regression estimate of `DX_t` or `D_*X_t` on a grid of states.
pub fn estimate_drift(
    ens: &PathEnsemble,
    t: f64,
    points: &[Vector],
    params: &NelsonParams,
    direction: Direction,
) -> Result<DriftEstimate> {
    estimate_drift_gap(ens, t, points, params, direction, |_| ZERO)
}

/// Regression of `quotient − reference(X_t)`: compares an empirical drift
/// with a closed form under identical kernel weights, so smoothing bias
/// cancels and only the lag bias remains.
pub fn estimate_drift_gap(
    ens: &PathEnsemble,
    t: f64,
    points: &[Vector],
    params: &NelsonParams,
    direction: Direction,
    reference: impl Fn(&Vector) -> Vector + Sync,
) -> Result<DriftEstimate> {
    let (k, lag) = probe_step(ens, t, params, Some(direction))?;
    let xs = ens.slice(k)?;
    let mut q = difference_quotients(ens, k, lag, direction)?;
    q.par_iter_mut().zip(&xs).for_each(|(qi, x)| *qi = sub(qi, &reference(x)));
    let bw = bandwidth_for(params, &xs, ens.dim())?;
    let fitted = kernel_regression(&xs, &q, points, bw, params.n_min);
    Ok(collect_estimate(ens.time_of_step(k), direction, ens.dim(), points, fitted))
}

/// `b − σ²∇log ρ`, the constant-σ backward drift. Evaluates to NaN where
/// `ρ ≤ 0`; use [`backward_drift_at`] for a checked evaluation.
pub fn closed_form_backward_drift(b: &VectorField, sigma: f64, rho: &ScalarField) -> VectorField {
    if sigma == 0.0 {
        return b.clone();
    }
    let (b2, r) = (b.clone(), rho.clone());
    let a = sigma * sigma;
    VectorField::new(format!("backward({})", b.name()), b.dim(), b.horizon(), move |t, x| {
        let j = r.jet(t, x, DEFAULT_STEP);
        if j.value <= 0.0 {
            return [f64::NAN; MAX_DIM];
        }
        sub(&b2.eval(t, x), &scale(a / j.value, &j.gradient))
    })
}

pub fn backward_drift_at(b: &VectorField, sigma: f64, rho: &ScalarField, q: &SpaceTimePoint) -> Result<Vector> {
    let j = rho.try_jet(q, DEFAULT_STEP)?;
    if j.value <= 0.0 {
        return Err(LabError::NonPositiveDensity {
            t: q.t,
            x: q.x[..rho.dim()].to_vec(),
            value: j.value,
        });
    }
    Ok(sub(&b.try_eval(q)?, &scale(sigma * sigma / j.value, &j.gradient)))
}

/// Gaussian KDE of one time slice with its log-gradient.
///
/// In one and two dimensions the estimate is linearly binned onto a grid
/// and convolved separably; evaluation interpolates the density and its
/// gradient. Three-dimensional slices are summed directly.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    pub t: f64,
    pub bandwidth: f64,
    dim: usize,
    n: usize,
    samples: Arc<Vec<Vector>>,
    grid: Option<BinnedGrid>,
}

#[derive(Debug, Clone)]
struct BinnedGrid {
    lo: Vector,
    spacing: f64,
    /// Cells per axis (unused axes have 1).
    shape: [usize; 2],
    rho: Vec<f64>,
    grad: [Vec<f64>; 2],
}

impl BinnedGrid {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.shape[1] + j
    }

    /// Bilinear interpolation weights, or `None` outside the grid.
    fn locate(&self, x: &Vector, dim: usize) -> Option<[(usize, usize, f64); 4]> {
        let mut cell = [0usize; 2];
        let mut frac = [0.0; 2];
        for a in 0..dim {
            let s = (x[a] - self.lo[a]) / self.spacing;
            if !(s >= 0.0) || s > (self.shape[a] - 1) as f64 {
                return None;
            }
            let c = (s.floor() as usize).min(self.shape[a].saturating_sub(2));
            cell[a] = c;
            frac[a] = s - c as f64;
        }
        let (i, j) = (cell[0], cell[1]);
        let (fx, fy) = (frac[0], frac[1]);
        if dim == 1 {
            return Some([(i, 0, 1.0 - fx), (i + 1, 0, fx), (i, 0, 0.0), (i, 0, 0.0)]);
        }
        Some([
            (i, j, (1.0 - fx) * (1.0 - fy)),
            (i + 1, j, fx * (1.0 - fy)),
            (i, j + 1, (1.0 - fx) * fy),
            (i + 1, j + 1, fx * fy),
        ])
    }

    fn interp(&self, field: &[f64], w: &[(usize, usize, f64); 4]) -> f64 {
        w.iter().map(|&(i, j, c)| c * field[self.idx(i, j)]).sum()
    }
}

/// Cap on binned cells per axis.
const MAX_CELLS: usize = 1024;

fn gaussian_taps(bandwidth: f64, spacing: f64) -> (Vec<f64>, Vec<f64>) {
    let radius = (5.0 * bandwidth / spacing).ceil() as i64;
    let norm = 1.0 / ((2.0 * PI).sqrt() * bandwidth);
    let mut k = Vec::new();
    let mut dk = Vec::new();
    for o in -radius..=radius {
        let r = o as f64 * spacing;
        let g = norm * (-0.5 * r * r / (bandwidth * bandwidth)).exp();
        k.push(g);
        // d/dx K(x − c) at offset r = x − c
        dk.push(-r / (bandwidth * bandwidth) * g);
    }
    (k, dk)
}

fn convolve_axis(src: &[f64], shape: [usize; 2], axis: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    let (n0, n1) = (shape[0] as i64, shape[1] as i64);
    out.par_chunks_mut(shape[1]).enumerate().for_each(|(i, row)| {
        for j in 0..n1 {
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let o = t as i64 - radius;
                let (si, sj) = if axis == 0 { (i as i64 - o, j) } else { (i as i64, j - o) };
                if si >= 0 && si < n0 && sj >= 0 && sj < n1 {
                    acc += w * src[(si * n1 + sj) as usize];
                }
            }
            row[j as usize] = acc;
        }
    });
    out
}

impl DensityEstimate {
    pub fn from_samples(t: f64, samples: Vec<Vector>, dim: usize, bandwidth: Option<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(LabError::Degenerate("need at least two samples".into()));
        }
        let silverman = silverman_bandwidth(&samples, dim);
        let bandwidth = bandwidth.unwrap_or(silverman);
        if !(silverman > 0.0) || !(bandwidth > 0.0) {
            return Err(LabError::Degenerate(format!("zero spread in ensemble at t = {t}")));
        }
        let n = samples.len();
        let grid = if dim <= 2 { Some(Self::bin(&samples, dim, bandwidth)) } else { None };
        Ok(Self {
            t,
            bandwidth,
            dim,
            n,
            samples: Arc::new(samples),
            grid,
        })
    }

    fn bin(samples: &[Vector], dim: usize, bandwidth: f64) -> BinnedGrid {
        let mut lo = ZERO;
        let mut hi = ZERO;
        for a in 0..dim {
            let (mn, mx) = samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), x| (mn.min(x[a]), mx.max(x[a])));
            lo[a] = mn - 6.0 * bandwidth;
            hi[a] = mx + 6.0 * bandwidth;
        }
        let widest = (0..dim).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let spacing = (bandwidth / 4.0).max(widest / (MAX_CELLS - 1) as f64);
        let mut shape = [1usize; 2];
        for a in 0..dim {
            shape[a] = ((hi[a] - lo[a]) / spacing).ceil() as usize + 2;
        }
        let mut counts = vec![0.0; shape[0] * shape[1]];
        let w0 = 1.0 / samples.len() as f64;
        for x in samples {
            let s0 = (x[0] - lo[0]) / spacing;
            let (i, fx) = (s0.floor() as usize, s0.fract());
            if dim == 1 {
                counts[i] += w0 * (1.0 - fx);
                counts[i + 1] += w0 * fx;
            } else {
                let s1 = (x[1] - lo[1]) / spacing;
                let (j, fy) = (s1.floor() as usize, s1.fract());
                let n1 = shape[1];
                counts[i * n1 + j] += w0 * (1.0 - fx) * (1.0 - fy);
                counts[(i + 1) * n1 + j] += w0 * fx * (1.0 - fy);
                counts[i * n1 + j + 1] += w0 * (1.0 - fx) * fy;
                counts[(i + 1) * n1 + j + 1] += w0 * fx * fy;
            }
        }
        let (k, dk) = gaussian_taps(bandwidth, spacing);
        let (rho, grad) = if dim == 1 {
            (
                convolve_axis(&counts, shape, 0, &k),
                [convolve_axis(&counts, shape, 0, &dk), vec![0.0; counts.len()]],
            )
        } else {
            let kx = convolve_axis(&counts, shape, 0, &k);
            let dx = convolve_axis(&counts, shape, 0, &dk);
            (
                convolve_axis(&kx, shape, 1, &k),
                [convolve_axis(&dx, shape, 1, &k), convolve_axis(&kx, shape, 1, &dk)],
            )
        };
        BinnedGrid {
            lo,
            spacing,
            shape,
            rho,
            grad,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_count(&self) -> usize {
        self.n
    }

    /// Density and gradient by direct summation over all samples.
    pub fn eval_direct(&self, x: &Vector) -> (f64, Vector) {
        let h2 = self.bandwidth * self.bandwidth;
        let norm = 1.0 / ((2.0 * PI * h2).powf(self.dim as f64 / 2.0) * self.n as f64);
        let mut rho = 0.0;
        let mut grad = ZERO;
        for s in self.samples.iter() {
            let d = sub(x, s);
            let w = (-0.5 * dot(&d, &d) / h2).exp();
            rho += w;
            grad = add(&grad, &scale(-w / h2, &d));
        }
        (rho * norm, scale(norm, &grad))
    }

    /// Density and gradient at `x`.
    pub fn eval_with_gradient(&self, x: &Vector) -> (f64, Vector) {
        match &self.grid {
            Some(g) => match g.locate(x, self.dim) {
                Some(w) => {
                    let mut grad = ZERO;
                    for a in 0..self.dim {
                        grad[a] = g.interp(&g.grad[a], &w);
                    }
                    (g.interp(&g.rho, &w).max(0.0), grad)
                }
                None => (0.0, ZERO),
            },
            None => self.eval_direct(x),
        }
    }

    pub fn density(&self, x: &Vector) -> f64 {
        self.eval_with_gradient(x).0
    }

    /// `∇ log ρ̂`, or `None` where the estimate is below `floor`.
    pub fn grad_log(&self, x: &Vector, floor: f64) -> Option<Vector> {
        let (rho, grad) = self.eval_with_gradient(x);
        (rho > floor && rho > 0.0).then(|| scale(1.0 / rho, &grad))
    }

    /// Largest density value on the binned grid (direct mode: at the sample mean).
    pub fn peak(&self) -> f64 {
        match &self.grid {
            Some(g) => g.rho.iter().copied().fold(0.0, f64::max),
            None => {
                let n = self.n as f64;
                let mean = self.samples.iter().fold(ZERO, |a, s| add(&a, s));
                self.eval_direct(&scale(1.0 / n, &mean)).0
            }
        }
    }

    /// Total mass on the binned grid.
    pub fn mass(&self) -> f64 {
        match &self.grid {
            Some(g) => g.rho.iter().sum::<f64>() * g.spacing.powi(self.dim as i32),
            None => 1.0,
        }
    }

    /// Per-axis variance of the smoothed estimate: sample variance plus `h²`.
    pub fn variance(&self) -> Vector {
        let n = self.n as f64;
        let mut out = ZERO;
        for a in 0..self.dim {
            let m = self.samples.iter().map(|x| x[a]).sum::<f64>() / n;
            out[a] = self.samples.iter().map(|x| (x[a] - m).powi(2)).sum::<f64>() / n
                + self.bandwidth * self.bandwidth;
        }
        out
    }
}

/// KDE of the ensemble at the recorded step nearest `t`.
pub fn estimate_density(ens: &PathEnsemble, t: f64, bandwidth: Option<f64>) -> Result<DensityEstimate> {
    if !(t > 0.0 && t <= ens.horizon() + 1e-12) {
        return arg(format!("density time {t} outside (0, T]"));
    }
    if let Some(bw) = bandwidth {
        if !(bw > 0.0) {
            return arg("bandwidth must be positive");
        }
    }
    let k = ens.step_at(t);
    DensityEstimate::from_samples(ens.time_of_step(k), ens.slice(k)?, ens.dim(), bandwidth)
}

/// Combination `(fwd + bwd)/2 + μ(fwd − bwd)/2`.
pub trait MuCombine: Sized {
    fn mu_combine(fwd: &Self, bwd: &Self, mu: f64) -> Result<Self>;
}

pub fn d_mu_combine<T: MuCombine>(fwd: &T, bwd: &T, mu: f64) -> Result<T> {
    T::mu_combine(fwd, bwd, mu)
}

/// Weights `(α, β)` with `D_μ = α·D + β·D_*`.
pub fn mu_weights(mu: f64) -> (f64, f64) {
    (0.5 * (1.0 + mu), 0.5 * (1.0 - mu))
}

pub fn mu_combine_vectors(fwd: &Vector, bwd: &Vector, mu: f64) -> Vector {
    let (a, b) = mu_weights(mu);
    add(&scale(a, fwd), &scale(b, bwd))
}

impl MuCombine for Vector {
    fn mu_combine(fwd: &Self, bwd: &Self, mu: f64) -> Result<Self> {
        Ok(mu_combine_vectors(fwd, bwd, mu))
    }
}

impl MuCombine for VectorField {
    fn mu_combine(fwd: &Self, bwd: &Self, mu: f64) -> Result<Self> {
        if fwd.dim() != bwd.dim() {
            return arg("D_mu combination of fields with different dimension");
        }
        if mu == 1.0 {
            return Ok(fwd.clone());
        }
        if mu == -1.0 {
            return Ok(bwd.clone());
        }
        let (a, b) = mu_weights(mu);
        Ok(fwd.scaled(a).plus(&bwd.scaled(b))?.renamed(format!("D_{mu}")))
    }
}

impl MuCombine for DriftEstimate {
    fn mu_combine(fwd: &Self, bwd: &Self, mu: f64) -> Result<Self> {
        if fwd.grid != bwd.grid || (fwd.t - bwd.t).abs() > 1e-12 {
            return arg("D_mu combination needs estimates on the same grid and time");
        }
        let (a, b) = mu_weights(mu);
        let mut points = Vec::new();
        let mut dropped = Vec::new();
        for g in &fwd.grid {
            match (fwd.get(g), bwd.get(g)) {
                (Some(f), Some(k)) => points.push(DriftPoint {
                    x: *g,
                    value: mu_combine_vectors(&f.value, &k.value, mu),
                    stderr: std::array::from_fn(|i| ((a * f.stderr[i]).powi(2) + (b * k.stderr[i]).powi(2)).sqrt()),
                    n_eff: f.n_eff.min(k.n_eff),
                }),
                _ => dropped.push(*g),
            }
        }
        Ok(DriftEstimate {
            t: fwd.t,
            direction: if mu >= 0.0 { Direction::Forward } else { Direction::Backward },
            dim: fwd.dim,
            grid: fwd.grid.clone(),
            points,
            dropped,
        })
    }
}

/// Forward and backward drift fields of a process, where known in closed
/// form. Missing sides are filled from a KDE of the current slice through
/// `b_* = b − σ²∇log ρ`.
#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub forward: Option<VectorField>,
    pub backward: Option<VectorField>,
    pub sigma: f64,
}

impl VelocityModel {
    pub fn from_ensemble(ens: &PathEnsemble) -> Result<Self> {
        match ens.provenance() {
            Provenance::Simulated(spec) if spec.class != ClassTag::LambdaB => {
                let b = spec.drift.clone();
                Ok(Self {
                    backward: (spec.sigma == 0.0).then(|| b.clone()),
                    forward: Some(b),
                    sigma: spec.sigma,
                })
            }
            Provenance::Reversed(inner) => match inner.as_ref() {
                Provenance::Simulated(spec) if spec.class != ClassTag::LambdaB => {
                    let b = spec.drift.time_reversed(true);
                    Ok(Self {
                        forward: (spec.sigma == 0.0).then(|| b.clone()),
                        backward: Some(b),
                        sigma: spec.sigma,
                    })
                }
                _ => arg(format!("no drift model for {}", ens.label())),
            },
            _ => arg(format!("no drift model for {}", ens.label())),
        }
    }

    /// Velocity field `D_μX` when it is known in closed form.
    pub fn field(&self, mu: f64) -> Option<VectorField> {
        match mu {
            m if m == 1.0 => self.forward.clone(),
            m if m == -1.0 => self.backward.clone(),
            _ => match (&self.forward, &self.backward) {
                (Some(f), Some(b)) => VectorField::mu_combine(f, b, mu).ok(),
                _ => None,
            },
        }
    }

    fn needs_density(&self) -> bool {
        self.sigma > 0.0 && (self.forward.is_none() || self.backward.is_none())
    }

    /// Forward and backward drifts at every path of one recorded step.
    pub fn at_step(&self, ens: &PathEnsemble, step: usize, bandwidth: Option<f64>) -> Result<SliceDrifts> {
        let t = ens.time_of_step(step);
        let xs = ens.slice(step)?;
        let kde = if self.needs_density() {
            Some(DensityEstimate::from_samples(t, xs.clone(), ens.dim(), bandwidth)?)
        } else {
            None
        };
        let a = self.sigma * self.sigma;
        let floor = kde.as_ref().map(|k| 1e-4 * k.peak()).unwrap_or(0.0);
        let rows: Vec<(Vector, Vector, bool)> = xs
            .par_iter()
            .map(|x| {
                let (score, ok) = match &kde {
                    Some(k) => match k.grad_log(x, floor) {
                        Some(s) => (s, true),
                        None => (ZERO, false),
                    },
                    None => (ZERO, true),
                };
                let correction = scale(a, &score);
                match (&self.forward, &self.backward) {
                    (Some(f), Some(b)) => (f.eval(t, x), b.eval(t, x), true),
                    (Some(f), None) => {
                        let fv = f.eval(t, x);
                        (fv, sub(&fv, &correction), ok)
                    }
                    (None, Some(b)) => {
                        let bv = b.eval(t, x);
                        (add(&bv, &correction), bv, ok)
                    }
                    (None, None) => ([f64::NAN; MAX_DIM], [f64::NAN; MAX_DIM], false),
                }
            })
            .collect();
        if self.forward.is_none() && self.backward.is_none() {
            return arg("velocity model knows neither drift");
        }
        let mut out = SliceDrifts {
            t,
            states: xs,
            forward: Vec::with_capacity(rows.len()),
            backward: Vec::with_capacity(rows.len()),
            reliable: Vec::with_capacity(rows.len()),
            density: kde,
        };
        for (f, b, ok) in rows {
            out.forward.push(f);
            out.backward.push(b);
            out.reliable.push(ok);
        }
        Ok(out)
    }
}

/// Plug-in drifts at one time slice.
#[derive(Debug, Clone)]
pub struct SliceDrifts {
    pub t: f64,
    pub states: Vec<Vector>,
    pub forward: Vec<Vector>,
    pub backward: Vec<Vector>,
    /// False where the KDE was too thin to trust its log-gradient.
    pub reliable: Vec<bool>,
    pub density: Option<DensityEstimate>,
}

impl SliceDrifts {
    pub fn d_mu(&self, path: usize, mu: f64) -> Vector {
        mu_combine_vectors(&self.forward[path], &self.backward[path], mu)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub x: Vector,
    pub lhs: Vector,
    pub rhs: Vector,
    pub gap: Vector,
    pub stderr: Vector,
    pub n_eff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChainRuleReport {
    pub t: f64,
    pub mu: f64,
    pub rows: Vec<ComparisonRow>,
    pub dropped: Vec<Vector>,
    pub max_gap: f64,
    /// Standard error at the point of largest gap.
    pub stderr: f64,
}

/// Empirical `D_μ f(t, X_t)` against
/// `∂_t f + D_μX·∇f + (μ/2) σ² Δf` at the same states.
pub fn chain_rule_check(
    f: &ScalarField,
    ens: &PathEnsemble,
    model: &VelocityModel,
    t: f64,
    points: &[Vector],
    params: &NelsonParams,
) -> Result<ChainRuleReport> {
    if !f.has_analytic_jet() {
        return arg("chain-rule check needs a field with an analytic jet");
    }
    let (k, lag) = probe_step(ens, t, params, None)?;
    let h = lag as f64 * ens.dt();
    let dt = ens.dt();
    let (t0, tp, tm) = (k as f64 * dt, (k + lag) as f64 * dt, (k - lag) as f64 * dt);
    let drifts = model.at_step(ens, k, params.bandwidth)?;
    let (sp, s0, sm) = (ens.slot(k + lag)?, ens.slot(k)?, ens.slot(k - lag)?);
    let mu = params.mu;
    let a = model.sigma * model.sigma;
    // A plug-in drift in the control variate would bias the lhs toward the rhs.
    let correct_f = params.martingale_correction && model.forward.is_some();
    let correct_b = params.martingale_correction && model.backward.is_some();
    let rows: Vec<(Vector, Vector)> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let (xp, x0, xm) = (ens.state(p, sp), ens.state(p, s0), ens.state(p, sm));
            let j = f.jet(t0, &x0, DEFAULT_STEP);
            let (bf, bb) = (drifts.forward[p], drifts.backward[p]);
            let mut qf = (f.eval(tp, &xp) - j.value) / h;
            let mut qb = (j.value - f.eval(tm, &xm)) / h;
            if correct_f {
                qf -= dot(&j.gradient, &sub(&sub(&xp, &x0), &scale(h, &bf))) / h;
            }
            if correct_b {
                qb -= dot(&j.gradient, &sub(&sub(&x0, &xm), &scale(h, &bb))) / h;
            }
            let (wa, wb) = mu_weights(mu);
            let lhs = wa * qf + wb * qb;
            let v = mu_combine_vectors(&bf, &bb, mu);
            let rhs = j.dt + dot(&v, &j.gradient) + 0.5 * mu * a * j.laplacian;
            ([lhs, 0.0, 0.0], [rhs, 0.0, 0.0])
        })
        .collect();
    compare_by_regression(ens, k, points, params, t0, mu, rows)
}

fn compare_by_regression(
    ens: &PathEnsemble,
    k: usize,
    points: &[Vector],
    params: &NelsonParams,
    t: f64,
    mu: f64,
    rows: Vec<(Vector, Vector)>,
) -> Result<ChainRuleReport> {
    let xs = ens.slice(k)?;
    let bw = bandwidth_for(params, &xs, ens.dim())?;
    let lhs: Vec<Vector> = rows.iter().map(|r| r.0).collect();
    let rhs: Vec<Vector> = rows.iter().map(|r| r.1).collect();
    let gap: Vec<Vector> = rows.iter().map(|r| sub(&r.0, &r.1)).collect();
    let fl = kernel_regression(&xs, &lhs, points, bw, params.n_min);
    let fr = kernel_regression(&xs, &rhs, points, bw, params.n_min);
    let fg = kernel_regression(&xs, &gap, points, bw, params.n_min);
    let mut out = Vec::new();
    let mut dropped = Vec::new();
    for (((g, l), r), d) in points.iter().zip(fl).zip(fr).zip(fg) {
        match (l, r, d) {
            (Some(l), Some(r), Some(d)) => out.push(ComparisonRow {
                x: *g,
                lhs: l.value,
                rhs: r.value,
                gap: d.value,
                stderr: d.stderr,
                n_eff: d.n_eff,
            }),
            _ => dropped.push(*g),
        }
    }
    let (max_gap, stderr) = out
        .iter()
        .map(|r| (crate::fields::norm(&r.gap), crate::fields::norm(&r.stderr)))
        .fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a });
    Ok(ChainRuleReport {
        t,
        mu,
        rows: out,
        dropped,
        max_gap,
        stderr,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProductRuleRow {
    pub t: f64,
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: f64,
    pub rhs_stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProductRuleReport {
    pub mu: f64,
    pub rows: Vec<ProductRuleRow>,
    pub max_gap: f64,
    /// Combined standard error at the row of largest gap.
    pub stderr: f64,
}

/// `E[D_μX·Y + X·D_{−μ}Y]` against `d/dt E[X·Y]` (centered difference with
/// half-width `delta`). Paths of the two ensembles are paired by index.
pub fn product_rule_check(
    ens_x: &PathEnsemble,
    model_x: &VelocityModel,
    ens_y: &PathEnsemble,
    model_y: &VelocityModel,
    mu: f64,
    t_grid: &[f64],
    delta: f64,
    bandwidth: Option<f64>,
) -> Result<ProductRuleReport> {
    if ens_x.n_paths() != ens_y.n_paths()
        || ens_x.n_steps() != ens_y.n_steps()
        || ens_x.dt().to_bits() != ens_y.dt().to_bits()
        || ens_x.dim() != ens_y.dim()
    {
        return arg("product rule needs ensembles on the same grid with the same path count");
    }
    let dt = ens_x.dt();
    let lag = ((delta / dt).round() as usize).max(1);
    let mut rows = Vec::new();
    for &t in t_grid {
        let k = ens_x.step_at(t);
        if k < lag || k + lag > ens_x.n_steps() {
            return arg(format!("product-rule time {t} too close to the boundary"));
        }
        let dx = model_x.at_step(ens_x, k, bandwidth)?;
        let dy = model_y.at_step(ens_y, k, bandwidth)?;
        let lhs: Vec<f64> = (0..ens_x.n_paths())
            .map(|p| dot(&dx.d_mu(p, mu), &dy.states[p]) + dot(&dx.states[p], &dy.d_mu(p, -mu)))
            .collect();
        let (sp, sm) = (ens_x.slot(k + lag)?, ens_x.slot(k - lag)?);
        let (yp, ym) = (ens_y.slot(k + lag)?, ens_y.slot(k - lag)?);
        let width = 2.0 * lag as f64 * dt;
        let rhs: Vec<f64> = (0..ens_x.n_paths())
            .map(|p| {
                (dot(&ens_x.state(p, sp), &ens_y.state(p, yp)) - dot(&ens_x.state(p, sm), &ens_y.state(p, ym))) / width
            })
            .collect();
        let (l, ls) = mean_se(&lhs);
        let (r, rs) = mean_se(&rhs);
        rows.push(ProductRuleRow {
            t: k as f64 * dt,
            lhs: l,
            lhs_stderr: ls,
            rhs: r,
            rhs_stderr: rs,
        });
    }
    let (max_gap, stderr) = rows
        .iter()
        .map(|r| ((r.lhs - r.rhs).abs(), (r.lhs_stderr.powi(2) + r.rhs_stderr.powi(2)).sqrt()))
        .fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a });
    Ok(ProductRuleReport {
        mu,
        rows,
        max_gap,
        stderr,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReversalReport {
    pub t: f64,
    /// Forward drift of the reversed ensemble at `t`, from difference
    /// quotients (lhs), against `−b_*(T − t, x)` with `b_* = b − σ²∇log ρ̂`
    /// from the original ensemble's known drift and density (rhs).
    pub rows: Vec<ComparisonRow>,
    pub dropped: Vec<Vector>,
    pub max_gap: f64,
    pub max_ratio: f64,
}

/// Checks `D X̄ = φ(b_*)` on a grid of states. The two sides use disjoint
/// information: path increments of the reversed ensemble on the left, the
/// closed-form drift and a density estimate on the right. Both are smoothed
/// with the same kernel so smoothing bias cancels.
pub fn reversal_identity_check(
    ens: &PathEnsemble,
    t: f64,
    points: &[Vector],
    params: &NelsonParams,
) -> Result<ReversalReport> {
    let model = VelocityModel::from_ensemble(ens)?;
    if model.forward.is_none() {
        return arg("reversal check needs an ensemble with a known forward drift");
    }
    let rev = reverse_ensemble(ens);
    let lhs = estimate_drift(&rev, t, points, params, Direction::Forward)?;
    let k = ens.n_steps() - rev.step_at(t);
    let drifts = model.at_step(ens, k, params.bandwidth)?;
    let (xs, phi): (Vec<Vector>, Vec<Vector>) = drifts
        .states
        .iter()
        .zip(&drifts.backward)
        .zip(&drifts.reliable)
        .filter(|(_, ok)| **ok)
        .map(|((x, b), _)| (*x, scale(-1.0, b)))
        .unzip();
    let bw = bandwidth_for(params, &drifts.states, ens.dim())?;
    let rhs = kernel_regression(&xs, &phi, points, bw, params.n_min);
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for (g, r) in points.iter().zip(rhs) {
        match (lhs.get(g), r) {
            (Some(l), Some(r)) => rows.push(ComparisonRow {
                x: *g,
                lhs: l.value,
                rhs: r.value,
                gap: sub(&l.value, &r.value),
                stderr: std::array::from_fn(|i| (l.stderr[i].powi(2) + r.stderr[i].powi(2)).sqrt()),
                n_eff: l.n_eff.min(r.n_eff),
            }),
            _ => dropped.push(*g),
        }
    }
    let max_gap = rows.iter().map(|r| crate::fields::norm(&r.gap)).fold(0.0, f64::max);
    let max_ratio = rows
        .iter()
        .map(|r| crate::fields::norm(&r.gap) / crate::fields::norm(&r.stderr).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(ReversalReport {
        t: lhs.t,
        rows,
        dropped,
        max_gap,
        max_ratio,
    })
}

/// Evenly spaced 1-D grid.
pub fn line_grid(lo: f64, hi: f64, n: usize) -> Vec<Vector> {
    (0..n)
        .map(|i| {
            let x = if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
            [x, 0.0, 0.0]
        })
        .collect()
}

/// Tensor grid `n × n` on `[lo, hi]²`.
pub fn square_grid(lo: [f64; 2], hi: [f64; 2], n: usize) -> Vec<Vector> {
    let step = |a: usize, i: usize| if n == 1 { lo[a] } else { lo[a] + (hi[a] - lo[a]) * i as f64 / (n - 1) as f64 };
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push([step(0, i), step(1, j), 0.0]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{norm, ScalarJet};
    use crate::paths::{simulate, DiffusionSpec, InitialLaw, Recording};

    fn ou_spec() -> DiffusionSpec {
        let b = VectorField::new("ou", 1, 1.0, |_, x| [-x[0], 0.0, 0.0])
            .with_jet(|_, x| crate::fields::VectorJet {
                value: [-x[0], 0.0, 0.0],
                jacobian: [[-1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]],
                divergence: -1.0,
                ..Default::default()
            });
        DiffusionSpec::new(b, 1.0, InitialLaw::Gaussian { mean: vec![0.0], var: vec![0.5] }, 1.0).unwrap()
    }

    fn bm_spec(start: InitialLaw) -> DiffusionSpec {
        DiffusionSpec::new(VectorField::zero(1, 1.0), 1.0, start, 1.0).unwrap()
    }

    fn around(t: f64, dt: f64, lags: &[usize]) -> Vec<usize> {
        let k = (t / dt).round() as usize;
        let mut v = vec![k];
        for &l in lags {
            v.push(k + l);
            v.push(k - l);
        }
        v
    }

    fn grid5() -> Vec<Vector> {
        line_grid(-1.0, 1.0, 5)
    }

    #[test]
    fn ou_forward_and_backward_drifts() {
        let n = 100_000;
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &[4]));
        let ens = simulate(&ou_spec(), n, 1e-3, 21, &rec).unwrap();
        let params = NelsonParams::for_ensemble(&ens).with_bandwidth(0.15);
        let fwd = estimate_drift(&ens, 0.5, &grid5(), &params, Direction::Forward).unwrap();
        let bwd = estimate_drift(&ens, 0.5, &grid5(), &params, Direction::Backward).unwrap();
        assert_eq!(fwd.points.len(), 5);
        for p in &fwd.points {
            assert!((p.value[0] + p.x[0]).abs() <= 3.0 * p.stderr[0] + 0.05, "{p:?}");
        }
        for p in &bwd.points {
            assert!((p.value[0] - p.x[0]).abs() <= 3.0 * p.stderr[0] + 0.05, "{p:?}");
        }
        let current = d_mu_combine(&fwd, &bwd, 0.0).unwrap();
        for p in &current.points {
            assert!(p.value[0].abs() <= 3.0 * p.stderr[0] + 0.05, "{p:?}");
        }
    }

    #[test]
    fn brownian_forward_drift_vanishes() {
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &[4]));
        let ens = simulate(&bm_spec(InitialLaw::Point { x: vec![0.0] }), 50_000, 1e-3, 5, &rec).unwrap();
        let params = NelsonParams::for_ensemble(&ens).with_bandwidth(0.2);
        let est = estimate_drift(&ens, 0.5, &grid5(), &params, Direction::Forward).unwrap();
        for p in &est.points {
            assert!(p.value[0].abs() <= 3.5 * p.stderr[0], "{p:?}");
        }
    }

    #[test]
    fn sparse_points_are_dropped_not_invented() {
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &[4]));
        let ens = simulate(&ou_spec(), 2_000, 1e-3, 5, &rec).unwrap();
        let params = NelsonParams::for_ensemble(&ens).with_bandwidth(0.05);
        let est = estimate_drift(&ens, 0.5, &[[0.0, 0.0, 0.0], [8.0, 0.0, 0.0]], &params, Direction::Forward).unwrap();
        assert_eq!(est.points.len(), 1);
        assert_eq!(est.dropped, vec![[8.0, 0.0, 0.0]]);
    }

    #[test]
    fn probe_times_inside_the_buffer_are_rejected() {
        let ens = simulate(&ou_spec(), 100, 1e-2, 5, &Recording::All).unwrap();
        let params = NelsonParams::for_ensemble(&ens);
        assert!(estimate_drift(&ens, 0.01, &grid5(), &params, Direction::Backward).is_err());
        assert!(estimate_drift(&ens, 0.99, &grid5(), &params, Direction::Forward).is_err());
    }

    #[test]
    fn params_are_validated() {
        let p = NelsonParams::for_grid(0.01, 1.0);
        assert!(p.with_h(0.001).validate(0.01).is_err());
        assert!(p.with_mu(0.5).validate(0.01).is_err());
        assert!(p.with_t_buffer(0.01).with_h(0.05).validate(0.01).is_err());
        assert!(p.validate(0.01).is_ok());
    }

    fn gaussian_density(var: f64) -> ScalarField {
        ScalarField::new("gauss", 1, 1.0, move |_, x| (-0.5 * x[0] * x[0] / var).exp() / (2.0 * PI * var).sqrt())
            .with_jet(move |_, x| {
                let v = (-0.5 * x[0] * x[0] / var).exp() / (2.0 * PI * var).sqrt();
                ScalarJet {
                    value: v,
                    dt: 0.0,
                    gradient: [-x[0] / var * v, 0.0, 0.0],
                    laplacian: (x[0] * x[0] / (var * var) - 1.0 / var) * v,
                }
            })
    }

    #[test]
    fn closed_form_backward_drift_examples() {
        let ou_b = ou_spec().drift;
        let bstar = closed_form_backward_drift(&ou_b, 1.0, &gaussian_density(0.5));
        for x in [-1.0, 0.3, 2.0] {
            assert!((bstar.eval(0.5, &[x, 0.0, 0.0])[0] - x).abs() < 1e-12);
        }
        // Brownian motion from 0 at t = 0.4: b_* = x/t.
        let bm = closed_form_backward_drift(&VectorField::zero(1, 1.0), 1.0, &gaussian_density(0.4));
        assert!((bm.eval(0.4, &[0.8, 0.0, 0.0])[0] - 2.0).abs() < 1e-12);
        // σ = 0 leaves the drift untouched.
        let same = closed_form_backward_drift(&ou_b, 0.0, &gaussian_density(0.5));
        assert_eq!(same.eval(0.1, &[0.7, 0.0, 0.0]), ou_b.eval(0.1, &[0.7, 0.0, 0.0]));
    }

    #[test]
    fn backward_drift_rejects_zero_density() {
        let rho = ScalarField::new("zero", 1, 1.0, |_, _| 0.0);
        let err = backward_drift_at(&VectorField::zero(1, 1.0), 1.0, &rho, &SpaceTimePoint::new(0.5, &[1.0]));
        assert!(matches!(err, Err(LabError::NonPositiveDensity { .. })));
    }

    #[test]
    fn kde_of_brownian_motion_at_one() {
        let ens = simulate(&bm_spec(InitialLaw::Point { x: vec![0.0] }), 100_000, 1e-2, 3, &Recording::strided(50, 100, &[])).unwrap();
        let kde = estimate_density(&ens, 1.0, None).unwrap();
        let target = 1.0 / (2.0 * PI).sqrt();
        assert!((kde.density(&ZERO) - target).abs() < 0.05 * target);
        assert!((kde.eval_direct(&ZERO).0 - kde.density(&ZERO)).abs() < 2e-3);
        assert!((kde.mass() - 1.0).abs() < 0.02);
        let g = kde.grad_log(&[1.0, 0.0, 0.0], 0.0).unwrap();
        assert!((g[0] + 1.0).abs() < 0.1, "{g:?}");
    }

    #[test]
    fn kde_of_stationary_ou_has_variance_one_half() {
        let ens = simulate(&ou_spec(), 50_000, 1e-2, 3, &Recording::strided(50, 100, &[])).unwrap();
        let kde = estimate_density(&ens, 0.5, None).unwrap();
        assert!((kde.variance()[0] - 0.5).abs() < 0.025);
    }

    #[test]
    fn kde_rejects_point_mass() {
        let spec = DiffusionSpec::new(VectorField::zero(1, 1.0), 0.0, InitialLaw::Point { x: vec![0.0] }, 1.0).unwrap();
        let ens = simulate(&spec, 100, 0.1, 1, &Recording::All).unwrap();
        assert!(matches!(estimate_density(&ens, 0.5, None), Err(LabError::Degenerate(_))));
    }

    #[test]
    fn binned_kde_matches_direct_sum_in_two_dimensions() {
        let spec = DiffusionSpec::new(
            VectorField::zero(2, 1.0),
            1.0,
            InitialLaw::Gaussian { mean: vec![1.0, -1.0], var: vec![0.5, 0.2] },
            1.0,
        )
        .unwrap();
        let ens = simulate(&spec, 5_000, 0.1, 3, &Recording::All).unwrap();
        let kde = estimate_density(&ens, 0.5, None).unwrap();
        for x in [[1.0, -1.0, 0.0], [0.2, 0.0, 0.0], [2.0, -2.5, 0.0]] {
            let (r1, g1) = kde.eval_with_gradient(&x);
            let (r2, g2) = kde.eval_direct(&x);
            assert!((r1 - r2).abs() < 0.01 * r2.max(1e-3), "{r1} {r2}");
            assert!(norm(&sub(&g1, &g2)) < 0.02 * (norm(&g2) + 0.05), "{g1:?} {g2:?}");
        }
        assert!((kde.mass() - 1.0).abs() < 0.02);
    }

    #[test]
    fn mu_combination_selects_and_averages() {
        let f = [1.0, 2.0, 0.0];
        let b = [-3.0, 0.5, 0.0];
        assert_eq!(<Vector as MuCombine>::mu_combine(&f, &b, 1.0).unwrap(), f);
        assert_eq!(<Vector as MuCombine>::mu_combine(&f, &b, -1.0).unwrap(), b);
        assert_eq!(<Vector as MuCombine>::mu_combine(&f, &b, 0.0).unwrap(), [-1.0, 1.25, 0.0]);
    }

    #[test]
    fn mu_combination_rejects_mismatched_grids() {
        let mk = |grid: Vec<Vector>| DriftEstimate {
            t: 0.5,
            direction: Direction::Forward,
            dim: 1,
            grid,
            points: vec![],
            dropped: vec![],
        };
        assert!(d_mu_combine(&mk(grid5()), &mk(line_grid(0.0, 1.0, 3)), 0.0).is_err());
    }

    #[test]
    fn brownian_square_chain_rule_forward() {
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &[4]));
        let ens = simulate(&bm_spec(InitialLaw::Point { x: vec![0.0] }), 100_000, 1e-3, 13, &rec).unwrap();
        let f = ScalarField::new("x2", 1, 1.0, |_, x| x[0] * x[0]).with_jet(|_, x| ScalarJet {
            value: x[0] * x[0],
            dt: 0.0,
            gradient: [2.0 * x[0], 0.0, 0.0],
            laplacian: 2.0,
        });
        let model = VelocityModel::from_ensemble(&ens).unwrap();
        let params = NelsonParams::for_ensemble(&ens).with_bandwidth(0.25);
        let rep = chain_rule_check(&f, &ens, &model, 0.5, &grid5(), &params).unwrap();
        for r in &rep.rows {
            assert!((r.lhs[0] - 1.0).abs() < 4.0 * r.stderr[0] + 0.01, "{r:?}");
            assert!((r.rhs[0] - 1.0).abs() < 1e-12);
        }
        let back = chain_rule_check(&f, &ens, &model, 0.5, &grid5(), &params.with_mu(-1.0)).unwrap();
        for r in &back.rows {
            // 2x²/t − 1 smoothed by the regression kernel: X_t ~ N(0, t), kernel width s.
            let (v, s2) = (0.5, 0.25f64 * 0.25);
            let m2 = (r.x[0] * v / (v + s2)).powi(2) + v * s2 / (v + s2);
            let smoothed = 2.0 * m2 / 0.5 - 1.0;
            let (l, se) = (r.lhs[0], r.stderr[0]);
            assert!((l - smoothed).abs() < 4.0 * se + 0.05, "{r:?} {smoothed}");
        }
    }

    #[test]
    fn chain_rule_needs_analytic_jet() {
        let ens = simulate(&ou_spec(), 100, 1e-2, 5, &Recording::All).unwrap();
        let f = ScalarField::new("x", 1, 1.0, |_, x| x[0]);
        let model = VelocityModel::from_ensemble(&ens).unwrap();
        let params = NelsonParams::for_ensemble(&ens);
        assert!(chain_rule_check(&f, &ens, &model, 0.5, &grid5(), &params).is_err());
    }

    #[test]
    fn linear_chain_rule_on_deterministic_flow() {
        let u = VectorField::new("rot", 2, 1.0, |_, x| [-x[1], x[0], 0.0]);
        let spec = DiffusionSpec::new(u, 0.0, InitialLaw::Gaussian { mean: vec![1.0, 0.0], var: vec![0.1, 0.1] }, 1.0).unwrap();
        let ens = simulate(&spec, 2_000, 1e-3, 1, &Recording::strided(100, 1000, &around(0.5, 1e-3, &[4]))).unwrap();
        let f = ScalarField::new("lin", 2, 1.0, |t, x| x[0] + 2.0 * x[1] + t).with_jet(|t, x| ScalarJet {
            value: x[0] + 2.0 * x[1] + t,
            dt: 1.0,
            gradient: [1.0, 2.0, 0.0],
            laplacian: 0.0,
        });
        let model = VelocityModel::from_ensemble(&ens).unwrap();
        let mut params = NelsonParams::for_ensemble(&ens).with_bandwidth(0.2);
        params.martingale_correction = false;
        for mu in [-1.0, 0.0, 1.0] {
            let rep = chain_rule_check(&f, &ens, &model, 0.5, &square_grid([0.5, 0.0], [1.0, 0.6], 3), &params.with_mu(mu)).unwrap();
            assert!(rep.max_gap < 0.02, "{}", rep.max_gap);
        }
    }

    #[test]
    fn product_rule_for_brownian_motion() {
        let lags = [4usize, 100];
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &lags));
        let ens = simulate(&bm_spec(InitialLaw::Point { x: vec![0.0] }), 100_000, 1e-3, 17, &rec).unwrap();
        let model = VelocityModel::from_ensemble(&ens).unwrap();
        let rep = product_rule_check(&ens, &model, &ens, &model, 1.0, &[0.5], 0.1, None).unwrap();
        let row = &rep.rows[0];
        assert!((row.lhs - 1.0).abs() < 0.03, "{row:?}");
        assert!((row.rhs - 1.0).abs() < 0.03, "{row:?}");
    }

    #[test]
    fn product_rule_with_constant_process() {
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &[100]));
        let c = DiffusionSpec::new(VectorField::zero(1, 1.0), 0.0, InitialLaw::Point { x: vec![2.0] }, 1.0).unwrap();
        let ens_c = simulate(&c, 50_000, 1e-3, 1, &rec).unwrap();
        let ens_y = simulate(&ou_spec(), 50_000, 1e-3, 2, &rec).unwrap();
        let (mc, my) = (VelocityModel::from_ensemble(&ens_c).unwrap(), VelocityModel::from_ensemble(&ens_y).unwrap());
        for mu in [-1.0, 0.0, 1.0] {
            let rep = product_rule_check(&ens_c, &mc, &ens_y, &my, mu, &[0.5], 0.1, None).unwrap();
            assert!(rep.max_gap <= 3.0 * rep.stderr + 0.01, "{rep:?}");
        }
    }

    #[test]
    fn product_rule_for_stationary_ou_current_velocity() {
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &[100]));
        let ens = simulate(&ou_spec(), 100_000, 1e-3, 4, &rec).unwrap();
        let model = VelocityModel::from_ensemble(&ens).unwrap();
        let rep = product_rule_check(&ens, &model, &ens, &model, 0.0, &[0.5], 0.1, None).unwrap();
        let row = &rep.rows[0];
        assert!(row.lhs.abs() < 0.03 && row.rhs.abs() < 4.0 * row.rhs_stderr + 0.01, "{row:?}");
    }

    #[test]
    fn product_rule_rejects_mismatched_grids() {
        let a = simulate(&ou_spec(), 10, 1e-2, 1, &Recording::All).unwrap();
        let b = simulate(&ou_spec(), 11, 1e-2, 1, &Recording::All).unwrap();
        let m = VelocityModel::from_ensemble(&a).unwrap();
        assert!(product_rule_check(&a, &m, &b, &m, 1.0, &[0.5], 0.1, None).is_err());
    }

    #[test]
    fn reversal_identity_on_stationary_ou() {
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &[4]));
        let ens = simulate(&ou_spec(), 50_000, 1e-3, 31, &rec).unwrap();
        let params = NelsonParams::for_ensemble(&ens).with_bandwidth(0.15);
        let rep = reversal_identity_check(&ens, 0.5, &grid5(), &params).unwrap();
        assert!(rep.max_ratio <= 3.0, "{rep:?}");
        for r in &rep.rows {
            assert!((r.lhs[0] + r.x[0]).abs() < 3.0 * r.stderr[0] + 0.05, "{r:?}");
        }
    }

    #[test]
    fn reversed_brownian_motion_with_gaussian_start() {
        // X_0 ~ N(0,1): b_*(s, x) = x/(1+s), so D X̄_t = −x/(1 + T − t).
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &[4]));
        let ens = simulate(&bm_spec(InitialLaw::Gaussian { mean: vec![0.0], var: vec![1.0] }), 100_000, 1e-3, 8, &rec).unwrap();
        let rev = reverse_ensemble(&ens);
        let params = NelsonParams::for_ensemble(&ens).with_bandwidth(0.2);
        let t = 0.5;
        let est = estimate_drift_gap(&rev, t, &grid5(), &params, Direction::Forward, |x| [-x[0] / (1.0 + 1.0 - t), 0.0, 0.0])
            .unwrap();
        for p in &est.points {
            assert!(p.value[0].abs() <= 3.5 * p.stderr[0] + 0.01, "{p:?}");
        }
        let model = VelocityModel::from_ensemble(&rev).unwrap();
        assert!(model.forward.is_none() && model.backward.is_some());
    }

    #[test]
    fn reversed_deterministic_flow_has_negated_drift() {
        let u = VectorField::new("rot", 2, 1.0, |_, x| [-x[1], x[0], 0.0]);
        let spec = DiffusionSpec::new(u.clone(), 0.0, InitialLaw::Gaussian { mean: vec![1.0, 0.0], var: vec![0.1, 0.1] }, 1.0).unwrap();
        let rec = Recording::strided(100, 1000, &around(0.5, 1e-3, &[4]));
        let ens = simulate(&spec, 5_000, 1e-3, 1, &rec).unwrap();
        let rev = reverse_ensemble(&ens);
        let params = NelsonParams::for_ensemble(&ens).with_bandwidth(0.1);
        let grid = square_grid([0.2, 0.6], [0.8, 1.0], 3);
        let est = estimate_drift_gap(&rev, 0.5, &grid, &params, Direction::Forward, |x| scale(-1.0, &u.eval(0.5, x))).unwrap();
        for p in &est.points {
            assert!(norm(&p.value) < 0.01, "{p:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn d_mu_is_linear(f0 in -5.0..5.0f64, f1 in -5.0..5.0f64, b0 in -5.0..5.0f64, b1 in -5.0..5.0f64, mu in prop::sample::select(vec![-1.0, 0.0, 1.0])) {
                let (f, b) = ([f0, f1, 0.0], [b0, b1, 0.0]);
                let plus = mu_combine_vectors(&f, &b, mu);
                let minus = mu_combine_vectors(&f, &b, -mu);
                let zero = mu_combine_vectors(&f, &b, 0.0);
                for i in 0..2 {
                    prop_assert!((plus[i] + minus[i] - 2.0 * zero[i]).abs() < 1e-12);
                }
                let doubled = mu_combine_vectors(&scale(2.0, &f), &scale(2.0, &b), mu);
                for i in 0..2 {
                    prop_assert!((doubled[i] - 2.0 * plus[i]).abs() < 1e-12);
                }
            }
        }
    }
}

//! Explicit finite-difference Fokker–Planck solver on a 2-D box, used as an
//! independent oracle for Monte Carlo densities.
//!
//! `∂_t ρ = −∇·(ρb) + κΔρ` with centered differences in flux form, forward
//! Euler in time and `ρ = 0` on the box boundary.

use std::sync::Arc;

use crate::error::{arg, Result};
use crate::fields::{ScalarField, Vector, VectorField};

#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    pub t: f64,
    pub lo: [f64; 2],
    pub dx: f64,
    pub n: [usize; 2],
    pub values: Vec<f64>,
}

impl GridDensity {
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n[1] + j
    }

    pub fn node(&self, i: usize, j: usize) -> Vector {
        [self.lo[0] + i as f64 * self.dx, self.lo[1] + j as f64 * self.dx, 0.0]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.idx(i, j)]
    }

    /// Bilinear interpolation; zero outside the box.
    pub fn eval(&self, x: &Vector) -> f64 {
        let s = [(x[0] - self.lo[0]) / self.dx, (x[1] - self.lo[1]) / self.dx];
        if s.iter().zip(self.n).any(|(&s, n)| !(s >= 0.0) || s > (n - 1) as f64) {
            return 0.0;
        }
        let i = (s[0].floor() as usize).min(self.n[0] - 2);
        let j = (s[1].floor() as usize).min(self.n[1] - 2);
        let (fx, fy) = (s[0] - i as f64, s[1] - j as f64);
        (1.0 - fx) * (1.0 - fy) * self.at(i, j)
            + fx * (1.0 - fy) * self.at(i + 1, j)
            + (1.0 - fx) * fy * self.at(i, j + 1)
            + fx * fy * self.at(i + 1, j + 1)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx * self.dx
    }

    /// Nodes inside `[lo, hi]²`.
    pub fn nodes_in(&self, lo: [f64; 2], hi: [f64; 2]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n[0] {
            for j in 0..self.n[1] {
                let x = self.node(i, j);
                if x[0] >= lo[0] && x[0] <= hi[0] && x[1] >= lo[1] && x[1] <= hi[1] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// `∫_box |ρ − f|` by the nodal rule.
    pub fn l1_distance(&self, f: impl Fn(&Vector) -> f64, lo: [f64; 2], hi: [f64; 2]) -> f64 {
        self.nodes_in(lo, hi)
            .iter()
            .map(|&(i, j)| (self.at(i, j) - f(&self.node(i, j))).abs())
            .sum::<f64>()
            * self.dx
            * self.dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpGrid {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub dx: f64,
}

/// Snapshots of the solution at each requested time (ascending, in `(0, T]`).
pub fn solve_fokker_planck(
    drift: &VectorField,
    kappa: f64,
    initial: impl Fn(&Vector) -> f64,
    grid: FpGrid,
    times: &[f64],
) -> Result<Vec<GridDensity>> {
    if drift.dim() != 2 {
        return arg("the grid solver is two-dimensional");
    }
    if !(kappa > 0.0) {
        return arg("the explicit centered scheme needs kappa > 0");
    }
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|&t| t <= 0.0) {
        return arg("snapshot times must be positive and increasing");
    }
    let dx = grid.dx;
    let n = [
        ((grid.hi[0] - grid.lo[0]) / dx).round() as usize + 1,
        ((grid.hi[1] - grid.lo[1]) / dx).round() as usize + 1,
    ];
    if n[0] < 5 || n[1] < 5 {
        return arg("grid too coarse");
    }
    let node = |i: usize, j: usize| -> Vector { [grid.lo[0] + i as f64 * dx, grid.lo[1] + j as f64 * dx, 0.0] };
    let mut rho = vec![0.0; n[0] * n[1]];
    for i in 1..n[0] - 1 {
        for j in 1..n[1] - 1 {
            rho[i * n[1] + j] = initial(&node(i, j));
        }
    }
    // Speed bound from a sweep at t = 0 and the last time.
    let t_end = *times.last().unwrap_or(&0.0);
    let mut umax: f64 = 0.0;
    for &t in &[0.0, t_end] {
        for i in 0..n[0] {
            for j in 0..n[1] {
                let u = drift.eval(t, &node(i, j));
                umax = umax.max(u[0].abs()).max(u[1].abs());
            }
        }
    }
    if umax * dx / kappa > 2.0 {
        return arg(format!("cell Peclet number {:.3} exceeds 2; refine dx", umax * dx / kappa));
    }
    let mut dt = 0.2 * dx * dx / kappa;
    if umax > 0.0 {
        dt = dt.min(0.5 * dx / umax).min(kappa / (umax * umax));
    }
    let mut out = Vec::with_capacity(times.len());
    let mut t = 0.0;
    let mut flux = [vec![0.0; rho.len()], vec![0.0; rho.len()]];
    let mut next = rho.clone();
    for &target in times {
        let span = target - t;
        let steps = (span / dt).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        for _ in 0..steps {
            for i in 0..n[0] {
                for j in 0..n[1] {
                    let u = drift.eval(t, &node(i, j));
                    let r = rho[i * n[1] + j];
                    flux[0][i * n[1] + j] = r * u[0];
                    flux[1][i * n[1] + j] = r * u[1];
                }
            }
            for i in 1..n[0] - 1 {
                for j in 1..n[1] - 1 {
                    let c = i * n[1] + j;
                    let div = (flux[0][c + n[1]] - flux[0][c - n[1]] + flux[1][c + 1] - flux[1][c - 1]) / (2.0 * dx);
                    let lap = (rho[c + n[1]] + rho[c - n[1]] + rho[c + 1] + rho[c - 1] - 4.0 * rho[c]) / (dx * dx);
                    next[c] = rho[c] + h * (kappa * lap - div);
                }
            }
            std::mem::swap(&mut rho, &mut next);
            t += h;
        }
        t = target;
        out.push(GridDensity {
            t,
            lo: grid.lo,
            dx,
            n,
            values: rho.clone(),
        });
    }
    Ok(out)
}

/// Space-time field interpolating snapshots: bilinear in space, linear in time.
pub fn snapshots_as_field(snapshots: Vec<GridDensity>, horizon: f64) -> ScalarField {
    let snaps = Arc::new(snapshots);
    ScalarField::new("fokker_planck_grid", 2, horizon, move |t, x| {
        let s = &snaps;
        if t <= s[0].t {
            return s[0].eval(x);
        }
        for w in s.windows(2) {
            if t <= w[1].t {
                let a = (t - w[0].t) / (w[1].t - w[0].t);
                return (1.0 - a) * w[0].eval(x) + a * w[1].eval(x);
            }
        }
        s[s.len() - 1].eval(x)
    })
}

pub fn gaussian_density(mean: [f64; 2], var: [f64; 2]) -> impl Fn(&Vector) -> f64 + Clone {
    move |x: &Vector| {
        let mut v = 1.0;
        for a in 0..2 {
            v *= (-0.5 * (x[a] - mean[a]).powi(2) / var[a]).exp() / (2.0 * std::f64::consts::PI * var[a]).sqrt();
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_diffusion_matches_heat_kernel() {
        let kappa = 0.1;
        let grid = FpGrid { lo: [-4.0, -4.0], hi: [4.0, 4.0], dx: 0.05 };
        let snaps = solve_fokker_planck(&VectorField::zero(2, 1.0), kappa, gaussian_density([0.0, 0.0], [0.5, 0.5]), grid, &[0.5, 1.0]).unwrap();
        for s in &snaps {
            let v = 0.5 + 2.0 * kappa * s.t;
            let l1 = s.l1_distance(gaussian_density([0.0, 0.0], [v, v]), [-3.0, -3.0], [3.0, 3.0]);
            assert!(l1 < 2e-3, "{l1}");
            assert!((s.mass() - 1.0).abs() < 2e-3);
        }
    }

    #[test]
    fn constant_drift_translates_the_density() {
        let kappa = 0.1;
        let grid = FpGrid { lo: [-4.0, -4.0], hi: [5.0, 4.0], dx: 0.05 };
        let snaps = solve_fokker_planck(&VectorField::constant(&[1.0, 0.0], 1.0), kappa, gaussian_density([0.0, 0.0], [0.5, 0.5]), grid, &[1.0]).unwrap();
        let v = 0.5 + 2.0 * kappa;
        let l1 = snaps[0].l1_distance(gaussian_density([1.0, 0.0], [v, v]), [-3.0, -3.0], [4.0, 3.0]);
        assert!(l1 < 5e-3, "{l1}");
    }

    #[test]
    fn rejects_unstable_settings() {
        let grid = FpGrid { lo: [-4.0, -4.0], hi: [4.0, 4.0], dx: 0.5 };
        assert!(solve_fokker_planck(&VectorField::constant(&[1.0, 0.0], 1.0), 0.1, gaussian_density([0.0, 0.0], [0.5, 0.5]), grid, &[1.0]).is_err());
        assert!(solve_fokker_planck(&VectorField::zero(2, 1.0), 0.0, gaussian_density([0.0, 0.0], [0.5, 0.5]), grid, &[1.0]).is_err());
    }
}

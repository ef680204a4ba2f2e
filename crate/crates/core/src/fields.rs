//! Closed-form space-time fields on `[0, T] × R^d`.
//!
//! Vectors are stored in fixed `[f64; MAX_DIM]` arrays. Components beyond the
//! field dimension are kept at zero, so dot products and norms need no
//! dimension bookkeeping.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{arg, LabError, Result};

pub const MAX_DIM: usize = 3;

/// Default finite-difference step in space and time.
pub const DEFAULT_STEP: f64 = 1e-3;

pub type Vector = [f64; MAX_DIM];
/// `m[i][j] = ∂_j Φ^i`.
pub type Matrix = [[f64; MAX_DIM]; MAX_DIM];

pub const ZERO: Vector = [0.0; MAX_DIM];

/// Pads a slice of at most `MAX_DIM` coordinates.
pub fn vector(xs: &[f64]) -> Vector {
    let mut v = ZERO;
    v[..xs.len()].copy_from_slice(xs);
    v
}

pub fn dot(a: &Vector, b: &Vector) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &Vector) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: &Vector, b: &Vector) -> Vector {
    std::array::from_fn(|i| a[i] + b[i])
}

pub fn sub(a: &Vector, b: &Vector) -> Vector {
    std::array::from_fn(|i| a[i] - b[i])
}

pub fn scale(c: f64, a: &Vector) -> Vector {
    a.map(|x| c * x)
}

pub fn mat_vec(m: &Matrix, v: &Vector) -> Vector {
    std::array::from_fn(|i| dot(&m[i], v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimePoint {
    pub t: f64,
    pub x: Vector,
}

impl SpaceTimePoint {
    pub fn new(t: f64, x: &[f64]) -> Self {
        Self { t, x: vector(x) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    FreeSpace,
    /// Same period on every axis. Only evaluation wraps; positions never do.
    Periodic { period: f64 },
}

impl Domain {
    fn wrap(&self, x: &Vector) -> Vector {
        match *self {
            Domain::FreeSpace => *x,
            Domain::Periodic { period } => x.map(|c| c.rem_euclid(period)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScalarJet {
    pub value: f64,
    pub dt: f64,
    pub gradient: Vector,
    pub laplacian: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VectorJet {
    pub value: Vector,
    pub dt: Vector,
    pub jacobian: Matrix,
    pub laplacian: Vector,
    pub divergence: f64,
}

type ScalarFn = Arc<dyn Fn(f64, &Vector) -> f64 + Send + Sync>;
type ScalarJetFn = Arc<dyn Fn(f64, &Vector) -> ScalarJet + Send + Sync>;
type VectorFn = Arc<dyn Fn(f64, &Vector) -> Vector + Send + Sync>;
type VectorJetFn = Arc<dyn Fn(f64, &Vector) -> VectorJet + Send + Sync>;

fn check_domain(t: f64, x: &Vector, dim: usize, horizon: f64) -> Result<()> {
    let finite = x.iter().all(|c| c.is_finite());
    if !(0.0..=horizon).contains(&t) || !finite {
        return Err(LabError::Domain {
            t,
            x: x[..dim].to_vec(),
            horizon,
        });
    }
    Ok(())
}

fn check_step(step: f64) -> Result<()> {
    if !(step > 0.0) {
        return arg(format!("finite-difference step must be positive, got {step}"));
    }
    Ok(())
}

/// Time offsets and weights for a second-order first derivative, switching
/// to one-sided stencils within `step` of either temporal boundary.
fn time_stencil(t: f64, step: f64, horizon: f64) -> [(f64, f64); 3] {
    let w = 1.0 / (2.0 * step);
    if t - step < 0.0 {
        [(0.0, -3.0 * w), (step, 4.0 * w), (2.0 * step, -w)]
    } else if t + step > horizon {
        [(0.0, 3.0 * w), (-step, -4.0 * w), (-2.0 * step, w)]
    } else {
        [(step, w), (-step, -w), (0.0, 0.0)]
    }
}

#[derive(Clone)]
pub struct ScalarField {
    name: String,
    dim: usize,
    horizon: f64,
    domain: Domain,
    eval: ScalarFn,
    jet: Option<ScalarJetFn>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("domain", &self.domain)
            .field("analytic_jet", &self.jet.is_some())
            .finish()
    }
}

impl ScalarField {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        eval: impl Fn(f64, &Vector) -> f64 + Send + Sync + 'static,
    ) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension must be 1..=3");
        Self {
            name: name.into(),
            dim,
            horizon,
            domain: Domain::FreeSpace,
            eval: Arc::new(eval),
            jet: None,
        }
    }

    pub fn zero(dim: usize, horizon: f64) -> Self {
        Self::new("zero", dim, horizon, |_, _| 0.0).with_jet(|_, _| ScalarJet::default())
    }

    pub fn with_jet(
        mut self,
        jet: impl Fn(f64, &Vector) -> ScalarJet + Send + Sync + 'static,
    ) -> Self {
        self.jet = Some(Arc::new(jet));
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn domain(&self) -> Domain {
        self.domain
    }
    pub fn has_analytic_jet(&self) -> bool {
        self.jet.is_some()
    }

    /// Unchecked evaluation for hot loops.
    #[inline]
    pub fn eval(&self, t: f64, x: &Vector) -> f64 {
        (self.eval)(t, &self.domain.wrap(x))
    }

    pub fn try_eval(&self, q: &SpaceTimePoint) -> Result<f64> {
        check_domain(q.t, &q.x, self.dim, self.horizon)?;
        Ok(self.eval(q.t, &q.x))
    }

    /// Analytic jet when present, finite differences otherwise.
    pub fn jet(&self, t: f64, x: &Vector, step: f64) -> ScalarJet {
        match &self.jet {
            Some(j) => j(t, &self.domain.wrap(x)),
            None => self.fd_jet_unchecked(t, x, step),
        }
    }

    pub fn try_jet(&self, q: &SpaceTimePoint, step: f64) -> Result<ScalarJet> {
        check_step(step)?;
        check_domain(q.t, &q.x, self.dim, self.horizon)?;
        Ok(self.jet(q.t, &q.x, step))
    }

    /// Centered second-order finite differences, ignoring any analytic jet.
    pub fn fd_jet(&self, q: &SpaceTimePoint, step: f64) -> Result<ScalarJet> {
        check_step(step)?;
        check_domain(q.t, &q.x, self.dim, self.horizon)?;
        Ok(self.fd_jet_unchecked(q.t, &q.x, step))
    }

    fn fd_jet_unchecked(&self, t: f64, x: &Vector, step: f64) -> ScalarJet {
        let f0 = self.eval(t, x);
        let dt = time_stencil(t, step, self.horizon)
            .iter()
            .map(|&(off, w)| if w == 0.0 { 0.0 } else { w * self.eval(t + off, x) })
            .sum();
        let mut gradient = ZERO;
        let mut laplacian = 0.0;
        for i in 0..self.dim {
            let mut xp = *x;
            let mut xm = *x;
            xp[i] += step;
            xm[i] -= step;
            let (fp, fm) = (self.eval(t, &xp), self.eval(t, &xm));
            gradient[i] = (fp - fm) / (2.0 * step);
            laplacian += (fp - 2.0 * f0 + fm) / (step * step);
        }
        ScalarJet {
            value: f0,
            dt,
            gradient,
            laplacian,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let inner = self.clone();
        let mut out = Self::new(
            format!("{c}*{}", self.name),
            self.dim,
            self.horizon,
            move |t, x| c * inner.eval(t, x),
        );
        if let Some(j) = self.jet.clone() {
            out.jet = Some(Arc::new(move |t, x| {
                let j = j(t, x);
                ScalarJet {
                    value: c * j.value,
                    dt: c * j.dt,
                    gradient: scale(c, &j.gradient),
                    laplacian: c * j.laplacian,
                }
            }));
        }
        out.domain = self.domain;
        out
    }
}

#[derive(Clone)]
pub struct VectorField {
    name: String,
    dim: usize,
    horizon: f64,
    domain: Domain,
    divergence_free: bool,
    eval: VectorFn,
    jet: Option<VectorJetFn>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("domain", &self.domain)
            .field("divergence_free", &self.divergence_free)
            .field("analytic_jet", &self.jet.is_some())
            .finish()
    }
}

impl VectorField {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        eval: impl Fn(f64, &Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension must be 1..=3");
        Self {
            name: name.into(),
            dim,
            horizon,
            domain: Domain::FreeSpace,
            divergence_free: false,
            eval: Arc::new(eval),
            jet: None,
        }
    }

    pub fn constant(c: &[f64], horizon: f64) -> Self {
        let v = vector(c);
        Self::new("constant", c.len(), horizon, move |_, _| v)
            .with_jet(move |_, _| VectorJet {
                value: v,
                ..Default::default()
            })
            .divergence_free(true)
    }

    pub fn zero(dim: usize, horizon: f64) -> Self {
        Self::constant(&vec![0.0; dim], horizon)
    }

    pub fn with_jet(
        mut self,
        jet: impl Fn(f64, &Vector) -> VectorJet + Send + Sync + 'static,
    ) -> Self {
        self.jet = Some(Arc::new(jet));
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn divergence_free(mut self, flag: bool) -> Self {
        self.divergence_free = flag;
        self
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn domain(&self) -> Domain {
        self.domain
    }
    pub fn is_divergence_free(&self) -> bool {
        self.divergence_free
    }
    pub fn has_analytic_jet(&self) -> bool {
        self.jet.is_some()
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &Vector) -> Vector {
        (self.eval)(t, &self.domain.wrap(x))
    }

    pub fn try_eval(&self, q: &SpaceTimePoint) -> Result<Vector> {
        check_domain(q.t, &q.x, self.dim, self.horizon)?;
        Ok(self.eval(q.t, &q.x))
    }

    pub fn jet(&self, t: f64, x: &Vector, step: f64) -> VectorJet {
        match &self.jet {
            Some(j) => j(t, &self.domain.wrap(x)),
            None => self.fd_jet_unchecked(t, x, step),
        }
    }

    pub fn try_jet(&self, q: &SpaceTimePoint, step: f64) -> Result<VectorJet> {
        check_step(step)?;
        check_domain(q.t, &q.x, self.dim, self.horizon)?;
        Ok(self.jet(q.t, &q.x, step))
    }

    pub fn fd_jet(&self, q: &SpaceTimePoint, step: f64) -> Result<VectorJet> {
        check_step(step)?;
        check_domain(q.t, &q.x, self.dim, self.horizon)?;
        Ok(self.fd_jet_unchecked(q.t, &q.x, step))
    }

    fn fd_jet_unchecked(&self, t: f64, x: &Vector, step: f64) -> VectorJet {
        let f0 = self.eval(t, x);
        let mut dt = ZERO;
        for (off, w) in time_stencil(t, step, self.horizon) {
            if w != 0.0 {
                let f = self.eval(t + off, x);
                for i in 0..MAX_DIM {
                    dt[i] += w * f[i];
                }
            }
        }
        let mut jacobian = [[0.0; MAX_DIM]; MAX_DIM];
        let mut laplacian = ZERO;
        for j in 0..self.dim {
            let mut xp = *x;
            let mut xm = *x;
            xp[j] += step;
            xm[j] -= step;
            let (fp, fm) = (self.eval(t, &xp), self.eval(t, &xm));
            for i in 0..self.dim {
                jacobian[i][j] = (fp[i] - fm[i]) / (2.0 * step);
                laplacian[i] += (fp[i] - 2.0 * f0[i] + fm[i]) / (step * step);
            }
        }
        let divergence = (0..self.dim).map(|i| jacobian[i][i]).sum();
        VectorJet {
            value: f0,
            dt,
            jacobian,
            laplacian,
            divergence,
        }
    }

    /// Pointwise sum; the jet is kept only when both operands carry one.
    pub fn plus(&self, other: &VectorField) -> Result<VectorField> {
        if self.dim != other.dim {
            return arg("cannot add vector fields of different dimension");
        }
        let (a, b) = (self.clone(), other.clone());
        let mut out = VectorField::new(
            format!("{}+{}", self.name, other.name),
            self.dim,
            self.horizon.min(other.horizon),
            move |t, x| add(&a.eval(t, x), &b.eval(t, x)),
        );
        if let (Some(ja), Some(jb)) = (self.jet.clone(), other.jet.clone()) {
            let (da, db) = (self.domain, other.domain);
            out.jet = Some(Arc::new(move |t, x| {
                let (p, q) = (ja(t, &da.wrap(x)), jb(t, &db.wrap(x)));
                VectorJet {
                    value: add(&p.value, &q.value),
                    dt: add(&p.dt, &q.dt),
                    jacobian: std::array::from_fn(|i| add(&p.jacobian[i], &q.jacobian[i])),
                    laplacian: add(&p.laplacian, &q.laplacian),
                    divergence: p.divergence + q.divergence,
                }
            }));
        }
        out.divergence_free = self.divergence_free && other.divergence_free;
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> VectorField {
        let inner = self.clone();
        let mut out = VectorField::new(
            format!("{c}*{}", self.name),
            self.dim,
            self.horizon,
            move |t, x| scale(c, &inner.eval(t, x)),
        );
        if let Some(j) = self.jet.clone() {
            out.jet = Some(Arc::new(move |t, x| {
                let j = j(t, x);
                VectorJet {
                    value: scale(c, &j.value),
                    dt: scale(c, &j.dt),
                    jacobian: j.jacobian.map(|row| scale(c, &row)),
                    laplacian: scale(c, &j.laplacian),
                    divergence: c * j.divergence,
                }
            }));
        }
        out.domain = self.domain;
        out.divergence_free = self.divergence_free;
        out
    }
}

/// `(∂_x u) u`, the derivative of `u` along itself.
pub fn advective_term(u: &VectorField, q: &SpaceTimePoint, step: f64) -> Result<Vector> {
    let j = u.try_jet(q, step)?;
    Ok(mat_vec(&j.jacobian, &j.value))
}

/// Fields that support the time-reversal involution.
pub trait TimeReversible: Sized {
    fn horizon_of(&self) -> f64;
    /// `negate = true` gives `-f(T - t, x)`; `false` gives `f(T - t, x)`.
    fn time_reversed(&self, negate: bool) -> Self;
}

impl TimeReversible for ScalarField {
    fn horizon_of(&self) -> f64 {
        self.horizon
    }

    fn time_reversed(&self, negate: bool) -> Self {
        let s = if negate { -1.0 } else { 1.0 };
        let big_t = self.horizon;
        let inner = self.clone();
        let mut out = ScalarField::new(
            format!("rev({})", self.name),
            self.dim,
            big_t,
            move |t, x| s * inner.eval(big_t - t, x),
        );
        if let Some(j) = self.jet.clone() {
            out.jet = Some(Arc::new(move |t, x| {
                let j = j(big_t - t, x);
                ScalarJet {
                    value: s * j.value,
                    dt: -s * j.dt,
                    gradient: scale(s, &j.gradient),
                    laplacian: s * j.laplacian,
                }
            }));
        }
        out.domain = self.domain;
        out
    }
}

impl TimeReversible for VectorField {
    fn horizon_of(&self) -> f64 {
        self.horizon
    }

    fn time_reversed(&self, negate: bool) -> Self {
        let s = if negate { -1.0 } else { 1.0 };
        let big_t = self.horizon;
        let inner = self.clone();
        let name = if negate {
            format!("phi({})", self.name)
        } else {
            format!("rev({})", self.name)
        };
        let mut out = VectorField::new(name, self.dim, big_t, move |t, x| {
            scale(s, &inner.eval(big_t - t, x))
        });
        if let Some(j) = self.jet.clone() {
            out.jet = Some(Arc::new(move |t, x| {
                let j = j(big_t - t, x);
                VectorJet {
                    value: scale(s, &j.value),
                    dt: scale(-s, &j.dt),
                    jacobian: j.jacobian.map(|row| scale(s, &row)),
                    laplacian: scale(s, &j.laplacian),
                    divergence: s * j.divergence,
                }
            }));
        }
        out.domain = self.domain;
        out.divergence_free = self.divergence_free;
        out
    }
}

pub fn time_reverse_field<F: TimeReversible>(field: &F, horizon: f64, negate: bool) -> Result<F> {
    if (field.horizon_of() - horizon).abs() > 1e-12 {
        return arg(format!(
            "field horizon {} does not match requested horizon {horizon}",
            field.horizon_of()
        ));
    }
    Ok(field.time_reversed(negate))
}

/// Which momentum equation a closed-form flow solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowTag {
    NavierStokes,
    Euler,
    Stokes,
    None,
}

/// Parameters naming one entry of the flow library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowSpec {
    TaylorGreen { nu: f64 },
    RigidRotation { omega: f64 },
    ShearMode { nu: f64 },
    Uniform { c: Vec<f64> },
}

impl FlowSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FlowSpec::TaylorGreen { .. } => "taylor_green",
            FlowSpec::RigidRotation { .. } => "rigid_rotation",
            FlowSpec::ShearMode { .. } => "shear_mode",
            FlowSpec::Uniform { .. } => "uniform",
        }
    }

    /// Looks a flow up by name with a single scalar parameter (`nu` or
    /// `omega`; for `uniform` the value fills every component of a 2-vector).
    pub fn from_name(name: &str, param: f64) -> Result<Self> {
        Ok(match name {
            "taylor_green" => FlowSpec::TaylorGreen { nu: param },
            "rigid_rotation" => FlowSpec::RigidRotation { omega: param },
            "shear_mode" => FlowSpec::ShearMode { nu: param },
            "uniform" => FlowSpec::Uniform {
                c: vec![param, param],
            },
            other => return Err(LabError::Config(format!("unknown flow `{other}`"))),
        })
    }
}

pub const FLOW_LIBRARY: &[(&str, &str)] = &[
    (
        "taylor_green(nu)",
        "u = e^{-2 nu t}(sin x1 cos x2, -cos x1 sin x2), p = e^{-4 nu t}(cos 2x1 + cos 2x2)/4; Navier-Stokes (Euler when nu = 0); period 2 pi",
    ),
    (
        "rigid_rotation(omega)",
        "u = omega(-x2, x1), p = omega^2 |x|^2 / 2; Euler; free space",
    ),
    (
        "shear_mode(nu)",
        "u = e^{-nu t}(sin x2, 0), p = 0; Stokes and Navier-Stokes; period 2 pi",
    ),
    ("uniform(c)", "u = c, p = 0; every equation"),
];

#[derive(Debug, Clone)]
pub struct ExactFlow {
    pub name: String,
    pub velocity: VectorField,
    pub pressure: ScalarField,
    pub viscosity: f64,
    pub satisfies: FlowTag,
    /// Further equations the flow solves besides `satisfies`.
    pub also: Vec<FlowTag>,
}

impl ExactFlow {
    pub fn solves(&self, tag: FlowTag) -> bool {
        self.satisfies == tag || self.also.contains(&tag)
    }
}

pub fn exact_flow(spec: &FlowSpec, horizon: f64) -> Result<ExactFlow> {
    if !(horizon > 0.0) {
        return Err(LabError::Config(format!("horizon must be positive, got {horizon}")));
    }
    let periodic = Domain::Periodic { period: 2.0 * PI };
    Ok(match *spec {
        FlowSpec::TaylorGreen { nu } => {
            if nu < 0.0 {
                return Err(LabError::Config("taylor_green needs nu >= 0".into()));
            }
            let velocity = VectorField::new("taylor_green", 2, horizon, move |t, x| {
                let f = (-2.0 * nu * t).exp();
                [f * x[0].sin() * x[1].cos(), -f * x[0].cos() * x[1].sin(), 0.0]
            })
            .with_jet(move |t, x| {
                let f = (-2.0 * nu * t).exp();
                let (s1, c1, s2, c2) = (x[0].sin(), x[0].cos(), x[1].sin(), x[1].cos());
                let value = [f * s1 * c2, -f * c1 * s2, 0.0];
                VectorJet {
                    value,
                    dt: scale(-2.0 * nu, &value),
                    jacobian: [
                        [f * c1 * c2, -f * s1 * s2, 0.0],
                        [f * s1 * s2, -f * c1 * c2, 0.0],
                        [0.0; 3],
                    ],
                    laplacian: scale(-2.0, &value),
                    divergence: 0.0,
                }
            })
            .with_domain(periodic)
            .divergence_free(true);
            let pressure = ScalarField::new("taylor_green_p", 2, horizon, move |t, x| {
                0.25 * (-4.0 * nu * t).exp() * ((2.0 * x[0]).cos() + (2.0 * x[1]).cos())
            })
            .with_jet(move |t, x| {
                let g = (-4.0 * nu * t).exp();
                let value = 0.25 * g * ((2.0 * x[0]).cos() + (2.0 * x[1]).cos());
                ScalarJet {
                    value,
                    dt: -4.0 * nu * value,
                    gradient: [-0.5 * g * (2.0 * x[0]).sin(), -0.5 * g * (2.0 * x[1]).sin(), 0.0],
                    laplacian: -4.0 * value,
                }
            })
            .with_domain(periodic);
            let (satisfies, also) = if nu == 0.0 {
                (FlowTag::Euler, vec![FlowTag::NavierStokes])
            } else {
                (FlowTag::NavierStokes, vec![])
            };
            ExactFlow {
                name: format!("taylor_green(nu={nu})"),
                velocity,
                pressure,
                viscosity: nu,
                satisfies,
                also,
            }
        }
        FlowSpec::RigidRotation { omega } => {
            let velocity = VectorField::new("rigid_rotation", 2, horizon, move |_, x| {
                [-omega * x[1], omega * x[0], 0.0]
            })
            .with_jet(move |_, x| VectorJet {
                value: [-omega * x[1], omega * x[0], 0.0],
                jacobian: [[0.0, -omega, 0.0], [omega, 0.0, 0.0], [0.0; 3]],
                ..Default::default()
            })
            .divergence_free(true);
            let w2 = omega * omega;
            let pressure = ScalarField::new("rigid_rotation_p", 2, horizon, move |_, x| {
                0.5 * w2 * (x[0] * x[0] + x[1] * x[1])
            })
            .with_jet(move |_, x| ScalarJet {
                value: 0.5 * w2 * (x[0] * x[0] + x[1] * x[1]),
                dt: 0.0,
                gradient: [w2 * x[0], w2 * x[1], 0.0],
                laplacian: 2.0 * w2,
            });
            ExactFlow {
                name: format!("rigid_rotation(omega={omega})"),
                velocity,
                pressure,
                viscosity: 0.0,
                satisfies: FlowTag::Euler,
                // Δu = 0, so the viscous term drops out for any ν.
                also: vec![FlowTag::NavierStokes],
            }
        }
        FlowSpec::ShearMode { nu } => {
            if nu < 0.0 {
                return Err(LabError::Config("shear_mode needs nu >= 0".into()));
            }
            let velocity = VectorField::new("shear_mode", 2, horizon, move |t, x| {
                [(-nu * t).exp() * x[1].sin(), 0.0, 0.0]
            })
            .with_jet(move |t, x| {
                let f = (-nu * t).exp();
                let value = [f * x[1].sin(), 0.0, 0.0];
                VectorJet {
                    value,
                    dt: scale(-nu, &value),
                    jacobian: [[0.0, f * x[1].cos(), 0.0], [0.0; 3], [0.0; 3]],
                    laplacian: scale(-1.0, &value),
                    divergence: 0.0,
                }
            })
            .with_domain(periodic)
            .divergence_free(true);
            ExactFlow {
                name: format!("shear_mode(nu={nu})"),
                velocity,
                pressure: ScalarField::zero(2, horizon).with_domain(periodic),
                viscosity: nu,
                satisfies: FlowTag::Stokes,
                also: vec![FlowTag::NavierStokes],
            }
        }
        FlowSpec::Uniform { ref c } => {
            if c.is_empty() || c.len() > MAX_DIM {
                return Err(LabError::Config("uniform flow needs 1..=3 components".into()));
            }
            ExactFlow {
                name: format!("uniform(c={c:?})"),
                velocity: VectorField::constant(c, horizon).renamed("uniform"),
                pressure: ScalarField::zero(c.len(), horizon),
                viscosity: 0.0,
                satisfies: FlowTag::NavierStokes,
                also: vec![FlowTag::Euler, FlowTag::Stokes],
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probes(n: usize, seed: u64) -> Vec<SpaceTimePoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                SpaceTimePoint::new(
                    rng.random_range(0.01..0.99),
                    &[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
                )
            })
            .collect()
    }

    #[test]
    fn advective_term_of_rigid_rotation() {
        let u = exact_flow(&FlowSpec::RigidRotation { omega: 1.0 }, 1.0).unwrap().velocity;
        let a = advective_term(&u, &SpaceTimePoint::new(0.3, &[1.0, 0.0]), DEFAULT_STEP).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-14 && a[1].abs() < 1e-14);
    }

    #[test]
    fn advective_term_of_constant_is_zero() {
        let u = VectorField::constant(&[0.3, -2.0], 1.0);
        let a = advective_term(&u, &SpaceTimePoint::new(0.5, &[4.0, 1.0]), DEFAULT_STEP).unwrap();
        assert_eq!(a, ZERO);
    }

    #[test]
    fn advective_term_matches_finite_differences_for_taylor_green() {
        let u = exact_flow(&FlowSpec::TaylorGreen { nu: 0.05 }, 1.0).unwrap().velocity;
        let q = SpaceTimePoint::new(0.0, &[PI / 2.0, 0.0]);
        let analytic = advective_term(&u, &q, DEFAULT_STEP).unwrap();
        let fd = u.fd_jet(&q, DEFAULT_STEP).unwrap();
        let numeric = mat_vec(&fd.jacobian, &fd.value);
        assert!(norm(&sub(&analytic, &numeric)) < 1e-6);
    }

    #[test]
    fn advective_term_rejects_points_outside_horizon() {
        let u = VectorField::constant(&[1.0, 0.0], 1.0);
        let err = advective_term(&u, &SpaceTimePoint::new(1.5, &[0.0, 0.0]), DEFAULT_STEP);
        assert!(matches!(err, Err(LabError::Domain { .. })));
    }

    #[test]
    fn time_reverse_steady_field_negates() {
        let u = exact_flow(&FlowSpec::RigidRotation { omega: 2.0 }, 1.0).unwrap().velocity;
        let r = time_reverse_field(&u, 1.0, true).unwrap();
        for q in probes(20, 1) {
            assert_eq!(r.eval(q.t, &q.x), scale(-1.0, &u.eval(q.t, &q.x)));
        }
    }

    #[test]
    fn time_reverse_linear_in_time() {
        let u = VectorField::new("t e1", 1, 1.0, |t, _| [t, 0.0, 0.0]);
        let r = time_reverse_field(&u, 1.0, true).unwrap();
        for t in [0.0, 0.25, 0.9] {
            assert!((r.eval(t, &ZERO)[0] - (-(1.0 - t))).abs() < 1e-15);
        }
    }

    #[test]
    fn time_reverse_rejects_wrong_horizon() {
        let u = VectorField::zero(2, 1.0);
        assert!(time_reverse_field(&u, 2.0, true).is_err());
    }

    #[test]
    fn reversed_jets_match_finite_differences() {
        let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.1 }, 1.0).unwrap();
        let ubar = flow.velocity.time_reversed(true);
        let pbar = flow.pressure.time_reversed(false);
        let h = DEFAULT_STEP;
        for q in probes(50, 2) {
            let (a, f) = (ubar.try_jet(&q, h).unwrap(), ubar.fd_jet(&q, h).unwrap());
            assert!(norm(&sub(&a.dt, &f.dt)) < 10.0 * h * h);
            assert!(norm(&sub(&a.laplacian, &f.laplacian)) < 10.0 * h * h);
            let (a, f) = (pbar.try_jet(&q, h).unwrap(), pbar.fd_jet(&q, h).unwrap());
            assert!((a.dt - f.dt).abs() < 10.0 * h * h);
        }
    }

    #[test]
    fn quadratic_gradient_and_laplacian_are_exact() {
        let f = ScalarField::new("half_sq", 2, 1.0, |_, x| 0.5 * dot(x, x));
        for q in probes(10, 3) {
            let j = f.fd_jet(&q, 1e-3).unwrap();
            assert!(norm(&sub(&j.gradient, &q.x)) < 1e-10);
            assert!((j.laplacian - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_jet_rejects_nonpositive_step() {
        let f = ScalarField::zero(1, 1.0);
        assert!(matches!(
            f.fd_jet(&SpaceTimePoint::new(0.5, &[0.0]), 0.0),
            Err(LabError::Argument(_))
        ));
    }

    #[test]
    fn one_sided_time_derivative_at_boundaries() {
        let f = ScalarField::new("t2", 1, 1.0, |t, _| t * t);
        for t in [0.0, 1.0] {
            let j = f.fd_jet(&SpaceTimePoint::new(t, &[0.0]), 1e-3).unwrap();
            assert!((j.dt - 2.0 * t).abs() < 1e-9);
        }
    }

    #[test]
    fn taylor_green_laplacian_is_minus_two_u() {
        let u = exact_flow(&FlowSpec::TaylorGreen { nu: 0.05 }, 1.0).unwrap().velocity;
        let h = DEFAULT_STEP;
        for q in probes(20, 4) {
            let j = u.fd_jet(&q, h).unwrap();
            let target = scale(-2.0, &j.value);
            assert!(norm(&sub(&j.laplacian, &target)) < 10.0 * h * h);
        }
    }

    #[test]
    fn taylor_green_value_at_reference_point() {
        let u = exact_flow(&FlowSpec::TaylorGreen { nu: 0.3 }, 1.0).unwrap().velocity;
        let v = u.try_eval(&SpaceTimePoint::new(0.0, &[PI / 2.0, 0.0])).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
    }

    #[test]
    fn every_library_jet_is_consistent() {
        let h = DEFAULT_STEP;
        let specs = [
            FlowSpec::TaylorGreen { nu: 0.05 },
            FlowSpec::RigidRotation { omega: 1.3 },
            FlowSpec::ShearMode { nu: 0.1 },
            FlowSpec::Uniform { c: vec![0.5, -1.0] },
        ];
        for spec in &specs {
            let flow = exact_flow(spec, 1.0).unwrap();
            for q in probes(100, 5) {
                let (a, f) = (flow.velocity.try_jet(&q, h).unwrap(), flow.velocity.fd_jet(&q, h).unwrap());
                let tol = 10.0 * h * h * (1.0 + norm(&a.value));
                assert!(norm(&sub(&a.dt, &f.dt)) < tol, "{}", flow.name);
                for i in 0..2 {
                    assert!(norm(&sub(&a.jacobian[i], &f.jacobian[i])) < tol, "{}", flow.name);
                }
                assert!(norm(&sub(&a.laplacian, &f.laplacian)) < tol, "{}", flow.name);
                assert!(f.divergence.abs() < tol, "{}", flow.name);
                let (a, f) = (flow.pressure.try_jet(&q, h).unwrap(), flow.pressure.fd_jet(&q, h).unwrap());
                let tol = 10.0 * h * h * (1.0 + a.value.abs());
                assert!(norm(&sub(&a.gradient, &f.gradient)) < tol, "{}", flow.name);
                assert!((a.laplacian - f.laplacian).abs() < tol, "{}", flow.name);
                assert!((a.dt - f.dt).abs() < tol, "{}", flow.name);
            }
        }
    }

    #[test]
    fn unknown_flow_is_a_config_error() {
        assert!(matches!(
            FlowSpec::from_name("poiseuille", 1.0),
            Err(LabError::Config(_))
        ));
        let parsed: std::result::Result<FlowSpec, _> =
            serde_json::from_str(r#"{"name":"taylor_green","nu":0.1,"extra":1}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn periodic_evaluation_wraps() {
        let u = exact_flow(&FlowSpec::ShearMode { nu: 0.0 }, 1.0).unwrap().velocity;
        let a = u.eval(0.2, &[0.3, 0.4, 0.0]);
        let b = u.eval(0.2, &[0.3 + 2.0 * PI, 0.4 - 4.0 * PI, 0.0]);
        assert!(norm(&sub(&a, &b)) < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn reversal_is_an_involution(t in 0.0..1.0f64, x in -5.0..5.0f64, y in -5.0..5.0f64, nu in 0.0..0.5f64) {
                let u = exact_flow(&FlowSpec::TaylorGreen { nu }, 1.0).unwrap().velocity;
                let twice = u.time_reversed(true).time_reversed(true);
                let p = [x, y, 0.0];
                let (a, b) = (u.eval(t, &p), twice.eval(t, &p));
                prop_assert!(norm(&sub(&a, &b)) <= 1e-12);
            }
        }
    }
}

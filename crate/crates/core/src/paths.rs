//! Diffusion specifications and Monte Carlo path ensembles.
//!
//! Every path draws from its own ChaCha substream keyed by
//! `(seed, stream name, path index)`, so results do not depend on how many
//! rayon workers run the simulation.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg, LabError, Result};
use crate::fields::{add, scale, vector, TimeReversible, Vector, VectorField, MAX_DIM, ZERO};

/// Deterministic per-path random stream.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialLaw {
    /// Independent coordinates with the given variances.
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    Point { x: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::UniformBox { lo, .. } => lo.len(),
            InitialLaw::Point { x } => x.len(),
        }
    }

    pub fn validate(&self, must_have_density: bool) -> Result<()> {
        let dim = self.dim();
        if dim == 0 || dim > MAX_DIM {
            return Err(LabError::Config(format!("initial law dimension {dim} not in 1..=3")));
        }
        match self {
            InitialLaw::Gaussian { mean, var } => {
                if var.len() != mean.len() || var.iter().any(|v| !(*v > 0.0)) {
                    return Err(LabError::Config("gaussian variances must be positive, one per axis".into()));
                }
            }
            InitialLaw::UniformBox { lo, hi } => {
                if hi.len() != lo.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    return Err(LabError::Config("uniform box needs lo < hi on every axis".into()));
                }
            }
            InitialLaw::Point { .. } => {
                if must_have_density {
                    return Err(LabError::Config("a point initial law has no density".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector {
        match self {
            InitialLaw::Gaussian { mean, var } => {
                let mut v = ZERO;
                for i in 0..mean.len() {
                    let z: f64 = rng.sample(StandardNormal);
                    v[i] = mean[i] + var[i].sqrt() * z;
                }
                v
            }
            InitialLaw::UniformBox { lo, hi } => {
                let mut v = ZERO;
                for i in 0..lo.len() {
                    v[i] = rng.random_range(lo[i]..hi[i]);
                }
                v
            }
            InitialLaw::Point { x } => vector(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassTag {
    /// Constant σ > 0.
    LambdaC,
    /// σ = 0: deterministic flow of a random initial point.
    Lambda0,
    /// `X_t = X_0 + ∫ u(s, σ_b B_s) ds` with `B` a bridge pinned at 0 at `T`.
    LambdaB,
}

#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    pub drift: VectorField,
    pub sigma: f64,
    pub initial: InitialLaw,
    pub horizon: f64,
    pub class: ClassTag,
    /// Outer field `u` and bridge scale, for `LambdaB` only.
    pub bridge: Option<(VectorField, f64)>,
}

impl DiffusionSpec {
    pub fn new(drift: VectorField, sigma: f64, initial: InitialLaw, horizon: f64) -> Result<Self> {
        let class = if sigma > 0.0 { ClassTag::LambdaC } else { ClassTag::Lambda0 };
        let spec = Self {
            drift,
            sigma,
            initial,
            horizon,
            class,
            bridge: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn bridge_driven(u: VectorField, sigma_b: f64, initial: InitialLaw, horizon: f64) -> Result<Self> {
        let spec = Self {
            drift: VectorField::zero(u.dim(), horizon),
            sigma: 0.0,
            initial,
            horizon,
            class: ClassTag::LambdaB,
            bridge: Some((u, sigma_b)),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(LabError::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.sigma >= 0.0) {
            return Err(LabError::Config("sigma must be non-negative".into()));
        }
        let consistent = match self.class {
            ClassTag::LambdaC => self.sigma > 0.0,
            ClassTag::Lambda0 => self.sigma == 0.0,
            ClassTag::LambdaB => self.bridge.as_ref().is_some_and(|(_, s)| *s >= 0.0),
        };
        if !consistent {
            return Err(LabError::Config(format!("class {:?} inconsistent with sigma = {}", self.class, self.sigma)));
        }
        self.initial.validate(false)?;
        if self.initial.dim() != self.dim() {
            return Err(LabError::Config("initial law and drift dimensions differ".into()));
        }
        Ok(())
    }

    /// `a = σσ*`, here `σ²·I`.
    pub fn diffusion_coefficient(&self) -> f64 {
        self.sigma * self.sigma
    }
}

/// Where an ensemble came from; drives which drift fields are known exactly.
#[derive(Debug, Clone)]
pub enum Provenance {
    Simulated(Arc<DiffusionSpec>),
    Reversed(Box<Provenance>),
    BridgeDriven { u: VectorField, sigma_b: f64 },
    Scaled { factor: f64, inner: Box<Provenance> },
    Imported(String),
}

impl Provenance {
    pub fn label(&self) -> String {
        match self {
            Provenance::Simulated(spec) => format!(
                "diffusion(b={}, sigma={}, {:?})",
                spec.drift.name(),
                spec.sigma,
                spec.class
            ),
            Provenance::Reversed(inner) => format!("reversed({})", inner.label()),
            Provenance::BridgeDriven { u, sigma_b } => {
                format!("bridge_driven(u={}, sigma_b={sigma_b})", u.name())
            }
            Provenance::Scaled { factor, inner } => format!("{factor}*{}", inner.label()),
            Provenance::Imported(name) => format!("imported({name})"),
        }
    }
}

/// Which grid steps an ensemble stores.
#[derive(Debug, Clone, PartialEq)]
pub enum Recording {
    All,
    Steps(Vec<usize>),
}

impl Recording {
    /// Every `stride`-th step plus `extras`, always including 0 and `n_steps`.
    pub fn strided(stride: usize, n_steps: usize, extras: &[usize]) -> Self {
        let stride = stride.max(1);
        let mut steps: Vec<usize> = (0..=n_steps).step_by(stride).collect();
        steps.push(n_steps);
        steps.extend(extras.iter().copied().filter(|&k| k <= n_steps));
        steps.sort_unstable();
        steps.dedup();
        Recording::Steps(steps)
    }

    fn resolve(&self, n_steps: usize) -> Result<Vec<usize>> {
        match self {
            Recording::All => Ok((0..=n_steps).collect()),
            Recording::Steps(s) => {
                let mut s = s.clone();
                s.sort_unstable();
                s.dedup();
                if s.last().is_some_and(|&k| k > n_steps) || s.is_empty() {
                    return arg("recorded steps must be a non-empty subset of 0..=n_steps");
                }
                Ok(s)
            }
        }
    }

    fn mirrored(&self, n_steps: usize) -> Result<Self> {
        Ok(match self {
            Recording::All => Recording::All,
            Recording::Steps(_) => {
                Recording::Steps(self.resolve(n_steps)?.into_iter().map(|k| n_steps - k).collect())
            }
        })
    }
}

/// `n_paths` sample paths on the grid `t_k = k·dt`, stored at `steps`.
#[derive(Clone)]
pub struct PathEnsemble {
    dim: usize,
    dt: f64,
    n_steps: usize,
    n_paths: usize,
    steps: Vec<usize>,
    /// Layout `[path][slot][component]`.
    states: Vec<f64>,
    seed: u64,
    provenance: Provenance,
}

impl fmt::Debug for PathEnsemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PathEnsemble")
            .field("dim", &self.dim)
            .field("dt", &self.dt)
            .field("n_steps", &self.n_steps)
            .field("n_paths", &self.n_paths)
            .field("recorded", &self.steps.len())
            .field("seed", &self.seed)
            .field("provenance", &self.provenance.label())
            .finish()
    }
}

impl PartialEq for PathEnsemble {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.dt.to_bits() == other.dt.to_bits()
            && self.n_steps == other.n_steps
            && self.n_paths == other.n_paths
            && self.steps == other.steps
            && self.states.len() == other.states.len()
            && self
                .states
                .iter()
                .zip(&other.states)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl PathEnsemble {
    pub fn from_raw(
        dim: usize,
        dt: f64,
        n_steps: usize,
        steps: Vec<usize>,
        states: Vec<f64>,
        seed: u64,
        provenance: Provenance,
    ) -> Result<Self> {
        let slots = steps.len();
        if slots == 0 || !states.len().is_multiple_of(slots * dim) {
            return arg("state buffer does not match recorded steps and dimension");
        }
        Ok(Self {
            dim,
            dt,
            n_steps,
            n_paths: states.len() / (slots * dim),
            steps,
            states,
            seed,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }
    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
    pub fn label(&self) -> String {
        self.provenance.label()
    }
    pub fn time_of_step(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Slot index of a recorded grid step.
    pub fn slot(&self, step: usize) -> Result<usize> {
        self.steps.binary_search(&step).map_err(|_| LabError::NotRecorded(step))
    }

    /// Nearest grid step to time `t`.
    pub fn step_at(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.n_steps)
    }

    #[inline]
    pub fn state(&self, path: usize, slot: usize) -> Vector {
        let base = (path * self.steps.len() + slot) * self.dim;
        vector(&self.states[base..base + self.dim])
    }

    pub fn state_at_step(&self, path: usize, step: usize) -> Result<Vector> {
        Ok(self.state(path, self.slot(step)?))
    }

    /// All path states at one recorded step.
    pub fn slice(&self, step: usize) -> Result<Vec<Vector>> {
        let slot = self.slot(step)?;
        Ok((0..self.n_paths).map(|p| self.state(p, slot)).collect())
    }

    /// Per-axis sample mean and unbiased variance at a recorded step.
    pub fn moments(&self, step: usize) -> Result<(Vector, Vector)> {
        let xs = self.slice(step)?;
        let n = xs.len() as f64;
        let mut mean = ZERO;
        for x in &xs {
            mean = add(&mean, x);
        }
        mean = scale(1.0 / n, &mean);
        let mut var = ZERO;
        for x in &xs {
            for i in 0..self.dim {
                var[i] += (x[i] - mean[i]).powi(2);
            }
        }
        Ok((mean, scale(1.0 / (n - 1.0).max(1.0), &var)))
    }

    /// Pathwise `factor · X`.
    pub fn scaled(&self, factor: f64) -> PathEnsemble {
        let mut out = self.clone();
        out.states.iter_mut().for_each(|v| *v *= factor);
        out.provenance = Provenance::Scaled {
            factor,
            inner: Box::new(self.provenance.clone()),
        };
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["path".to_string(), "k".into(), "t".into()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for p in 0..self.n_paths {
            for (slot, &k) in self.steps.iter().enumerate() {
                let x = self.state(p, slot);
                let mut row = vec![p.to_string(), k.to_string(), format!("{:.16e}", self.time_of_step(k))];
                row.extend(x[..self.dim].iter().map(|v| format!("{v:.16e}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an ensemble written by [`PathEnsemble::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>, dt: f64, n_steps: usize) -> Result<PathEnsemble> {
        let name = path.as_ref().display().to_string();
        let mut r = csv::Reader::from_path(path)?;
        let dim = r.headers()?.len().saturating_sub(3);
        let mut steps = Vec::new();
        let mut states = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|e| LabError::Argument(format!("bad number: {e}")))
            };
            let p: usize = rec[0].parse().map_err(|_| LabError::Argument("bad path index".into()))?;
            let k: usize = rec[1].parse().map_err(|_| LabError::Argument("bad step".into()))?;
            if p == 0 {
                steps.push(k);
            }
            for i in 0..dim {
                states.push(parse(3 + i)?);
            }
        }
        PathEnsemble::from_raw(dim, dt, n_steps, steps, states, 0, Provenance::Imported(name))
    }
}

fn grid_steps(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(LabError::Config(format!("dt must be positive, got {dt}")));
    }
    let m = (horizon / dt).round();
    if m < 1.0 || (m * dt - horizon).abs() > 1e-12 {
        return Err(LabError::Config(format!("dt = {dt} does not divide T = {horizon}")));
    }
    Ok(m as usize)
}

/// Integrates one path and writes the recorded states into `out`.
/// Returns the first non-finite step, if any.
fn integrate_path(
    spec: &DiffusionSpec,
    rng: &mut ChaCha8Rng,
    dt: f64,
    n_steps: usize,
    steps: &[usize],
    out: &mut [f64],
) -> Option<usize> {
    let d = spec.dim();
    let mut x = spec.initial.sample(rng);
    let sq = dt.sqrt();
    let mut next = 0;
    for k in 0..=n_steps {
        if next < steps.len() && steps[next] == k {
            out[next * d..(next + 1) * d].copy_from_slice(&x[..d]);
            next += 1;
        }
        if k == n_steps {
            break;
        }
        let t = k as f64 * dt;
        match spec.class {
            ClassTag::Lambda0 => {
                // Classical RK4 keeps the deterministic flow at quadrature accuracy.
                let b = &spec.drift;
                let k1 = b.eval(t, &x);
                let k2 = b.eval(t + 0.5 * dt, &add(&x, &scale(0.5 * dt, &k1)));
                let k3 = b.eval(t + 0.5 * dt, &add(&x, &scale(0.5 * dt, &k2)));
                let k4 = b.eval(t + dt, &add(&x, &scale(dt, &k3)));
                for i in 0..d {
                    x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
            _ => {
                let b = spec.drift.eval(t, &x);
                for i in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    x[i] += b[i] * dt + spec.sigma * sq * z;
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Some(k + 1);
        }
    }
    None
}

fn first_divergence(bad: Vec<Option<usize>>, dt: f64) -> Result<()> {
    let worst = bad
        .into_iter()
        .enumerate()
        .filter_map(|(p, s)| s.map(|s| (s, p)))
        .min();
    match worst {
        Some((step, path)) => Err(LabError::Diverged {
            step,
            t: step as f64 * dt,
            path,
        }),
        None => Ok(()),
    }
}

/// Euler–Maruyama for `LambdaC`, RK4 for `LambdaC`'s deterministic
/// counterpart `Lambda0`.
pub fn simulate(
    spec: &DiffusionSpec,
    n_paths: usize,
    dt: f64,
    seed: u64,
    recording: &Recording,
) -> Result<PathEnsemble> {
    spec.validate()?;
    if spec.class == ClassTag::LambdaB {
        return Err(LabError::Config(
            "bridge-driven specs are built with bridge_driven_ensembles".into(),
        ));
    }
    if n_paths == 0 {
        return Err(LabError::Config("n_paths must be at least 1".into()));
    }
    let n_steps = grid_steps(spec.horizon, dt)?;
    let steps = recording.resolve(n_steps)?;
    let d = spec.dim();
    let stride = steps.len() * d;
    let mut states = vec![0.0; n_paths * stride];
    let bad: Vec<Option<usize>> = states
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(p, out)| {
            let mut rng = substream(seed, "simulation", p as u64);
            integrate_path(spec, &mut rng, dt, n_steps, &steps, out)
        })
        .collect();
    first_divergence(bad, dt)?;
    PathEnsemble::from_raw(
        d,
        dt,
        n_steps,
        steps,
        states,
        seed,
        Provenance::Simulated(Arc::new(spec.clone())),
    )
}

/// Time reversal `r(X)_t = X_{T−t}`.
pub fn reverse_ensemble(ens: &PathEnsemble) -> PathEnsemble {
    let slots = ens.steps.len();
    let d = ens.dim;
    let steps: Vec<usize> = ens.steps.iter().rev().map(|&k| ens.n_steps - k).collect();
    let mut states = vec![0.0; ens.states.len()];
    for p in 0..ens.n_paths {
        for s in 0..slots {
            let src = (p * slots + (slots - 1 - s)) * d;
            let dst = (p * slots + s) * d;
            states[dst..dst + d].copy_from_slice(&ens.states[src..src + d]);
        }
    }
    let provenance = match &ens.provenance {
        Provenance::Reversed(inner) => (**inner).clone(),
        other => Provenance::Reversed(Box::new(other.clone())),
    };
    PathEnsemble {
        dim: d,
        dt: ens.dt,
        n_steps: ens.n_steps,
        n_paths: ens.n_paths,
        steps,
        states,
        seed: ens.seed,
        provenance,
    }
}

fn brownian_spec(dim: usize, sigma_b: f64, horizon: f64) -> Result<DiffusionSpec> {
    DiffusionSpec::new(
        VectorField::zero(dim, horizon).renamed("zero"),
        sigma_b,
        InitialLaw::Point { x: vec![0.0; dim] },
        horizon,
    )
}

/// `B_t := W̃_{T−t}` for a Brownian motion `W̃` with scale `sigma_b` started
/// at 0. Every path ends exactly at 0, `B_0 ~ N(0, σ_b² T)`, and the
/// backward drift of `B` vanishes identically.
pub fn brownian_bridge_ensemble(
    dim: usize,
    horizon: f64,
    sigma_b: f64,
    n_paths: usize,
    dt: f64,
    seed: u64,
    recording: &Recording,
) -> Result<PathEnsemble> {
    let n_steps = grid_steps(horizon, dt)?;
    let w = simulate(&brownian_spec(dim, sigma_b, horizon)?, n_paths, dt, seed, &recording.mirrored(n_steps)?)?;
    Ok(reverse_ensemble(&w))
}

/// `X_{t_k} = X_0 + Σ_{j<k} u(t_j, σ_b B_{t_j}) dt` over a fully recorded
/// bridge ensemble.
pub fn drift_integral_ensemble(
    u: &VectorField,
    sigma_b: f64,
    bridge: &PathEnsemble,
    initial: &InitialLaw,
    seed: u64,
) -> Result<PathEnsemble> {
    if bridge.steps.len() != bridge.n_steps + 1 {
        return arg("drift integration needs the bridge recorded on every grid step");
    }
    if u.dim() != bridge.dim || initial.dim() != bridge.dim {
        return arg("field, initial law and bridge dimensions differ");
    }
    initial.validate(false)?;
    let d = bridge.dim;
    let slots = bridge.steps.len();
    let dt = bridge.dt;
    let mut states = vec![0.0; bridge.states.len()];
    states.par_chunks_mut(slots * d).enumerate().for_each(|(p, out)| {
        let mut rng = substream(seed, "drift_integral", p as u64);
        let mut x = initial.sample(&mut rng);
        for k in 0..slots {
            out[k * d..(k + 1) * d].copy_from_slice(&x[..d]);
            if k + 1 < slots {
                let b = scale(sigma_b, &bridge.state(p, k));
                let v = u.eval(k as f64 * dt, &b);
                for i in 0..d {
                    x[i] += v[i] * dt;
                }
            }
        }
    });
    PathEnsemble::from_raw(
        d,
        dt,
        bridge.n_steps,
        bridge.steps.clone(),
        states,
        seed,
        Provenance::BridgeDriven {
            u: u.clone(),
            sigma_b,
        },
    )
}

/// Streaming equivalent of `brownian_bridge_ensemble(σ=1)` followed by
/// [`drift_integral_ensemble`]: identical numbers, but only the requested
/// steps are stored.
pub fn bridge_driven_ensembles(
    spec: &DiffusionSpec,
    n_paths: usize,
    dt: f64,
    seed: u64,
    recording: &Recording,
) -> Result<(PathEnsemble, PathEnsemble)> {
    spec.validate()?;
    let (u, sigma_b) = match (&spec.class, &spec.bridge) {
        (ClassTag::LambdaB, Some((u, s))) => (u.clone(), *s),
        _ => return Err(LabError::Config("diffusion is not bridge-driven".into())),
    };
    let n_steps = grid_steps(spec.horizon, dt)?;
    let steps = recording.resolve(n_steps)?;
    let d = spec.dim();
    let bm = brownian_spec(d, 1.0, spec.horizon)?;
    let stride = steps.len() * d;
    let mut bridge_states = vec![0.0; n_paths * stride];
    let mut x_states = vec![0.0; n_paths * stride];
    bridge_states
        .par_chunks_mut(stride)
        .zip(x_states.par_chunks_mut(stride))
        .enumerate()
        .for_each(|(p, (b_out, x_out))| {
            let mut rng = substream(seed, "simulation", p as u64);
            let mut w = vec![0.0; (n_steps + 1) * d];
            let all: Vec<usize> = (0..=n_steps).collect();
            integrate_path(&bm, &mut rng, dt, n_steps, &all, &mut w);
            let bridge_at = |k: usize| vector(&w[(n_steps - k) * d..(n_steps - k + 1) * d]);
            let mut rng = substream(seed, "drift_integral", p as u64);
            let mut x = spec.initial.sample(&mut rng);
            let mut next = 0;
            for k in 0..=n_steps {
                if next < steps.len() && steps[next] == k {
                    b_out[next * d..(next + 1) * d].copy_from_slice(&bridge_at(k)[..d]);
                    x_out[next * d..(next + 1) * d].copy_from_slice(&x[..d]);
                    next += 1;
                }
                if k < n_steps {
                    let v = u.eval(k as f64 * dt, &scale(sigma_b, &bridge_at(k)));
                    for i in 0..d {
                        x[i] += v[i] * dt;
                    }
                }
            }
        });
    let bridge = PathEnsemble::from_raw(
        d,
        dt,
        n_steps,
        steps.clone(),
        bridge_states,
        seed,
        Provenance::Reversed(Box::new(Provenance::Simulated(Arc::new(bm)))),
    )?;
    let x = PathEnsemble::from_raw(d, dt, n_steps, steps, x_states, seed, Provenance::BridgeDriven { u, sigma_b })?;
    Ok((bridge, x))
}

/// Drift of a process whose backward drift is known: `φ(b)` for a reversed
/// simulation.
pub fn reversed_drift(spec: &DiffusionSpec) -> VectorField {
    spec.drift.time_reversed(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bm(sigma: f64, start: InitialLaw) -> DiffusionSpec {
        DiffusionSpec::new(VectorField::zero(start.dim(), 1.0), sigma, start, 1.0).unwrap()
    }

    fn ou(var0: f64) -> DiffusionSpec {
        let b = VectorField::new("ou", 1, 1.0, |_, x| [-x[0], 0.0, 0.0]);
        DiffusionSpec::new(b, 1.0, InitialLaw::Gaussian { mean: vec![0.0], var: vec![var0] }, 1.0).unwrap()
    }

    #[test]
    fn brownian_variance_grows_linearly() {
        let n = 100_000;
        let ens = simulate(&bm(1.0, InitialLaw::Point { x: vec![0.0] }), n, 0.01, 7, &Recording::strided(50, 100, &[])).unwrap();
        let (_, var) = ens.moments(100).unwrap();
        assert!((var[0] - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "{}", var[0]);
    }

    #[test]
    fn zero_sigma_zero_drift_is_constant() {
        let ens = simulate(&bm(0.0, InitialLaw::Point { x: vec![1.5, -2.0] }), 10, 0.1, 1, &Recording::All).unwrap();
        for p in 0..10 {
            for s in 0..ens.steps().len() {
                assert_eq!(ens.state(p, s)[..2], [1.5, -2.0]);
            }
        }
    }

    #[test]
    fn stationary_ou_keeps_its_variance() {
        let n = 100_000;
        let ens = simulate(&ou(0.5), n, 0.001, 3, &Recording::strided(250, 1000, &[])).unwrap();
        for &k in ens.steps() {
            let (_, var) = ens.moments(k).unwrap();
            // Var of the sample variance is 2σ⁴/n.
            let se = 0.5 * (2.0 / n as f64).sqrt();
            assert!((var[0] - 0.5).abs() < 3.0 * se + 1e-3, "k={k} var={}", var[0]);
        }
    }

    #[test]
    fn non_divisible_dt_is_rejected() {
        let err = simulate(&bm(1.0, InitialLaw::Point { x: vec![0.0] }), 5, 0.3, 1, &Recording::All);
        assert!(matches!(err, Err(LabError::Config(_))));
    }

    #[test]
    fn divergence_names_first_bad_step() {
        let b = VectorField::new("blowup", 1, 1.0, |_, x| [x[0] * x[0] * 1e150, 0.0, 0.0]);
        let spec = DiffusionSpec::new(b, 0.0, InitialLaw::Point { x: vec![1.0] }, 1.0).unwrap();
        match simulate(&spec, 3, 0.1, 1, &Recording::All) {
            Err(LabError::Diverged { step, path, .. }) => {
                assert_eq!(path, 0);
                assert!(step >= 1 && step <= 10);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn class_tag_must_match_sigma() {
        let mut spec = bm(1.0, InitialLaw::Point { x: vec![0.0] });
        spec.class = ClassTag::Lambda0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn point_law_has_no_density() {
        assert!(InitialLaw::Point { x: vec![0.0] }.validate(true).is_err());
        assert!(InitialLaw::Gaussian { mean: vec![0.0], var: vec![0.0] }.validate(false).is_err());
        assert!(InitialLaw::UniformBox { lo: vec![1.0], hi: vec![1.0] }.validate(false).is_err());
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let spec = ou(0.5);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&spec, 257, 0.01, 42, &Recording::All).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn bridge_ends_at_zero_and_starts_with_variance_t() {
        let n = 50_000;
        let b = brownian_bridge_ensemble(1, 1.0, 1.0, n, 0.01, 9, &Recording::All).unwrap();
        assert!(b.slice(100).unwrap().iter().all(|x| x[0] == 0.0));
        let (_, var) = b.moments(0).unwrap();
        assert!((var[0] - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn drift_integral_of_constant_is_linear() {
        let b = brownian_bridge_ensemble(2, 1.0, 1.0, 20, 0.01, 1, &Recording::All).unwrap();
        let u = VectorField::constant(&[0.5, -1.0], 1.0);
        let x0 = InitialLaw::Point { x: vec![1.0, 2.0] };
        let x = drift_integral_ensemble(&u, 1.0, &b, &x0, 2).unwrap();
        for p in 0..20 {
            for k in [0usize, 37, 100] {
                let s = x.state_at_step(p, k).unwrap();
                let t = k as f64 * 0.01;
                assert!((s[0] - (1.0 + 0.5 * t)).abs() < 1e-12 && (s[1] - (2.0 - t)).abs() < 1e-12);
            }
        }
        let zero = drift_integral_ensemble(&VectorField::zero(2, 1.0), 1.0, &b, &x0, 2).unwrap();
        assert!(zero.slice(100).unwrap().iter().all(|s| s[..2] == [1.0, 2.0]));
    }

    #[test]
    fn drift_integral_converges_to_fine_grid_oracle() {
        // Brute force: a 10x finer left Riemann sum over the linearly
        // interpolated bridge path.
        let b = brownian_bridge_ensemble(1, 1.0, 1.0, 50, 0.01, 4, &Recording::All).unwrap();
        let u = VectorField::new("id", 1, 1.0, |_, x| *x);
        let x0 = InitialLaw::Point { x: vec![0.0] };
        let x = drift_integral_ensemble(&u, 1.0, &b, &x0, 1).unwrap();
        for p in 0..50 {
            let path: Vec<f64> = (0..=100).map(|k| b.state_at_step(p, k).unwrap()[0]).collect();
            let mut fine = 0.0;
            for j in 0..1000 {
                let s = j as f64 / 10.0;
                let (i, w) = (s.floor() as usize, s.fract());
                fine += ((1.0 - w) * path[i] + w * path[(i + 1).min(100)]) * 0.001;
            }
            let coarse = x.state_at_step(p, 100).unwrap()[0];
            // The two left sums telescope to B_0 (dt - dt_fine) / 2.
            assert!((coarse - fine).abs() <= 0.01 * path[0].abs() + 1e-12, "{coarse} {fine}");
        }
    }

    #[test]
    fn streaming_bridge_matches_two_stage_construction() {
        let u = VectorField::new("sin", 2, 1.0, |t, x| [x[1].sin() * (-t).exp(), 0.3 * x[0], 0.0]);
        let x0 = InitialLaw::Gaussian { mean: vec![0.0, 1.0], var: vec![0.2, 0.3] };
        let spec = DiffusionSpec::bridge_driven(u.clone(), 0.7, x0.clone(), 1.0).unwrap();
        let (b, x) = bridge_driven_ensembles(&spec, 30, 0.02, 5, &Recording::All).unwrap();
        let b2 = brownian_bridge_ensemble(2, 1.0, 1.0, 30, 0.02, 5, &Recording::All).unwrap();
        let x2 = drift_integral_ensemble(&u, 0.7, &b2, &x0, 5).unwrap();
        assert_eq!(b, b2);
        assert_eq!(x, x2);
        let strided = Recording::strided(10, 50, &[3]);
        let (bs, xs) = bridge_driven_ensembles(&spec, 30, 0.02, 5, &strided).unwrap();
        for &k in bs.steps() {
            assert_eq!(bs.slice(k).unwrap(), b2.slice(k).unwrap());
            assert_eq!(xs.slice(k).unwrap(), x2.slice(k).unwrap());
        }
    }

    #[test]
    fn reversal_is_an_involution() {
        let ens = simulate(&ou(0.5), 40, 0.01, 8, &Recording::strided(7, 100, &[50, 51])).unwrap();
        let back = reverse_ensemble(&reverse_ensemble(&ens));
        assert_eq!(ens, back);
        assert!(matches!(back.provenance(), Provenance::Simulated(_)));
        assert!(reverse_ensemble(&ens).label().starts_with("reversed("));
    }

    #[test]
    fn constant_paths_are_fixed_by_reversal() {
        let ens = simulate(&bm(0.0, InitialLaw::Gaussian { mean: vec![0.0], var: vec![1.0] }), 10, 0.1, 2, &Recording::All).unwrap();
        let r = reverse_ensemble(&ens);
        for k in 0..=10 {
            assert_eq!(ens.slice(k).unwrap(), r.slice(k).unwrap());
        }
    }

    #[test]
    fn reversed_brownian_motion_ends_at_zero() {
        let ens = simulate(&bm(1.0, InitialLaw::Point { x: vec![0.0] }), 100, 0.01, 2, &Recording::All).unwrap();
        let r = reverse_ensemble(&ens);
        assert!(r.slice(100).unwrap().iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn lambda0_quadratic_variation_vanishes() {
        let u = VectorField::new("rot", 2, 1.0, |_, x| [-x[1], x[0], 0.0]);
        let spec = DiffusionSpec::new(u, 0.0, InitialLaw::Gaussian { mean: vec![1.0, 0.0], var: vec![0.1, 0.1] }, 1.0).unwrap();
        let qv = |dt: f64| {
            let e = simulate(&spec, 20, dt, 1, &Recording::All).unwrap();
            let m = e.n_steps();
            (0..20)
                .map(|p| {
                    (0..m)
                        .map(|k| {
                            let d = crate::fields::sub(&e.state_at_step(p, k + 1).unwrap(), &e.state_at_step(p, k).unwrap());
                            crate::fields::dot(&d, &d)
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
        };
        assert!(qv(0.005) < 0.6 * qv(0.01));
    }

    #[test]
    fn rk4_tracks_exact_rotation() {
        let u = VectorField::new("rot", 2, 1.0, |_, x| [-x[1], x[0], 0.0]);
        let spec = DiffusionSpec::new(u, 0.0, InitialLaw::Point { x: vec![1.0, 0.0] }, 1.0).unwrap();
        let e = simulate(&spec, 1, 0.001, 1, &Recording::All).unwrap();
        let x = e.state_at_step(0, 1000).unwrap();
        assert!((x[0] - 1f64.cos()).abs() < 1e-12 && (x[1] - 1f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn weak_order_one_for_ou_mean() {
        // Started at x0 = 1 the exact mean is e^{-T}; the EM mean is (1-dt)^M.
        let b = VectorField::new("ou", 1, 1.0, |_, x| [-x[0], 0.0, 0.0]);
        let spec = DiffusionSpec::new(b, 1.0, InitialLaw::Point { x: vec![1.0] }, 1.0).unwrap();
        let err = |dt: f64| {
            let e = simulate(&spec, 200_000, dt, 11, &Recording::strided(usize::MAX, (1.0 / dt) as usize, &[])).unwrap();
            let k = e.n_steps();
            (e.moments(k).unwrap().0[0] - (-1f64).exp()).abs()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        // Bias 0.019 and 0.0094 against a Monte Carlo error of about 0.002.
        assert!(e1 > 0.01 && e2 < 0.75 * e1, "{e1} {e2}");
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let ens = simulate(&ou(0.5), 5, 0.1, 8, &Recording::All).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.csv");
        ens.write_csv(&path).unwrap();
        let back = PathEnsemble::read_csv(&path, 0.1, 10).unwrap();
        assert_eq!(ens, back);
    }
}

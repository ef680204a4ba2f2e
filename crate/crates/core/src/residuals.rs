//! Pointwise residuals `LHS - RHS` of the momentum and density equations.
//! A zero residual means the equation holds at the probe point.

use crate::error::{arg, Result};
use crate::fields::{
    add, dot, mat_vec, scale, sub, ExactFlow, FlowTag, ScalarField, SpaceTimePoint, Vector,
    VectorField, DEFAULT_STEP,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentumResidualKind {
    /// `∂_t u + (u·∇)u − νΔu + ∇p`
    NavierStokes { nu: f64 },
    /// `∂_t u + (u·∇)u + ∇p`
    Euler,
    /// `∂_t u − νΔu + ∇p`
    Stokes { nu: f64 },
    /// `∂_t u + (u_aux·∇)u − (σ²/2)Δu + ∇p`
    MixedForward { sigma: f64 },
    /// `∂_t u + (u_aux·∇)u + (σ²/2)Δu + ∇p`
    MixedBackward { sigma: f64 },
}

impl MomentumResidualKind {
    pub fn for_tag(tag: FlowTag, nu: f64) -> Option<Self> {
        match tag {
            FlowTag::NavierStokes => Some(Self::NavierStokes { nu }),
            FlowTag::Euler => Some(Self::Euler),
            FlowTag::Stokes => Some(Self::Stokes { nu }),
            FlowTag::None => None,
        }
    }
}

pub fn momentum_residual(
    kind: MomentumResidualKind,
    u: &VectorField,
    u_aux: Option<&VectorField>,
    p: &ScalarField,
    q: &SpaceTimePoint,
    step: f64,
) -> Result<Vector> {
    let ju = u.try_jet(q, step)?;
    let grad_p = p.try_jet(q, step)?.gradient;
    let base = add(&ju.dt, &grad_p);
    let advect = |v: &Vector| mat_vec(&ju.jacobian, v);
    let mixed_advect = |u_aux: Option<&VectorField>| -> Result<Vector> {
        match u_aux {
            Some(a) => Ok(advect(&a.try_eval(q)?)),
            None => arg("mixed residual kinds need the paired field u_aux"),
        }
    };
    Ok(match kind {
        MomentumResidualKind::NavierStokes { nu } => {
            sub(&add(&base, &advect(&ju.value)), &scale(nu, &ju.laplacian))
        }
        MomentumResidualKind::Euler => add(&base, &advect(&ju.value)),
        MomentumResidualKind::Stokes { nu } => sub(&base, &scale(nu, &ju.laplacian)),
        MomentumResidualKind::MixedForward { sigma } => {
            let a = mixed_advect(u_aux)?;
            sub(&add(&base, &a), &scale(0.5 * sigma * sigma, &ju.laplacian))
        }
        MomentumResidualKind::MixedBackward { sigma } => {
            let a = mixed_advect(u_aux)?;
            add(&add(&base, &a), &scale(0.5 * sigma * sigma, &ju.laplacian))
        }
    })
}

#[derive(Debug, Clone)]
pub enum DensityResidualKind {
    /// `∂_t ρ + ∇·(ρb) − κΔρ`
    FokkerPlanck { kappa: f64, drift: VectorField },
    /// `∂_t ρ − κΔρ`
    Heat { kappa: f64 },
    /// `∂_t ρ + ∇·(ρb)`
    Continuity { drift: VectorField },
}

pub fn density_residual(
    kind: &DensityResidualKind,
    rho: &ScalarField,
    q: &SpaceTimePoint,
    step: f64,
) -> Result<f64> {
    let jr = rho.try_jet(q, step)?;
    // ∇·(ρb) = b·∇ρ + ρ ∇·b
    let transport = |b: &VectorField| -> Result<f64> {
        let jb = b.try_jet(q, step)?;
        Ok(dot(&jb.value, &jr.gradient) + jr.value * jb.divergence)
    };
    Ok(match kind {
        DensityResidualKind::FokkerPlanck { kappa, drift } => {
            jr.dt + transport(drift)? - kappa * jr.laplacian
        }
        DensityResidualKind::Heat { kappa } => jr.dt - kappa * jr.laplacian,
        DensityResidualKind::Continuity { drift } => jr.dt + transport(drift)?,
    })
}

/// Residual of the equation a library flow is tagged with.
pub fn flow_residual(flow: &ExactFlow, tag: FlowTag, q: &SpaceTimePoint) -> Result<Vector> {
    match MomentumResidualKind::for_tag(tag, flow.viscosity) {
        Some(kind) => momentum_residual(kind, &flow.velocity, None, &flow.pressure, q, DEFAULT_STEP),
        None => arg("flow carries no equation tag"),
    }
}

/// Isotropic Gaussian density `N(0, (2κt + s0)·I)` in `dim` dimensions.
pub fn heat_kernel_density(dim: usize, kappa: f64, s0: f64, horizon: f64) -> ScalarField {
    ScalarField::new("heat_kernel", dim, horizon, move |t, x| {
        let var = 2.0 * kappa * t + s0;
        let r2: f64 = x[..dim].iter().map(|c| c * c).sum();
        (-0.5 * r2 / var).exp() / (2.0 * std::f64::consts::PI * var).powf(dim as f64 / 2.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{exact_flow, norm, FlowSpec, ScalarJet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const H: f64 = DEFAULT_STEP;

    fn probes(n: usize, seed: u64) -> Vec<SpaceTimePoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                SpaceTimePoint::new(
                    rng.random_range(0.0..1.0),
                    &[rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
                )
            })
            .collect()
    }

    #[test]
    fn taylor_green_solves_navier_stokes() {
        let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.05 }, 1.0).unwrap();
        for q in probes(100, 11) {
            let r = flow_residual(&flow, FlowTag::NavierStokes, &q).unwrap();
            assert!(norm(&r) <= 10.0 * H * H, "{r:?}");
        }
    }

    #[test]
    fn taylor_green_residual_with_finite_differences_only() {
        // Strip the analytic jets so the check runs on the fd route.
        let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.05 }, 1.0).unwrap();
        let (u0, p0) = (flow.velocity.clone(), flow.pressure.clone());
        let u = VectorField::new("tg_fd", 2, 1.0, move |t, x| u0.eval(t, x));
        let p = ScalarField::new("tg_p_fd", 2, 1.0, move |t, x| p0.eval(t, x));
        for q in probes(100, 12) {
            let r = momentum_residual(MomentumResidualKind::NavierStokes { nu: 0.05 }, &u, None, &p, &q, H)
                .unwrap();
            assert!(norm(&r) <= 10.0 * H * H, "{r:?}");
        }
    }

    #[test]
    fn rigid_rotation_solves_euler() {
        let flow = exact_flow(&FlowSpec::RigidRotation { omega: 1.0 }, 1.0).unwrap();
        let r = flow_residual(&flow, FlowTag::Euler, &SpaceTimePoint::new(0.0, &[1.0, 0.0])).unwrap();
        assert_eq!(r, [0.0; 3]);
        for q in probes(100, 13) {
            assert!(norm(&flow_residual(&flow, FlowTag::Euler, &q).unwrap()) <= 10.0 * H * H);
        }
    }

    #[test]
    fn shear_mode_solves_stokes_and_navier_stokes() {
        let flow = exact_flow(&FlowSpec::ShearMode { nu: 0.1 }, 1.0).unwrap();
        for q in probes(100, 14) {
            for tag in [FlowTag::Stokes, FlowTag::NavierStokes] {
                assert!(norm(&flow_residual(&flow, tag, &q).unwrap()) <= 10.0 * H * H);
            }
        }
    }

    #[test]
    fn uniform_flow_solves_everything() {
        let flow = exact_flow(&FlowSpec::Uniform { c: vec![1.0, 2.0] }, 1.0).unwrap();
        for q in probes(20, 15) {
            for tag in [FlowTag::Stokes, FlowTag::NavierStokes, FlowTag::Euler] {
                assert!(flow.solves(tag));
                assert_eq!(norm(&flow_residual(&flow, tag, &q).unwrap()), 0.0);
            }
        }
    }

    #[test]
    fn stokes_residual_of_taylor_green_is_the_advective_term() {
        let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.05 }, 1.0).unwrap();
        let q = SpaceTimePoint::new(0.0, &[PI / 4.0, 0.0]);
        let r = momentum_residual(
            MomentumResidualKind::Stokes { nu: 0.05 },
            &flow.velocity,
            None,
            &flow.pressure,
            &q,
            H,
        )
        .unwrap();
        // Finite-difference oracle for −(u·∇)u.
        let fd = flow.velocity.fd_jet(&q, H).unwrap();
        let expected = scale(-1.0, &mat_vec(&fd.jacobian, &fd.value));
        assert!(norm(&expected) > 0.1);
        assert!(norm(&sub(&r, &expected)) < 1e-5);
    }

    #[test]
    fn navier_stokes_with_zero_viscosity_is_euler() {
        let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.2 }, 1.0).unwrap();
        for q in probes(30, 16) {
            let a = momentum_residual(MomentumResidualKind::NavierStokes { nu: 0.0 }, &flow.velocity, None, &flow.pressure, &q, H).unwrap();
            let b = momentum_residual(MomentumResidualKind::Euler, &flow.velocity, None, &flow.pressure, &q, H).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mixed_forward_with_self_pairing_is_negative_viscosity_navier_stokes() {
        let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.05 }, 1.0).unwrap();
        let sigma = 0.7_f64;
        for q in probes(30, 17) {
            let mixed = momentum_residual(
                MomentumResidualKind::MixedForward { sigma },
                &flow.velocity,
                Some(&flow.velocity),
                &flow.pressure,
                &q,
                H,
            )
            .unwrap();
            let ns = momentum_residual(
                MomentumResidualKind::NavierStokes { nu: 0.5 * sigma * sigma },
                &flow.velocity,
                None,
                &flow.pressure,
                &q,
                H,
            )
            .unwrap();
            assert!(norm(&sub(&mixed, &ns)) < 1e-14);
        }
    }

    #[test]
    fn mixed_kinds_need_aux_field() {
        let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.05 }, 1.0).unwrap();
        let q = SpaceTimePoint::new(0.5, &[0.1, 0.2]);
        for kind in [
            MomentumResidualKind::MixedForward { sigma: 1.0 },
            MomentumResidualKind::MixedBackward { sigma: 1.0 },
        ] {
            assert!(momentum_residual(kind, &flow.velocity, None, &flow.pressure, &q, H).is_err());
        }
    }

    #[test]
    fn pressure_enters_linearly() {
        let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.05 }, 1.0).unwrap();
        let extra = ScalarField::new("x1", 2, 1.0, |t, x| t * x[0]).with_jet(|t, x| ScalarJet {
            value: t * x[0],
            dt: x[0],
            gradient: [t, 0.0, 0.0],
            laplacian: 0.0,
        });
        let p0 = flow.pressure.clone();
        let summed = ScalarField::new("p+x1", 2, 1.0, move |t, x| p0.eval(t, x) + t * x[0]);
        for q in probes(20, 18) {
            let kind = MomentumResidualKind::NavierStokes { nu: 0.05 };
            let a = momentum_residual(kind, &flow.velocity, None, &summed, &q, H).unwrap();
            let b = momentum_residual(kind, &flow.velocity, None, &flow.pressure, &q, H).unwrap();
            let g = extra.try_jet(&q, H).unwrap().gradient;
            assert!(norm(&sub(&a, &add(&b, &g))) < 10.0 * H * H);
        }
    }

    #[test]
    fn gaussian_heat_kernel_solves_heat_equation() {
        let kappa = 0.3;
        let rho = heat_kernel_density(2, kappa, 0.5, 1.0);
        for q in probes(100, 19) {
            let q = SpaceTimePoint::new(q.t, &[q.x[0] / 2.0, q.x[1] / 2.0]);
            let r = density_residual(&DensityResidualKind::Heat { kappa }, &rho, &q, H).unwrap();
            assert!(r.abs() <= 10.0 * H * H, "{r}");
            let fp = density_residual(
                &DensityResidualKind::FokkerPlanck { kappa, drift: VectorField::zero(2, 1.0) },
                &rho,
                &q,
                H,
            )
            .unwrap();
            assert_eq!(r, fp);
        }
    }

    #[test]
    fn uniform_density_is_transported_by_divergence_free_flow() {
        let flow = exact_flow(&FlowSpec::TaylorGreen { nu: 0.0 }, 1.0).unwrap();
        let rho = ScalarField::new("uniform", 2, 1.0, |_, _| 1.0 / (PI * PI));
        for q in probes(20, 20) {
            let r = density_residual(&DensityResidualKind::Continuity { drift: flow.velocity.clone() }, &rho, &q, H)
                .unwrap();
            assert!(r.abs() < 1e-12);
        }
    }
}

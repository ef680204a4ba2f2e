//! End-to-end scenarios: simulate, estimate, and compare with closed forms.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::action::{
    criticality_test, default_bumps, el_residual, ActionReport, ElForm, ElResidualReport, Kinematics, LagrangianSpec,
    PressureSign, ResidualParams, Thresholds, VariationSpec, Verdict,
};
use crate::error::{LabError, Result};
use crate::fields::{
    add, dot, exact_flow, mat_vec, norm, scale, sub, ExactFlow, FlowSpec, ScalarField, SpaceTimePoint, TimeReversible,
    Vector, VectorField, VectorJet, DEFAULT_STEP,
};
use crate::nelson::{
    estimate_drift, estimate_drift_gap, kernel_regression, silverman_bandwidth, square_grid, DensityEstimate,
    Direction, NelsonParams,
};
use crate::paths::{
    bridge_driven_ensembles, brownian_bridge_ensemble, reverse_ensemble, simulate, DiffusionSpec, InitialLaw,
    PathEnsemble, Recording,
};
use crate::residuals::{density_residual, momentum_residual, DensityResidualKind, MomentumResidualKind};
use crate::stats::rms;

use super::config::{NegativeControl, ScenarioConfig};
use super::fokker_planck::{gaussian_density, snapshots_as_field, solve_fokker_planck, FpGrid};
use super::report::{Check, ScenarioReport, Status, Table};

/// Gaussian start shifted off the Taylor–Green stagnation points.
fn default_gaussian() -> InitialLaw {
    InitialLaw::Gaussian {
        mean: vec![PI / 4.0, PI / 4.0],
        var: vec![0.5, 0.5],
    }
}

fn center_of(init: &InitialLaw) -> [f64; 2] {
    match init {
        InitialLaw::Gaussian { mean, .. } => [mean[0], mean[1]],
        InitialLaw::UniformBox { lo, hi } => [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])],
        InitialLaw::Point { x } => [x[0], x[1]],
    }
}

fn probe_grid(cfg: &ScenarioConfig, center: [f64; 2], half: f64) -> Vec<Vector> {
    square_grid(
        [center[0] - half, center[1] - half],
        [center[0] + half, center[1] + half],
        cfg.probe_points,
    )
}

fn probe_times(cfg: &ScenarioConfig) -> [f64; 3] {
    let t = cfg.horizon;
    [0.25 * t, 0.5 * t, 0.75 * t]
}

/// Strided steps plus each probe step and its lagged neighbours, mirrored
/// so the reversed ensemble carries them too.
fn recording(cfg: &ScenarioConfig, times: &[f64], lags: &[usize]) -> Recording {
    let m = cfg.n_steps();
    let mut extras = Vec::new();
    for &t in times {
        let k = (t / cfg.dt).round() as usize;
        for &l in std::iter::once(&0).chain(lags) {
            for kk in [k.checked_add(l), k.checked_sub(l)].into_iter().flatten() {
                if kk <= m {
                    extras.push(kk);
                    extras.push(m - kk);
                }
            }
        }
    }
    Recording::strided(cfg.stride(), m, &extras)
}

fn t_buffer(cfg: &ScenarioConfig) -> f64 {
    (8.0 * cfg.dt).max(0.05 * cfg.horizon)
}

fn residual_params(cfg: &ScenarioConfig, ens: &PathEnsemble) -> ResidualParams {
    ResidualParams {
        probe_times: probe_times(cfg),
        h: cfg.lag_steps as f64 * cfg.dt,
        bandwidth: cfg.bandwidth,
        ..ResidualParams::for_ensemble(ens)
    }
}

fn flow(cfg: &ScenarioConfig) -> Result<ExactFlow> {
    exact_flow(&cfg.flow_spec()?, cfg.horizon)
}

fn criticality_check(name: &str, rep: &ActionReport) -> Check {
    let worst = rep.variations.iter().map(|v| v.ratio).fold(0.0, f64::max);
    let c = Check::at_most(name, worst, 1.0).with_note(format!("verdict {:?}; value is max |dF|/threshold", rep.verdict));
    match rep.verdict {
        Verdict::Critical => c,
        Verdict::NotCritical => Check { status: Status::Fail, ..c },
        Verdict::Inconclusive => Check { status: Status::Inconclusive, ..c },
    }
}

fn not_critical_check(name: &str, rep: &ActionReport) -> Check {
    let worst = rep.variations.iter().map(|v| v.ratio).fold(0.0, f64::max);
    let c = Check::at_least(name, worst, 3.0)
        .control()
        .with_note(format!("verdict {:?}; value is max |dF|/threshold", rep.verdict));
    if rep.verdict == Verdict::NotCritical {
        Check { status: Status::Pass, ..c }
    } else {
        Check { status: Status::Fail, ..c }
    }
}

fn variation_table(rep: &ActionReport) -> Table {
    let mut t = Table::new(&["label", "eps", "df", "stderr", "norm_z", "threshold", "ratio"]);
    for v in &rep.variations {
        let r = &v.result;
        t.push_text(vec![
            r.label.clone(),
            format!("{:.10e}", r.eps),
            format!("{:.10e}", r.df),
            format!("{:.10e}", r.stderr),
            format!("{:.10e}", r.norm_z),
            format!("{:.10e}", v.threshold),
            format!("{:.10e}", v.ratio),
        ]);
    }
    t
}

fn residual_table(r: &ElResidualReport) -> Table {
    let mut t = Table::new(&["t", "x1", "x2", "closed1", "closed2", "emp1", "emp2", "se1", "se2"]);
    for row in &r.rows {
        t.push(vec![
            row.t,
            row.x[0],
            row.x[1],
            row.closed_form[0],
            row.closed_form[1],
            row.empirical[0],
            row.empirical[1],
            row.stderr[0],
            row.stderr[1],
        ]);
    }
    t
}

fn residual_checks(report: &mut ScenarioReport, prefix: &str, r: &ElResidualReport, rel: f64) {
    let tol = rel * r.pressure_scale;
    report.push(Check::at_most(format!("{prefix}_closed_form"), r.norm, tol).with_note("ensemble L2 norm vs pressure-gradient scale"));
    report.push(
        Check::at_most(format!("{prefix}_empirical"), r.empirical_norm, tol)
            .with_stderr(r.empirical_stderr)
            .with_note("grid RMS of regressed quotient residual"),
    );
}

fn variations(cfg: &ScenarioConfig, with_bridges: bool) -> Vec<VariationSpec> {
    let mut v = default_bumps(2, cfg.variation_eps);
    if with_bridges {
        for stream in 0..4u64 {
            for e in [[1.0, 0.0], [0.0, 1.0]] {
                v.push(VariationSpec::bridge(1.0, &e, cfg.variation_eps, stream));
            }
        }
    }
    v
}

fn thresholds(cfg: &ScenarioConfig) -> Thresholds {
    cfg.thresholds.criticality
}

/// Right-velocity and reversed left-velocity constructions plus the viscosity control.
pub fn navier_stokes(cfg: &ScenarioConfig, report: &mut ScenarioReport) -> Result<()> {
    let flow = flow(cfg)?;
    let (u, p) = (flow.velocity.clone(), flow.pressure.clone());
    let ubar = u.time_reversed(true);
    let init = cfg.initial.clone().unwrap_or_else(default_gaussian);
    let center = center_of(&init);
    let grid = probe_grid(cfg, center, 1.0);
    let rec = recording(cfg, &probe_times(cfg), &[cfg.lag_steps]);
    let spec = DiffusionSpec::new(ubar.clone(), cfg.sigma(), init.clone(), cfg.horizon)?;
    let ens = simulate(&spec, cfg.n_paths, cfg.dt, cfg.seed, &rec)?;
    let rel = cfg.thresholds.residual_relative;
    let th = thresholds(cfg);
    let tb = t_buffer(cfg);

    // Right velocity ū with L = v²/2 + p̄.
    let lag2 = LagrangianSpec::new(p.clone(), PressureSign::PlusPBar);
    let res2 = el_residual(&ens, &lag2, 1.0, ElForm::Sel, &grid, &residual_params(cfg, &ens))?;
    residual_checks(report, "sel_residual_right", &res2, rel);
    report.tables.insert("residual_right".into(), residual_table(&res2));
    let kin = Kinematics::diffusion(&ens)?;
    let mut rep2 = criticality_test("right_velocity_plus_p_bar", &kin, &lag2, &variations(cfg, false), 1.0, &th, tb, cfg.seed)?;
    rep2.residual_norms = Some((&res2).into());
    report.push(criticality_check("criticality_right", &rep2));
    report.tables.insert("variations_right".into(), variation_table(&rep2));

    // Left velocity of the reversed process with L = v²/2 − p.
    let rev = reverse_ensemble(&ens);
    let lag1 = LagrangianSpec::new(p.clone(), PressureSign::MinusP);
    let res1 = el_residual(&rev, &lag1, -1.0, ElForm::Sel, &grid, &residual_params(cfg, &rev))?;
    residual_checks(report, "sel_residual_left", &res1, rel);
    let kin1 = Kinematics::diffusion(&rev)?;
    let mut rep1 = criticality_test("left_velocity_minus_p", &kin1, &lag1, &variations(cfg, false), -1.0, &th, tb, cfg.seed)?;
    rep1.residual_norms = Some((&res1).into());
    report.push(criticality_check("criticality_left", &rep1));
    report.tables.insert("variations_left".into(), variation_table(&rep1));

    // The reversed process's backward drift is φ(ū) = u.
    report.try_push("reversal_consistency", || {
        let t = 0.5 * cfg.horizon;
        let mut params = NelsonParams::for_grid(cfg.dt, cfg.horizon).with_h(cfg.lag_steps as f64 * cfg.dt);
        params.bandwidth = cfg.bandwidth;
        let est = estimate_drift_gap(&rev, t, &grid, &params, Direction::Backward, |x| u.eval(t, x))?;
        let worst = est
            .points
            .iter()
            .map(|p| norm(&p.value) / norm(&p.stderr).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        Ok(Check::at_most("reversal_consistency", worst, 3.0).with_note("max |D_* X̄ − u| / stderr over the probe grid"))
    });
    report.action.push(rep2);
    report.action.push(rep1);
    drop(rev);
    drop(kin);
    drop(ens);

    // Control: σ²/2 = factor·ν with the same drift.
    if let Some(NegativeControl::ViscosityScale { factor }) = cfg.negative_control()? {
        let sigma_c = (2.0 * factor * cfg.nu()).sqrt();
        let spec_c = DiffusionSpec::new(ubar, sigma_c, init, cfg.horizon)?;
        let ens_c = simulate(&spec_c, cfg.n_paths, cfg.dt, cfg.seed, &rec)?;
        let res_c = el_residual(&ens_c, &lag2, 1.0, ElForm::Sel, &grid, &residual_params(cfg, &ens_c))?;
        report.push(
            Check::at_least(
                "control_residual_ratio",
                res_c.empirical_norm / res2.empirical_norm.max(f64::MIN_POSITIVE),
                cfg.thresholds.control_ratio,
            )
            .control()
            .with_note(format!(
                "empirical {:.4e} vs {:.4e}; closed form {:.4e} vs {:.4e}",
                res_c.empirical_norm, res2.empirical_norm, res_c.norm, res2.norm
            )),
        );
        let kin_c = Kinematics::diffusion(&ens_c)?;
        let th_c = Thresholds { scale: Some(report.action[0].scale), ..th };
        let rep_c = criticality_test("control_viscosity", &kin_c, &lag2, &variations(cfg, false), 1.0, &th_c, tb, cfg.seed)?;
        report.push(not_critical_check("control_not_critical", &rep_c));
        report.tables.insert("variations_control".into(), variation_table(&rep_c));
        report.action.push(rep_c);
    }
    Ok(())
}

/// Deterministic flows: classical least action through the stochastic machinery.
pub fn euler(cfg: &ScenarioConfig, report: &mut ScenarioReport) -> Result<()> {
    let flow = flow(cfg)?;
    let init = cfg.initial.clone().unwrap_or(InitialLaw::Gaussian {
        mean: vec![1.0, 0.5],
        var: vec![0.1, 0.1],
    });
    let center = center_of(&init);
    let grid = probe_grid(cfg, center, 0.5);
    let rec = recording(cfg, &probe_times(cfg), &[cfg.lag_steps]);
    let spec = DiffusionSpec::new(flow.velocity.clone(), 0.0, init, cfg.horizon)?;
    let ens = simulate(&spec, cfg.n_paths, cfg.dt, cfg.seed, &rec)?;
    let th = thresholds(cfg);
    let tb = t_buffer(cfg);
    let lag = LagrangianSpec::new(flow.pressure.clone(), PressureSign::MinusP);
    let kin = Kinematics::diffusion(&ens)?;
    let vars = variations(cfg, true);
    let mut rep = criticality_test("deterministic_flow", &kin, &lag, &vars, cfg.mu, &th, tb, cfg.seed)?;
    let quad = rep
        .variations
        .iter()
        .filter(|v| v.result.label.starts_with("bump"))
        .map(|v| v.result.df.abs() / v.result.norm_z)
        .fold(0.0, f64::max);
    report.push(Check::at_most("bump_quadrature", quad, cfg.thresholds.quadrature).with_note("max |dF|/|Z| over N1 bumps"));
    report.push(criticality_check("criticality", &rep));
    for form in [ElForm::Sel, ElForm::Gsel] {
        let r = el_residual(&ens, &lag, cfg.mu, form, &grid, &residual_params(cfg, &ens))?;
        let name = match form {
            ElForm::Sel => "sel_residual",
            ElForm::Gsel => "gsel_residual",
        };
        residual_checks(report, name, &r, cfg.thresholds.residual_relative);
        if form == ElForm::Sel {
            rep.residual_norms = Some((&r).into());
        }
    }
    report.tables.insert("variations".into(), variation_table(&rep));

    if let Some(NegativeControl::PressureScale { factor }) = cfg.negative_control()? {
        let wrong = LagrangianSpec::new(flow.pressure.scaled(factor), PressureSign::MinusP);
        let th_c = Thresholds { scale: Some(rep.scale), ..th };
        let rep_c = criticality_test("control_pressure", &kin, &wrong, &vars, cfg.mu, &th_c, tb, cfg.seed)?;
        let worst = rep_c.variations.iter().map(|v| v.ratio).fold(0.0, f64::max);
        report.push(
            Check::at_least("control_pressure_ratio", worst, cfg.thresholds.pressure_control_ratio)
                .control()
                .with_note("max |dF|/threshold under the scaled pressure"),
        );
        report.push(not_critical_check("control_not_critical", &rep_c));
        report.tables.insert("variations_control".into(), variation_table(&rep_c));
        report.action.push(rep);
        report.action.push(rep_c);
    } else {
        report.action.push(rep);
    }
    Ok(())
}

/// `u + magnitude·sin(x₁)e₁`, steady perturbation with an analytic jet.
fn bumped_field(u: &VectorField, magnitude: f64) -> VectorField {
    let (a, b) = (u.clone(), u.clone());
    VectorField::new(format!("{}+bump", u.name()), 2, u.horizon(), move |t, x| {
        add(&a.eval(t, x), &[magnitude * x[0].sin(), 0.0, 0.0])
    })
    .with_jet(move |t, x| {
        let j = b.jet(t, x, DEFAULT_STEP);
        let mut jac = j.jacobian;
        jac[0][0] += magnitude * x[0].cos();
        VectorJet {
            value: add(&j.value, &[magnitude * x[0].sin(), 0.0, 0.0]),
            dt: j.dt,
            jacobian: jac,
            laplacian: add(&j.laplacian, &[-magnitude * x[0].sin(), 0.0, 0.0]),
            divergence: j.divergence + magnitude * x[0].cos(),
        }
    })
}

/// `∂_t u + σ_b (∇u)·D̂_*B − νΔu + ∇p` at `(t, σ_b x)` on the probe grid.
fn bridge_residual(
    u: &VectorField,
    p: &ScalarField,
    nu: f64,
    sigma_b: f64,
    t: f64,
    drift: &[(Vector, Vector)],
) -> (f64, f64) {
    let mut res = Vec::new();
    let mut field = Vec::new();
    for (x, dstar) in drift {
        let y = scale(sigma_b, x);
        let j = u.jet(t, &y, DEFAULT_STEP);
        let gp = p.jet(t, &y, DEFAULT_STEP).gradient;
        let r = add(
            &sub(&add(&j.dt, &scale(sigma_b, &mat_vec(&j.jacobian, dstar))), &scale(nu, &j.laplacian)),
            &gp,
        );
        res.push(r);
        field.push(j.value);
    }
    (rms(&res), rms(&field))
}

/// Bridge-driven process: backward drift of the bridge, strong residual,
/// criticality, and a steady drift-perturbation control.
pub fn stokes(cfg: &ScenarioConfig, report: &mut ScenarioReport) -> Result<()> {
    let flow = flow(cfg)?;
    let sigma_b = cfg.sigma();
    let init = cfg.initial.clone().unwrap_or(InitialLaw::Gaussian {
        mean: vec![0.0, 0.0],
        var: vec![0.5, 0.5],
    });
    let times = probe_times(cfg);
    let rec = recording(cfg, &times, &[cfg.bridge_lag_steps]);
    let spec = DiffusionSpec::bridge_driven(flow.velocity.clone(), sigma_b, init, cfg.horizon)?;
    let (bridge, _x) = bridge_driven_ensembles(&spec, cfg.n_paths, cfg.dt, cfg.seed, &rec)?;
    let grid = probe_grid(cfg, [0.0, 0.0], 1.0);
    let params = {
        let mut p = NelsonParams::for_grid(cfg.dt, cfg.horizon).with_h(cfg.bridge_lag_steps as f64 * cfg.dt);
        p.bandwidth = Some(cfg.bridge_bandwidth);
        p.t_buffer = p.t_buffer.max(p.h);
        p
    };
    let mut drift_table = Table::new(&["t", "x1", "x2", "d1", "d2", "se1", "se2"]);
    let mut estimates = Vec::new();
    for &t in &times {
        let est = estimate_drift(&bridge, t, &grid, &params, Direction::Backward)?;
        for p in &est.points {
            drift_table.push(vec![est.t, p.x[0], p.x[1], p.value[0], p.value[1], p.stderr[0], p.stderr[1]]);
        }
        estimates.push(est);
    }
    let mid = &estimates[1];
    let worst = mid
        .points
        .iter()
        .map(|p| norm(&p.value) / norm(&p.stderr).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    report.push(Check::at_most("bridge_backward_drift", worst, 3.0).with_note("max |D_* B| / stderr at T/2"));
    report.tables.insert("bridge_drift".into(), drift_table);

    let residual_for = |u: &VectorField| -> (f64, f64) {
        let mut r2 = 0.0;
        let mut f2 = 0.0;
        for est in &estimates {
            let pts: Vec<(Vector, Vector)> = est.points.iter().map(|p| (p.x, p.value)).collect();
            let (r, f) = bridge_residual(u, &flow.pressure, cfg.nu(), sigma_b, est.t, &pts);
            r2 += r * r;
            f2 += f * f;
        }
        let n = estimates.len() as f64;
        ((r2 / n).sqrt(), (f2 / n).sqrt())
    };
    let (res, field_scale) = residual_for(&flow.velocity);
    let tol = cfg.thresholds.field_relative * field_scale;
    report.push(Check::at_most("strong_residual", res, tol).with_note(format!("field scale {field_scale:.4e}")));

    let lag = LagrangianSpec::new(flow.pressure.clone(), PressureSign::MinusP);
    let kin = Kinematics::BridgeDriven {
        bridge: &bridge,
        u: flow.velocity.clone(),
        sigma_b,
    };
    let rep = criticality_test("bridge_driven", &kin, &lag, &variations(cfg, true), 1.0, &thresholds(cfg), t_buffer(cfg), cfg.seed)?;
    report.push(criticality_check("criticality", &rep));
    report.tables.insert("variations".into(), variation_table(&rep));
    report.action.push(rep);

    if let Some(NegativeControl::DriftBump { magnitude }) = cfg.negative_control()? {
        let bumped = bumped_field(&flow.velocity, magnitude);
        let (res_c, _) = residual_for(&bumped);
        report.push(
            Check::at_least("control_residual_ratio", res_c / res.max(f64::MIN_POSITIVE), cfg.thresholds.control_ratio)
                .control()
                .with_note(format!("control {res_c:.4e} vs solution {res:.4e}")),
        );
        report.push(Check::at_least("control_exceeds_tolerance", res_c, tol).control());
    }
    Ok(())
}

/// KDE L¹ distance to a reference density over a box, by a tensor midpoint rule.
fn kde_l1(kde: &DensityEstimate, reference: &(dyn Fn(&Vector) -> f64 + Sync), lo: [f64; 2], hi: [f64; 2], n: usize) -> f64 {
    let h = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
    (0..n * n)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (c / n, c % n);
            let x = [lo[0] + (i as f64 + 0.5) * h[0], lo[1] + (j as f64 + 0.5) * h[1], 0.0];
            (kde.density(&x) - reference(&x)).abs()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        * h[0]
        * h[1]
}

/// Temperature / Fokker–Planck duality in the three flow regimes.
pub fn temperature(cfg: &ScenarioConfig, report: &mut ScenarioReport) -> Result<()> {
    let flow = flow(cfg)?;
    let kappa = cfg.kappa;
    let tol = cfg.thresholds.density_l1;
    let big_t = cfg.horizon;
    let check_times = [0.25 * big_t, 0.5 * big_t, big_t];
    let steps: Vec<usize> = std::iter::once(0)
        .chain(check_times.iter().map(|t| (t / cfg.dt).round() as usize))
        .collect();
    let rec = Recording::Steps(steps);

    // Navier–Stokes velocity transporting heat with diffusivity κ.
    let init = cfg.initial.clone().unwrap_or_else(default_gaussian);
    let (mean, var) = match &init {
        InitialLaw::Gaussian { mean, var } => ([mean[0], mean[1]], [var[0], var[1]]),
        _ => return Err(LabError::Config("temperature scenario needs a gaussian initial law".into())),
    };
    let spec = DiffusionSpec::new(flow.velocity.clone(), (2.0 * kappa).sqrt(), init, big_t)?;
    let ens = simulate(&spec, cfg.n_paths, cfg.dt, cfg.seed, &rec)?;
    let sd = var[0].max(var[1]).sqrt() + (2.0 * kappa * big_t).sqrt();
    let fp_grid = FpGrid {
        lo: [mean[0] - 6.0 * sd, mean[1] - 6.0 * sd],
        hi: [mean[0] + 6.0 * sd, mean[1] + 6.0 * sd],
        dx: 0.05,
    };
    let snap_times: Vec<f64> = (1..=20).map(|i| i as f64 * big_t / 20.0).collect();
    let snaps = solve_fokker_planck(&flow.velocity, kappa, gaussian_density(mean, var), fp_grid, &snap_times)?;
    let box_lo = [mean[0] - 3.0, mean[1] - 3.0];
    let box_hi = [mean[0] + 3.0, mean[1] + 3.0];
    let mut table = Table::new(&["t", "x1", "x2", "kde", "grid"]);
    let mut kdes = Vec::new();
    for &t in &check_times {
        let kde = DensityEstimate::from_samples(t, ens.slice(ens.step_at(t))?, 2, cfg.bandwidth)?;
        let snap = snaps
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .expect("snapshots");
        let l1 = kde_l1(&kde, &|x| snap.eval(x), box_lo, box_hi, 120);
        report.push(Check::at_most(format!("ns_kde_vs_grid_t{t}"), l1, tol));
        for x in square_grid(box_lo, box_hi, 25) {
            table.push(vec![t, x[0], x[1], kde.density(&x), snap.eval(&x)]);
        }
        kdes.push((t, kde));
    }
    report.tables.insert("density_navier_stokes".into(), table);

    // The grid solution against the density residual operator.
    report.try_push("ns_grid_fokker_planck_residual", || {
        let dx = fp_grid.dx;
        let field = snapshots_as_field(snaps.clone(), big_t);
        let kind = DensityResidualKind::FokkerPlanck {
            kappa,
            drift: flow.velocity.clone(),
        };
        let t = 0.5 * big_t;
        let snap = &snaps[9];
        let mut r2 = 0.0;
        let mut s2 = 0.0;
        for (i, j) in snap.nodes_in(box_lo, box_hi).into_iter().filter(|(i, j)| i % 4 == 0 && j % 4 == 0) {
            let x = snap.node(i, j);
            let q = SpaceTimePoint::new(t, &x[..2]);
            let r = density_residual(&kind, &field, &q, dx)?;
            let jr = field.try_jet(&q, dx)?;
            let jb = flow.velocity.jet(t, &x, DEFAULT_STEP);
            let transport = dot(&jb.value, &jr.gradient) + jr.value * jb.divergence;
            let s = jr.dt.abs() + transport.abs() + kappa * jr.laplacian.abs();
            r2 += r * r;
            s2 += s * s;
        }
        Ok(Check::at_most(
            "ns_grid_fokker_planck_residual",
            (r2 / s2.max(f64::MIN_POSITIVE)).sqrt(),
            cfg.thresholds.residual_relative,
        )
        .with_note("relative to the size of the individual terms"))
    });

    if let Some(NegativeControl::ViscosityScale { factor }) = cfg.negative_control()? {
        report.try_push("control_wrong_kappa", || {
            let wrong = solve_fokker_planck(&flow.velocity, factor * kappa, gaussian_density(mean, var), fp_grid, &[big_t])?;
            let (_, kde) = kdes.last().expect("kde at T");
            let l1 = kde_l1(kde, &|x| wrong[0].eval(x), box_lo, box_hi, 120);
            Ok(Check::at_least("control_wrong_kappa", l1, tol).control().with_note(format!("grid solve with kappa x {factor}")))
        });
    }
    drop(ens);

    // Bridge case: √(2κ)·B̄ is a Brownian motion.
    let sb = (2.0 * kappa).sqrt();
    let m = cfg.n_steps();
    let mirrored = match &rec {
        Recording::Steps(s) => Recording::Steps(s.iter().flat_map(|&k| [k, m - k]).collect()),
        Recording::All => Recording::All,
    };
    let bridge = brownian_bridge_ensemble(2, big_t, sb, cfg.n_paths, cfg.dt, cfg.seed, &mirrored)?;
    let rev = reverse_ensemble(&bridge);
    let mut table = Table::new(&["t", "x1", "x2", "kde", "heat"]);
    for &t in &check_times {
        let kde = DensityEstimate::from_samples(t, rev.slice(rev.step_at(t))?, 2, cfg.bandwidth)?;
        let v = 2.0 * kappa * t;
        let heat = gaussian_density([0.0, 0.0], [v, v]);
        let half = 4.0 * v.sqrt();
        let l1 = kde_l1(&kde, &heat, [-half, -half], [half, half], 120);
        report.push(Check::at_most(format!("bridge_kde_vs_heat_t{t}"), l1, tol));
        for x in square_grid([-half, -half], [half, half], 25) {
            table.push(vec![t, x[0], x[1], kde.density(&x), heat(&x)]);
        }
    }
    report.tables.insert("density_bridge".into(), table);
    drop(rev);
    drop(bridge);

    // Deterministic steady Taylor–Green: a uniform density stays uniform.
    let tg = exact_flow(&FlowSpec::TaylorGreen { nu: 0.0 }, big_t)?;
    let period = 2.0 * PI;
    let box_law = InitialLaw::UniformBox {
        lo: vec![0.0, 0.0],
        hi: vec![period, period],
    };
    let spec = DiffusionSpec::new(tg.velocity.clone(), 0.0, box_law, big_t)?;
    let ens = simulate(&spec, cfg.n_paths, cfg.dt, cfg.seed, &Recording::Steps(vec![0, cfg.n_steps()]))?;
    let wrapped: Vec<Vector> = ens
        .slice(cfg.n_steps())?
        .iter()
        .map(|x| [x[0].rem_euclid(period), x[1].rem_euclid(period), 0.0])
        .collect();
    let kde = DensityEstimate::from_samples(big_t, wrapped, 2, cfg.bandwidth)?;
    let uniform = 1.0 / (period * period);
    let l1 = kde_l1(&kde, &|_| uniform, [1.0, 1.0], [period - 1.0, period - 1.0], 120);
    report.push(Check::at_most("euler_uniform_density", l1, tol).with_note("interior of the periodic cell"));
    report.try_push("euler_continuity_residual", || {
        let rho = ScalarField::new("uniform", 2, big_t, move |_, _| uniform);
        let kind = DensityResidualKind::Continuity { drift: tg.velocity.clone() };
        let mut worst: f64 = 0.0;
        for x in square_grid([0.5, 0.5], [period - 0.5, period - 0.5], 7) {
            for t in [0.25 * big_t, 0.5 * big_t] {
                let r = density_residual(&kind, &rho, &SpaceTimePoint::new(t, &x[..2]), DEFAULT_STEP)?;
                worst = worst.max(r.abs() / uniform);
            }
        }
        Ok(Check::at_most("euler_continuity_residual", worst, cfg.thresholds.quadrature))
    });
    Ok(())
}

/// Regression of a per-path quotient of `Y = u(t, X_t)` minus a reference
/// field, on the probe grid. Returns `max |gap| / stderr` and the fitted rows.
fn quotient_gap(
    ens: &PathEnsemble,
    u: &VectorField,
    t: f64,
    lag: usize,
    direction: Direction,
    correction_drift: Option<&VectorField>,
    reference: &(dyn Fn(&Vector) -> Vector + Sync),
    grid: &[Vector],
    bandwidth: Option<f64>,
) -> Result<(f64, Table)> {
    let k = ens.step_at(t);
    let h = lag as f64 * ens.dt();
    let tk = ens.time_of_step(k);
    let (s0, sp, sm) = (ens.slot(k)?, ens.slot(k + lag)?, ens.slot(k - lag)?);
    let xs = ens.slice(k)?;
    let gaps: Vec<Vector> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let x0 = ens.state(p, s0);
            let j = u.jet(tk, &x0, DEFAULT_STEP);
            let q = match direction {
                Direction::Forward => {
                    let xp = ens.state(p, sp);
                    let mut q = scale(1.0 / h, &sub(&u.eval(tk + h, &xp), &j.value));
                    if let Some(b) = correction_drift {
                        let noise = sub(&sub(&xp, &x0), &scale(h, &b.eval(tk, &x0)));
                        q = sub(&q, &scale(1.0 / h, &mat_vec(&j.jacobian, &noise)));
                    }
                    q
                }
                Direction::Backward => {
                    let xm = ens.state(p, sm);
                    scale(1.0 / h, &sub(&j.value, &u.eval(tk - h, &xm)))
                }
            };
            sub(&q, &reference(&x0))
        })
        .collect();
    let bw = bandwidth.unwrap_or_else(|| silverman_bandwidth(&xs, 2));
    let fit = kernel_regression(&xs, &gaps, grid, bw, 20.0);
    let mut table = Table::new(&["t", "x1", "x2", "gap1", "gap2", "se1", "se2"]);
    let mut worst: f64 = 0.0;
    for f in fit.into_iter().flatten() {
        worst = worst.max(norm(&f.value) / norm(&f.stderr).max(f64::MIN_POSITIVE));
        table.push(vec![tk, f.x[0], f.x[1], f.value[0], f.value[1], f.stderr[0], f.stderr[1]]);
    }
    Ok((worst, table))
}

/// The forward-drift process of the Navier–Stokes velocity itself, without
/// reversal: its second Nelson derivatives obey the wrong-sign equations.
pub fn obstruction(cfg: &ScenarioConfig, report: &mut ScenarioReport) -> Result<()> {
    let flow = flow(cfg)?;
    let (u, p) = (flow.velocity.clone(), flow.pressure.clone());
    let sigma = cfg.sigma();
    let init = cfg.initial.clone().unwrap_or_else(default_gaussian);
    let grid = probe_grid(cfg, center_of(&init), 1.0);
    let rec = recording(cfg, &probe_times(cfg), &[cfg.lag_steps]);
    let ens = simulate(&DiffusionSpec::new(u.clone(), sigma, init.clone(), cfg.horizon)?, cfg.n_paths, cfg.dt, cfg.seed, &rec)?;
    let lag = LagrangianSpec::new(p.clone(), PressureSign::MinusP);
    let gsel = el_residual(&ens, &lag, 1.0, ElForm::Gsel, &grid, &residual_params(cfg, &ens))?;
    let naive = el_residual(&ens, &lag, 1.0, ElForm::Sel, &grid, &residual_params(cfg, &ens))?;
    report.tables.insert("gsel_residual".into(), residual_table(&gsel));

    // Reference: the resolved construction's SEL residual.
    let ubar_spec = DiffusionSpec::new(u.time_reversed(true), sigma, init, cfg.horizon)?;
    let ens_bar = simulate(&ubar_spec, cfg.n_paths, cfg.dt, cfg.seed, &rec)?;
    let lag_bar = LagrangianSpec::new(p.clone(), PressureSign::PlusPBar);
    let sel_bar = el_residual(&ens_bar, &lag_bar, 1.0, ElForm::Sel, &grid, &residual_params(cfg, &ens_bar))?;
    drop(ens_bar);
    report.push(
        Check::at_least(
            "gsel_vs_resolved_sel",
            gsel.empirical_norm / sel_bar.empirical_norm.max(f64::MIN_POSITIVE),
            cfg.thresholds.control_ratio,
        )
        .control()
        .with_note(format!(
            "empirical {:.4e} vs {:.4e}; closed form {:.4e} vs {:.4e}",
            gsel.empirical_norm, sel_bar.empirical_norm, gsel.norm, sel_bar.norm
        )),
    );
    report.push(
        Check::at_least(
            "naive_sel_vs_resolved_sel",
            naive.empirical_norm / sel_bar.empirical_norm.max(f64::MIN_POSITIVE),
            cfg.thresholds.control_ratio,
        )
        .control()
        .with_note(format!("empirical {:.4e} vs {:.4e}", naive.empirical_norm, sel_bar.empirical_norm)),
    );

    // D_*(DX) against the mixed forward field with u_* = u − σ²∇log ρ̂.
    let t = 0.5 * cfg.horizon;
    let k = ens.step_at(t);
    let kde = DensityEstimate::from_samples(ens.time_of_step(k), ens.slice(k)?, 2, cfg.bandwidth)?;
    let floor = 1e-4 * kde.peak();
    let a = sigma * sigma;
    let u_for_star = u.clone();
    let kde_c = kde.clone();
    let u_star = VectorField::new("u_star_plugin", 2, cfg.horizon, move |t, x| {
        let s = kde_c.grad_log(x, floor).unwrap_or([0.0; 3]);
        sub(&u_for_star.eval(t, x), &scale(a, &s))
    });
    let grad_p = |t: f64, x: &Vector| p.jet(t, x, DEFAULT_STEP).gradient;
    let mixed_fwd = |x: &Vector| -> Vector {
        let q = SpaceTimePoint::new(ens.time_of_step(k), &x[..2]);
        let r = momentum_residual(MomentumResidualKind::MixedForward { sigma }, &u, Some(&u_star), &p, &q, DEFAULT_STEP)
            .unwrap_or([f64::NAN; 3]);
        sub(&r, &grad_p(q.t, x))
    };
    let (ratio_b, table_b) = quotient_gap(&ens, &u, t, cfg.lag_steps, Direction::Backward, None, &mixed_fwd, &grid, cfg.bandwidth)?;
    report.push(Check::at_most("backward_of_forward_matches_mixed_forward", ratio_b, 3.0).with_note("max |gap|/stderr"));
    report.tables.insert("mixed_forward".into(), table_b);

    // D(DX) against the mixed backward field with u_aux = u.
    let mixed_bwd = |x: &Vector| -> Vector {
        let q = SpaceTimePoint::new(ens.time_of_step(k), &x[..2]);
        let r = momentum_residual(MomentumResidualKind::MixedBackward { sigma }, &u, Some(&u), &p, &q, DEFAULT_STEP)
            .unwrap_or([f64::NAN; 3]);
        sub(&r, &grad_p(q.t, x))
    };
    let (ratio_f, table_f) =
        quotient_gap(&ens, &u, t, cfg.lag_steps, Direction::Forward, Some(&u), &mixed_bwd, &grid, cfg.bandwidth)?;
    report.push(Check::at_most("forward_of_forward_matches_mixed_backward", ratio_f, 3.0).with_note("max |gap|/stderr"));
    report.tables.insert("mixed_backward".into(), table_f);

    // u fails both wrong-sign equations, by the standard under which the
    // resolved SEL residual counts as small.
    let tk = ens.time_of_step(k);
    let small = cfg.thresholds.residual_relative * gsel.pressure_scale;
    for (name, kind, aux) in [
        ("mixed_forward_equation_fails", MomentumResidualKind::MixedForward { sigma }, &u_star),
        ("mixed_backward_equation_fails", MomentumResidualKind::MixedBackward { sigma }, &u),
    ] {
        let r: Vec<Vector> = grid
            .iter()
            .map(|x| momentum_residual(kind, &u, Some(aux), &p, &SpaceTimePoint::new(tk, &x[..2]), DEFAULT_STEP))
            .collect::<Result<_>>()?;
        report.push(
            Check::at_least(name, rms(&r), small)
                .control()
                .with_note("grid RMS of the closed-form residual vs the smallness tolerance"),
        );
    }

    let kin = Kinematics::diffusion(&ens)?;
    let th = thresholds(cfg);
    let rep = criticality_test("unreversed_forward", &kin, &lag, &variations(cfg, false), 1.0, &th, t_buffer(cfg), cfg.seed)?;
    report.push(not_critical_check("naive_criticality_fails", &rep));
    report.tables.insert("variations".into(), variation_table(&rep));
    report.action.push(rep);
    report.notes.push(
        "deterministic bumps give the same first variation for either outer derivative; the GSEL and naive SEL \
         weak tests therefore coincide and are reported once"
            .into(),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recording_mirrors_probe_neighbourhoods() {
        let cfg = ScenarioConfig::for_scenario(super::super::config::ScenarioKind::NavierStokes);
        match recording(&cfg, &[0.25], &[4]) {
            Recording::Steps(s) => {
                for k in [246, 250, 254, 746, 750, 754, 0, 20, 1000] {
                    assert!(s.contains(&k), "{k}");
                }
            }
            Recording::All => panic!(),
        }
    }

    #[test]
    fn bumped_field_jet_matches_finite_differences() {
        let u = exact_flow(&FlowSpec::ShearMode { nu: 0.1 }, 1.0).unwrap().velocity;
        let b = bumped_field(&u, 1.5);
        let q = SpaceTimePoint::new(0.3, &[0.4, -0.7]);
        let a = b.try_jet(&q, 1e-4).unwrap();
        let f = b.fd_jet(&q, 1e-4).unwrap();
        for i in 0..2 {
            assert!((a.laplacian[i] - f.laplacian[i]).abs() < 1e-4);
            for j in 0..2 {
                assert!((a.jacobian[i][j] - f.jacobian[i][j]).abs() < 1e-6);
            }
        }
    }
}

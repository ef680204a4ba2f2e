use std::f64::consts::FRAC_PI_4;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use slab_core::action::{
    criticality_test, default_bumps, el_residual, ElForm, Kinematics, LagrangianSpec, PressureSign, ResidualParams,
    Thresholds,
};
use slab_core::fields::{exact_flow, FlowSpec, FlowTag, SpaceTimePoint, TimeReversible, DEFAULT_STEP};
use slab_core::lab::{run_scenario, with_workers, workers_from_env, ScenarioConfig, ScenarioKind};
use slab_core::nelson::{estimate_drift, square_grid, Direction, NelsonParams};
use slab_core::paths::{reverse_ensemble, simulate, DiffusionSpec, InitialLaw, Recording};
use slab_core::residuals::{momentum_residual, MomentumResidualKind};
use slab_core::LabError;

const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "slab", version, about = "Stochastic least-action laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write report.json plus CSV tables.
    Run {
        /// navier_stokes, euler, stokes, temperature or obstruction.
        scenario: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "slab-out")]
        out: PathBuf,
        /// Also write every intermediate table.
        #[arg(long)]
        dump: bool,
    },
    /// Estimate forward or backward drift of a simulated flow on a grid.
    Nelson(NelsonArgs),
    /// First variations of the natural Lagrangian along a simulated flow.
    Action(ActionArgs),
    /// Pointwise momentum residual of a library flow.
    Residual(ResidualArgs),
    /// Print the closed-form flow library.
    ListFlows,
}

#[derive(Args)]
struct FlowArgs {
    /// Library flow name.
    #[arg(long, default_value = "taylor_green")]
    flow: String,
    /// Viscosity or angular velocity of the flow.
    #[arg(long, default_value_t = 0.05)]
    param: f64,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    flow: FlowArgs,
    /// Noise amplitude; defaults to sqrt(2·param).
    #[arg(long)]
    sigma: Option<f64>,
    /// Use the time-reversed drift φ(u).
    #[arg(long)]
    reversed_drift: bool,
    #[arg(long, default_value_t = 20_000)]
    n_paths: usize,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian initial mean (default π/4 on each axis) and variance per axis.
    #[arg(long, num_args = 2, allow_negative_numbers = true)]
    mean: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.5)]
    var: f64,
}

impl SimArgs {
    fn mean(&self) -> Vec<f64> {
        self.mean.clone().unwrap_or(vec![FRAC_PI_4; 2])
    }

    fn build(&self) -> anyhow::Result<(slab_core::ExactFlow, DiffusionSpec)> {
        let flow = exact_flow(&FlowSpec::from_name(&self.flow.flow, self.flow.param)?, self.flow.horizon)?;
        let drift = if self.reversed_drift {
            flow.velocity.time_reversed(true)
        } else {
            flow.velocity.clone()
        };
        let sigma = self.sigma.unwrap_or((2.0 * self.flow.param.max(0.0)).sqrt());
        let init = InitialLaw::Gaussian {
            mean: self.mean(),
            var: vec![self.var; 2],
        };
        let spec = DiffusionSpec::new(drift, sigma, init, self.flow.horizon)?;
        Ok((flow, spec))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Forward,
    Backward,
}

#[derive(Args)]
struct NelsonArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, value_enum, default_value = "forward")]
    direction: DirectionArg,
    /// Grid half-width around the initial mean.
    #[arg(long, default_value_t = 1.0)]
    half_width: f64,
    #[arg(long, default_value_t = 5)]
    grid_points: usize,
    #[arg(long)]
    bandwidth: Option<f64>,
    /// CSV output for the estimate; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the full path ensemble as CSV.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    MinusP,
    PlusPBar,
}

#[derive(Args)]
struct ActionArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, value_enum, default_value = "minus-p")]
    sign: SignArg,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    mu: f64,
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Reverse the simulated ensemble before testing.
    #[arg(long)]
    reverse: bool,
    /// Also report Euler–Lagrange residual norms on a 5×5 grid.
    #[arg(long)]
    residual: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EquationArg {
    NavierStokes,
    Euler,
    Stokes,
}

#[derive(Args)]
struct ResidualArgs {
    #[command(flatten)]
    flow: FlowArgs,
    #[arg(long, value_enum, default_value = "navier-stokes")]
    equation: EquationArg,
    #[arg(long, default_value_t = 0.0)]
    t: f64,
    #[arg(long, num_args = 2, allow_negative_numbers = true, default_values_t = [0.5, 0.5])]
    x: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    viscosity: f64,
}

fn run(
    scenario: &str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    dump: bool,
    workers: Option<usize>,
) -> Result<u8, LabError> {
    let kind = ScenarioKind::parse(scenario)?;
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
            ScenarioConfig::from_json(&text)?
        }
        None => ScenarioConfig::default(),
    }
    .select(kind)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut report = with_workers(workers, || run_scenario(&cfg))??;
    report.write(&out, dump)?;
    for c in &report.checks {
        println!("{:<48} {:<12} {:>12.4e} {} {:.4e}", c.name, format!("{:?}", c.status), c.value, c.comparison_symbol(), c.tolerance);
    }
    println!("verdict: {:?} ({})", report.verdict, out.join("report.json").display());
    Ok(report.exit_code() as u8)
}

fn nelson(args: NelsonArgs) -> anyhow::Result<()> {
    let (_, spec) = args.sim.build()?;
    let steps = (args.sim.flow.horizon / args.sim.dt).round() as usize;
    let recording = if args.dump.is_some() { Recording::All } else { Recording::strided(1, steps, &[]) };
    let ens = simulate(&spec, args.sim.n_paths, args.sim.dt, args.sim.seed, &recording)?;
    if let Some(path) = &args.dump {
        ens.write_csv(path)?;
    }
    let m = &args.sim.mean();
    let grid = square_grid(
        [m[0] - args.half_width, m[1] - args.half_width],
        [m[0] + args.half_width, m[1] + args.half_width],
        args.grid_points,
    );
    let mut params = NelsonParams::for_grid(args.sim.dt, args.sim.flow.horizon);
    params.bandwidth = args.bandwidth;
    let dir = match args.direction {
        DirectionArg::Forward => Direction::Forward,
        DirectionArg::Backward => Direction::Backward,
    };
    let est = estimate_drift(&ens, args.t, &grid, &params, dir)?;
    match &args.out {
        Some(path) => est.write_csv(path)?,
        None => {
            println!("t,x1,x2,d1,d2,se1,se2,n_eff");
            for p in &est.points {
                println!(
                    "{},{},{},{},{},{},{},{}",
                    est.t, p.x[0], p.x[1], p.value[0], p.value[1], p.stderr[0], p.stderr[1], p.n_eff
                );
            }
        }
    }
    Ok(())
}

fn action(args: ActionArgs) -> anyhow::Result<()> {
    let (flow, spec) = args.sim.build()?;
    let steps = (args.sim.flow.horizon / args.sim.dt).round() as usize;
    let rec = Recording::strided(steps.div_ceil(50).max(1), steps, &[]);
    let mut ens = simulate(&spec, args.sim.n_paths, args.sim.dt, args.sim.seed, &rec)?;
    if args.reverse {
        ens = reverse_ensemble(&ens);
    }
    let sign = match args.sign {
        SignArg::MinusP => PressureSign::MinusP,
        SignArg::PlusPBar => PressureSign::PlusPBar,
    };
    let lag = LagrangianSpec::new(flow.pressure.clone(), sign);
    let kin = Kinematics::diffusion(&ens)?;
    let t_buffer = (8.0 * args.sim.dt).max(0.05 * args.sim.flow.horizon);
    let mut report = criticality_test(
        "cli",
        &kin,
        &lag,
        &default_bumps(2, args.eps),
        args.mu,
        &Thresholds::default(),
        t_buffer,
        args.sim.seed,
    )?;
    if args.residual {
        let m = &args.sim.mean();
        let grid = square_grid([m[0] - 1.0, m[1] - 1.0], [m[0] + 1.0, m[1] + 1.0], 5);
        let r = el_residual(&ens, &lag, args.mu, ElForm::Sel, &grid, &ResidualParams::for_ensemble(&ens))
            .context("residual needs the full step grid near the probe times")?;
        report.residual_norms = Some((&r).into());
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn residual(args: ResidualArgs) -> anyhow::Result<()> {
    let flow = exact_flow(&FlowSpec::from_name(&args.flow.flow, args.flow.param)?, args.flow.horizon)?;
    let kind = match args.equation {
        EquationArg::NavierStokes => MomentumResidualKind::NavierStokes { nu: args.viscosity },
        EquationArg::Euler => MomentumResidualKind::Euler,
        EquationArg::Stokes => MomentumResidualKind::Stokes { nu: args.viscosity },
    };
    let q = SpaceTimePoint::new(args.t, &args.x);
    let r = momentum_residual(kind, &flow.velocity, None, &flow.pressure, &q, DEFAULT_STEP)?;
    println!("{}", serde_json::json!({ "t": args.t, "x": args.x, "residual": &r[..2] }));
    Ok(())
}

fn list_flows() -> anyhow::Result<()> {
    let rows = [
        ("taylor_green", "nu", 0.05),
        ("rigid_rotation", "omega", 1.0),
        ("shear_mode", "nu", 0.1),
        ("uniform", "c", 1.0),
    ];
    for (name, param, value) in rows {
        let flow = exact_flow(&FlowSpec::from_name(name, value)?, 1.0)?;
        let tags: Vec<String> = std::iter::once(flow.satisfies)
            .chain(flow.also.iter().copied())
            .filter(|t| *t != FlowTag::None)
            .map(|t| format!("{t:?}"))
            .collect();
        println!("{name:<16} {param:<6} solves: {}", if tags.is_empty() { "-".into() } else { tags.join(", ") });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = match workers_from_env() {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result = match cli.command {
        Command::Run { scenario, config, seed, out, dump } => match run(&scenario, config, seed, out, dump, workers) {
            Ok(code) => return ExitCode::from(code),
            Err(e @ LabError::Config(_)) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
            Err(e) => Err(e.into()),
        },
        Command::Nelson(a) => with_workers(workers, || nelson(a)).map_err(anyhow::Error::from).and_then(|r| r),
        Command::Action(a) => with_workers(workers, || action(a)).map_err(anyhow::Error::from).and_then(|r| r),
        Command::Residual(a) => residual(a),
        Command::ListFlows => list_flows(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e.downcast_ref::<LabError>() {
                Some(LabError::Config(_) | LabError::Argument(_)) => EXIT_CONFIG,
                _ => 1,
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

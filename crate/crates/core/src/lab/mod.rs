//! Scenario runner: configuration, the five scenarios, and reports.

pub mod config;
pub mod fokker_planck;
pub mod report;
pub mod scenarios;

use std::time::Instant;

pub use config::{CheckTolerances, NegativeControl, ScenarioConfig, ScenarioKind};
pub use report::{Check, CheckRole, Comparison, ScenarioReport, Status, Table};

use crate::error::{LabError, Result};

/// Environment variable bounding the worker count.
pub const WORKERS_ENV: &str = "SLAB_WORKERS";

/// Worker count from `SLAB_WORKERS`, if set and positive.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(LabError::Config(format!("{WORKERS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

/// Run `f` on a dedicated pool of `workers` threads, or the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| LabError::Argument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Validate the configuration and run its scenario.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut report = ScenarioReport::new(cfg)?;
    let outcome = match cfg.kind()? {
        ScenarioKind::NavierStokes => scenarios::navier_stokes(cfg, &mut report),
        ScenarioKind::Euler => scenarios::euler(cfg, &mut report),
        ScenarioKind::Stokes => scenarios::stokes(cfg, &mut report),
        ScenarioKind::Temperature => scenarios::temperature(cfg, &mut report),
        ScenarioKind::Obstruction => scenarios::obstruction(cfg, &mut report),
    };
    if let Err(e) = outcome {
        match e {
            LabError::Config(_) => return Err(e),
            other => report.push(Check::inconclusive("scenario", &other)),
        }
    }
    report.finish();
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

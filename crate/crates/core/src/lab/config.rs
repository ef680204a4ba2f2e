//! Scenario configuration. JSON with unknown keys rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::Thresholds;
use crate::error::{LabError, Result};
use crate::fields::{exact_flow, FlowSpec, FlowTag};
use crate::paths::InitialLaw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    NavierStokes,
    Euler,
    Stokes,
    Temperature,
    Obstruction,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::NavierStokes,
        ScenarioKind::Euler,
        ScenarioKind::Stokes,
        ScenarioKind::Temperature,
        ScenarioKind::Obstruction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::NavierStokes => "navier_stokes",
            ScenarioKind::Euler => "euler",
            ScenarioKind::Stokes => "stokes",
            ScenarioKind::Temperature => "temperature",
            ScenarioKind::Obstruction => "obstruction",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown scenario `{s}`")))
    }

    fn default_flow(self, nu: f64) -> FlowSpec {
        match self {
            ScenarioKind::NavierStokes | ScenarioKind::Obstruction | ScenarioKind::Temperature => {
                FlowSpec::TaylorGreen { nu }
            }
            ScenarioKind::Euler => FlowSpec::RigidRotation { omega: 1.0 },
            ScenarioKind::Stokes => FlowSpec::ShearMode { nu },
        }
    }

    fn required_tag(self) -> Option<FlowTag> {
        match self {
            ScenarioKind::NavierStokes | ScenarioKind::Obstruction | ScenarioKind::Temperature => {
                Some(FlowTag::NavierStokes)
            }
            ScenarioKind::Euler => Some(FlowTag::Euler),
            ScenarioKind::Stokes => Some(FlowTag::Stokes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NegativeControl {
    ViscosityScale { factor: f64 },
    PressureScale { factor: f64 },
    /// `u + magnitude·sin(x₁)e₁`
    DriftBump { magnitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckTolerances {
    pub criticality: Thresholds,
    /// Strong residual norm relative to the pressure-gradient scale.
    pub residual_relative: f64,
    /// Per-bump `|dF|/‖Z‖` for deterministic flows.
    pub quadrature: f64,
    /// Strong residual relative to the field scale (bridge-driven case).
    pub field_relative: f64,
    /// L¹ distance between densities.
    pub density_l1: f64,
    /// Required ratio of control residual to solution residual.
    pub control_ratio: f64,
    /// Required `|dF|/threshold` of the wrong-pressure control.
    pub pressure_control_ratio: f64,
}

impl Default for CheckTolerances {
    fn default() -> Self {
        Self {
            criticality: Thresholds::default(),
            residual_relative: 0.1,
            quadrature: 1e-6,
            field_relative: 0.05,
            density_l1: 0.05,
            control_ratio: 5.0,
            pressure_control_ratio: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: Option<ScenarioKind>,
    pub flow: Option<FlowSpec>,
    /// Viscosity; defaults to 0.1 for Stokes and 0.05 otherwise.
    pub nu: Option<f64>,
    pub kappa: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub mu: f64,
    pub initial: Option<InitialLaw>,
    pub thresholds: CheckTolerances,
    pub negative_control: Option<NegativeControl>,
    /// Recorded-step stride; quadrature runs on this grid.
    pub record_stride: Option<usize>,
    /// Difference-quotient lag in steps.
    pub lag_steps: usize,
    /// Lag in steps for the bridge backward-drift estimate.
    pub bridge_lag_steps: usize,
    pub bandwidth: Option<f64>,
    pub bridge_bandwidth: f64,
    /// Probe grid is `probe_points × probe_points`.
    pub probe_points: usize,
    pub variation_eps: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: None,
            flow: None,
            nu: None,
            kappa: 0.1,
            n_paths: 200_000,
            dt: 1e-3,
            horizon: 1.0,
            seed: 0,
            mu: 1.0,
            initial: None,
            thresholds: CheckTolerances::default(),
            negative_control: None,
            record_stride: None,
            lag_steps: 4,
            bridge_lag_steps: 50,
            bandwidth: None,
            bridge_bandwidth: 1.0,
            probe_points: 5,
            variation_eps: 0.1,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn for_scenario(kind: ScenarioKind) -> Self {
        Self {
            scenario: Some(kind),
            ..Self::default()
        }
    }

    pub fn kind(&self) -> Result<ScenarioKind> {
        self.scenario
            .ok_or_else(|| LabError::Config("no scenario selected".into()))
    }

    /// Sets the scenario from the command line; a conflicting config value is an error.
    pub fn select(mut self, kind: ScenarioKind) -> Result<Self> {
        match self.scenario {
            Some(k) if k != kind => Err(LabError::Config(format!(
                "config names scenario `{}` but `{}` was requested",
                k.name(),
                kind.name()
            ))),
            _ => {
                self.scenario = Some(kind);
                Ok(self)
            }
        }
    }

    pub fn flow_spec(&self) -> Result<FlowSpec> {
        let kind = self.kind()?;
        Ok(self.flow.clone().unwrap_or_else(|| kind.default_flow(self.nu())))
    }

    pub fn nu(&self) -> f64 {
        self.nu.unwrap_or(match self.scenario {
            Some(ScenarioKind::Stokes) => 0.1,
            _ => 0.05,
        })
    }

    pub fn sigma(&self) -> f64 {
        (2.0 * self.nu()).sqrt()
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn stride(&self) -> usize {
        self.record_stride.unwrap_or(match self.scenario {
            Some(ScenarioKind::Euler) => 5,
            _ => 20,
        })
    }

    pub fn negative_control(&self) -> Result<Option<NegativeControl>> {
        let kind = self.kind()?;
        let default = match kind {
            ScenarioKind::NavierStokes => Some(NegativeControl::ViscosityScale { factor: 2.0 }),
            ScenarioKind::Euler => Some(NegativeControl::PressureScale { factor: 2.0 }),
            ScenarioKind::Stokes => Some(NegativeControl::DriftBump { magnitude: 1.5 }),
            ScenarioKind::Temperature => Some(NegativeControl::ViscosityScale { factor: 2.0 }),
            ScenarioKind::Obstruction => None,
        };
        let chosen = self.negative_control.or(default);
        let ok = match (kind, chosen) {
            (ScenarioKind::NavierStokes | ScenarioKind::Temperature, Some(NegativeControl::ViscosityScale { .. })) => true,
            (ScenarioKind::Euler, Some(NegativeControl::PressureScale { .. })) => true,
            (ScenarioKind::Stokes, Some(NegativeControl::DriftBump { .. })) => true,
            (ScenarioKind::Obstruction, None) => true,
            _ => false,
        };
        if !ok {
            return Err(LabError::Config(format!(
                "negative control {chosen:?} does not apply to scenario `{}`",
                kind.name()
            )));
        }
        Ok(chosen)
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind()?;
        let bad = |m: String| Err(LabError::Config(m));
        if !(self.nu() >= 0.0) || !(self.kappa >= 0.0) {
            return bad("nu and kappa must be non-negative".into());
        }
        if !(self.horizon > 0.0) || !(self.dt > 0.0) {
            return bad("horizon and dt must be positive".into());
        }
        let m = self.horizon / self.dt;
        if (m - m.round()).abs() > 1e-9 * m.max(1.0) {
            return bad(format!("dt = {} does not divide T = {}", self.dt, self.horizon));
        }
        if self.n_paths < 2 {
            return bad("n_paths must be at least 2".into());
        }
        if !self.n_steps().is_multiple_of(self.stride()) {
            return bad(format!("record_stride {} must divide the step count {}", self.stride(), self.n_steps()));
        }
        if self.lag_steps == 0 || self.bridge_lag_steps == 0 || self.probe_points == 0 {
            return bad("lag_steps, bridge_lag_steps and probe_points must be positive".into());
        }
        let longest = match kind {
            ScenarioKind::Stokes => self.lag_steps.max(self.bridge_lag_steps),
            _ => self.lag_steps,
        };
        if 4 * longest >= self.n_steps() {
            return bad("lags too long for the time grid".into());
        }
        if !(self.variation_eps > 0.0) {
            return bad("variation_eps must be positive".into());
        }
        if self.bandwidth.is_some_and(|b| !(b > 0.0)) || !(self.bridge_bandwidth > 0.0) {
            return bad("bandwidths must be positive".into());
        }
        let mu_ok = match kind {
            ScenarioKind::Euler => [-1.0, 0.0, 1.0].contains(&self.mu),
            _ => self.mu == 1.0,
        };
        if !mu_ok {
            return bad(format!("mu = {} is not supported by scenario `{}`", self.mu, kind.name()));
        }
        if matches!(kind, ScenarioKind::NavierStokes | ScenarioKind::Obstruction | ScenarioKind::Stokes) && self.nu() <= 0.0 {
            return bad("diffusion scenarios need nu > 0".into());
        }
        if kind == ScenarioKind::Temperature && self.kappa <= 0.0 {
            return bad("temperature scenario needs kappa > 0".into());
        }
        let flow = exact_flow(&self.flow_spec()?, self.horizon)?;
        if let Some(tag) = kind.required_tag() {
            if !flow.solves(tag) {
                return bad(format!("flow `{}` does not solve the {tag:?} equation", flow.name));
            }
        }
        if flow.velocity.dim() != 2 {
            return bad("scenarios run in two dimensions".into());
        }
        if kind != ScenarioKind::Euler && (flow.viscosity - self.nu()).abs() > 1e-12 {
            return bad(format!("flow viscosity {} differs from nu = {}", flow.viscosity, self.nu()));
        }
        if let Some(init) = &self.initial {
            if init.dim() != 2 {
                return bad("initial law must be two-dimensional".into());
            }
            init.validate(false)?;
        }
        self.negative_control()?;
        let t = &self.thresholds;
        if [t.residual_relative, t.quadrature, t.field_relative, t.density_l1, t.control_ratio, t.pressure_control_ratio]
            .iter()
            .any(|v| !(*v > 0.0))
        {
            return bad("tolerances must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ScenarioConfig::from_json(r#"{"n_paths": 10, "colour": 3}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"thresholds": {"density_l1": 0.1, "x": 1}}"#).is_err());
        let c = ScenarioConfig::from_json(r#"{"n_paths": 10, "flow": {"name": "taylor_green", "nu": 0.05}}"#).unwrap();
        assert_eq!(c.n_paths, 10);
        assert_eq!(c.dt, 1e-3);
    }

    #[test]
    fn scenario_selection_conflicts_are_errors() {
        let c = ScenarioConfig::from_json(r#"{"scenario": "euler"}"#).unwrap();
        assert!(c.clone().select(ScenarioKind::Stokes).is_err());
        assert_eq!(c.select(ScenarioKind::Euler).unwrap().kind().unwrap(), ScenarioKind::Euler);
    }

    #[test]
    fn flow_must_solve_the_scenario_equation() {
        let mut c = ScenarioConfig::for_scenario(ScenarioKind::Euler);
        c.flow = Some(FlowSpec::ShearMode { nu: 0.1 });
        assert!(matches!(c.validate(), Err(LabError::Config(_))));
        c.flow = Some(FlowSpec::TaylorGreen { nu: 0.0 });
        c.validate().unwrap();
    }

    #[test]
    fn controls_must_match_scenario() {
        let mut c = ScenarioConfig::for_scenario(ScenarioKind::Euler);
        c.negative_control = Some(NegativeControl::DriftBump { magnitude: 1.0 });
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ScenarioConfig::for_scenario(ScenarioKind::Stokes);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn dt_must_divide_horizon() {
        let mut c = ScenarioConfig::for_scenario(ScenarioKind::NavierStokes);
        c.dt = 0.3;
        assert!(c.validate().is_err());
    }
}

//! Scenario reports and their on-disk form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::action::ActionReport;
use crate::error::{LabError, Result};

use super::config::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckRole {
    Mandatory,
    /// Asserts that a perturbed, non-solution run fails.
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Inconclusive,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub role: CheckRole,
    pub value: f64,
    pub comparison: Comparison,
    pub tolerance: f64,
    pub stderr: Option<f64>,
    pub status: Status,
    pub note: String,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self::new(name, value, Comparison::AtMost, tolerance)
    }

    pub fn at_least(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self::new(name, value, Comparison::AtLeast, tolerance)
    }

    fn new(name: impl Into<String>, value: f64, comparison: Comparison, tolerance: f64) -> Self {
        let ok = match comparison {
            Comparison::AtMost => value <= tolerance,
            Comparison::AtLeast => value >= tolerance,
        };
        Self {
            name: name.into(),
            role: CheckRole::Mandatory,
            value,
            comparison,
            tolerance,
            stderr: None,
            status: if value.is_nan() {
                Status::Inconclusive
            } else if ok {
                Status::Pass
            } else {
                Status::Fail
            },
            note: String::new(),
        }
    }

    /// A check that could not be evaluated.
    pub fn inconclusive(name: impl Into<String>, err: &LabError) -> Self {
        Self {
            name: name.into(),
            role: CheckRole::Mandatory,
            value: f64::NAN,
            comparison: Comparison::AtMost,
            tolerance: f64::NAN,
            stderr: None,
            status: Status::Inconclusive,
            note: err.to_string(),
        }
    }

    pub fn comparison_symbol(&self) -> &'static str {
        match self.comparison {
            Comparison::AtMost => "<=",
            Comparison::AtLeast => ">=",
        }
    }

    pub fn control(mut self) -> Self {
        self.role = CheckRole::Control;
        self
    }

    pub fn with_stderr(mut self, se: f64) -> Self {
        self.stderr = Some(se);
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    /// Downgrades a failing check to inconclusive.
    pub fn soften(mut self) -> Self {
        if self.status == Status::Fail {
            self.status = Status::Inconclusive;
        }
        self
    }
}

/// A CSV table kept for `--dump`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        self.rows.push(row.iter().map(|v| format!("{v:.10e}")).collect());
    }

    pub fn push_text(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub config: ScenarioConfig,
    pub config_hash: String,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub action: Vec<ActionReport>,
    pub verdict: Status,
    pub notes: Vec<String>,
    /// File names written next to `report.json`.
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub tables: BTreeMap<String, Table>,
}

impl ScenarioReport {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        Ok(Self {
            scenario: config.kind()?.name().to_string(),
            config: config.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            checks: Vec::new(),
            action: Vec::new(),
            verdict: Status::Inconclusive,
            notes: Vec::new(),
            artifacts: Vec::new(),
            wall_clock_seconds: 0.0,
            tables: BTreeMap::new(),
        })
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    /// Records a check computed by a fallible closure; errors become inconclusive checks.
    pub fn try_push(&mut self, name: &str, f: impl FnOnce() -> Result<Check>) {
        let c = f().unwrap_or_else(|e| Check::inconclusive(name, &e));
        self.checks.push(c);
    }

    /// Worst status over all checks; an empty report is inconclusive.
    pub fn finish(&mut self) {
        self.verdict = self
            .checks
            .iter()
            .map(|c| c.status)
            .max()
            .unwrap_or(Status::Inconclusive);
    }

    pub fn exit_code(&self) -> i32 {
        match self.verdict {
            Status::Pass => 0,
            Status::Fail => 1,
            Status::Inconclusive => 3,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the wall-clock field removed, for reproducibility comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_clock_seconds");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }

    /// Writes `report.json`, `checks.csv` and, with `dump`, every table.
    pub fn write(&mut self, dir: &Path, dump: bool) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut checks = Table::new(&["name", "role", "value", "comparison", "tolerance", "stderr", "status", "note"]);
        for c in &self.checks {
            checks.push_text(vec![
                c.name.clone(),
                format!("{:?}", c.role).to_lowercase(),
                format!("{:.10e}", c.value),
                match c.comparison {
                    Comparison::AtMost => "<=".into(),
                    Comparison::AtLeast => ">=".into(),
                },
                format!("{:.10e}", c.tolerance),
                c.stderr.map(|s| format!("{s:.10e}")).unwrap_or_default(),
                format!("{:?}", c.status).to_lowercase(),
                c.note.clone(),
            ]);
        }
        let mut names = vec!["checks.csv".to_string()];
        if dump {
            names.extend(self.tables.keys().map(|k| format!("{k}.csv")));
        }
        self.artifacts = names.clone();
        checks.write(&dir.join("checks.csv"))?;
        written.push(dir.join("checks.csv"));
        if dump {
            for (k, t) in &self.tables {
                let p = dir.join(format!("{k}.csv"));
                t.write(&p)?;
                written.push(p);
            }
        }
        let p = dir.join("report.json");
        std::fs::write(&p, self.to_json()?)?;
        written.push(p);
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::config::ScenarioKind;

    #[test]
    fn worst_status_wins() {
        let mut r = ScenarioReport::new(&ScenarioConfig::for_scenario(ScenarioKind::Euler)).unwrap();
        r.push(Check::at_most("a", 1.0, 2.0));
        r.finish();
        assert_eq!(r.exit_code(), 0);
        r.push(Check::inconclusive("b", &LabError::Degenerate("x".into())));
        r.finish();
        assert_eq!(r.exit_code(), 3);
        r.push(Check::at_least("c", 1.0, 2.0));
        r.finish();
        assert_eq!(r.exit_code(), 1);
    }

    #[test]
    fn canonical_json_drops_wall_clock() {
        let mut r = ScenarioReport::new(&ScenarioConfig::for_scenario(ScenarioKind::Euler)).unwrap();
        r.wall_clock_seconds = 3.0;
        let a = r.canonical_json().unwrap();
        r.wall_clock_seconds = 4.0;
        assert_eq!(a, r.canonical_json().unwrap());
        assert!(!a.contains("wall_clock"));
    }

    #[test]
    fn writes_report_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ScenarioReport::new(&ScenarioConfig::for_scenario(ScenarioKind::Euler)).unwrap();
        r.push(Check::at_most("a", 1.0, 2.0));
        let mut t = Table::new(&["x"]);
        t.push(vec![1.0]);
        r.tables.insert("extra".into(), t);
        r.write(dir.path(), true).unwrap();
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("extra.csv").exists());
        assert_eq!(r.artifacts, vec!["checks.csv", "extra.csv"]);
    }
}

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{ExperimentConfig, Kind};

pub const SCHEMA: &str = "uaplab-report";
pub const SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub observed: Value,
    pub requirement: String,
    pub pass: bool,
}

impl Check {
    pub fn new(name: &str, observed: impl Serialize, requirement: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.to_string(),
            observed: serde_json::to_value(observed).unwrap_or(Value::Null),
            requirement: requirement.into(),
            pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub schema: String,
    pub schema_version: u32,
    pub artifact_version: String,
    pub kind: Kind,
    /// Fully resolved configuration; re-running it reproduces `outputs`.
    pub config: ExperimentConfig,
    pub outputs: Value,
    pub checks: Vec<Check>,
    pub pass: bool,
    pub wall_time_s: f64,
}

impl ReportRecord {
    pub fn new(kind: Kind, config: ExperimentConfig, outputs: Value, checks: Vec<Check>, wall_time_s: f64) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Self {
            schema: SCHEMA.to_string(),
            schema_version: SCHEMA_VERSION,
            artifact_version: ARTIFACT_VERSION.to_string(),
            kind,
            config,
            outputs,
            checks,
            pass,
            wall_time_s,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let r: ReportRecord = serde_json::from_str(text)?;
        if r.schema != SCHEMA || r.schema_version != SCHEMA_VERSION {
            anyhow::bail!("unsupported report schema {} v{}", r.schema, r.schema_version);
        }
        Ok(r)
    }

    /// Same numeric outputs and verdicts; wall time is ignored.
    pub fn same_results(&self, other: &ReportRecord) -> bool {
        self.outputs == other.outputs && self.checks == other.checks && self.pass == other.pass
    }
}

//! JSON run reports.
//!
//! Everything except the `timing` object is a pure function of the scenario
//! and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};
use wisp_core::scenario::Scenario;

use crate::CliError;

pub struct Report {
    command: String,
    dir: PathBuf,
    started: Instant,
    metrics: Map<String, Value>,
    artifacts: Vec<String>,
    stages: Map<String, Value>,
    scenario: Value,
    seed: u64,
}

impl Report {
    pub fn new(command: &str, scenario: &Scenario, dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            command: command.to_string(),
            dir: dir.to_path_buf(),
            started: Instant::now(),
            metrics: Map::new(),
            artifacts: Vec::new(),
            stages: Map::new(),
            scenario: json!(scenario.name),
            seed: scenario.seed,
        })
    }

    pub fn metric(&mut self, key: &str, value: impl serde::Serialize) -> Result<(), CliError> {
        self.metrics.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn stage(&mut self, name: &str, report: &Report) {
        self.stages.insert(name.to_string(), report.body());
    }

    /// Write `contents` into the report directory and record it.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)?;
        self.artifacts.push(name.to_string());
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, text + "\n")
    }

    fn body(&self) -> Value {
        let mut v = json!({
            "command": self.command,
            "scenario": self.scenario,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "metrics": self.metrics,
            "artifacts": self.artifacts,
        });
        if !self.stages.is_empty() {
            v["stages"] = Value::Object(self.stages.clone());
        }
        v
    }

    /// Persist `report.json` and return the one-line summary for stdout.
    pub fn finish(mut self) -> Result<Self, CliError> {
        let mut v = self.body();
        v["artifacts"].as_array_mut().expect("array").push(json!("report.json"));
        v["timing"] = json!({ "wall_time_s": self.started.elapsed().as_secs_f64() });
        let text = serde_json::to_string_pretty(&v)? + "\n";
        std::fs::write(self.dir.join("report.json"), text)?;
        self.artifacts.push("report.json".into());
        Ok(self)
    }

    pub fn display(&self) -> String {
        json!({
            "command": self.command,
            "report": self.dir.join("report.json").display().to_string(),
            "metrics": self.metrics,
        })
        .to_string()
    }
}

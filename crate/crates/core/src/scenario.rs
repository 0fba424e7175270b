//! TOML scenario files.
//!
//! Every section is optional and falls back to the defaults of the module it
//! configures; unknown keys are rejected. `key=value` overrides address
//! dotted paths (`channel.noise.snr_db=30`) and take TOML values, falling back
//! to a plain string.

use serde::{Deserialize, Serialize};

use crate::channel::{NoiseLevel, PhaseErrorModel, Point, Scene};
use crate::dpolicy::{EnvSampler, TrainConfig};
use crate::error::{Error, Result};
use crate::incentive::{EnvState, PricingGrid};
use crate::skeleton::FitConfig;
use crate::smsp::SmspConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub noise: NoiseLevel,
    pub phase_errors: PhaseErrorModel,
    /// Frames per receiver.
    pub frames: usize,
    /// SNR values swept by estimation experiments.
    pub snr_sweep_db: Vec<f64>,
    /// Independent seeds per sweep point.
    pub trials: usize,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            noise: NoiseLevel::SnrDb(20.0),
            phase_errors: PhaseErrorModel::UniformPerFrame,
            frames: 34,
            snr_sweep_db: vec![20.0],
            trials: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletonSection {
    /// User positions used to build the synthetic training set.
    pub positions: Vec<Point>,
    /// Position queried by `skeleton-predict`.
    pub query: Point,
    pub fit: FitConfig,
}

/// 20 positions spread over the room, clear of the transmitter-receiver lines.
pub fn default_skeleton_positions() -> Vec<Point> {
    let mut out = Vec::new();
    for &y in &[2.5, 4.0, 5.5, 7.0] {
        for &x in &[2.0, 3.5, 5.0, 6.5, 7.5] {
            out.push(Point::new(x, y + if x > y { -1.0 } else { 0.0 }));
        }
    }
    out
}

impl Default for SkeletonSection {
    fn default() -> Self {
        Self {
            positions: default_skeleton_positions(),
            query: Point::new(4.5, 2.8),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EconomySection {
    pub env: EnvState,
    pub pricing: PricingGrid,
    /// AP limits swept by the oracle; empty means only `env.max_aps`.
    pub max_aps_sweep: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub config: TrainConfig,
    pub sampler: EnvSampler,
    /// Held-out environments drawn for policy evaluation.
    pub eval_draws: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            config: TrainConfig::default(),
            sampler: EnvSampler::default(),
            eval_draws: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub csv: bool,
    /// Write binary CSI dumps.
    pub dump: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { csv: true, dump: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub scene: Scene,
    pub channel: ChannelSection,
    pub estimation: SmspConfig,
    pub skeleton: SkeletonSection,
    pub economy: EconomySection,
    pub training: TrainingSection,
    pub output: OutputSection,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 1,
            scene: Scene::default_3rx(),
            channel: ChannelSection::default(),
            estimation: SmspConfig::default(),
            skeleton: SkeletonSection::default(),
            economy: EconomySection::default(),
            training: TrainingSection::default(),
            output: OutputSection::default(),
        }
    }
}

pub const DEFAULT_3RX: &str = include_str!("../scenarios/default_3rx.toml");
pub const AP_SWEEP: &str = include_str!("../scenarios/ap_sweep.toml");
pub const ECONOMY_DEFAULT: &str = include_str!("../scenarios/economy_default.toml");

/// Names and sources of the scenarios shipped with the crate.
pub const BUNDLED: &[(&str, &str)] = &[
    ("default_3rx", DEFAULT_3RX),
    ("ap_sweep", AP_SWEEP),
    ("economy_default", ECONOMY_DEFAULT),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply one `dotted.key=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Scenario {
    /// Parse a scenario and apply overrides. Parse errors carry line and column.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let strict: Scenario = toml::from_str(text).map_err(|e| Error::Format(format!("scenario: {e}")))?;
        if overrides.is_empty() {
            strict.validate()?;
            return Ok(strict);
        }
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Format(format!("scenario: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let s: Scenario = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Format(format!("scenario override: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.channel.frames == 0 || self.channel.trials == 0 {
            return Err(Error::InvalidArgument("channel.frames and channel.trials must be positive".into()));
        }
        self.economy.env.validate()?;
        self.economy.pricing.validate()?;
        self.training.config.validate()?;
        self.training.sampler.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, text) in BUNDLED {
            let s = Scenario::parse(text, &[]).unwrap();
            assert_eq!(&s.name, name);
        }
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(Scenario::parse("", &[]).unwrap(), Scenario::default());
    }

    #[test]
    fn unknown_key_reports_location() {
        let err = Scenario::parse("name = \"x\"\n[channel]\nframez = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("framez"), "{err}");
    }

    #[test]
    fn overrides_take_toml_values() {
        let s = Scenario::parse(
            "",
            &[
                "channel.noise.snr_db=30".into(),
                "scene.user_pos=[5.0, 2.0]".into(),
                "name=probe".into(),
                "economy.env.max_aps=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(s.channel.noise, NoiseLevel::SnrDb(30.0));
        assert_eq!(s.scene.user_pos, Point::new(5.0, 2.0));
        assert_eq!(s.name, "probe");
        assert_eq!(s.economy.env.max_aps, 3);
        assert!(Scenario::parse("", &["channel.bogus=1".into()]).is_err());
        assert!(Scenario::parse("", &["novalue".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::default();
        assert_eq!(Scenario::parse(&s.to_toml().unwrap(), &[]).unwrap(), s);
    }
}

//! Experiment configuration: a TOML document with dotted sections, strict
//! about unknown keys, plus `key=value` overrides addressed by dotted paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, Method};
use crate::fpcircle::{CircleProblem, GeneratorVariant};
use crate::frame::JumpTerm;
use crate::model::PerturbedSystem;
use crate::noise::{JumpMeasureSpec, NoiseModel};
use crate::systems::SystemSpec;

/// Which example system to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Nilpotent,
    Duffing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub name: SystemName,
    /// Drift coefficient of the nilpotent system (ignored for Duffing).
    pub a: f64,
    pub sigma: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self { name: SystemName::Nilpotent, a: 1.0, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub brownian: bool,
    pub jumps: bool,
    pub alpha: f64,
    pub c_alpha: f64,
    /// Jumps are restricted to `|z| < cutoff`.
    pub cutoff: f64,
    /// Jumps below `floor` are dropped.
    pub floor: f64,
    /// Replace the dropped jumps by a Gaussian increment of equal variance.
    pub small_jump_gaussian: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            brownian: true,
            jumps: false,
            alpha: 1.5,
            c_alpha: 1.0,
            cutoff: 1.0,
            floor: 1e-3,
            small_jump_gaussian: false,
        }
    }
}

/// Jump contribution used by the leading-order method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JumpTermName {
    R0,
    Irho,
}

impl From<JumpTermName> for JumpTerm {
    fn from(n: JumpTermName) -> Self {
        match n {
            JumpTermName::R0 => JumpTerm::R0,
            JumpTermName::Irho => JumpTerm::IrhoFallback,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub epsilon: f64,
    pub method: Method,
    pub jump_term: JumpTermName,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { epsilon: 0.1, method: Method::Direct, jump_term: JumpTermName::R0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpConfig {
    pub grid: usize,
    pub z_nodes: usize,
    pub variant: GeneratorVariant,
}

impl Default for FpConfig {
    fn default() -> Self {
        Self { grid: 512, z_nodes: 64, variant: GeneratorVariant::Plain }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Steps between written rows.
    pub stride: usize,
    /// Also transport a tangent vector and write its angle and log-norm.
    pub angles: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { stride: 100, angles: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { epsilons: vec![0.05, 0.08, 0.125, 0.2, 0.32] }
    }
}

/// Full configuration of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub noise: NoiseConfig,
    pub run: RunSection,
    pub estimator: EstimatorConfig,
    pub fpcircle: FpConfig,
    pub simulate: SimulateConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Parses a TOML document; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises to TOML")
    }

    /// Applies `key=value` overrides; `key` is a dotted path and `value` a
    /// TOML value, with bare words taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
            let key = key.trim();
            let value = parse_value(raw.trim());
            set_path(&mut doc, key, value)?;
        }
        toml::Table::try_into(doc).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn system_spec(&self) -> SystemSpec {
        match self.system.name {
            SystemName::Nilpotent => SystemSpec::Nilpotent { a: self.system.a, sigma: self.system.sigma },
            SystemName::Duffing => SystemSpec::Duffing { sigma: self.system.sigma },
        }
    }

    pub fn build_system(&self) -> Result<Box<dyn PerturbedSystem>> {
        self.system_spec().build()
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let n = &self.noise;
        let jumps = if n.jumps {
            Some(
                JumpMeasureSpec::new(n.alpha, n.c_alpha, n.cutoff, n.floor, self.build_system()?.noise_dim())?
                    .with_small_jump_gaussian(n.small_jump_gaussian),
            )
        } else {
            None
        };
        Ok(NoiseModel { brownian: n.brownian, jumps })
    }

    pub fn circle_problem(&self) -> Result<CircleProblem> {
        if self.system.name != SystemName::Nilpotent {
            return Err(Error::InvalidParameter(
                "the circle solver applies to the nilpotent system only".into(),
            ));
        }
        let mut p = CircleProblem::new(self.system.a, self.system.sigma, self.run.epsilon, self.noise_model()?)?;
        p.z_nodes = self.fpcircle.z_nodes;
        p.validate()?;
        Ok(p)
    }

    /// Checks every section against the ranges of the owning modules.
    pub fn validate(&self) -> Result<()> {
        self.build_system()?;
        self.noise_model()?;
        self.estimator.validate()?;
        if !(self.run.epsilon >= 0.0 && self.run.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon = {} must be >= 0", self.run.epsilon)));
        }
        if self.simulate.stride == 0 {
            return Err(Error::InvalidParameter("simulate.stride must be at least 1".into()));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key `{key}`")))?;
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

//! JSON configuration and trial-data files. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CellSummary, PatientRecord, PiceDf, TrialData};
use crate::population::{Arm, DesignSpec, PopulationSpec, Stage};
use crate::selection::{RuleConfig, RuleKind};
use crate::simulation::Scenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub prevalences: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFile {
    pub kind: RuleKind,
    #[serde(default)]
    pub delta_star: Option<f64>,
    #[serde(default)]
    pub assume_monotone: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub n1: usize,
    pub n2: usize,
    /// Known outcome standard deviation; give at most one of `sigma` and
    /// `sigma2`, or neither for the plug-in estimator.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub sigma2: Option<f64>,
    pub rule: RuleFile,
    #[serde(default)]
    pub pice_df: PiceDf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub effects: Vec<f64>,
    #[serde(default)]
    pub control_means: Option<Vec<f64>>,
    /// Falls back to the design variance.
    #[serde(default)]
    pub sigma2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Markdown table path for `simulate`; defaults to the CSV path with an
    /// `.md` extension.
    #[serde(default)]
    pub markdown: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub population: PopulationConfig,
    pub design: DesignConfig,
    #[serde(default)]
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub spec: PopulationSpec,
    pub design: DesignSpec,
    pub pice_df: PiceDf,
    pub scenarios: Vec<Scenario>,
    pub output: OutputConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(self) -> Result<Config> {
        let spec = PopulationSpec::new(self.population.prevalences, None)?;
        let d = self.design;
        let sigma2 = match (d.sigma, d.sigma2) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give only one of design.sigma and design.sigma2".into(),
                ))
            }
            (Some(s), None) => {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Config(format!(
                        "design.sigma must be positive, got {s}"
                    )));
                }
                Some(s * s)
            }
            (None, s2) => s2,
        };
        let mut rule = RuleConfig::new(d.rule.kind, d.rule.delta_star);
        if let Some(m) = d.rule.assume_monotone {
            rule.assume_monotone = m;
        }
        let design = DesignSpec::new(d.n1, d.n2, sigma2, rule)?;
        design.validate_for(&spec)?;

        let k = spec.k();
        let mut scenarios = Vec::with_capacity(self.scenarios.len());
        for s in self.scenarios {
            let sigma2 = s.sigma2.or(sigma2).ok_or_else(|| {
                Error::Config(format!(
                    "scenario {:?} has no sigma2 and the design gives none",
                    s.name
                ))
            })?;
            let mut scenario = Scenario::new(s.name, s.effects, sigma2);
            if let Some(c) = s.control_means {
                scenario.control_means = c;
            }
            scenario.validate_for(&spec)?;
            scenarios.push(scenario);
        }
        let mut names: Vec<&str> = scenarios.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("scenario names must be unique".into()));
        }
        if k == 0 {
            return Err(Error::Config("no subpopulations".into()));
        }
        Ok(Config {
            spec,
            design,
            pice_df: d.pice_df,
            scenarios,
            output: self.output,
        })
    }
}

pub fn load_config(path: &Path) -> std::result::Result<Config, LoadError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LoadError::Io(format!("{}: {e}", path.display())))?;
    ConfigFile::parse(&text)
        .and_then(ConfigFile::validate)
        .map_err(|e| LoadError::Invalid(format!("{}: {e}", path.display())))
}

/// Reading failures, kept apart from schema failures for exit codes.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadError {
    Io(String),
    Invalid(String),
}

impl std::fmt::Display for LoadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadError::Io(m) => write!(f, "cannot read {m}"),
            LoadError::Invalid(m) => write!(f, "invalid configuration in {m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmName {
    Control,
    Treatment,
}

impl From<ArmName> for Arm {
    fn from(a: ArmName) -> Arm {
        match a {
            ArmName::Control => Arm::Control,
            ArmName::Treatment => Arm::Treatment,
        }
    }
}

/// Summary of one (subpopulation, stage, arm) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellEntry {
    pub subpopulation: usize,
    pub stage: u8,
    pub arm: ArmName,
    pub n: usize,
    pub mean: f64,
    /// Sum of squared deviations from the cell mean.
    #[serde(default)]
    pub ssd: Option<f64>,
}

/// Treatment-minus-control mean for one (subpopulation, stage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanDifferenceEntry {
    pub subpopulation: usize,
    pub stage: u8,
    pub n: usize,
    pub mean_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub subpopulation: usize,
    pub stage: u8,
    pub arm: ArmName,
    pub y: f64,
}

/// Trial data in any mix of the three forms; every cell may appear once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    #[serde(default)]
    pub cells: Vec<CellEntry>,
    #[serde(default)]
    pub mean_differences: Vec<MeanDifferenceEntry>,
    #[serde(default)]
    pub records: Vec<RecordEntry>,
}

fn locate(subpopulation: usize, stage: u8, k: usize) -> Result<(usize, Stage)> {
    if subpopulation == 0 || subpopulation > k {
        return Err(Error::Config(format!(
            "subpopulation {subpopulation} outside 1..={k}"
        )));
    }
    let stage = Stage::from_number(stage)
        .ok_or_else(|| Error::Config(format!("stage must be 1 or 2, got {stage}")))?;
    Ok((subpopulation - 1, stage))
}

impl DataFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn into_trial_data(self, k: usize) -> Result<TrialData> {
        let mut records = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let (m, stage) = locate(r.subpopulation, r.stage, k)?;
            records.push(PatientRecord {
                m,
                stage,
                arm: r.arm.into(),
                y: r.y,
            });
        }
        let mut data = TrialData::from_records(k, &records)?;
        for c in self.cells {
            let (m, stage) = locate(c.subpopulation, c.stage, k)?;
            data.insert(
                m,
                stage,
                c.arm.into(),
                CellSummary {
                    count: c.n,
                    mean: c.mean,
                    ssd: c.ssd,
                },
            )?;
        }
        for d in self.mean_differences {
            let (m, stage) = locate(d.subpopulation, d.stage, k)?;
            if !d.mean_diff.is_finite() {
                return Err(Error::Config("non-finite mean_diff".into()));
            }
            data.insert_mean_difference(m, stage, d.n, d.mean_diff)?;
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORKED: &str = r#"{
        "population": {"prevalences": [0.5, 0.5]},
        "design": {"n1": 200, "n2": 100, "sigma": 0.36,
                   "rule": {"kind": "D1", "delta_star": 0.025}}
    }"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ConfigFile::parse(WORKED).unwrap().validate().unwrap();
        assert_eq!(cfg.design.n1, 200);
        assert!((cfg.design.sigma2.unwrap() - 0.1296).abs() < 1e-15);
        assert_eq!(cfg.pice_df, PiceDf::Pooled);
        assert!(cfg.scenarios.is_empty());
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = WORKED.replace("\"n2\"", "\"n_2\"");
        let err = ConfigFile::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("n_2"), "{err}");
    }

    #[test]
    fn both_sigmas_rejected() {
        let bad = WORKED.replace("\"sigma\": 0.36", "\"sigma\": 0.36, \"sigma2\": 0.1296");
        assert!(ConfigFile::parse(&bad).unwrap().validate().is_err());
    }

    #[test]
    fn scenario_needs_a_variance() {
        let text = r#"{
            "population": {"prevalences": [0.5, 0.5]},
            "design": {"n1": 100, "n2": 100, "rule": {"kind": "D1", "delta_star": 0.3}},
            "scenarios": [{"name": "1", "effects": [0.5, 0.5]}]
        }"#;
        assert!(ConfigFile::parse(text).unwrap().validate().is_err());
    }

    #[test]
    fn data_forms_combine() {
        let text = r#"{
            "mean_differences": [{"subpopulation": 1, "stage": 1, "n": 10, "mean_diff": 0.5}],
            "cells": [{"subpopulation": 2, "stage": 1, "arm": "control", "n": 3, "mean": 1.0, "ssd": 0.2}],
            "records": [{"subpopulation": 2, "stage": 1, "arm": "treatment", "y": 2.0}]
        }"#;
        let data = DataFile::parse(text).unwrap().into_trial_data(2).unwrap();
        assert_eq!(data.allocation().total(), 14);
        let s1 = data.stage1_summary().unwrap();
        assert_eq!(s1.x1(), &[0.5, 1.0]);
    }

    #[test]
    fn duplicate_cell_rejected() {
        let text = r#"{
            "mean_differences": [{"subpopulation": 1, "stage": 1, "n": 10, "mean_diff": 0.5}],
            "records": [{"subpopulation": 1, "stage": 1, "arm": "treatment", "y": 2.0}]
        }"#;
        assert!(DataFile::parse(text).unwrap().into_trial_data(1).is_err());
    }

    #[test]
    fn bad_stage_rejected() {
        let text = r#"{"mean_differences": [{"subpopulation": 1, "stage": 3, "n": 10, "mean_diff": 0.5}]}"#;
        assert!(DataFile::parse(text).unwrap().into_trial_data(1).is_err());
    }
}

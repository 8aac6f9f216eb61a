//! Per-command run configurations, read from TOML and written back resolved.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use odflow::epidriver::SeirParams;
use odflow::geodata::Scenario;
use odflow::synthcity::SynthConfig;
use odflow::trainer::ReconstructConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// City inputs: region, feature and flow files, or a synthetic city when
/// no region file is given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CityInput {
    pub regions: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructRun {
    pub seed: u64,
    pub repeats: usize,
    pub scenario: Scenario,
    pub ratio: f64,
    pub top_fraction: f64,
    pub input: CityInput,
    pub train: ReconstructConfig,
}

impl Default for ReconstructRun {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 1,
            scenario: Scenario::Internal,
            ratio: 0.1,
            top_fraction: 0.3,
            input: CityInput::default(),
            train: ReconstructConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleRun {
    pub seed: u64,
    pub members: usize,
    pub scenario: Scenario,
    pub ratio: f64,
    pub input: CityInput,
    pub train: ReconstructConfig,
}

impl Default for EnsembleRun {
    fn default() -> Self {
        Self {
            seed: 0,
            members: 5,
            scenario: Scenario::Internal,
            ratio: 0.1,
            input: CityInput::default(),
            train: ReconstructConfig::default(),
        }
    }
}

/// Zero-shot application of a checkpoint (file) or ensemble (directory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferRun {
    pub checkpoint: PathBuf,
    pub top_fraction: f64,
    /// Target city; its flows, if any, are used only for evaluation.
    pub target: CityInput,
}

impl Default for TransferRun {
    fn default() -> Self {
        Self { checkpoint: PathBuf::from("checkpoint.json"), top_fraction: 0.3, target: CityInput::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegindexRun {
    pub regions: Option<PathBuf>,
    pub synth: SynthConfig,
    pub k: Option<usize>,
    pub scan: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeirRun {
    /// City and true flows.
    pub input: CityInput,
    /// Estimated flows from a file; enables paired mode.
    pub estimated_flows: Option<PathBuf>,
    /// Estimated flows inferred by a checkpoint on the input city; enables paired mode.
    pub checkpoint: Option<PathBuf>,
    pub params: SeirParams,
    /// Seeded region ids; empty means the most populous region.
    pub seed_regions: Vec<String>,
    pub seed_infected: f64,
}

impl Default for SeirRun {
    fn default() -> Self {
        Self {
            input: CityInput::default(),
            estimated_flows: None,
            checkpoint: None,
            params: SeirParams::default(),
            seed_regions: vec![],
            seed_infected: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSpec {
    pub divergence: f64,
    pub si_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRun {
    pub top_fraction: f64,
    pub synth: SynthConfig,
    /// Emit a second city in `city_b/` next to `city_a/`.
    pub pair: Option<PairSpec>,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self { top_fraction: 0.3, synth: SynthConfig::default(), pair: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub regions: PathBuf,
    pub truth: PathBuf,
    pub predicted: PathBuf,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self { regions: PathBuf::from("regions.csv"), truth: PathBuf::from("truth.csv"), predicted: PathBuf::from("predicted.csv") }
    }
}

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

pub fn write_resolved<T: Serialize>(cfg: &T, dir: &Path) -> Result<()> {
    let text = toml::to_string(cfg).context("serializing resolved config")?;
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip<T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(cfg: &T) {
        let text = toml::to_string(cfg).unwrap();
        let back: T = toml::from_str(&text).unwrap();
        assert_eq!(&back, cfg, "{text}");
    }

    #[test]
    fn every_run_config_round_trips() {
        round_trip(&ReconstructRun::default());
        round_trip(&EnsembleRun::default());
        round_trip(&TransferRun::default());
        round_trip(&SegindexRun { k: Some(4), ..SegindexRun::default() });
        round_trip(&SeirRun { seed_regions: vec!["r1".into()], ..SeirRun::default() });
        round_trip(&SynthRun { pair: Some(PairSpec { divergence: 0.5, si_offset: 0.1 }), ..SynthRun::default() });
        round_trip(&EvalRun::default());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ReconstructRun = toml::from_str("ratio = 0.2\n[train.model]\nd_node = 8\n").unwrap();
        assert_eq!(cfg.ratio, 0.2);
        assert_eq!(cfg.train.model.d_node, 8);
        assert_eq!(cfg.train.model.heads, ReconstructConfig::default().model.heads);
        assert_eq!(cfg.scenario, Scenario::Internal);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ReconstructRun>("ratoi = 0.2\n").is_err());
    }
}

//! Run configuration: one TOML document with a section per pipeline stage.
//!
//! Every key has a default and unknown keys are rejected. A top-level `seed`
//! (or `--seed`) overrides the world, noise and training seeds together.

use std::path::Path;

use anyhow::{Context, Result};
use safl_core::bigan::BranchArchitecture;
use safl_core::dataset::{NoiseDistribution, NoiseSpec, SyntheticWorldSpec};
use safl_core::eval::EvalConfig;
use safl_core::mapper::{ExtractionConfig, OctreeConfig};
use safl_core::matcher::{Metric, SeqMatchConfig};
use safl_core::sync::TrainConfig;
use serde::{Deserialize, Serialize};

/// Viewpoint noise applied at map extraction to frames from `first_frame` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub t_amp: f64,
    pub r_amp: f64,
    pub seed: u64,
    pub distribution: NoiseDistribution,
    pub first_frame: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            t_amp: 0.0,
            r_amp: 0.0,
            seed: 0,
            distribution: NoiseDistribution::Uniform,
            first_frame: 0,
        }
    }
}

impl NoiseSection {
    pub fn spec(&self) -> NoiseSpec {
        NoiseSpec {
            t_amp: self.t_amp,
            r_amp: self.r_amp,
            seed: self.seed,
            distribution: self.distribution,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricName {
    #[default]
    SqEuclid,
    Sad,
}

impl From<MetricName> for Metric {
    fn from(m: MetricName) -> Self {
        match m {
            MetricName::SqEuclid => Metric::SqEuclid,
            MetricName::Sad => Metric::Sad,
        }
    }
}

/// Frames `[0, split)` are references, `[split, n)` are queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingSection {
    pub split: usize,
    pub metric: MetricName,
    pub sequence: SeqMatchConfig,
}

impl Default for MatchingSection {
    fn default() -> Self {
        Self {
            split: 100,
            metric: MetricName::SqEuclid,
            sequence: SeqMatchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// Write a checkpoint every `checkpoint_every` epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { checkpoint_every: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSection {
    pub map2d: BranchArchitecture,
    pub map3d: BranchArchitecture,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        Self {
            map2d: BranchArchitecture::default_2d(),
            map3d: BranchArchitecture::default_3d(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub world: SyntheticWorldSpec,
    pub noise: NoiseSection,
    pub octree: OctreeConfig,
    pub extraction: ExtractionConfig,
    pub architecture: ArchitectureSection,
    pub training: TrainConfig,
    pub schedule: ScheduleSection,
    pub matching: MatchingSection,
    pub evaluation: EvalConfig,
}

/// Raw document; architecture tables are merged over per-domain defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    #[serde(default)]
    world: SyntheticWorldSpec,
    #[serde(default)]
    noise: NoiseSection,
    #[serde(default)]
    octree: OctreeConfig,
    #[serde(default)]
    extraction: ExtractionConfig,
    #[serde(default)]
    architecture: RawArchitecture,
    #[serde(default)]
    training: TrainConfig,
    #[serde(default)]
    schedule: ScheduleSection,
    #[serde(default)]
    matching: MatchingSection,
    #[serde(default)]
    evaluation: EvalConfig,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawArchitecture {
    map2d: Option<toml::Table>,
    map3d: Option<toml::Table>,
}

fn merge_arch(base: BranchArchitecture, over: Option<toml::Table>, key: &str) -> Result<BranchArchitecture> {
    let Some(over) = over else { return Ok(base) };
    let toml::Value::Table(mut table) = toml::Value::try_from(&base).context("serializing default architecture")? else {
        unreachable!("a struct serializes to a table")
    };
    for (k, v) in over {
        table.insert(k, v);
    }
    let arch: BranchArchitecture = toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("config key architecture.{key}"))?;
    arch.validate().with_context(|| format!("config key architecture.{key}"))?;
    Ok(arch)
}

/// A configuration problem, reported with its own exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        let architecture = ArchitectureSection {
            map2d: merge_arch(BranchArchitecture::default_2d(), raw.architecture.map2d, "map2d")
                .map_err(|e| ConfigError(format!("{e:#}")))?,
            map3d: merge_arch(BranchArchitecture::default_3d(), raw.architecture.map3d, "map3d")
                .map_err(|e| ConfigError(format!("{e:#}")))?,
        };
        let mut cfg = RunConfig {
            seed: raw.seed,
            world: raw.world,
            noise: raw.noise,
            octree: raw.octree,
            extraction: raw.extraction,
            architecture,
            training: raw.training,
            schedule: raw.schedule,
            matching: raw.matching,
            evaluation: raw.evaluation,
        };
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("config {}", p.display()))
            }
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.world.obstacle_seed = s;
            self.noise.seed = s;
            self.training.seed = s;
        }
    }

    fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: safl_core::Result<()>| {
            r.map_err(|e| ConfigError(format!("section [{section}]: {e}")))
        };
        wrap("world", self.world.validate())?;
        wrap("noise", self.noise.spec().validate())?;
        wrap("octree", self.octree.validate())?;
        wrap("extraction", self.extraction.validate())?;
        wrap("training", self.training.validate())?;
        wrap("matching", self.matching.sequence.validate())?;
        wrap("evaluation", self.evaluation.validate())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[octree]\nleaf_res = 0.2\n").unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(format!("{err:#}").contains("leaf_res"));
        assert!(RunConfig::parse("colour = 1\n").is_err());
    }

    #[test]
    fn architecture_overrides_keep_domain_defaults() {
        let cfg = RunConfig::parse("[architecture.map2d]\nlatent_dim = 16\n").unwrap();
        assert_eq!(cfg.architecture.map2d.latent_dim, 16);
        assert_eq!(cfg.architecture.map2d.input_size, 64);
        assert_eq!(cfg.architecture.map3d, BranchArchitecture::default_3d());
    }

    #[test]
    fn global_seed_reaches_every_section() {
        let cfg = RunConfig::parse("seed = 9\n[training]\nseed = 1\n").unwrap();
        assert_eq!((cfg.world.obstacle_seed, cfg.noise.seed, cfg.training.seed), (9, 9, 9));
    }

    #[test]
    fn invalid_values_name_their_section() {
        let err = RunConfig::parse("[training]\nbatch_size = 0\n").unwrap_err();
        assert!(err.to_string().contains("[training]"), "{err}");
    }
}

use std::path::Path;

use anyhow::{bail, Context, Result};
use mmkg_core::captioner::CaptionerConfig;
use mmkg_core::data::DataConfig;
use mmkg_core::graph::GraphConfig;
use mmkg_core::matcher::MatcherConfig;
use mmkg_core::metrics::EntityMatchConfig;
use mmkg_core::synth::SynthCorpusConfig;
use serde::{Deserialize, Serialize};

/// Every tunable of the pipeline; any missing section or field takes its default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub matcher: MatcherConfig,
    pub graph: GraphConfig,
    pub captioner: CaptionerConfig,
    pub evaluation: EntityMatchConfig,
    pub synth: SynthCorpusConfig,
}

impl Config {
    /// Small settings matching the synthetic corpus.
    pub fn desk() -> Self {
        let synth = SynthCorpusConfig::default();
        Config {
            data: DataConfig::desk(synth.kb.d_e, synth.kb.d_v),
            matcher: MatcherConfig::desk(),
            captioner: CaptionerConfig::desk(),
            synth,
            ..Config::default()
        }
    }

    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn to_format(&self, format: &str) -> Result<String> {
        match format {
            "toml" => self.to_toml(),
            "json" => Ok(serde_json::to_string_pretty(self)?),
            other => bail!("unknown config format {other:?}, expected toml or json"),
        }
    }
}

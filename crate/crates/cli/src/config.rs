//! Run configuration: the TOML schema, validation and shipped presets.
//!
//! Configs are versioned and strict: unknown keys anywhere in the tree are
//! rejected so a misspelled hyperparameter cannot silently fall back to a
//! default. `RunConfig` round-trips losslessly through TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rnst_core::dataio::GuidancePolicy;
use rnst_core::rnst::RNSTConfig;
use rnst_core::NoiseSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Where content or guidance slices come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSource {
    /// Directory of `<label>_<index:04>.{png|pfi}` files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// A single slice file (treated as index 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Slice set label used for directory scanning and output naming.
    #[serde(default = "default_label")]
    pub label: String,
}

fn default_label() -> String {
    "slice".to_string()
}

impl SliceSource {
    pub fn is_empty(&self) -> bool {
        self.dir.is_none() && self.file.is_none()
    }
}

/// Self-generated phantom dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSource {
    pub size: usize,
    pub contrast_gamma: f64,
    #[serde(default = "default_slices")]
    pub slices: usize,
    #[serde(default = "default_label")]
    pub label: String,
}

fn default_slices() -> usize {
    1
}

/// Content specification: either files or a phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ContentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSource>,
    #[serde(default = "default_label")]
    pub label: String,
}

/// Backbone weights: an external file or a seeded synthetic trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Expected SHA-256 of the weights file; verified when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWeights {
    pub depth: usize,
    pub seed: u64,
}

/// Output artifact switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    /// Save the clipped iterate after every outer iteration.
    pub save_iterates: bool,
    /// Emit |recon - reference| maps when a reference is available.
    pub error_maps: bool,
    /// Emit 16-bit PNG previews next to the lossless .pfi files.
    pub png_previews: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            save_iterates: false,
            error_maps: true,
            png_previews: true,
        }
    }
}

/// A full reconstruction run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed: phantom generation and per-slice noise derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub content: ContentSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<SliceSource>,
    #[serde(default = "default_policy")]
    pub policy: GuidancePolicy,
    /// Extra corruption applied to content slices before reconstruction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<SliceSource>,
    pub weights: WeightsSpec,
    pub rnst: RNSTConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_policy() -> GuidancePolicy {
    GuidancePolicy::Matched
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing run config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (this build reads {})",
                self.schema_version,
                SCHEMA_VERSION
            );
        }
        let sources = [
            self.content.dir.is_some(),
            self.content.file.is_some(),
            self.content.phantom.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if sources != 1 {
            bail!("content must specify exactly one of dir, file or phantom");
        }
        if self.content.phantom.is_none() {
            match &self.guidance {
                None => bail!("guidance is required unless content is a phantom"),
                Some(g) if g.is_empty() => bail!("guidance must specify dir or file"),
                _ => {}
            }
        }
        let weight_sources = [
            self.weights.path.is_some(),
            self.weights.synthetic.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if weight_sources != 1 {
            bail!("weights must specify exactly one of path or synthetic");
        }
        if let Some(s) = &self.weights.synthetic {
            if !(1..=13).contains(&s.depth) {
                bail!("synthetic weights depth must be 1..=13, got {}", s.depth);
            }
        }
        self.rnst
            .validate()
            .map_err(|e| anyhow::anyhow!("rnst config: {e}"))?;
        Ok(())
    }
}

/// Shipped experiment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Reconstruction of the original scans: 10 outer iterations,
    /// mu = 0.13, lambda = 0.2.
    #[value(name = "paper-test1")]
    PaperTest1,
    /// Reconstruction with extra AWGN (sigma = 20/255): 50 outer
    /// iterations, mu = 0.15, lambda = 0.3.
    #[value(name = "paper-test2-awgn")]
    PaperTest2Awgn,
    /// Self-contained 128x128 phantom run with synthetic weights.
    #[value(name = "phantom-default")]
    PhantomDefault,
}

pub const AWGN_SIGMA: f64 = 20.0 / 255.0;

impl Preset {
    pub fn config(self) -> RunConfig {
        let base_rnst = RNSTConfig {
            lambda: 0.2,
            mu: 0.13,
            n_iter: 10,
            n_style: 3,
            n_line: 5,
            n0: 100,
            n_step: 100,
            ..RNSTConfig::default()
        };
        match self {
            Preset::PaperTest1 => RunConfig {
                schema_version: SCHEMA_VERSION,
                seed: 0,
                out_dir: None,
                content: ContentSpec::default(),
                guidance: None,
                policy: GuidancePolicy::Matched,
                noise: None,
                reference: None,
                weights: WeightsSpec {
                    path: Some(default_weights_path()),
                    sha256: None,
                    synthetic: None,
                },
                rnst: base_rnst,
                output: OutputSpec::default(),
            },
            Preset::PaperTest2Awgn => {
                let mut cfg = Preset::PaperTest1.config();
                cfg.noise = Some(NoiseSpec {
                    sigma: AWGN_SIGMA,
                    seed: 0,
                });
                cfg.rnst.lambda = 0.3;
                cfg.rnst.mu = 0.15;
                cfg.rnst.n_iter = 50;
                cfg
            }
            Preset::PhantomDefault => {
                let mut cfg = Preset::PaperTest1.config();
                cfg.seed = 1;
                cfg.content.phantom = Some(PhantomSource {
                    size: 128,
                    contrast_gamma: 1.4,
                    slices: 1,
                    label: "phantom".into(),
                });
                cfg.content.label = "phantom".into();
                cfg.noise = Some(NoiseSpec {
                    sigma: AWGN_SIGMA,
                    seed: 1,
                });
                cfg.weights = WeightsSpec {
                    path: None,
                    sha256: None,
                    synthetic: Some(SyntheticWeights { depth: 8, seed: 77 }),
                };
                cfg.rnst.n0 = 50;
                cfg.rnst.n_step = 50;
                cfg.output.save_iterates = true;
                cfg
            }
        }
    }
}

/// Default weights location: `$RNST_WEIGHTS_DIR/vgg16.safetensors`, falling
/// back to `weights/vgg16.safetensors` in the working directory.
pub fn default_weights_path() -> PathBuf {
    weights_cache_dir().join("vgg16.safetensors")
}

pub fn weights_cache_dir() -> PathBuf {
    std::env::var_os("RNST_WEIGHTS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("weights"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for preset in [Preset::PaperTest1, Preset::PaperTest2Awgn, Preset::PhantomDefault] {
            let cfg = preset.config();
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text)
                .unwrap_or_else(|e| panic!("{preset:?}: {e}\n{text}"));
            assert_eq!(cfg, back, "{preset:?} did not round-trip");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = Preset::PhantomDefault.config().to_toml().unwrap();
        text.push_str("\nmysterious_knob = 3\n");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(format!("{err:#}").contains("mysterious_knob"), "{err:#}");
    }

    #[test]
    fn nested_unknown_keys_are_rejected() {
        let text = Preset::PhantomDefault
            .config()
            .to_toml()
            .unwrap()
            .replace("[rnst]", "[rnst]\nmu_typo = 0.5");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn guidance_required_for_file_content() {
        let mut cfg = Preset::PaperTest1.config();
        cfg.content.dir = Some("content".into());
        cfg.guidance = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn exactly_one_weight_source() {
        let mut cfg = Preset::PhantomDefault.config();
        cfg.weights.path = Some("w.safetensors".into());
        assert!(cfg.validate().is_err());
    }
}

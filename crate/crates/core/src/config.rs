//! Run configuration: one struct describing an experiment end to end.
//!
//! Epochs, batch size, learning rate and schedule are deliberately required
//! fields in config files; everything else has documented defaults. The
//! resolved config is serialized into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PeLayout, TokenPromptConfig, TokenPromptMode};
use crate::data::DatasetSpec;
use crate::diversity::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::geometry::{PromptGeometry, PromptMode};
use crate::label_mapping::CollisionPolicy;
use crate::optimizer::{NormKind, NormalizationMode, Schedule, UpdateRule};
use crate::util::Interpolation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Learn pixel prompts (border or overlay) with normalized descent.
    PixelPrompt,
    /// Learn token prompts (the shallow / positional / deep family).
    TokenPrompt,
    /// Reference baseline: logistic regression on frozen features.
    LinearProbe,
    /// No learning; evaluate the frozen model with a zero prompt.
    ZeroShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct GeometryConfig {
    pub mode: PromptMode,
    /// Composed canvas side (the backbone input size).
    pub outer_size: usize,
    /// Shrunk-image side; equals the native size for outer-pad modes.
    pub inner_size: usize,
    pub init_std: f64,
    pub interpolation: Interpolation,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            mode: PromptMode::ShrinkPad,
            outer_size: 32,
            inner_size: 24,
            init_std: 0.02,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl GeometryConfig {
    pub fn to_geometry(&self, channels: usize) -> Result<PromptGeometry> {
        PromptGeometry::new(self.outer_size, self.inner_size, channels, self.mode)
    }

    pub fn pe_layout(&self) -> PeLayout {
        match self.mode {
            PromptMode::ShrinkPad | PromptMode::OverlayAdd => PeLayout::Native,
            PromptMode::OuterPadWithPe => PeLayout::Interpolated,
            PromptMode::OuterPadNoPe => PeLayout::CenterOnly,
        }
    }

    /// Default enlarged canvas for outer-pad runs: one ring of patch rows.
    /// The exact parameter match with the shrink-pad default is impossible
    /// under patch alignment; this is the closest aligned choice.
    pub fn outer_pad_default(native: usize, patch: usize, mode: PromptMode) -> Self {
        GeometryConfig {
            mode,
            outer_size: native + 2 * patch,
            inner_size: native,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    #[serde(default = "default_norm")]
    pub normalization: NormKind,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_norm() -> NormKind {
    NormKind::L2Whole
}

fn default_epsilon() -> f64 {
    1e-12
}

impl OptimizerConfig {
    pub fn rule(&self) -> UpdateRule {
        UpdateRule {
            learning_rate: self.learning_rate,
            schedule: self.schedule,
            mode: NormalizationMode { kind: self.normalization, epsilon: self.epsilon },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingMode {
    /// Head outputs are the downstream classes (no mapping).
    Identity,
    /// Prediction-frequency mapping built on the training split.
    Frequency,
    /// Seeded injective random assignment.
    Arbitrary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct MappingConfig {
    pub mode: MappingMode,
    pub policy: CollisionPolicy,
    pub seed: u64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig { mode: MappingMode::Identity, policy: CollisionPolicy::ClaimBest, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub token_prompt: TokenPromptConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub mapping: MappingConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_method() -> Method {
    Method::PixelPrompt
}

fn default_eval_every() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/run")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::PixelPrompt,
            seed: 0,
            epochs: 1,
            batch_size: 16,
            eval_every: 1,
            backbone: BackboneConfig::default(),
            geometry: GeometryConfig::default(),
            token_prompt: TokenPromptConfig::default(),
            optimizer: OptimizerConfig {
                learning_rate: 1.0,
                schedule: Schedule::CosineDecay,
                normalization: NormKind::L2Whole,
                epsilon: 1e-12,
            },
            augmentation: AugmentationPolicy::default(),
            dataset: DatasetSpec::default(),
            mapping: MappingConfig::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.optimizer.rule().validate()?;
        self.augmentation.validate()?;
        self.dataset.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
        }
        match self.method {
            Method::PixelPrompt => {
                if self.token_prompt.mode != TokenPromptMode::None && self.token_prompt.num_prompts > 0 {
                    return Err(Error::InvalidConfig(
                        "pixel-prompt runs train pixel parameters only; disable token prompts".into(),
                    ));
                }
                self.validate_geometry()?;
            }
            Method::TokenPrompt => {
                if self.token_prompt.mode == TokenPromptMode::None || self.token_prompt.num_prompts == 0 {
                    return Err(Error::InvalidConfig(
                        "token-prompt runs need a token mode and at least one prompt token".into(),
                    ));
                }
                if self.token_prompt.mode == TokenPromptMode::Positional {
                    let grid = self.backbone.grid();
                    if self.token_prompt.position_index > grid * grid {
                        return Err(Error::InvalidConfig(format!(
                            "position index {} outside the positional table (0..={})",
                            self.token_prompt.position_index,
                            grid * grid
                        )));
                    }
                }
            }
            Method::LinearProbe | Method::ZeroShot => {}
        }
        Ok(())
    }

    fn validate_geometry(&self) -> Result<()> {
        let g = self.geometry.to_geometry(self.backbone.channels)?;
        let native = self.backbone.native_size;
        let patch = self.backbone.patch_size;
        match g.mode {
            PromptMode::ShrinkPad | PromptMode::OverlayAdd => {
                if g.outer_size != native {
                    return Err(Error::InvalidConfig(format!(
                        "composed size {} must equal the backbone native size {native}",
                        g.outer_size
                    )));
                }
            }
            PromptMode::OuterPadWithPe | PromptMode::OuterPadNoPe => {
                if g.inner_size != native {
                    return Err(Error::InvalidConfig(format!(
                        "outer-pad keeps the image at native size {native}, configured inner {}",
                        g.inner_size
                    )));
                }
                if g.outer_size % patch != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "outer size {} must be divisible by the patch size {patch}",
                        g.outer_size
                    )));
                }
                if g.mode == PromptMode::OuterPadNoPe && g.center_offset() % patch != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "outer-pad-no-pe needs a patch-aligned border, got offset {}",
                        g.center_offset()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The geometry used by the run: the configured one for pixel prompting,
    /// the identity (no border, composed == image) for everything else.
    pub fn effective_geometry(&self) -> Result<PromptGeometry> {
        match self.method {
            Method::PixelPrompt => self.geometry.to_geometry(self.backbone.channels),
            _ => PromptGeometry::new(
                self.backbone.native_size,
                self.backbone.native_size,
                self.backbone.channels,
                PromptMode::ShrinkPad,
            ),
        }
    }

    pub fn pe_layout(&self) -> PeLayout {
        match self.method {
            Method::PixelPrompt => self.geometry.pe_layout(),
            _ => PeLayout::Native,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the output-root override from the environment to relative
    /// output directories.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os("PIXELPROMPT_OUT_ROOT") {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
epochs = 2
batch-size = 8

[optimizer]
learning-rate = 1.0
schedule = "cosine-decay"
"#;

    #[test]
    fn minimal_toml_parses_with_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.method, Method::PixelPrompt);
        assert_eq!(cfg.optimizer.normalization, NormKind::L2Whole);
        assert_eq!(cfg.geometry.inner_size, 24);
        cfg.validate().unwrap();
    }

    #[test]
    fn learning_rate_is_required() {
        let bad = "epochs = 1\nbatch-size = 4\n[optimizer]\nschedule = \"constant\"\n";
        assert!(RunConfig::from_toml_str(bad).is_err());
    }

    #[test]
    fn epochs_and_batch_size_are_required() {
        let bad = "[optimizer]\nlearning-rate = 1.0\nschedule = \"constant\"\n";
        assert!(RunConfig::from_toml_str(bad).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn geometry_must_match_backbone() {
        let mut cfg = RunConfig::default();
        cfg.geometry.outer_size = 64; // backbone native is 32
        assert!(cfg.validate().is_err());
        cfg.geometry = GeometryConfig::outer_pad_default(32, 4, PromptMode::OuterPadWithPe);
        cfg.validate().unwrap();
        assert_eq!(cfg.geometry.outer_size, 40);
    }

    #[test]
    fn token_method_requires_prompts() {
        let mut cfg = RunConfig::default();
        cfg.method = Method::TokenPrompt;
        assert!(cfg.validate().is_err());
        cfg.token_prompt.mode = TokenPromptMode::Shallow;
        cfg.token_prompt.num_prompts = 4;
        cfg.validate().unwrap();
    }

    #[test]
    fn output_root_override_applies_to_relative_paths() {
        let cfg = RunConfig { output_dir: PathBuf::from("runs/x"), ..Default::default() };
        std::env::set_var("PIXELPROMPT_OUT_ROOT", "/tmp/elsewhere");
        assert_eq!(cfg.resolved_output_dir(), PathBuf::from("/tmp/elsewhere/runs/x"));
        std::env::remove_var("PIXELPROMPT_OUT_ROOT");
        assert_eq!(cfg.resolved_output_dir(), PathBuf::from("runs/x"));
    }
}

//! Pixel-border visual prompts for frozen vision transformers.
//!
//! A learnable border of pixels is wrapped around shrunk input images and
//! trained with normalized gradient descent against a frozen backbone, next
//! to the overlay and token-prompt baselines, a frequency-based label-mapping
//! stage, input-diversity augmentation, and an experiment harness with
//! deterministic seeding, sweeps, corruption evaluation and bit-exact
//! checkpoints.

pub mod backbone;
pub mod config;
pub mod container;
pub mod data;
pub mod diversity;
pub mod error;
pub mod geometry;
pub mod label_mapping;
pub mod nn;
pub mod optimizer;
pub mod sweep;
pub mod train;
pub mod util;

pub use backbone::{BackboneConfig, FrozenBackbone, PeLayout, Target, TokenPromptConfig, TokenPromptMode, TokenPrompts};
pub use config::{GeometryConfig, MappingConfig, MappingMode, Method, OptimizerConfig, RunConfig};
pub use data::{Dataset, DatasetSpec, SourceKind, SyntheticSpec};
pub use diversity::AugmentationPolicy;
pub use error::{Error, Result};
pub use geometry::{make_mask, shrink, MaskMatrix, PromptGeometry, PromptMode, PromptTemplate};
pub use label_mapping::{arbitrary_mapping, build_mapping, remap_logits, CollisionPolicy, LabelMapping};
pub use optimizer::{normalize_gradient, step, NormKind, NormalizationMode, Schedule, UpdateRule};
pub use train::{evaluate, load_checkpoint, save_checkpoint, train, MetricsRecord, TrainOutcome};
pub use util::{Image, Interpolation};

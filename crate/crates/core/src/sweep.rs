//! Ablation grids: image size, gradient normalization, augmentation. Each
//! cell is an independent run from the same seeds; the table is a pure
//! function of its cells.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diversity::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::optimizer::NormKind;
use crate::train::{self, Split};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepGrid {
    /// Vary the shrunk-image side, keeping everything else fixed.
    ImageSize(Vec<usize>),
    /// All five gradient-normalization modes.
    Normalization,
    /// none / flip / flip+randaug / flip+cutmix.
    Augmentation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub prompt_params: usize,
    pub final_train_loss: f64,
    pub eval_top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub grid: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Fixed-width text table, one row per grid cell.
    pub fn render(&self) -> String {
        let mut s = format!("# sweep: {}\n", self.grid);
        s.push_str(&format!(
            "{:<24} {:>12} {:>18} {:>10}\n",
            "cell", "params", "final_train_loss", "eval_top1"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>12} {:>18.6} {:>10.4}\n",
                r.label, r.prompt_params, r.final_train_loss, r.eval_top1
            ));
        }
        s
    }
}

fn cell_outcome(label: &str, cfg: &RunConfig) -> Result<SweepRow> {
    let out = train::train(cfg)?;
    let final_train_loss = out
        .metrics
        .iter()
        .rev()
        .find(|r| r.split == Split::Train)
        .map(|r| r.loss)
        .unwrap_or(f64::NAN);
    let eval_top1 = out
        .metrics
        .iter()
        .rev()
        .find(|r| r.split == Split::Eval)
        .map(|r| r.top1)
        .unwrap_or(f64::NAN);
    let prompt_params = out.prompt.parameter_count();
    Ok(SweepRow { label: label.to_string(), prompt_params, final_train_loss, eval_top1 })
}

/// Runs every cell of the grid and collects the comparison table. Cells
/// write under `<output_dir>/sweep-<label>/`.
pub fn run_sweep(base: &RunConfig, grid: &SweepGrid) -> Result<SweepTable> {
    base.validate()?;
    let outdir = base.output_dir.clone();
    let cell_cfg = |label: &str| {
        let mut c = base.clone();
        c.output_dir = outdir.join(format!("sweep-{label}"));
        c
    };
    let rows = match grid {
        SweepGrid::ImageSize(values) => {
            if values.is_empty() {
                return Err(Error::InvalidConfig("image-size sweep needs at least one value".into()));
            }
            let mut rows = Vec::new();
            for &k in values {
                let label = format!("size-{k}");
                let mut cfg = cell_cfg(&label);
                cfg.geometry.inner_size = k;
                cfg.validate()?;
                rows.push(cell_outcome(&label, &cfg)?);
            }
            rows
        }
        SweepGrid::Normalization => {
            let mut rows = Vec::new();
            for kind in NormKind::ALL {
                let label = format!("norm-{}", kind.label());
                let mut cfg = cell_cfg(&label);
                cfg.optimizer.normalization = kind;
                rows.push(cell_outcome(&label, &cfg)?);
            }
            rows
        }
        SweepGrid::Augmentation => {
            let combos: [(&str, AugmentationPolicy); 4] = [
                ("aug-none", AugmentationPolicy::identity()),
                ("aug-flip", AugmentationPolicy { flip: true, ..AugmentationPolicy::identity() }),
                (
                    "aug-flip-randaug",
                    AugmentationPolicy { flip: true, randaug_lite: true, ..AugmentationPolicy::default() },
                ),
                (
                    "aug-flip-cutmix",
                    AugmentationPolicy { flip: true, cutmix: true, ..AugmentationPolicy::default() },
                ),
            ];
            let mut rows = Vec::new();
            for (label, policy) in combos {
                let mut cfg = cell_cfg(label);
                cfg.augmentation = policy;
                rows.push(cell_outcome(label, &cfg)?);
            }
            rows
        }
    };
    let grid_name = match grid {
        SweepGrid::ImageSize(_) => "image-size",
        SweepGrid::Normalization => "normalization",
        SweepGrid::Augmentation => "augmentation",
    };
    Ok(SweepTable { grid: grid_name.to_string(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::config::{GeometryConfig, OptimizerConfig};
    use crate::data::{DatasetSpec, SourceKind, SyntheticSpec};
    use crate::optimizer::Schedule;

    fn sweep_base(dir: &std::path::Path) -> RunConfig {
        RunConfig {
            seed: 5,
            epochs: 1,
            batch_size: 8,
            backbone: BackboneConfig {
                native_size: 16,
                patch_size: 4,
                embed_dim: 32,
                depth: 2,
                heads: 2,
                mlp_ratio: 2.0,
                num_outputs: 2,
                ..Default::default()
            },
            geometry: GeometryConfig { outer_size: 16, inner_size: 12, ..Default::default() },
            optimizer: OptimizerConfig {
                learning_rate: 1.0,
                schedule: Schedule::CosineDecay,
                normalization: NormKind::L2Whole,
                epsilon: 1e-12,
            },
            dataset: DatasetSpec {
                source: SourceKind::Synthetic,
                synthetic: SyntheticSpec {
                    classes: 2,
                    train_per_class: 8,
                    eval_per_class: 4,
                    image_size: 16,
                    ..Default::default()
                },
                ..Default::default()
            },
            output_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn image_size_sweep_rows_and_monotone_params() {
        let dir = tempfile::tempdir().unwrap();
        let base = sweep_base(dir.path());
        let table = run_sweep(&base, &SweepGrid::ImageSize(vec![16, 12, 8, 4])).unwrap();
        assert_eq!(table.rows.len(), 4);
        for pair in table.rows.windows(2) {
            assert!(pair[0].prompt_params < pair[1].prompt_params);
        }
        assert_eq!(table.rows[0].prompt_params, 0); // k == K
    }

    #[test]
    fn normalization_sweep_has_all_five_modes() {
        let dir = tempfile::tempdir().unwrap();
        let base = sweep_base(dir.path());
        let table = run_sweep(&base, &SweepGrid::Normalization).unwrap();
        let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, vec!["norm-none", "norm-l1", "norm-linf", "norm-l2-partial", "norm-l2-whole"]);
    }

    #[test]
    fn sweep_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let t1 = run_sweep(&sweep_base(dir_a.path()), &SweepGrid::Augmentation).unwrap();
        let t2 = run_sweep(&sweep_base(dir_b.path()), &SweepGrid::Augmentation).unwrap();
        for (a, b) in t1.rows.iter().zip(&t2.rows) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.final_train_loss.to_bits(), b.final_train_loss.to_bits());
            assert_eq!(a.eval_top1.to_bits(), b.eval_top1.to_bits());
        }
    }
}

//! Prompt update rule: plain gradient descent with selectable gradient
//! normalization, the training strategy borrowed from transferable
//! adversarial attacks.
//!
//! All normalized modes divide the masked gradient by a norm of the *full*
//! input-pixel gradient, except the partial variant which norms over the
//! prompt region only. Every division is guarded by an epsilon so a zero
//! gradient yields a zero step.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenPrompts;
use crate::error::{Error, Result};
use crate::geometry::{MaskMatrix, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    None,
    L1,
    LInf,
    L2Partial,
    L2Whole,
}

impl NormKind {
    pub const ALL: [NormKind; 5] = [NormKind::None, NormKind::L1, NormKind::LInf, NormKind::L2Partial, NormKind::L2Whole];

    pub fn label(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::L1 => "l1",
            NormKind::LInf => "linf",
            NormKind::L2Partial => "l2-partial",
            NormKind::L2Whole => "l2-whole",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct NormalizationMode {
    pub kind: NormKind,
    pub epsilon: f64,
}

impl Default for NormalizationMode {
    fn default() -> Self {
        NormalizationMode { kind: NormKind::L2Whole, epsilon: 1e-12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    CosineDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct UpdateRule {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub mode: NormalizationMode,
}

impl UpdateRule {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.mode.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("normalization epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at step `t` of `total` (half-cosine from lr to 0, or
    /// constant).
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::CosineDecay => {
                let total = total.max(1);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
            }
        }
    }
}

fn l1(g: &Array3<f64>) -> f64 {
    g.iter().map(|v| v.abs()).sum()
}

fn l2(g: &Array3<f64>) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn linf(g: &Array3<f64>) -> f64 {
    g.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Turns the full input-pixel gradient into a masked, normalized update
/// direction.
pub fn normalize_gradient(grad_full: &Array3<f64>, mask: &MaskMatrix, mode: NormalizationMode) -> Result<Array3<f64>> {
    if grad_full.dim() != mask.entries().dim() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} vs mask {:?}",
            grad_full.dim(),
            mask.entries().dim()
        )));
    }
    let masked = grad_full * mask.entries();
    let denom = match mode.kind {
        NormKind::None => return Ok(masked),
        NormKind::L1 => l1(grad_full),
        NormKind::LInf => linf(grad_full),
        NormKind::L2Whole => l2(grad_full),
        NormKind::L2Partial => l2(&masked),
    };
    Ok(masked.mapv(|v| v / (denom + mode.epsilon)))
}

/// One descent step: `W <- W - lr_t * direction`. Masked-out entries are
/// never written, so the center block stays bit-identical across a run.
pub fn step(prompt: &mut PromptTemplate, grad_full: &Array3<f64>, rule: &UpdateRule, t: usize, total: usize) -> Result<()> {
    rule.validate()?;
    let direction = normalize_gradient(grad_full, prompt.mask(), rule.mode)?;
    let lr = rule.lr_at(t, total);
    let mask = prompt.mask().entries().clone();
    ndarray::Zip::from(&mut prompt.w)
        .and(&direction)
        .and(&mask)
        .for_each(|w, &d, &m| {
            if m != 0.0 {
                *w -= lr * d;
            }
        });
    if !prompt.is_finite() {
        return Err(Error::Numeric("prompt parameters became non-finite after update".into()));
    }
    Ok(())
}

/// Plain (unnormalized) descent on token-prompt parameters; the pixel-level
/// normalization rule is defined only for pixel prompts.
pub fn step_tokens(prompts: &mut TokenPrompts, grads: &[ndarray::Array2<f64>], rule: &UpdateRule, t: usize, total: usize) -> Result<()> {
    rule.validate()?;
    if grads.len() != prompts.tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} gradient slots for {} prompt slots",
            grads.len(),
            prompts.tokens.len()
        )));
    }
    let lr = rule.lr_at(t, total);
    for (tok, g) in prompts.tokens.iter_mut().zip(grads) {
        if tok.dim() != g.dim() {
            return Err(Error::ShapeMismatch("token gradient shape mismatch".into()));
        }
        *tok -= &(g * lr);
    }
    if !prompts.is_finite() {
        return Err(Error::Numeric("token prompts became non-finite after update".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_mask, PromptGeometry, PromptMode};
    use crate::util;
    use ndarray::Array3;

    fn mode(kind: NormKind) -> NormalizationMode {
        NormalizationMode { kind, epsilon: 1e-12 }
    }

    #[test]
    fn zero_gradient_gives_zero_direction_in_every_mode() {
        let mask = make_mask(4, 2, 1).unwrap();
        let g = Array3::zeros((1, 4, 4));
        for kind in NormKind::ALL {
            let d = normalize_gradient(&g, &mask, mode(kind)).unwrap();
            assert!(d.iter().all(|&v| v == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn l2_whole_divides_by_full_norm() {
        // gradient with known L2 norm 2, all-ones mask
        let g_all = PromptGeometry::new(2, 2, 1, PromptMode::OverlayAdd).unwrap();
        let all_ones = crate::geometry::MaskMatrix::for_geometry(&g_all).unwrap();
        let g = Array3::from_shape_vec((1, 2, 2), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let d = normalize_gradient(&g, &all_ones, mode(NormKind::L2Whole)).unwrap();
        for v in d.iter() {
            assert!((v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn direction_is_zero_at_masked_center_for_every_mode() {
        let mask = make_mask(6, 2, 2).unwrap();
        let mut rng = util::seeded_rng(1, "grad", &[]);
        let g = util::normal_array3(&mut rng, (2, 6, 6), 1.0);
        for kind in NormKind::ALL {
            let d = normalize_gradient(&g, &mask, mode(kind)).unwrap();
            for c in 0..2 {
                for y in 2..4 {
                    for x in 2..4 {
                        assert_eq!(d[[c, y, x]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn positive_scale_invariance_of_normalized_modes() {
        let mask = make_mask(5, 3, 1).unwrap();
        let mut rng = util::seeded_rng(2, "grad", &[]);
        let g = util::normal_array3(&mut rng, (1, 5, 5), 1.0);
        let g_scaled = &g * 37.5;
        for kind in [NormKind::L1, NormKind::LInf, NormKind::L2Partial, NormKind::L2Whole] {
            let d1 = normalize_gradient(&g, &mask, mode(kind)).unwrap();
            let d2 = normalize_gradient(&g_scaled, &mask, mode(kind)).unwrap();
            for (a, b) in d1.iter().zip(d2.iter()) {
                assert!((a - b).abs() < 1e-9, "{kind:?}");
            }
        }
        // NONE scales linearly
        let d1 = normalize_gradient(&g, &mask, mode(NormKind::None)).unwrap();
        let d2 = normalize_gradient(&g_scaled, &mask, mode(NormKind::None)).unwrap();
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert!((b - a * 37.5).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_whole_direction_norm_bounded_by_one() {
        let g_all = PromptGeometry::new(4, 4, 3, PromptMode::OverlayAdd).unwrap();
        let all_ones = crate::geometry::MaskMatrix::for_geometry(&g_all).unwrap();
        for seed in 0..50 {
            let mut rng = util::seeded_rng(seed, "grad", &[]);
            let g = util::normal_array3(&mut rng, (3, 4, 4), 2.0);
            let d = normalize_gradient(&g, &all_ones, mode(NormKind::L2Whole)).unwrap();
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn zero_lr_schedule_leaves_prompt_unchanged() {
        let g = PromptGeometry::new(6, 4, 1, PromptMode::ShrinkPad).unwrap();
        let mut p = PromptTemplate::init(g, 0.02, 3).unwrap();
        let before = p.w.clone();
        let mut rng = util::seeded_rng(4, "grad", &[]);
        let grad = util::normal_array3(&mut rng, (1, 6, 6), 1.0);
        let rule = UpdateRule {
            learning_rate: 0.1,
            schedule: Schedule::CosineDecay,
            mode: mode(NormKind::L2Whole),
        };
        // cosine decay at t == total is exactly zero
        step(&mut p, &grad, &rule, 10, 10).unwrap();
        assert_eq!(p.w, before);
    }

    #[test]
    fn single_step_from_zero_matches_hand_arithmetic() {
        let g = PromptGeometry::new(2, 2, 1, PromptMode::OverlayAdd).unwrap();
        let mut p = PromptTemplate::zeros(g).unwrap();
        let grad = Array3::from_shape_vec((1, 2, 2), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let rule = UpdateRule {
            learning_rate: 0.1,
            schedule: Schedule::Constant,
            mode: mode(NormKind::L2Whole),
        };
        step(&mut p, &grad, &rule, 0, 100).unwrap();
        // unit-normalized direction is 0.5 everywhere; W = -0.1 * 0.5
        for v in p.w.iter() {
            assert!((v + 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn center_block_is_bit_exact_across_steps() {
        let g = PromptGeometry::new(8, 4, 2, PromptMode::ShrinkPad).unwrap();
        let mut p = PromptTemplate::init(g, 0.02, 5).unwrap();
        let center_before = p.center_block(&p.w);
        let rule = UpdateRule {
            learning_rate: 1.0,
            schedule: Schedule::Constant,
            mode: mode(NormKind::L2Whole),
        };
        for t in 0..25 {
            let mut rng = util::seeded_rng(t as u64, "grad", &[]);
            let grad = util::normal_array3(&mut rng, (2, 8, 8), 1.0);
            step(&mut p, &grad, &rule, t, 25).unwrap();
        }
        assert_eq!(p.center_block(&p.w), center_before);
    }

    #[test]
    fn non_finite_update_aborts() {
        let g = PromptGeometry::new(4, 2, 1, PromptMode::ShrinkPad).unwrap();
        let mut p = PromptTemplate::zeros(g).unwrap();
        let grad = Array3::from_elem((1, 4, 4), f64::NAN);
        let rule = UpdateRule {
            learning_rate: 0.1,
            schedule: Schedule::Constant,
            mode: mode(NormKind::None),
        };
        assert!(matches!(step(&mut p, &grad, &rule, 0, 1), Err(Error::Numeric(_))));
    }
}

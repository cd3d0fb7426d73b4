//! Input-diversity augmentation, applied to the shrunk image before prompt
//! composition. Training draws are seeded per sample; evaluation always uses
//! the identity pipeline.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub flip: bool,
    pub randaug_lite: bool,
    /// Strength of the reduced augmentation set, in [0, 1].
    pub randaug_magnitude: f64,
    pub cutmix: bool,
    /// Beta(alpha, alpha) parameter for the cutmix mixing ratio.
    pub cutmix_alpha: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        // flip alone is the strongest setting in practice; heavier
        // augmentation tends to over-regularize prompt training
        AugmentationPolicy { flip: true, randaug_lite: false, randaug_magnitude: 0.3, cutmix: false, cutmix_alpha: 1.0 }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy { flip: false, randaug_lite: false, randaug_magnitude: 0.0, cutmix: false, cutmix_alpha: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && !self.randaug_lite && !self.cutmix
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.randaug_magnitude) {
            return Err(Error::InvalidConfig("randaug magnitude must be in [0, 1]".into()));
        }
        if self.cutmix && self.cutmix_alpha <= 0.0 {
            return Err(Error::InvalidConfig("cutmix alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Horizontal mirror.
pub fn flip(image: &Image) -> Image {
    let (c, h, w) = image.dim();
    let mut out = Image::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = image[[ch, y, w - 1 - x]];
            }
        }
    }
    out
}

/// Pastes a rectangle of `b` into `a` with relative area `1 - lambda`, then
/// recomputes the label weights from the exact pasted area. Returns the mixed
/// image and `(weight_a, weight_b)`.
pub fn cutmix(a: &Image, b: &Image, lambda: f64, rng: &mut ChaCha12Rng) -> Result<(Image, f64, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidInput(format!("cutmix shape mismatch: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
    }
    let (c, h, w) = a.dim();
    let ratio = (1.0 - lambda).sqrt();
    let box_h = (ratio * h as f64).round() as usize;
    let box_w = (ratio * w as f64).round() as usize;
    let mut out = a.clone();
    let (y0, x0, box_h, box_w) = if box_h == 0 || box_w == 0 {
        (0, 0, 0, 0)
    } else {
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        let y0 = cy.saturating_sub(box_h / 2).min(h - box_h.min(h));
        let x0 = cx.saturating_sub(box_w / 2).min(w - box_w.min(w));
        let bh = box_h.min(h - y0);
        let bw = box_w.min(w - x0);
        (y0, x0, bh, bw)
    };
    for ch in 0..c {
        for y in y0..y0 + box_h {
            for x in x0..x0 + box_w {
                out[[ch, y, x]] = b[[ch, y, x]];
            }
        }
    }
    let pasted = (box_h * box_w) as f64 / (h * w) as f64;
    let wa = 1.0 - pasted;
    Ok((out, wa, pasted))
}

fn brightness(image: &Image, delta: f64) -> Image {
    image.mapv(|v| v + delta)
}

fn contrast(image: &Image, factor: f64) -> Image {
    let (c, _, _) = image.dim();
    let mut out = image.clone();
    for ch in 0..c {
        let mut plane = out.index_axis_mut(ndarray::Axis(0), ch);
        let mean = plane.sum() / plane.len() as f64;
        plane.mapv_inplace(|v| mean + factor * (v - mean));
    }
    out
}

fn translate(image: &Image, dy: isize, dx: isize) -> Image {
    let (c, h, w) = image.dim();
    let mut out = Image::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                out[[ch, y, x]] = image[[ch, sy, sx]];
            }
        }
    }
    out
}

fn rotate(image: &Image, radians: f64) -> Image {
    let (c, h, w) = image.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = radians.sin_cos();
    let mut out = Image::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // inverse-rotate output coords into the source, bilinear sample
                let ry = y as f64 - cy;
                let rx = x as f64 - cx;
                let sy = cos * ry + sin * rx + cy;
                let sx = -sin * ry + cos * rx + cx;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let ty = sy - y0;
                let tx = sx - x0;
                let yi = (y0 as isize).clamp(0, h as isize - 1) as usize;
                let yj = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
                let xi = (x0 as isize).clamp(0, w as isize - 1) as usize;
                let xj = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
                let top = image[[ch, yi, xi]] * (1.0 - tx) + image[[ch, yi, xj]] * tx;
                let bot = image[[ch, yj, xi]] * (1.0 - tx) + image[[ch, yj, xj]] * tx;
                out[[ch, y, x]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Reduced augmentation catalog: one of brightness, contrast, translate,
/// rotate per draw, scaled by the policy magnitude.
fn randaug_lite(image: &Image, magnitude: f64, rng: &mut ChaCha12Rng) -> Image {
    let (_, h, _) = image.dim();
    match rng.random_range(0..4u8) {
        0 => brightness(image, magnitude * rng.random_range(-0.3..0.3)),
        1 => contrast(image, 1.0 + magnitude * rng.random_range(-0.5..0.5)),
        2 => {
            let max_shift = ((magnitude * 0.2 * h as f64).round() as i64).max(1);
            let dy = rng.random_range(-max_shift..=max_shift) as isize;
            let dx = rng.random_range(-max_shift..=max_shift) as isize;
            translate(image, dy, dx)
        }
        _ => rotate(image, magnitude * rng.random_range(-0.26..0.26)), // up to ~15 degrees
    }
}

/// One (image, weighted label pair) training example after augmentation.
#[derive(Debug, Clone)]
pub struct AugmentedExample {
    pub image: Image,
    pub label_a: usize,
    pub label_b: usize,
    pub weight_a: f64,
}

/// Applies the policy to a batch in the fixed order flip -> randaug ->
/// cutmix. Cutmix partners are drawn inside the batch. Deterministic for a
/// given `seed`; an all-off policy returns the batch unchanged.
pub fn apply_policy(
    batch: &[(Image, usize)],
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<Vec<AugmentedExample>> {
    policy.validate()?;
    let mut out: Vec<AugmentedExample> = Vec::with_capacity(batch.len());
    for (i, (img, label)) in batch.iter().enumerate() {
        let mut rng = util::seeded_rng(seed, "augment", &[i as u64]);
        let mut image = img.clone();
        if policy.flip && rng.random::<f64>() < 0.5 {
            image = flip(&image);
        }
        if policy.randaug_lite {
            image = randaug_lite(&image, policy.randaug_magnitude, &mut rng);
        }
        out.push(AugmentedExample { image, label_a: *label, label_b: *label, weight_a: 1.0 });
    }
    if policy.cutmix && batch.len() > 1 {
        let beta = Beta::new(policy.cutmix_alpha, policy.cutmix_alpha)
            .map_err(|e| Error::InvalidConfig(format!("cutmix alpha: {e}")))?;
        for i in 0..out.len() {
            let mut rng = util::seeded_rng(seed, "cutmix", &[i as u64]);
            let j = rng.random_range(0..batch.len() - 1);
            let j = if j >= i { j + 1 } else { j };
            let lambda = beta.sample(&mut rng);
            let (mixed, wa, _) = cutmix(&out[i].image, &batch[j].0, lambda, &mut rng)?;
            out[i].image = mixed;
            out[i].label_b = batch[j].1;
            out[i].weight_a = wa;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn flip_is_an_involution() {
        let mut img = Array3::zeros((2, 3, 4));
        for (i, v) in img.iter_mut().enumerate() {
            *v = i as f64;
        }
        assert_eq!(flip(&flip(&img)), img);
    }

    #[test]
    fn flip_of_symmetric_image_is_identity() {
        let img = Array3::from_shape_vec((1, 1, 3), vec![1.0, 2.0, 1.0]).unwrap();
        assert_eq!(flip(&img), img);
    }

    #[test]
    fn flip_one_by_two() {
        let img = Array3::from_shape_vec((1, 1, 2), vec![3.0, 7.0]).unwrap();
        let f = flip(&img);
        assert_eq!(f, array![[[7.0, 3.0]]]);
    }

    #[test]
    fn cutmix_lambda_one_keeps_image_a() {
        let a = Array3::from_elem((1, 4, 4), 1.0);
        let b = Array3::from_elem((1, 4, 4), 2.0);
        let mut rng = util::seeded_rng(0, "t", &[]);
        let (out, wa, wb) = cutmix(&a, &b, 1.0, &mut rng).unwrap();
        assert_eq!(out, a);
        assert_eq!((wa, wb), (1.0, 0.0));
    }

    #[test]
    fn cutmix_lambda_zero_takes_image_b() {
        let a = Array3::from_elem((1, 4, 4), 1.0);
        let b = Array3::from_elem((1, 4, 4), 2.0);
        let mut rng = util::seeded_rng(0, "t", &[]);
        let (out, wa, wb) = cutmix(&a, &b, 0.0, &mut rng).unwrap();
        assert_eq!(out, b);
        assert_eq!((wa, wb), (0.0, 1.0));
    }

    #[test]
    fn cutmix_recomputes_lambda_from_area() {
        // 4x4 canvas, lambda 0.75 -> box ratio 0.5 -> 2x2 box -> 4/16 pasted
        let a = Array3::from_elem((1, 4, 4), 1.0);
        let b = Array3::from_elem((1, 4, 4), 2.0);
        let mut rng = util::seeded_rng(3, "t", &[]);
        let (out, wa, wb) = cutmix(&a, &b, 0.75, &mut rng).unwrap();
        assert_eq!(wa, 0.75);
        assert_eq!(wb, 0.25);
        let pasted = out.iter().filter(|&&v| v == 2.0).count();
        assert_eq!(pasted, 4);
        assert!((wa + wb - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cutmix_rejects_shape_mismatch() {
        let a = Array3::zeros((1, 4, 4));
        let b = Array3::zeros((1, 5, 5));
        let mut rng = util::seeded_rng(0, "t", &[]);
        assert!(cutmix(&a, &b, 0.5, &mut rng).is_err());
    }

    #[test]
    fn all_off_policy_is_identity() {
        let batch: Vec<(Image, usize)> = (0..4)
            .map(|i| {
                let mut rng = util::seeded_rng(i, "img", &[]);
                (util::normal_array3(&mut rng, (3, 6, 6), 1.0), i as usize % 2)
            })
            .collect();
        let out = apply_policy(&batch, &AugmentationPolicy::identity(), 5).unwrap();
        for (ex, (img, label)) in out.iter().zip(&batch) {
            assert_eq!(&ex.image, img);
            assert_eq!(ex.label_a, *label);
            assert_eq!(ex.weight_a, 1.0);
        }
    }

    #[test]
    fn seeded_policy_is_deterministic() {
        let batch: Vec<(Image, usize)> = (0..6)
            .map(|i| {
                let mut rng = util::seeded_rng(i + 10, "img", &[]);
                (util::normal_array3(&mut rng, (3, 8, 8), 1.0), i as usize % 3)
            })
            .collect();
        let policy = AugmentationPolicy {
            flip: true,
            randaug_lite: true,
            randaug_magnitude: 0.5,
            cutmix: true,
            cutmix_alpha: 1.0,
        };
        let a = apply_policy(&batch, &policy, 42).unwrap();
        let b = apply_policy(&batch, &policy, 42).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!((x.label_a, x.label_b), (y.label_a, y.label_b));
            assert_eq!(x.weight_a, y.weight_a);
        }
    }

    #[test]
    fn flip_only_policy_flips_about_half() {
        let img = {
            let mut rng = util::seeded_rng(77, "img", &[]);
            util::normal_array3(&mut rng, (1, 4, 4), 1.0)
        };
        let flipped = flip(&img);
        let batch: Vec<(Image, usize)> = (0..1000).map(|_| (img.clone(), 0)).collect();
        let policy = AugmentationPolicy { flip: true, ..AugmentationPolicy::identity() };
        let out = apply_policy(&batch, &policy, 123).unwrap();
        let n_flipped = out.iter().filter(|ex| ex.image == flipped).count();
        // binomial(1000, 0.5): 3 sigma ~ 47.4
        assert!((n_flipped as f64 - 500.0).abs() < 3.0 * (250.0f64).sqrt() + 1.0, "{n_flipped}");
        for ex in &out {
            assert!(ex.image == img || ex.image == flipped);
        }
    }

    #[test]
    fn augmentation_never_touches_the_composed_border() {
        use crate::geometry::{PromptGeometry, PromptMode, PromptTemplate};
        let g = PromptGeometry::new(12, 8, 3, PromptMode::ShrinkPad).unwrap();
        let t = PromptTemplate::init(g, 0.3, 6).unwrap();
        let v_e = t.effective();
        let batch: Vec<(Image, usize)> = (0..4)
            .map(|i| {
                let mut rng = util::seeded_rng(i + 50, "img", &[]);
                (util::normal_array3(&mut rng, (3, 8, 8), 1.0), i as usize % 2)
            })
            .collect();
        let policy = AugmentationPolicy {
            flip: true,
            randaug_lite: true,
            randaug_magnitude: 0.8,
            cutmix: true,
            cutmix_alpha: 1.0,
        };
        let out = apply_policy(&batch, &policy, 31).unwrap();
        for ex in &out {
            let composed = t.compose(&ex.image, crate::util::Interpolation::Bilinear).unwrap();
            for ((idx, &m), (&c, &v)) in t
                .mask()
                .entries()
                .indexed_iter()
                .zip(composed.iter().zip(v_e.iter()))
            {
                if m != 0.0 {
                    assert_eq!(c, v, "border drifted at {idx:?}");
                }
            }
        }
    }

    #[test]
    fn cutmix_weights_sum_to_one_under_policy() {
        let batch: Vec<(Image, usize)> = (0..8)
            .map(|i| {
                let mut rng = util::seeded_rng(i + 30, "img", &[]);
                (util::normal_array3(&mut rng, (3, 8, 8), 1.0), i as usize % 4)
            })
            .collect();
        let policy = AugmentationPolicy { cutmix: true, ..AugmentationPolicy::identity() };
        let out = apply_policy(&batch, &policy, 9).unwrap();
        for ex in &out {
            assert!(ex.weight_a >= 0.0 && ex.weight_a <= 1.0);
        }
    }
}

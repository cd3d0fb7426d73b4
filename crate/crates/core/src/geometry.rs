//! Pixel-level prompt geometry: mask construction, image shrinking and
//! prompt/image composition.
//!
//! The learnable state is a full-canvas parameter tensor `W`; the effective
//! prompt is `W ⊙ M` where the binary mask `M` selects the border. Composition
//! never mixes prompt and image pixels except in overlay mode, where the
//! prompt is added to the (unshrunk) image.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, Image, Interpolation};

/// How the prompt and the image are reconciled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Shrink the image to `inner_size` and fill the border with prompt pixels.
    ShrinkPad,
    /// Add the full-canvas prompt onto the unshrunk image.
    OverlayAdd,
    /// Keep the image at native size, pad learnable pixels around it and
    /// resample the positional embeddings to the enlarged grid.
    OuterPadWithPe,
    /// As above, but prompt-region patches receive no positional embedding.
    OuterPadNoPe,
}

impl PromptMode {
    pub fn is_outer_pad(self) -> bool {
        matches!(self, PromptMode::OuterPadWithPe | PromptMode::OuterPadNoPe)
    }
}

/// Sizes and mode of a pixel prompt. `outer_size` is the composed side length;
/// `inner_size` is the side of the image region (the shrunk image, or the
/// native image for outer-pad modes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGeometry {
    pub outer_size: usize,
    pub inner_size: usize,
    pub channels: usize,
    pub mode: PromptMode,
}

impl PromptGeometry {
    pub fn new(outer_size: usize, inner_size: usize, channels: usize, mode: PromptMode) -> Result<Self> {
        let g = PromptGeometry { outer_size, inner_size, channels, mode };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_size == 0 || self.inner_size == 0 || self.channels == 0 {
            return Err(Error::InvalidGeometry(format!(
                "sizes must be positive (outer={}, inner={}, channels={})",
                self.outer_size, self.inner_size, self.channels
            )));
        }
        match self.mode {
            PromptMode::ShrinkPad => {
                if self.inner_size > self.outer_size {
                    return Err(Error::InvalidGeometry(format!(
                        "inner size {} exceeds outer size {}",
                        self.inner_size, self.outer_size
                    )));
                }
            }
            PromptMode::OverlayAdd => {
                if self.inner_size != self.outer_size {
                    return Err(Error::InvalidGeometry(
                        "overlay mode keeps the image unshrunk (inner == outer)".into(),
                    ));
                }
            }
            PromptMode::OuterPadWithPe | PromptMode::OuterPadNoPe => {
                if self.inner_size >= self.outer_size {
                    return Err(Error::InvalidGeometry(
                        "outer-pad modes must enlarge the canvas (outer > inner)".into(),
                    ));
                }
                if (self.outer_size - self.inner_size) % 2 != 0 {
                    return Err(Error::InvalidGeometry(
                        "outer-pad border must be symmetric (outer - inner even)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Top-left offset of the image block inside the canvas.
    pub fn center_offset(&self) -> usize {
        (self.outer_size - self.inner_size) / 2
    }

    /// Number of learnable prompt entries (the mask's ones count).
    pub fn parameter_count(&self) -> usize {
        let k2 = self.outer_size * self.outer_size;
        match self.mode {
            PromptMode::OverlayAdd => k2 * self.channels,
            _ => (k2 - self.inner_size * self.inner_size) * self.channels,
        }
    }
}

/// Binary border mask: zeros on the central image block, ones elsewhere.
/// Overlay mode uses an all-ones mask (every canvas entry is learnable).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix(Array3<f64>);

impl MaskMatrix {
    pub fn for_geometry(geometry: &PromptGeometry) -> Result<Self> {
        geometry.validate()?;
        match geometry.mode {
            PromptMode::OverlayAdd => Ok(MaskMatrix(Array3::ones((
                geometry.channels,
                geometry.outer_size,
                geometry.outer_size,
            )))),
            _ => make_mask(geometry.outer_size, geometry.inner_size, geometry.channels),
        }
    }

    pub fn entries(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn ones_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Builds the border mask: central `k x k` zero block, ones elsewhere.
/// The block's top-left corner sits at `floor((K - k) / 2)` on both axes.
pub fn make_mask(outer: usize, inner: usize, channels: usize) -> Result<MaskMatrix> {
    if outer == 0 || inner == 0 || channels == 0 {
        return Err(Error::InvalidGeometry("mask sizes must be positive".into()));
    }
    if inner > outer {
        return Err(Error::InvalidGeometry(format!(
            "inner size {inner} exceeds outer size {outer}"
        )));
    }
    let off = (outer - inner) / 2;
    let mut m = Array3::ones((channels, outer, outer));
    for c in 0..channels {
        for y in off..off + inner {
            for x in off..off + inner {
                m[[c, y, x]] = 0.0;
            }
        }
    }
    Ok(MaskMatrix(m))
}

/// Resamples an image down (or up) to `k x k`.
pub fn shrink(image: &Image, k: usize, interp: Interpolation) -> Result<Image> {
    util::resize_image(image, k, interp)
}

/// The learnable pixel prompt: full-canvas parameters plus mask and geometry.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub geometry: PromptGeometry,
    pub w: Array3<f64>,
    mask: MaskMatrix,
}

impl PromptTemplate {
    /// Zero-initialized prompt (also the promptless / zero-shot baseline).
    pub fn zeros(geometry: PromptGeometry) -> Result<Self> {
        let mask = MaskMatrix::for_geometry(&geometry)?;
        let w = Array3::zeros((geometry.channels, geometry.outer_size, geometry.outer_size));
        Ok(PromptTemplate { geometry, w, mask })
    }

    /// Gaussian init with the given standard deviation, masked to the border.
    pub fn init(geometry: PromptGeometry, init_std: f64, seed: u64) -> Result<Self> {
        let mut t = Self::zeros(geometry)?;
        let mut rng = util::seeded_rng(seed, "prompt_init", &[]);
        let raw = util::normal_array3(
            &mut rng,
            (geometry.channels, geometry.outer_size, geometry.outer_size),
            init_std,
        );
        t.w = raw * t.mask.entries();
        Ok(t)
    }

    /// Rebuilds a template from stored parameters (checkpoint load).
    pub fn from_parts(geometry: PromptGeometry, w: Array3<f64>) -> Result<Self> {
        let mask = MaskMatrix::for_geometry(&geometry)?;
        let expect = (geometry.channels, geometry.outer_size, geometry.outer_size);
        if w.dim() != expect {
            return Err(Error::ShapeMismatch(format!(
                "prompt tensor {:?} does not match geometry {:?}",
                w.dim(),
                expect
            )));
        }
        Ok(PromptTemplate { geometry, w, mask })
    }

    pub fn mask(&self) -> &MaskMatrix {
        &self.mask
    }

    /// Effective prompt `V_e = W ⊙ M`.
    pub fn effective(&self) -> Array3<f64> {
        &self.w * self.mask.entries()
    }

    pub fn parameter_count(&self) -> usize {
        self.geometry.parameter_count()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
    }

    /// Composes the prompt with an image.
    ///
    /// Shrink-pad: the center block is exactly `shrink(image, k)`, the border
    /// is the effective prompt. Accepts native-size or pre-shrunk input (the
    /// resize is an exact no-op at matching sizes, so augmented shrunk images
    /// pass through untouched). Overlay: `image + V_e`. Outer-pad: the image
    /// is kept as-is and centered in the enlarged canvas.
    pub fn compose(&self, image: &Image, interp: Interpolation) -> Result<Image> {
        let (c, h, w) = image.dim();
        if c != self.geometry.channels {
            return Err(Error::ShapeMismatch(format!(
                "image has {} channels, prompt expects {}",
                c, self.geometry.channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("cannot compose an empty image".into()));
        }
        let k = self.geometry.inner_size;
        match self.geometry.mode {
            PromptMode::OverlayAdd => {
                if h != self.geometry.outer_size || w != self.geometry.outer_size {
                    return Err(Error::ShapeMismatch(format!(
                        "overlay mode expects a {0}x{0} image, got {h}x{w}",
                        self.geometry.outer_size
                    )));
                }
                Ok(image + &self.effective())
            }
            PromptMode::ShrinkPad => {
                let shrunk = shrink(image, k, interp)?;
                Ok(self.paste_center(&shrunk))
            }
            PromptMode::OuterPadWithPe | PromptMode::OuterPadNoPe => {
                if h != k || w != k {
                    return Err(Error::ShapeMismatch(format!(
                        "outer-pad modes keep the image at {k}x{k}, got {h}x{w}"
                    )));
                }
                Ok(self.paste_center(image))
            }
        }
    }

    fn paste_center(&self, block: &Image) -> Image {
        let mut out = self.effective();
        let off = self.geometry.center_offset();
        let k = self.geometry.inner_size;
        for c in 0..self.geometry.channels {
            for y in 0..k {
                for x in 0..k {
                    out[[c, off + y, off + x]] = block[[c, y, x]];
                }
            }
        }
        out
    }

    /// Extracts the central image block of a composed canvas (test support
    /// for the center-preservation property).
    pub fn center_block(&self, composed: &Image) -> Image {
        let off = self.geometry.center_offset();
        let k = self.geometry.inner_size;
        composed
            .slice(ndarray::s![.., off..off + k, off..off + k])
            .to_owned()
    }
}

/// Clips the effective prompt to `[0, 1]` for visualization, undoing the
/// dataset normalization first. Prompt values are never clipped during
/// optimization; this is export-only.
pub fn visualization_pixels(template: &PromptTemplate, mean: &[f64], std: &[f64]) -> Result<Array3<f64>> {
    let c = template.geometry.channels;
    if mean.len() != c || std.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "mean/std must have {c} channels, got {}/{}",
            mean.len(),
            std.len()
        )));
    }
    let mut v = template.effective();
    for ch in 0..c {
        v.index_axis_mut(ndarray::Axis(0), ch)
            .mapv_inplace(|x| (x * std[ch] + mean[ch]).clamp(0.0, 1.0));
    }
    Ok(v)
}

/// Writes the clipped prompt visualization as an 8-bit PNG. Grayscale
/// prompts are replicated across RGB.
pub fn write_prompt_png(template: &PromptTemplate, mean: &[f64], std: &[f64], path: &std::path::Path) -> Result<()> {
    let v = visualization_pixels(template, mean, std)?;
    let (c, h, w) = v.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| (v[[ch.min(c - 1), y, x]] * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn mask_4_2_has_four_zeros_twelve_ones() {
        let m = make_mask(4, 2, 1).unwrap();
        let zeros = m.entries().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 4);
        assert_eq!(m.ones_count(), 12);
        // zeros sit in the 2x2 center
        for y in 1..3 {
            for x in 1..3 {
                assert_eq!(m.entries()[[0, y, x]], 0.0);
            }
        }
    }

    #[test]
    fn mask_default_full_scale_counts() {
        // frozen from the brute-force sum over the constructed mask
        let m = make_mask(224, 164, 3).unwrap();
        assert_eq!(m.ones_count(), 69_840);
    }

    #[test]
    fn mask_k_equals_outer_is_all_zero() {
        let m = make_mask(3, 3, 1).unwrap();
        assert_eq!(m.ones_count(), 0);
    }

    #[test]
    fn mask_rejects_bad_sizes() {
        assert!(make_mask(4, 5, 1).is_err());
        assert!(make_mask(0, 0, 1).is_err());
    }

    #[test]
    fn parameter_counts() {
        let g = PromptGeometry::new(224, 164, 3, PromptMode::ShrinkPad).unwrap();
        assert_eq!(g.parameter_count(), 69_840); // ~0.070M
        let g = PromptGeometry::new(224, 224, 3, PromptMode::ShrinkPad).unwrap();
        assert_eq!(g.parameter_count(), 0);
        let g = PromptGeometry::new(32, 24, 3, PromptMode::ShrinkPad).unwrap();
        assert_eq!(g.parameter_count(), 1_344); // brute-force mask-sum oracle below
        let m = make_mask(32, 24, 3).unwrap();
        assert_eq!(g.parameter_count(), m.ones_count());
        let g = PromptGeometry::new(32, 32, 3, PromptMode::OverlayAdd).unwrap();
        assert_eq!(g.parameter_count(), 32 * 32 * 3);
        let g = PromptGeometry::new(40, 32, 3, PromptMode::OuterPadWithPe).unwrap();
        assert_eq!(g.parameter_count(), (40 * 40 - 32 * 32) * 3);
    }

    #[test]
    fn shrink_constant_image_stays_constant() {
        let img = Array3::from_elem((3, 16, 16), 0.5);
        for interp in [Interpolation::Bilinear, Interpolation::Area] {
            let out = shrink(&img, 5, interp).unwrap();
            for v in out.iter() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shrink_same_size_is_identity() {
        let mut img = Array3::zeros((1, 4, 4));
        for (i, v) in img.iter_mut().enumerate() {
            *v = i as f64;
        }
        let out = shrink(&img, 4, Interpolation::Bilinear).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn compose_zero_prompt_shrink_pad() {
        let g = PromptGeometry::new(8, 4, 1, PromptMode::ShrinkPad).unwrap();
        let t = PromptTemplate::zeros(g).unwrap();
        let img = Array3::from_elem((1, 4, 4), 0.7);
        let out = t.compose(&img, Interpolation::Bilinear).unwrap();
        let center = t.center_block(&out);
        assert_eq!(center, img);
        // border all zeros
        let mut border_sum = 0.0;
        for ((c, y, x), v) in out.indexed_iter() {
            if !(2..6).contains(&y) || !(2..6).contains(&x) {
                border_sum += v.abs();
                let _ = c;
            }
        }
        assert_eq!(border_sum, 0.0);
    }

    #[test]
    fn compose_zero_prompt_overlay_is_identity() {
        let g = PromptGeometry::new(6, 6, 2, PromptMode::OverlayAdd).unwrap();
        let t = PromptTemplate::zeros(g).unwrap();
        let mut img = Array3::zeros((2, 6, 6));
        for (i, v) in img.iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let out = t.compose(&img, Interpolation::Bilinear).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn compose_ones_prompt_border_only() {
        // W = 1 everywhere, K=4, k=2, zero image: 12 border ones, 4 center zeros
        let g = PromptGeometry::new(4, 2, 1, PromptMode::ShrinkPad).unwrap();
        let mut t = PromptTemplate::zeros(g).unwrap();
        t.w.fill(1.0);
        let img = Array3::zeros((1, 2, 2));
        let out = t.compose(&img, Interpolation::Bilinear).unwrap();
        let ones = out.iter().filter(|&&v| v == 1.0).count();
        let zeros = out.iter().filter(|&&v| v == 0.0).count();
        assert_eq!((ones, zeros), (12, 4));
    }

    #[test]
    fn compose_rejects_channel_mismatch() {
        let g = PromptGeometry::new(8, 4, 3, PromptMode::ShrinkPad).unwrap();
        let t = PromptTemplate::zeros(g).unwrap();
        let img = Array3::zeros((1, 4, 4));
        assert!(t.compose(&img, Interpolation::Bilinear).is_err());
    }

    #[test]
    fn overlay_requires_inner_equals_outer() {
        assert!(PromptGeometry::new(8, 4, 3, PromptMode::OverlayAdd).is_err());
    }

    #[test]
    fn mask_idempotent() {
        let m = make_mask(16, 10, 3).unwrap();
        let twice = m.entries() * m.entries();
        assert_eq!(&twice, m.entries());
    }

    #[test]
    fn init_is_masked_and_deterministic() {
        let g = PromptGeometry::new(8, 4, 2, PromptMode::ShrinkPad).unwrap();
        let a = PromptTemplate::init(g, 0.02, 9).unwrap();
        let b = PromptTemplate::init(g, 0.02, 9).unwrap();
        assert_eq!(a.w, b.w);
        let center = a.center_block(&a.w);
        assert!(center.iter().all(|&v| v == 0.0));
        assert!(a.w.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn visualization_clips_to_unit_range() {
        let g = PromptGeometry::new(4, 2, 1, PromptMode::ShrinkPad).unwrap();
        let mut t = PromptTemplate::zeros(g).unwrap();
        t.w.fill(5.0);
        let v = visualization_pixels(&t, &[0.0], &[1.0]).unwrap();
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(v[[0, 0, 0]], 1.0);
    }
}

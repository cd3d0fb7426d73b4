//! Shared numeric plumbing: deterministic seeding, image resampling and
//! tensor hashing. Everything here is pure and allocation-friendly; the
//! training loop calls these per sample.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Channel-first image tensor: `[channels, height, width]`.
pub type Image = Array3<f64>;

/// Derives an independent stream seed from a base seed, a purpose tag and
/// optional extras (epoch, sample index, ...). Streams derived with different
/// tags never collide, which keeps e.g. data shuffling independent of
/// augmentation draws.
pub fn derive_seed(base: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn seeded_rng(base: u64, tag: &str, parts: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(base, tag, parts))
}

pub fn normal_vec(rng: &mut ChaCha12Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

pub fn normal_array1(rng: &mut ChaCha12Rng, n: usize, std: f64) -> Array1<f64> {
    Array1::from_vec(normal_vec(rng, n, std))
}

pub fn normal_array2(rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), normal_vec(rng, rows * cols, std)).unwrap()
}

pub fn normal_array3(rng: &mut ChaCha12Rng, shape: (usize, usize, usize), std: f64) -> Array3<f64> {
    Array3::from_shape_vec(shape, normal_vec(rng, shape.0 * shape.1 * shape.2, std)).unwrap()
}

/// How `resize` fills output pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Half-pixel-center bilinear (identity when sizes match).
    Bilinear,
    /// Exact box averaging over source coverage (identity when sizes match).
    Area,
}

/// Resizes one channel plane to `out_h x out_w`.
pub fn resize_plane(src: ArrayView2<f64>, out_h: usize, out_w: usize, interp: Interpolation) -> Array2<f64> {
    let (h, w) = src.dim();
    if h == out_h && w == out_w {
        return src.to_owned();
    }
    match interp {
        Interpolation::Bilinear => bilinear_plane(src, out_h, out_w),
        Interpolation::Area => area_plane(src, out_h, out_w),
    }
}

fn bilinear_plane(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        let y0c = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..out_w {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let x0c = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            let top = src[[y0c, x0c]] * (1.0 - tx) + src[[y0c, x1c]] * tx;
            let bot = src[[y1c, x0c]] * (1.0 - tx) + src[[y1c, x1c]] * tx;
            out[[oy, ox]] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Per-axis overlap weights for box resampling: for each output index, the
/// covered source indices and their fractional coverage (sums to 1).
fn axis_overlaps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut weights = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            for i in first..last {
                let cover = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if cover > 0.0 {
                    weights.push((i, cover / scale));
                }
            }
            weights
        })
        .collect()
}

fn area_plane(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let wy = axis_overlaps(h, out_h);
    let wx = axis_overlaps(w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut acc = 0.0;
            for &(iy, fy) in &wy[oy] {
                for &(ix, fx) in &wx[ox] {
                    acc += src[[iy, ix]] * fy * fx;
                }
            }
            out[[oy, ox]] = acc;
        }
    }
    out
}

/// Resizes a channel-first image to `side x side`.
pub fn resize_image(img: &Image, side: usize, interp: Interpolation) -> Result<Image> {
    let (c, h, w) = img.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidInput("cannot resize an empty image".into()));
    }
    if side == 0 {
        return Err(Error::InvalidInput("target size must be positive".into()));
    }
    if h == side && w == side {
        return Ok(img.clone());
    }
    let mut out = Array3::zeros((c, side, side));
    for ch in 0..c {
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resize_plane(img.index_axis(ndarray::Axis(0), ch), side, side, interp));
    }
    Ok(out)
}

/// Corner-aligned bilinear resample of a square grid of vectors, used for
/// positional-embedding tables. Rows of `src` are grid cells in row-major
/// order; corners map exactly onto corners.
pub fn resample_grid_vectors(src: &Array2<f64>, grid_in: usize, grid_out: usize) -> Array2<f64> {
    let dim = src.ncols();
    let mut out = Array2::zeros((grid_out * grid_out, dim));
    let coord = |o: usize| -> f64 {
        if grid_out == 1 {
            0.0
        } else {
            o as f64 * (grid_in as f64 - 1.0) / (grid_out as f64 - 1.0)
        }
    };
    for oy in 0..grid_out {
        let fy = coord(oy);
        let y0 = (fy.floor() as usize).min(grid_in - 1);
        let y1 = (y0 + 1).min(grid_in - 1);
        let ty = fy - y0 as f64;
        for ox in 0..grid_out {
            let fx = coord(ox);
            let x0 = (fx.floor() as usize).min(grid_in - 1);
            let x1 = (x0 + 1).min(grid_in - 1);
            let tx = fx - x0 as f64;
            for d in 0..dim {
                let v00 = src[[y0 * grid_in + x0, d]];
                let v01 = src[[y0 * grid_in + x1, d]];
                let v10 = src[[y1 * grid_in + x0, d]];
                let v11 = src[[y1 * grid_in + x1, d]];
                let top = v00 * (1.0 - tx) + v01 * tx;
                let bot = v10 * (1.0 - tx) + v11 * tx;
                out[[oy * grid_out + ox, d]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// SHA-256 over named tensors (name, shape, little-endian payload), in the
/// order given. Used for the backbone freeze checksum.
pub fn hash_named_tensors<'a, I>(items: I) -> String
where
    I: IntoIterator<Item = (&'a str, Vec<usize>, Vec<f64>)>,
{
    let mut h = Sha256::new();
    for (name, shape, data) in items {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((shape.len() as u64).to_le_bytes());
        for d in &shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &data {
            h.update(v.to_le_bytes());
        }
    }
    hex_string(&h.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

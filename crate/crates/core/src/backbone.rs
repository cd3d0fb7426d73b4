//! A small frozen vision transformer: patch embedding, positional embeddings,
//! CLS token, pre-LN encoder blocks, and a linear or fixed-class-embedding
//! cosine head.
//!
//! The backward pass is written by hand and produces gradients with respect
//! to *inputs only*: the composed image pixels and any inserted prompt
//! tokens. Backbone weights are sampled once at construction, checksummed,
//! and never modified.

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::util::{self, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Plain affine classifier head.
    Linear,
    /// Cosine similarity against fixed random unit class embeddings,
    /// scaled by `logit_scale`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct BackboneConfig {
    pub native_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub head: HeadKind,
    pub num_outputs: usize,
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            native_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            head: HeadKind::Cosine,
            num_outputs: 4,
            logit_scale: 100.0,
            seed: 7,
        }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.native_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.native_size == 0 || self.patch_size == 0 || self.native_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "native size {} must be a positive multiple of patch size {}",
                self.native_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed dim {} must be a positive multiple of head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.channels == 0 || self.num_outputs == 0 {
            return Err(Error::InvalidConfig("depth, channels and num_outputs must be positive".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        if self.head == HeadKind::Cosine && self.logit_scale <= 0.0 {
            return Err(Error::InvalidConfig("cosine head needs a positive logit scale".into()));
        }
        Ok(())
    }

    fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Token-level prompting variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenPromptMode {
    None,
    /// Learnable tokens between CLS and the patch embeddings, no positional
    /// embedding added to the prompts.
    Shallow,
    /// As shallow, but the positional embedding at `position_index` is added
    /// to every prompt token.
    Positional,
    /// Fresh learnable tokens replace the prompt slots at every layer input.
    Deep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TokenPromptConfig {
    pub mode: TokenPromptMode,
    pub num_prompts: usize,
    /// Index into the positional table (0 = CLS, 1.. = patch positions).
    pub position_index: usize,
    pub init_std: f64,
}

impl Default for TokenPromptConfig {
    fn default() -> Self {
        TokenPromptConfig { mode: TokenPromptMode::None, num_prompts: 0, position_index: 1, init_std: 0.02 }
    }
}

/// Learnable token-prompt state. `tokens` holds one matrix for shallow
/// variants and one per layer for deep mode; zero rows when prompting is off.
#[derive(Debug, Clone)]
pub struct TokenPrompts {
    pub mode: TokenPromptMode,
    pub position_index: usize,
    pub tokens: Vec<Array2<f64>>,
}

impl TokenPrompts {
    pub fn none() -> Self {
        TokenPrompts { mode: TokenPromptMode::None, position_index: 0, tokens: Vec::new() }
    }

    pub fn init(cfg: &TokenPromptConfig, embed_dim: usize, depth: usize, seed: u64) -> Self {
        if cfg.mode == TokenPromptMode::None || cfg.num_prompts == 0 {
            return TokenPrompts { mode: cfg.mode, position_index: cfg.position_index, tokens: Vec::new() };
        }
        let mut rng = util::seeded_rng(seed, "token_prompt_init", &[]);
        let slots = if cfg.mode == TokenPromptMode::Deep { depth } else { 1 };
        let tokens = (0..slots)
            .map(|_| util::normal_array2(&mut rng, cfg.num_prompts, embed_dim, cfg.init_std))
            .collect();
        TokenPrompts { mode: cfg.mode, position_index: cfg.position_index, tokens }
    }

    pub fn num_prompts(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.nrows())
    }

    pub fn parameter_count(&self) -> usize {
        self.tokens.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// How positional embeddings are laid out over the input grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeLayout {
    /// Input grid equals the native grid; use the table as-is.
    Native,
    /// Larger input grid; bilinearly resample the spatial table.
    Interpolated,
    /// Larger input grid; original PEs on the central native block, zero on
    /// the surrounding prompt patches.
    CenterOnly,
}

struct Block {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    bq: Array1<f64>,
    wk: Array2<f64>,
    bk: Array1<f64>,
    wv: Array2<f64>,
    bv: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

enum Head {
    Linear { w: Array2<f64>, b: Array1<f64> },
    Cosine { class_emb: Array2<f64>, logit_scale: f64 },
}

pub struct FrozenBackbone {
    pub cfg: BackboneConfig,
    w_patch: Array2<f64>,
    b_patch: Array1<f64>,
    cls: Array1<f64>,
    pos: Array2<f64>,
    blocks: Vec<Block>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    head: Head,
    freeze_checksum: String,
}

fn xavier(rng: &mut rand_chacha::ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    util::normal_array2(rng, rows, cols, std)
}

impl FrozenBackbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = util::seeded_rng(cfg.seed, "backbone", &[]);
        let d = cfg.embed_dim;
        let grid = cfg.grid();
        let pdim = cfg.patch_size * cfg.patch_size * cfg.channels;
        let hidden = cfg.mlp_hidden();

        let w_patch = xavier(&mut rng, pdim, d);
        let b_patch = Array1::zeros(d);
        let cls = util::normal_array1(&mut rng, d, 0.02);
        let pos = util::normal_array2(&mut rng, 1 + grid * grid, d, 0.02);
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: xavier(&mut rng, d, d),
                bq: Array1::zeros(d),
                wk: xavier(&mut rng, d, d),
                bk: Array1::zeros(d),
                wv: xavier(&mut rng, d, d),
                bv: Array1::zeros(d),
                wo: xavier(&mut rng, d, d),
                bo: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: xavier(&mut rng, d, hidden),
                b1: Array1::zeros(hidden),
                w2: xavier(&mut rng, hidden, d),
                b2: Array1::zeros(d),
            })
            .collect();
        let head = match cfg.head {
            HeadKind::Linear => Head::Linear { w: xavier(&mut rng, d, cfg.num_outputs), b: Array1::zeros(cfg.num_outputs) },
            HeadKind::Cosine => {
                let mut e = util::normal_array2(&mut rng, cfg.num_outputs, d, 1.0);
                for mut row in e.axis_iter_mut(Axis(0)) {
                    let norm = row.dot(&row).sqrt();
                    row.mapv_inplace(|v| v / norm);
                }
                Head::Cosine { class_emb: e, logit_scale: cfg.logit_scale }
            }
        };
        let mut b = FrozenBackbone {
            cfg,
            w_patch,
            b_patch,
            cls,
            pos,
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            head,
            freeze_checksum: String::new(),
        };
        b.freeze_checksum = b.checksum();
        Ok(b)
    }

    /// Iterates all weight tensors as (name, shape, data), in a fixed order.
    /// This drives the freeze checksum and checkpoint serialization.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        fn a1(v: &Array1<f64>) -> (Vec<usize>, Vec<f64>) {
            (vec![v.len()], v.to_vec())
        }
        fn a2(v: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
            (vec![v.nrows(), v.ncols()], v.iter().cloned().collect())
        }
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let push1 = |out: &mut Vec<_>, name: String, v: &Array1<f64>| {
            let (s, d) = a1(v);
            out.push((name, s, d));
        };
        let push2 = |out: &mut Vec<_>, name: String, v: &Array2<f64>| {
            let (s, d) = a2(v);
            out.push((name, s, d));
        };
        push2(&mut out, "patch.w".into(), &self.w_patch);
        push1(&mut out, "patch.b".into(), &self.b_patch);
        push1(&mut out, "cls".into(), &self.cls);
        push2(&mut out, "pos".into(), &self.pos);
        for (l, blk) in self.blocks.iter().enumerate() {
            push1(&mut out, format!("block{l}.ln1.g"), &blk.ln1_g);
            push1(&mut out, format!("block{l}.ln1.b"), &blk.ln1_b);
            push2(&mut out, format!("block{l}.wq"), &blk.wq);
            push1(&mut out, format!("block{l}.bq"), &blk.bq);
            push2(&mut out, format!("block{l}.wk"), &blk.wk);
            push1(&mut out, format!("block{l}.bk"), &blk.bk);
            push2(&mut out, format!("block{l}.wv"), &blk.wv);
            push1(&mut out, format!("block{l}.bv"), &blk.bv);
            push2(&mut out, format!("block{l}.wo"), &blk.wo);
            push1(&mut out, format!("block{l}.bo"), &blk.bo);
            push1(&mut out, format!("block{l}.ln2.g"), &blk.ln2_g);
            push1(&mut out, format!("block{l}.ln2.b"), &blk.ln2_b);
            push2(&mut out, format!("block{l}.w1"), &blk.w1);
            push1(&mut out, format!("block{l}.b1"), &blk.b1);
            push2(&mut out, format!("block{l}.w2"), &blk.w2);
            push1(&mut out, format!("block{l}.b2"), &blk.b2);
        }
        push1(&mut out, "lnf.g".into(), &self.lnf_g);
        push1(&mut out, "lnf.b".into(), &self.lnf_b);
        match &self.head {
            Head::Linear { w, b } => {
                push2(&mut out, "head.w".into(), w);
                push1(&mut out, "head.b".into(), b);
            }
            Head::Cosine { class_emb, logit_scale } => {
                push2(&mut out, "head.class_emb".into(), class_emb);
                out.push(("head.logit_scale".into(), vec![1], vec![*logit_scale]));
            }
        }
        out
    }

    /// Content checksum over all weights; equal before and after training by
    /// the freeze contract.
    pub fn checksum(&self) -> String {
        util::hash_named_tensors(
            self.named_tensors()
                .iter()
                .map(|(n, s, d)| (n.as_str(), s.clone(), d.clone()))
                .collect::<Vec<_>>(),
        )
    }

    pub fn freeze_checksum(&self) -> &str {
        &self.freeze_checksum
    }

    /// Rebuilds a backbone from stored tensors (checkpoint load). The tensors
    /// must match the shapes implied by `cfg` exactly.
    pub fn from_tensors(cfg: BackboneConfig, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut fresh = FrozenBackbone::new(cfg)?;
        let mut map: std::collections::BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> = Default::default();
        for (n, s, d) in tensors {
            map.insert(n.as_str(), (s, d));
        }
        let take1 = |map: &std::collections::BTreeMap<&str, (&Vec<usize>, &Vec<f64>)>, name: &str, len: usize| -> Result<Array1<f64>> {
            let (shape, data) = map
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if **shape != vec![len] {
                return Err(Error::ShapeMismatch(format!("tensor {name} has shape {shape:?}, expected [{len}]")));
            }
            Ok(Array1::from_vec((*data).clone()))
        };
        let take2 = |map: &std::collections::BTreeMap<&str, (&Vec<usize>, &Vec<f64>)>, name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let (shape, data) = map
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if **shape != vec![rows, cols] {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name} has shape {shape:?}, expected [{rows}, {cols}]"
                )));
            }
            Array2::from_shape_vec((rows, cols), (*data).clone())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))
        };

        let d = fresh.cfg.embed_dim;
        let grid = fresh.cfg.grid();
        let pdim = fresh.cfg.patch_size * fresh.cfg.patch_size * fresh.cfg.channels;
        let hidden = fresh.cfg.mlp_hidden();
        fresh.w_patch = take2(&map, "patch.w", pdim, d)?;
        fresh.b_patch = take1(&map, "patch.b", d)?;
        fresh.cls = take1(&map, "cls", d)?;
        fresh.pos = take2(&map, "pos", 1 + grid * grid, d)?;
        for l in 0..fresh.cfg.depth {
            let blk = &mut fresh.blocks[l];
            blk.ln1_g = take1(&map, &format!("block{l}.ln1.g"), d)?;
            blk.ln1_b = take1(&map, &format!("block{l}.ln1.b"), d)?;
            blk.wq = take2(&map, &format!("block{l}.wq"), d, d)?;
            blk.bq = take1(&map, &format!("block{l}.bq"), d)?;
            blk.wk = take2(&map, &format!("block{l}.wk"), d, d)?;
            blk.bk = take1(&map, &format!("block{l}.bk"), d)?;
            blk.wv = take2(&map, &format!("block{l}.wv"), d, d)?;
            blk.bv = take1(&map, &format!("block{l}.bv"), d)?;
            blk.wo = take2(&map, &format!("block{l}.wo"), d, d)?;
            blk.bo = take1(&map, &format!("block{l}.bo"), d)?;
            blk.ln2_g = take1(&map, &format!("block{l}.ln2.g"), d)?;
            blk.ln2_b = take1(&map, &format!("block{l}.ln2.b"), d)?;
            blk.w1 = take2(&map, &format!("block{l}.w1"), d, hidden)?;
            blk.b1 = take1(&map, &format!("block{l}.b1"), hidden)?;
            blk.w2 = take2(&map, &format!("block{l}.w2"), hidden, d)?;
            blk.b2 = take1(&map, &format!("block{l}.b2"), d)?;
        }
        fresh.lnf_g = take1(&map, "lnf.g", d)?;
        fresh.lnf_b = take1(&map, "lnf.b", d)?;
        fresh.head = match fresh.cfg.head {
            HeadKind::Linear => Head::Linear {
                w: take2(&map, "head.w", d, fresh.cfg.num_outputs)?,
                b: take1(&map, "head.b", fresh.cfg.num_outputs)?,
            },
            HeadKind::Cosine => {
                let scale = take1(&map, "head.logit_scale", 1)?[0];
                Head::Cosine { class_emb: take2(&map, "head.class_emb", fresh.cfg.num_outputs, d)?, logit_scale: scale }
            }
        };
        fresh.freeze_checksum = fresh.checksum();
        Ok(fresh)
    }

    // ---- forward -----------------------------------------------------

    /// Splits a channel-first image into flattened patch rows in row-major
    /// patch order; feature order within a patch is (py, px, channel).
    pub fn patchify(&self, image: &Image) -> Result<Array2<f64>> {
        let (c, h, w) = image.dim();
        if c != self.cfg.channels {
            return Err(Error::ShapeMismatch(format!(
                "image has {c} channels, backbone expects {}",
                self.cfg.channels
            )));
        }
        if h != w {
            return Err(Error::ShapeMismatch(format!("image must be square, got {h}x{w}")));
        }
        let p = self.cfg.patch_size;
        if h % p != 0 {
            return Err(Error::ShapeMismatch(format!("image side {h} not divisible by patch size {p}")));
        }
        let grid = h / p;
        let pdim = p * p * c;
        let mut rows = Array2::zeros((grid * grid, pdim));
        for gy in 0..grid {
            for gx in 0..grid {
                let r = gy * grid + gx;
                let mut f = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            rows[[r, f]] = image[[ch, gy * p + py, gx * p + px]];
                            f += 1;
                        }
                    }
                }
            }
        }
        Ok(rows)
    }

    fn unpatchify_grad(&self, d_rows: &Array2<f64>, grid: usize) -> Image {
        let p = self.cfg.patch_size;
        let c = self.cfg.channels;
        let side = grid * p;
        let mut img = Image::zeros((c, side, side));
        for gy in 0..grid {
            for gx in 0..grid {
                let r = gy * grid + gx;
                let mut f = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            img[[ch, gy * p + py, gx * p + px]] = d_rows[[r, f]];
                            f += 1;
                        }
                    }
                }
            }
        }
        img
    }

    /// Linear patch embedding: one row per patch.
    pub fn patch_embed(&self, image: &Image) -> Result<Array2<f64>> {
        let rows = self.patchify(image)?;
        Ok(nn::linear(rows.view(), &self.w_patch, &self.b_patch))
    }

    /// Positional table for a given input grid under the requested layout.
    pub fn positional_table(&self, grid_in: usize, layout: PeLayout) -> Result<Array2<f64>> {
        let g = self.cfg.grid();
        let d = self.cfg.embed_dim;
        match layout {
            PeLayout::Native => {
                if grid_in != g {
                    return Err(Error::ShapeMismatch(format!(
                        "native layout expects grid {g}, got {grid_in}"
                    )));
                }
                Ok(self.pos.clone())
            }
            PeLayout::Interpolated => {
                if grid_in < g {
                    return Err(Error::ShapeMismatch(format!(
                        "cannot interpolate positional table down ({g} -> {grid_in})"
                    )));
                }
                Ok(interpolate_positional_embeddings(&self.pos, grid_in)?)
            }
            PeLayout::CenterOnly => {
                if grid_in < g || (grid_in - g) % 2 != 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "center-only layout needs grid_in >= {g} with even margin, got {grid_in}"
                    )));
                }
                let off = (grid_in - g) / 2;
                let mut table = Array2::zeros((1 + grid_in * grid_in, d));
                table.row_mut(0).assign(&self.pos.row(0));
                for y in 0..g {
                    for x in 0..g {
                        let src = 1 + y * g + x;
                        let dst = 1 + (off + y) * grid_in + (off + x);
                        table.row_mut(dst).assign(&self.pos.row(src));
                    }
                }
                Ok(table)
            }
        }
    }

    /// Assembles `[CLS, P?, E]` with positional embeddings applied according
    /// to the token-prompt mode. `layer0_tokens` selects the prompt matrix
    /// spliced at the input (deep mode uses its layer-0 slot here).
    pub fn build_input_sequence(
        &self,
        tok_embed: &Array2<f64>,
        prompts: &TokenPrompts,
        pe: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let d = self.cfg.embed_dim;
        let n_patches = tok_embed.nrows();
        if pe.nrows() != 1 + n_patches {
            return Err(Error::ShapeMismatch(format!(
                "positional table has {} rows, expected {}",
                pe.nrows(),
                1 + n_patches
            )));
        }
        let p = prompts.num_prompts();
        if prompts.mode == TokenPromptMode::Positional && p > 0 && prompts.position_index >= pe.nrows() {
            return Err(Error::InvalidConfig(format!(
                "position index {} outside positional table of {} rows",
                prompts.position_index,
                pe.nrows()
            )));
        }
        let mut x = Array2::zeros((1 + p + n_patches, d));
        {
            let mut row = x.row_mut(0);
            row.assign(&self.cls);
            row += &pe.row(0);
        }
        if p > 0 {
            let tokens = &prompts.tokens[0];
            for i in 0..p {
                let mut row = x.row_mut(1 + i);
                row.assign(&tokens.row(i));
                if prompts.mode == TokenPromptMode::Positional {
                    row += &pe.row(prompts.position_index);
                }
            }
        }
        for i in 0..n_patches {
            let mut row = x.row_mut(1 + p + i);
            row.assign(&tok_embed.row(i));
            row += &pe.row(1 + i);
        }
        Ok(x)
    }

    fn attention(&self, blk: &Block, y1: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let n = y1.nrows();
        let d = self.cfg.embed_dim;
        let nh = self.cfg.heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = nn::linear(y1.view(), &blk.wq, &blk.bq);
        let k = nn::linear(y1.view(), &blk.wk, &blk.bk);
        let v = nn::linear(y1.view(), &blk.wv, &blk.bv);
        let mut o_cat = Array2::zeros((n, d));
        let mut s_heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let sl = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(sl);
            let kh = k.slice(sl);
            let vh = v.slice(sl);
            let z = qh.dot(&kh.t()) * scale;
            let sm = nn::softmax_rows(z.view());
            let oh = sm.dot(&vh);
            o_cat.slice_mut(sl).assign(&oh);
            s_heads.push(sm);
        }
        let out = nn::linear(o_cat.view(), &blk.wo, &blk.bo);
        (out, AttnCache { q, k, v, s_heads })
    }

    fn attention_bwd(&self, blk: &Block, cache: &AttnCache, d_out: &Array2<f64>) -> Array2<f64> {
        let n = d_out.nrows();
        let d = self.cfg.embed_dim;
        let nh = self.cfg.heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let d_ocat = nn::linear_bwd_input(d_out.view(), &blk.wo);
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..nh {
            let sl = s![.., h * dh..(h + 1) * dh];
            let qh = cache.q.slice(sl);
            let kh = cache.k.slice(sl);
            let vh = cache.v.slice(sl);
            let sm = &cache.s_heads[h];
            let d_oh = d_ocat.slice(sl);
            let d_s = d_oh.dot(&vh.t());
            let d_vh = sm.t().dot(&d_oh);
            let d_z = nn::softmax_rows_bwd(sm.view(), d_s.view());
            let d_qh = d_z.dot(&kh) * scale;
            let d_kh = d_z.t().dot(&qh) * scale;
            dq.slice_mut(sl).assign(&d_qh);
            dk.slice_mut(sl).assign(&d_kh);
            dv.slice_mut(sl).assign(&d_vh);
        }
        let mut dy1 = nn::linear_bwd_input(dq.view(), &blk.wq);
        dy1 += &nn::linear_bwd_input(dk.view(), &blk.wk);
        dy1 += &nn::linear_bwd_input(dv.view(), &blk.wv);
        dy1
    }

    /// Full forward pass returning logits and the cache needed for backward.
    pub fn forward_cached(
        &self,
        image: &Image,
        prompts: &TokenPrompts,
        layout: PeLayout,
    ) -> Result<(Array1<f64>, ForwardCache)> {
        let rows = self.patchify(image)?;
        let grid = (rows.nrows() as f64).sqrt() as usize;
        let tok_embed = nn::linear(rows.view(), &self.w_patch, &self.b_patch);
        let pe = self.positional_table(grid, layout)?;
        let mut x = self.build_input_sequence(&tok_embed, prompts, &pe)?;
        let p = prompts.num_prompts();

        let mut layers = Vec::with_capacity(self.cfg.depth);
        for (l, blk) in self.blocks.iter().enumerate() {
            if prompts.mode == TokenPromptMode::Deep && l > 0 && p > 0 {
                x.slice_mut(s![1..1 + p, ..]).assign(&prompts.tokens[l]);
            }
            let (y1, ln1) = nn::layer_norm(x.view(), &blk.ln1_g, &blk.ln1_b);
            let (attn, attn_cache) = self.attention(blk, &y1);
            let x2 = &x + &attn;
            let (y2, ln2) = nn::layer_norm(x2.view(), &blk.ln2_g, &blk.ln2_b);
            let hpre = nn::linear(y2.view(), &blk.w1, &blk.b1);
            let hact = nn::gelu(hpre.view());
            let mlp = nn::linear(hact.view(), &blk.w2, &blk.b2);
            let x3 = &x2 + &mlp;
            layers.push(LayerCache { ln1, attn: attn_cache, ln2, hpre });
            x = x3;
        }

        let cls_row = x.row(0).insert_axis(Axis(0)).to_owned();
        let (f2, lnf) = nn::layer_norm(cls_row.view(), &self.lnf_g, &self.lnf_b);
        let feature = f2.row(0).to_owned();

        let (logits, cos_cache) = match &self.head {
            Head::Linear { w, b } => {
                let mut l = feature.dot(w);
                l += b;
                (l, None)
            }
            Head::Cosine { class_emb, logit_scale } => {
                let norm = feature.dot(&feature).sqrt().max(1e-12);
                let fhat = feature.mapv(|v| v / norm);
                (class_emb.dot(&fhat) * *logit_scale, Some((fhat, norm)))
            }
        };
        let cache = ForwardCache { grid, num_prompts: p, layers, lnf, cos_cache };
        Ok((logits, cache))
    }

    /// Logits only.
    pub fn forward(&self, image: &Image, prompts: &TokenPrompts, layout: PeLayout) -> Result<Array1<f64>> {
        Ok(self.forward_cached(image, prompts, layout)?.0)
    }

    /// Applies just the classifier head to a feature vector.
    pub fn head_logits(&self, feature: &Array1<f64>) -> Array1<f64> {
        match &self.head {
            Head::Linear { w, b } => {
                let mut l = feature.dot(w);
                l += b;
                l
            }
            Head::Cosine { class_emb, logit_scale } => {
                let norm = feature.dot(feature).sqrt().max(1e-12);
                let fhat = feature.mapv(|v| v / norm);
                class_emb.dot(&fhat) * *logit_scale
            }
        }
    }

    /// Post-LN CLS feature (used by the linear-probe reference and the
    /// label-mapping stage feeds logits instead).
    pub fn features(&self, image: &Image, prompts: &TokenPrompts, layout: PeLayout) -> Result<Array1<f64>> {
        let rows = self.patchify(image)?;
        let grid = (rows.nrows() as f64).sqrt() as usize;
        let tok_embed = nn::linear(rows.view(), &self.w_patch, &self.b_patch);
        let pe = self.positional_table(grid, layout)?;
        let mut x = self.build_input_sequence(&tok_embed, prompts, &pe)?;
        let p = prompts.num_prompts();
        for (l, blk) in self.blocks.iter().enumerate() {
            if prompts.mode == TokenPromptMode::Deep && l > 0 && p > 0 {
                x.slice_mut(s![1..1 + p, ..]).assign(&prompts.tokens[l]);
            }
            let (y1, _) = nn::layer_norm(x.view(), &blk.ln1_g, &blk.ln1_b);
            let (attn, _) = self.attention(blk, &y1);
            let x2 = &x + &attn;
            let (y2, _) = nn::layer_norm(x2.view(), &blk.ln2_g, &blk.ln2_b);
            let hpre = nn::linear(y2.view(), &blk.w1, &blk.b1);
            let hact = nn::gelu(hpre.view());
            x = &x2 + &nn::linear(hact.view(), &blk.w2, &blk.b2);
        }
        let cls_row = x.row(0).insert_axis(Axis(0)).to_owned();
        let (f2, _) = nn::layer_norm(cls_row.view(), &self.lnf_g, &self.lnf_b);
        Ok(f2.row(0).to_owned())
    }

    /// Backpropagates `d_logits` to the composed image pixels and the prompt
    /// tokens. Deep-mode prompt slots cut the flow to earlier layers at their
    /// replacement points, mirroring the forward overwrite.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Array1<f64>,
        prompts: &TokenPrompts,
    ) -> (Image, Vec<Array2<f64>>) {
        let d = self.cfg.embed_dim;
        let p = cache.num_prompts;
        let n = 1 + p + cache.grid * cache.grid;

        let d_feature = match &self.head {
            Head::Linear { w, .. } => w.dot(d_logits),
            Head::Cosine { class_emb, logit_scale } => {
                let (fhat, norm) = cache.cos_cache.as_ref().expect("cosine cache");
                let d_fhat = class_emb.t().dot(d_logits) * *logit_scale;
                let proj = fhat.dot(&d_fhat);
                (0..d).map(|j| (d_fhat[j] - fhat[j] * proj) / norm).collect::<Array1<f64>>()
            }
        };
        let d_cls = nn::layer_norm_bwd_input(
            d_feature.view().insert_axis(Axis(0)),
            &self.lnf_g,
            &cache.lnf,
        );

        let mut dx = Array2::zeros((n, d));
        dx.row_mut(0).assign(&d_cls.row(0));

        let mut d_tokens: Vec<Array2<f64>> = prompts
            .tokens
            .iter()
            .map(|t| Array2::zeros(t.dim()))
            .collect();

        for (l, blk) in self.blocks.iter().enumerate().rev() {
            let lc = &cache.layers[l];
            // x3 = x2 + mlp(ln2(x2))
            let d_hact = nn::linear_bwd_input(dx.view(), &blk.w2);
            let d_hpre = nn::gelu_bwd(d_hact.view(), lc.hpre.view());
            let d_y2 = nn::linear_bwd_input(d_hpre.view(), &blk.w1);
            let mut d_x2 = nn::layer_norm_bwd_input(d_y2.view(), &blk.ln2_g, &lc.ln2);
            d_x2 += &dx;
            // x2 = x + attn(ln1(x))
            let d_y1 = self.attention_bwd(blk, &lc.attn, &d_x2);
            let mut d_xin = nn::layer_norm_bwd_input(d_y1.view(), &blk.ln1_g, &lc.ln1);
            d_xin += &d_x2;
            dx = d_xin;
            // deep-mode replacement: prompt rows came from tokens[l], not from
            // the previous layer's output
            if prompts.mode == TokenPromptMode::Deep && l > 0 && p > 0 {
                d_tokens[l].assign(&dx.slice(s![1..1 + p, ..]));
                dx.slice_mut(s![1..1 + p, ..]).fill(0.0);
            }
        }

        if p > 0 {
            d_tokens[0].assign(&dx.slice(s![1..1 + p, ..]));
        }
        let d_embed = dx.slice(s![1 + p.., ..]).to_owned();
        let d_rows = nn::linear_bwd_input(d_embed.view(), &self.w_patch);
        let d_image = self.unpatchify_grad(&d_rows, cache.grid);
        (d_image, d_tokens)
    }

    /// Loss and input-pixel gradient for one composed image. Also returns
    /// per-slot token-prompt gradients when prompting is active.
    pub fn input_gradient(
        &self,
        image: &Image,
        prompts: &TokenPrompts,
        layout: PeLayout,
        target: &Target,
    ) -> Result<(f64, Image, Vec<Array2<f64>>)> {
        let (logits, cache) = self.forward_cached(image, prompts, layout)?;
        let (loss, d_logits) = nll_and_grad(&logits, target)?;
        let (d_image, d_tokens) = self.backward(&cache, &d_logits, prompts);
        Ok((loss, d_image, d_tokens))
    }
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    s_heads: Vec<Array2<f64>>,
}

struct LayerCache {
    ln1: nn::LayerNormCache,
    attn: AttnCache,
    ln2: nn::LayerNormCache,
    hpre: Array2<f64>,
}

pub struct ForwardCache {
    grid: usize,
    num_prompts: usize,
    layers: Vec<LayerCache>,
    lnf: nn::LayerNormCache,
    cos_cache: Option<(Array1<f64>, f64)>,
}

/// Classification target: a hard label, or a cutmix-weighted label pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Hard(usize),
    Mixed { a: usize, b: usize, lambda: f64 },
}

impl Target {
    fn weights(&self, num_classes: usize) -> Result<Vec<(usize, f64)>> {
        let check = |c: usize| {
            if c >= num_classes {
                Err(Error::InvalidInput(format!("label {c} outside {num_classes} classes")))
            } else {
                Ok(())
            }
        };
        match *self {
            Target::Hard(c) => {
                check(c)?;
                Ok(vec![(c, 1.0)])
            }
            Target::Mixed { a, b, lambda } => {
                check(a)?;
                check(b)?;
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(Error::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
                }
                Ok(vec![(a, lambda), (b, 1.0 - lambda)])
            }
        }
    }
}

/// Negative log-likelihood of the target under softmax(logits), and its
/// gradient (p - y) with respect to the logits.
pub fn nll_and_grad(logits: &Array1<f64>, target: &Target) -> Result<(f64, Array1<f64>)> {
    let weights = target.weights(logits.len())?;
    let logp = nn::log_softmax(logits);
    let loss: f64 = weights.iter().map(|&(c, w)| -w * logp[c]).sum();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss}; max logit {:?}",
            logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        )));
    }
    let mut d = logp.mapv(f64::exp);
    for &(c, w) in &weights {
        d[c] -= w;
    }
    Ok((loss, d))
}

/// Resamples a positional table to a new (larger) square grid. Row 0 (CLS)
/// passes through unchanged; spatial rows are corner-aligned bilinear.
pub fn interpolate_positional_embeddings(pe: &Array2<f64>, new_grid: usize) -> Result<Array2<f64>> {
    let rows = pe.nrows();
    if rows < 2 {
        return Err(Error::ShapeMismatch("positional table needs a CLS row and a spatial grid".into()));
    }
    let spatial = rows - 1;
    let grid = (spatial as f64).sqrt().round() as usize;
    if grid * grid != spatial {
        return Err(Error::ShapeMismatch(format!("{spatial} spatial rows do not form a square grid")));
    }
    if new_grid < grid {
        return Err(Error::ShapeMismatch(format!("new grid {new_grid} smaller than original {grid}")));
    }
    if new_grid == grid {
        return Ok(pe.clone());
    }
    let d = pe.ncols();
    let spatial_rows = pe.slice(s![1.., ..]).to_owned();
    let resampled = util::resample_grid_vectors(&spatial_rows, grid, new_grid);
    let mut out = Array2::zeros((1 + new_grid * new_grid, d));
    out.row_mut(0).assign(&pe.row(0));
    out.slice_mut(s![1.., ..]).assign(&resampled);
    Ok(out)
}

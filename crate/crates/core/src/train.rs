//! Training and evaluation loops, metrics records and checkpointing.
//!
//! Determinism contract: (config, seed) fully determines the bytes of
//! `metrics.txt` and both checkpoints. Wall-clock timings go to a separate
//! `timing.txt` that is excluded from that contract.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{nll_and_grad, FrozenBackbone, PeLayout, Target, TokenPrompts};
use crate::config::{Method, RunConfig};
use crate::container::Container;
use crate::data::{corrupt, CorruptionSpec, Dataset};
use crate::diversity::{apply_policy, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::geometry::PromptTemplate;
use crate::label_mapping::{argmax, arbitrary_mapping, build_mapping, mapping_to_string, remap_logits, scatter_logit_grad, LabelMapping};
use crate::optimizer::{self, UpdateRule};
use crate::util::{self, Image, Interpolation};
use crate::config::MappingMode;

pub const METRICS_FILE: &str = "metrics.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const MAPPING_FILE: &str = "mapping.txt";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Eval => write!(f, "eval"),
        }
    }
}

/// One measured point. Wall time is carried alongside but never enters the
/// canonical metrics bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub prompt_params: usize,
    pub wall_ms: u128,
}

impl MetricsRecord {
    fn canonical_line(&self) -> String {
        format!(
            "epoch={} split={} loss={} top1={} prompt_params={}\n",
            self.epoch, self.split, self.loss, self.top1, self.prompt_params
        )
    }
}

/// Renders the deterministic metrics file: one record per line in field
/// order epoch, split, loss, top1, prompt_params; then a summary block.
pub fn render_metrics(records: &[MetricsRecord]) -> String {
    let mut s = String::from("# pixelprompt metrics v1\n# fields: epoch split loss top1 prompt_params\n");
    for r in records {
        s.push_str(&r.canonical_line());
    }
    s.push_str("# summary\n");
    let last_train = records.iter().rev().find(|r| r.split == Split::Train);
    if let Some(r) = last_train {
        s.push_str(&format!("final_train_loss={}\n", r.loss));
    }
    let best = records
        .iter()
        .filter(|r| r.split == Split::Eval)
        .max_by(|a, b| a.top1.partial_cmp(&b.top1).unwrap().then(b.epoch.cmp(&a.epoch)));
    if let Some(r) = best {
        s.push_str(&format!("best_epoch={}\nbest_eval_top1={}\n", r.epoch, r.top1));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub prompt: PromptTemplate,
    pub tokens: TokenPrompts,
    pub mapping: Option<LabelMapping>,
    pub probe: Option<ProbeHead>,
    pub freeze_checksum: String,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
    pub n: usize,
}

fn downstream_logits(
    backbone: &FrozenBackbone,
    composed: &Image,
    tokens: &TokenPrompts,
    layout: PeLayout,
    mapping: Option<&LabelMapping>,
) -> Result<Array1<f64>> {
    let logits = backbone.forward(composed, tokens, layout)?;
    match mapping {
        Some(m) => remap_logits(&logits, m),
        None => Ok(logits),
    }
}

/// Loss, input gradient and token gradients for one composed sample, with
/// the optional label mapping folded into the logit path.
#[allow(clippy::type_complexity)]
fn grad_sample(
    backbone: &FrozenBackbone,
    composed: &Image,
    tokens: &TokenPrompts,
    layout: PeLayout,
    target: &Target,
    mapping: Option<&LabelMapping>,
) -> Result<(f64, Image, Vec<Array2<f64>>, usize)> {
    let (logits, cache) = backbone.forward_cached(composed, tokens, layout)?;
    let (loss, d_logits, pred) = match mapping {
        None => {
            let (loss, d) = nll_and_grad(&logits, target)?;
            let pred = argmax(&logits);
            (loss, d, pred)
        }
        Some(m) => {
            let down = remap_logits(&logits, m)?;
            let (loss, d_down) = nll_and_grad(&down, target)?;
            let pred = argmax(&down);
            (loss, scatter_logit_grad(&d_down, m, logits.len()), pred)
        }
    };
    let (d_image, d_tokens) = backbone.backward(&cache, &d_logits, tokens);
    Ok((loss, d_image, d_tokens, pred))
}

/// Identity-pipeline evaluation: optional corruption, then shrink/compose,
/// then the frozen forward pass.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    backbone: &FrozenBackbone,
    prompt: &PromptTemplate,
    tokens: &TokenPrompts,
    mapping: Option<&LabelMapping>,
    dataset: &Dataset,
    corruption: Option<CorruptionSpec>,
    layout: PeLayout,
    interp: Interpolation,
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (i, (img, &label)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
        let img = match corruption {
            Some(c) => corrupt(img, c.kind, c.severity, util::derive_seed(c.seed, "corrupt", &[i as u64]))?,
            None => img.clone(),
        };
        let composed = prompt.compose(&img, interp)?;
        let logits = downstream_logits(backbone, &composed, tokens, layout, mapping)?;
        let (loss, _) = nll_and_grad(&logits, &Target::Hard(label))?;
        loss_sum += loss;
        if argmax(&logits) == label {
            correct += 1;
        }
    }
    let n = dataset.len();
    Ok(EvalResult { loss: loss_sum / n as f64, top1: correct as f64 / n as f64, n })
}

/// Pre-shrinks a native image for the training pipeline when the geometry
/// calls for it; augmentation then acts on the shrunk image and composition
/// pastes it unchanged.
fn training_view(img: &Image, prompt: &PromptTemplate, interp: Interpolation) -> Result<Image> {
    let k = prompt.geometry.inner_size;
    let (_, h, _) = img.dim();
    if h == k {
        Ok(img.clone())
    } else {
        crate::geometry::shrink(img, k, interp)
    }
}

struct EpochStats {
    loss: f64,
    top1: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_training_epoch(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    prompt: &mut PromptTemplate,
    tokens: &mut TokenPrompts,
    mapping: Option<&LabelMapping>,
    train: &Dataset,
    policy: &AugmentationPolicy,
    rule: &UpdateRule,
    epoch: usize,
    global_step: &mut usize,
    total_steps: usize,
) -> Result<EpochStats> {
    let layout = cfg.pe_layout();
    let interp = cfg.geometry.interpolation;
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = util::seeded_rng(cfg.seed, "shuffle", &[epoch as u64]);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;

    for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<(Image, usize)> = chunk
            .iter()
            .map(|&i| Ok((training_view(&train.images[i], prompt, interp)?, train.labels[i])))
            .collect::<Result<_>>()?;
        let aug_seed = util::derive_seed(cfg.seed, "augment_batch", &[epoch as u64, batch_idx as u64]);
        let augmented = apply_policy(&batch, policy, aug_seed)?;

        let mut grad_sum: Option<Image> = None;
        let mut token_grad_sum: Vec<Array2<f64>> = tokens.tokens.iter().map(|t| Array2::zeros(t.dim())).collect();
        for ex in &augmented {
            let composed = prompt.compose(&ex.image, interp)?;
            let target = if ex.weight_a == 1.0 {
                Target::Hard(ex.label_a)
            } else {
                Target::Mixed { a: ex.label_a, b: ex.label_b, lambda: ex.weight_a }
            };
            let (loss, d_img, d_toks, pred) = grad_sample(backbone, &composed, tokens, layout, &target, mapping)?;
            loss_sum += loss;
            let hard_label = if ex.weight_a >= 0.5 { ex.label_a } else { ex.label_b };
            if pred == hard_label {
                correct += 1;
            }
            seen += 1;
            grad_sum = Some(match grad_sum {
                None => d_img,
                Some(mut g) => {
                    g += &d_img;
                    g
                }
            });
            for (acc, d) in token_grad_sum.iter_mut().zip(&d_toks) {
                *acc += d;
            }
        }
        let b = augmented.len() as f64;
        match cfg.method {
            Method::PixelPrompt => {
                let mut grad_mean = grad_sum.expect("non-empty batch");
                grad_mean.mapv_inplace(|v| v / b);
                optimizer::step(prompt, &grad_mean, rule, *global_step, total_steps)?;
            }
            Method::TokenPrompt => {
                for g in &mut token_grad_sum {
                    g.mapv_inplace(|v| v / b);
                }
                optimizer::step_tokens(tokens, &token_grad_sum, rule, *global_step, total_steps)?;
            }
            _ => {}
        }
        *global_step += 1;
    }

    Ok(EpochStats { loss: loss_sum / seen as f64, top1: correct as f64 / seen as f64 })
}

// ---- linear probe ----------------------------------------------------

fn probe_features(backbone: &FrozenBackbone, dataset: &Dataset) -> Result<Array2<f64>> {
    let none = TokenPrompts::none();
    let d = backbone.cfg.embed_dim;
    let mut x = Array2::zeros((dataset.len(), d));
    for (i, img) in dataset.images.iter().enumerate() {
        let f = backbone.features(img, &none, PeLayout::Native)?;
        x.row_mut(i).assign(&f);
    }
    Ok(x)
}

fn probe_logits(head: &ProbeHead, features: &Array2<f64>) -> Array2<f64> {
    let mut l = features.dot(&head.w);
    l += &head.b;
    l
}

fn probe_eval(head: &ProbeHead, features: &Array2<f64>, labels: &[usize]) -> EvalResult {
    let logits = probe_logits(head, features);
    let n = labels.len();
    let mut correct = 0;
    let mut loss_sum = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i).to_owned();
        let logp = crate::nn::log_softmax(&row);
        loss_sum -= logp[label];
        if argmax(&row) == label {
            correct += 1;
        }
    }
    EvalResult { loss: loss_sum / n as f64, top1: correct as f64 / n as f64, n }
}

// ---- checkpoints -----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub run: RunConfig,
    pub freeze_checksum: String,
    pub prompt_params: usize,
    pub best_epoch: Option<usize>,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub backbone: FrozenBackbone,
    pub prompt: PromptTemplate,
    pub tokens: TokenPrompts,
    pub mapping: Option<LabelMapping>,
    pub probe: Option<ProbeHead>,
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    prompt: &PromptTemplate,
    tokens: &TokenPrompts,
    mapping: Option<&LabelMapping>,
    probe: Option<&ProbeHead>,
    best_epoch: Option<usize>,
) -> Result<()> {
    // output paths stay out of the checkpoint so identical configs produce
    // identical bytes regardless of where they write
    let mut run = cfg.clone();
    run.output_dir = PathBuf::new();
    let manifest = CheckpointManifest {
        format_version: 1,
        run,
        freeze_checksum: backbone.freeze_checksum().to_string(),
        prompt_params: prompt.parameter_count(),
        best_epoch,
    };
    let mut c = Container::new();
    c.push_bytes(
        "manifest",
        serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?,
    );
    let (ch, k, _) = prompt.w.dim();
    c.push_f64("prompt/w", vec![ch, k, k], prompt.w.iter().cloned().collect());
    c.push_f64("prompt/mask", vec![ch, k, k], prompt.mask().entries().iter().cloned().collect());
    for (i, t) in tokens.tokens.iter().enumerate() {
        c.push_f64(&format!("token/{i}"), vec![t.nrows(), t.ncols()], t.iter().cloned().collect());
    }
    if let Some(m) = mapping {
        c.push_f64(
            "mapping/assignment",
            vec![m.assignment.len()],
            m.assignment.iter().map(|&v| v as f64).collect(),
        );
    }
    if let Some(p) = probe {
        c.push_f64("probe/w", vec![p.w.nrows(), p.w.ncols()], p.w.iter().cloned().collect());
        c.push_f64("probe/b", vec![p.b.len()], p.b.to_vec());
    }
    for (name, shape, data) in backbone.named_tensors() {
        c.push_f64(&format!("backbone/{name}"), shape, data);
    }
    c.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read(path)?;
    let manifest: CheckpointManifest = serde_json::from_slice(c.get_bytes("manifest")?)
        .map_err(|e| Error::Format(format!("bad manifest: {e}")))?;

    let backbone_tensors: Vec<(String, Vec<usize>, Vec<f64>)> = c
        .iter()
        .filter_map(|(name, entry)| {
            name.strip_prefix("backbone/").and_then(|short| match entry {
                crate::container::Entry::F64 { shape, data } => {
                    Some((short.to_string(), shape.clone(), data.clone()))
                }
                _ => None,
            })
        })
        .collect();
    let backbone = FrozenBackbone::from_tensors(manifest.run.backbone.clone(), &backbone_tensors)?;
    if backbone.freeze_checksum() != manifest.freeze_checksum {
        return Err(Error::Format("backbone weights do not match the recorded freeze checksum".into()));
    }

    let (shape, data) = c.get_f64("prompt/w")?;
    if shape.len() != 3 {
        return Err(Error::Format("prompt/w must be rank 3".into()));
    }
    let w = ndarray::Array3::from_shape_vec((shape[0], shape[1], shape[2]), data.to_vec())
        .map_err(|e| Error::Format(e.to_string()))?;
    let geometry = manifest.run.effective_geometry()?;
    let prompt = PromptTemplate::from_parts(geometry, w)?;

    let mut token_mats = Vec::new();
    for i in 0.. {
        match c.get_f64(&format!("token/{i}")) {
            Ok((shape, data)) => {
                token_mats.push(
                    Array2::from_shape_vec((shape[0], shape[1]), data.to_vec())
                        .map_err(|e| Error::Format(e.to_string()))?,
                );
            }
            Err(_) => break,
        }
    }
    let tokens = if token_mats.is_empty() {
        TokenPrompts::none()
    } else {
        TokenPrompts {
            mode: manifest.run.token_prompt.mode,
            position_index: manifest.run.token_prompt.position_index,
            tokens: token_mats,
        }
    };

    let mapping = match c.get_f64("mapping/assignment") {
        Ok((_, data)) => Some(LabelMapping {
            assignment: data.iter().map(|&v| v as usize).collect(),
            frequency_table: Vec::new(),
            collision_log: Vec::new(),
        }),
        Err(_) => None,
    };
    let probe = match (c.get_f64("probe/w"), c.get_f64("probe/b")) {
        (Ok((ws, wd)), Ok((_, bd))) => Some(ProbeHead {
            w: Array2::from_shape_vec((ws[0], ws[1]), wd.to_vec()).map_err(|e| Error::Format(e.to_string()))?,
            b: Array1::from_vec(bd.to_vec()),
        }),
        _ => None,
    };
    Ok(Checkpoint { manifest, backbone, prompt, tokens, mapping, probe })
}

// ---- the training entry point ----------------------------------------

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let outdir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&outdir)?;

    let backbone = FrozenBackbone::new(cfg.backbone.clone())?;
    let checksum_before = backbone.freeze_checksum().to_string();
    let split = cfg.dataset.load(cfg.backbone.native_size)?;
    let classes = split.train.num_classes;

    match cfg.mapping.mode {
        MappingMode::Identity => {
            if cfg.backbone.num_outputs != classes {
                return Err(Error::InvalidConfig(format!(
                    "identity mapping needs num_outputs == {classes}, head has {}",
                    cfg.backbone.num_outputs
                )));
            }
        }
        MappingMode::Frequency | MappingMode::Arbitrary => {
            if cfg.backbone.num_outputs < classes {
                return Err(Error::InvalidConfig(format!(
                    "mapping needs at least {classes} pretrained classes, head has {}",
                    cfg.backbone.num_outputs
                )));
            }
        }
    }
    let mapping = match cfg.mapping.mode {
        MappingMode::Identity => None,
        MappingMode::Frequency => Some(build_mapping(&backbone, &split.train, cfg.mapping.policy)?),
        MappingMode::Arbitrary => Some(arbitrary_mapping(classes, cfg.backbone.num_outputs, cfg.mapping.seed)?),
    };
    let mapping_checksum = mapping.as_ref().map(|m| m.checksum());

    let geometry = cfg.effective_geometry()?;
    let mut prompt = match cfg.method {
        Method::PixelPrompt => PromptTemplate::init(geometry, cfg.geometry.init_std, cfg.seed)?,
        _ => PromptTemplate::zeros(geometry)?,
    };
    let mut tokens = match cfg.method {
        Method::TokenPrompt => TokenPrompts::init(&cfg.token_prompt, cfg.backbone.embed_dim, cfg.backbone.depth, cfg.seed),
        _ => TokenPrompts::none(),
    };
    let prompt_params = match cfg.method {
        Method::PixelPrompt => prompt.parameter_count(),
        Method::TokenPrompt => tokens.parameter_count(),
        _ => 0,
    };

    let rule = cfg.optimizer.rule();
    let layout = cfg.pe_layout();
    let interp = cfg.geometry.interpolation;
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut metrics: Vec<MetricsRecord> = Vec::new();
    let mut timing_lines: Vec<String> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_state: Option<(PromptTemplate, TokenPrompts)> = None;
    let mut probe: Option<ProbeHead> = None;

    match cfg.method {
        Method::ZeroShot => {
            let t0 = Instant::now();
            let ev = evaluate(&backbone, &prompt, &tokens, mapping.as_ref(), &split.eval, cfg.dataset.corruption, layout, interp)?;
            metrics.push(MetricsRecord {
                epoch: 0,
                split: Split::Eval,
                loss: ev.loss,
                top1: ev.top1,
                prompt_params,
                wall_ms: t0.elapsed().as_millis(),
            });
        }
        Method::LinearProbe => {
            let t0 = Instant::now();
            let train_feats = probe_features(&backbone, &split.train)?;
            let eval_feats = probe_features(&backbone, &split.eval)?;
            let iters_per_epoch = steps_per_epoch.max(1);
            let mut head = ProbeHead {
                w: Array2::zeros((cfg.backbone.embed_dim, classes)),
                b: Array1::zeros(classes),
            };
            for epoch in 1..=cfg.epochs {
                for _ in 0..iters_per_epoch {
                    head = train_probe_step(&head, &train_feats, &split.train.labels, rule.learning_rate);
                }
                let tr = probe_eval(&head, &train_feats, &split.train.labels);
                metrics.push(MetricsRecord {
                    epoch,
                    split: Split::Train,
                    loss: tr.loss,
                    top1: tr.top1,
                    prompt_params: head.w.len() + head.b.len(),
                    wall_ms: t0.elapsed().as_millis(),
                });
                if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                    let ev = probe_eval(&head, &eval_feats, &split.eval.labels);
                    metrics.push(MetricsRecord {
                        epoch,
                        split: Split::Eval,
                        loss: ev.loss,
                        top1: ev.top1,
                        prompt_params: head.w.len() + head.b.len(),
                        wall_ms: t0.elapsed().as_millis(),
                    });
                    if best.is_none_or(|(_, b)| ev.top1 > b) {
                        best = Some((epoch, ev.top1));
                    }
                }
            }
            probe = Some(head);
        }
        Method::PixelPrompt | Method::TokenPrompt => {
            let mut global_step = 0usize;
            for epoch in 1..=cfg.epochs {
                let t0 = Instant::now();
                let stats = run_training_epoch(
                    cfg,
                    &backbone,
                    &mut prompt,
                    &mut tokens,
                    mapping.as_ref(),
                    &split.train,
                    &cfg.augmentation,
                    &rule,
                    epoch - 1,
                    &mut global_step,
                    total_steps,
                )?;
                let train_ms = t0.elapsed().as_millis();
                metrics.push(MetricsRecord {
                    epoch,
                    split: Split::Train,
                    loss: stats.loss,
                    top1: stats.top1,
                    prompt_params,
                    wall_ms: train_ms,
                });
                timing_lines.push(format!("epoch={epoch} split=train wall_ms={train_ms}"));
                if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                    let t1 = Instant::now();
                    let ev = evaluate(&backbone, &prompt, &tokens, mapping.as_ref(), &split.eval, cfg.dataset.corruption, layout, interp)?;
                    let eval_ms = t1.elapsed().as_millis();
                    metrics.push(MetricsRecord {
                        epoch,
                        split: Split::Eval,
                        loss: ev.loss,
                        top1: ev.top1,
                        prompt_params,
                        wall_ms: eval_ms,
                    });
                    timing_lines.push(format!("epoch={epoch} split=eval wall_ms={eval_ms}"));
                    if best.is_none_or(|(_, b)| ev.top1 > b) {
                        best = Some((epoch, ev.top1));
                        best_state = Some((prompt.clone(), tokens.clone()));
                    }
                }
            }
        }
    }

    // the freeze contract, and the mapping immutability contract
    if backbone.checksum() != checksum_before {
        return Err(Error::Numeric("backbone weights changed during training".into()));
    }
    if let (Some(before), Some(m)) = (&mapping_checksum, &mapping) {
        if &m.checksum() != before {
            return Err(Error::Numeric("label mapping changed during training".into()));
        }
    }

    std::fs::write(outdir.join(CONFIG_FILE), cfg.to_toml_string())?;
    std::fs::write(outdir.join(METRICS_FILE), render_metrics(&metrics))?;
    std::fs::write(outdir.join(TIMING_FILE), timing_lines.join("\n") + "\n")?;
    if let Some(m) = &mapping {
        std::fs::write(outdir.join(MAPPING_FILE), mapping_to_string(m))?;
    }
    save_checkpoint(
        &outdir.join(FINAL_CHECKPOINT),
        cfg,
        &backbone,
        &prompt,
        &tokens,
        mapping.as_ref(),
        probe.as_ref(),
        None,
    )?;
    let (best_prompt, best_tokens) = best_state.unwrap_or_else(|| (prompt.clone(), tokens.clone()));
    save_checkpoint(
        &outdir.join(BEST_CHECKPOINT),
        cfg,
        &backbone,
        &best_prompt,
        &best_tokens,
        mapping.as_ref(),
        probe.as_ref(),
        best.map(|(e, _)| e),
    )?;

    Ok(TrainOutcome {
        metrics,
        prompt,
        tokens,
        mapping,
        probe,
        freeze_checksum: checksum_before,
        output_dir: outdir,
    })
}

fn train_probe_step(head: &ProbeHead, features: &Array2<f64>, labels: &[usize], lr: f64) -> ProbeHead {
    let n = features.nrows();
    let logits = probe_logits(head, features);
    let mut delta = crate::nn::softmax_rows(logits.view());
    for (i, &label) in labels.iter().enumerate() {
        delta[[i, label]] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n as f64);
    let gw = features.t().dot(&delta);
    let gb = delta.sum_axis(ndarray::Axis(0));
    ProbeHead { w: &head.w - &(gw * lr), b: &head.b - &(gb * lr) }
}

/// Evaluates a loaded checkpoint on a dataset (the `eval` subcommand path).
pub fn evaluate_checkpoint(ckpt: &Checkpoint, dataset: &Dataset, corruption: Option<CorruptionSpec>) -> Result<EvalResult> {
    let cfg = &ckpt.manifest.run;
    if let Some(p) = &ckpt.probe {
        // probe path: frozen features, then the trained affine head
        let mut correct = 0;
        let mut loss_sum = 0.0;
        let none = TokenPrompts::none();
        for (i, (img, &label)) in dataset.images.iter().zip(&dataset.labels).enumerate() {
            let img = match corruption {
                Some(c) => corrupt(img, c.kind, c.severity, util::derive_seed(c.seed, "corrupt", &[i as u64]))?,
                None => img.clone(),
            };
            let f = ckpt.backbone.features(&img, &none, PeLayout::Native)?;
            let mut logits = p.w.t().dot(&f);
            logits += &p.b;
            let logp = crate::nn::log_softmax(&logits);
            loss_sum -= logp[label];
            if argmax(&logits) == label {
                correct += 1;
            }
        }
        let n = dataset.len();
        return Ok(EvalResult { loss: loss_sum / n as f64, top1: correct as f64 / n as f64, n });
    }
    evaluate(
        &ckpt.backbone,
        &ckpt.prompt,
        &ckpt.tokens,
        ckpt.mapping.as_ref(),
        dataset,
        corruption,
        cfg.pe_layout(),
        cfg.geometry.interpolation,
    )
}

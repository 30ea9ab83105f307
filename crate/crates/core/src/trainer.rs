//! Training step and loop.
//!
//! One step: a gradient-free pass over the unlabeled batch gives
//! pseudo-labels and confidence regions; the unlabeled slices, pseudo-labels
//! and regions are mixed with one mask per slice; the mixed slices and the
//! labeled slices are forwarded with gradients; the supervised loss uses the
//! labeled logits; labeled regions come from the labeled probabilities and
//! ground truth; queries, positives and negatives are drawn from both
//! streams' representation maps; the summed loss drives one Adam update.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_sda, batch_masks, MixKind, SdaConfig};
use crate::eval::{evaluate, metrics, predict_labels, probabilities, write_mask_png};
use crate::losses::{contrastive_loss, supervised_loss, total_loss, LossConfig};
use crate::mining::{draw_samples, regions_labeled, regions_unlabeled, ConfidenceRegions, ConfidenceThresholds, PixelRef, SampleCounts};
use crate::model::{slice_tensor, Checkpoint, DualHeadModel, OutputGrad};
use crate::nn::{clip_global_norm, Adam, AdamState, Real, Tensor};
use crate::volume::{LabeledSlice, UnlabeledSlice};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Sup,
    ConSemiSup,
    SparseConSemiSup,
}

impl Mode {
    pub fn uses_unlabeled(self) -> bool {
        self != Mode::Sup
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Slices per stream per step; both streams use the same size.
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps per epoch; `None` means one pass over the labeled slices.
    pub steps_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub adam: Adam,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub queries: usize,
    pub negatives: usize,
    pub thresholds: ConfidenceThresholds,
    pub epsilon: f64,
    pub tau: f64,
    pub normalized_smoothing: bool,
    /// Let gradients reach the positive centroid and the negatives.
    pub grad_through_keys: bool,
    /// Random horizontal flip of labeled slices.
    pub flip_labeled: bool,
    /// Filled from the run configuration's top-level `sda` table.
    #[serde(skip)]
    pub sda: SdaConfig,
    /// Filled from the run configuration's top-level `seed`.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ConSemiSup,
            batch_size: 2,
            epochs: 20,
            steps_per_epoch: None,
            base_lr: 1e-3,
            lr_decay_factor: 0.2,
            lr_decay_every: 4,
            adam: Adam::default(),
            grad_clip: Some(5.0),
            queries: 128,
            negatives: 128,
            thresholds: ConfidenceThresholds { t_w: 0.7, t_s: 0.9 },
            epsilon: 0.1,
            tau: 0.5,
            normalized_smoothing: false,
            grad_through_keys: false,
            flip_labeled: false,
            sda: SdaConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor)));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.thresholds.validate()?;
        self.loss().validate()?;
        self.sda.validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            epsilon: self.epsilon,
            tau: self.tau,
            normalized_smoothing: self.normalized_smoothing,
        }
    }
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.base_lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every.max(1)) as i32)
}

/// Borrowed inputs of one step.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub labeled: Vec<(&'a Array2<f32>, &'a Array2<i32>)>,
    pub unlabeled: Vec<&'a Array2<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub sup: f64,
    pub con: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub partner: usize,
    pub kind: MixKind,
    /// Pixels taken from the partner.
    pub from_partner: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    pub contrastive_skipped: bool,
    pub pairs: usize,
    pub contributing_classes: usize,
    pub degenerate_similarities: usize,
    /// Weak and strong region sizes per class, summed over both streams.
    pub weak_counts: Vec<usize>,
    pub strong_counts: Vec<usize>,
    pub unlabeled_mix: Vec<MixRecord>,
    pub labeled_mix: Vec<MixRecord>,
    /// Drawn query and negative positions per class. Slice indices count the
    /// mixed unlabeled slices first, then the labeled ones.
    pub query_positions: Vec<Vec<PixelRef>>,
    pub negative_positions: Vec<Vec<PixelRef>>,
    /// Regions per slice in the same order.
    pub regions: Vec<ConfidenceRegions>,
    /// Pseudo-labels of the (mixed) unlabeled slices.
    pub pseudo_labels: Vec<Array2<i32>>,
    /// Gradient norm before clipping (0 until the update is applied).
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub losses: LossComponents,
    pub diagnostics: StepDiagnostics,
}

fn to_array3<T: Real>(t: &Tensor<T>) -> Array3<f64> {
    Array3::from_shape_fn((t.c, t.h, t.w), |(c, y, x)| t.at(c, y, x).as_f64())
}

fn flip_columns<A: Clone>(a: &Array2<A>) -> Array2<A> {
    a.slice(s![.., ..;-1]).to_owned()
}

fn mix_record(m: &crate::augment::MixMask) -> MixRecord {
    MixRecord {
        partner: m.partner,
        kind: m.kind,
        from_partner: m.keep_a.iter().filter(|&&v| !v).count(),
    }
}

fn add_rep_grad<T: Real>(grads: &mut [OutputGrad<T>], at: PixelRef, g: &[f64], scale: f64) {
    let t = &mut grads[at.slice].rep_map;
    let plane = t.h * t.w;
    let off = at.y * t.w + at.x;
    for (d, v) in g.iter().enumerate() {
        let cell = &mut t.data[d * plane + off];
        *cell = T::of(cell.as_f64() + v * scale);
    }
}

/// Runs the forward passes and losses of one step and accumulates parameter
/// gradients into `model` (after zeroing them). No parameter is updated.
pub fn compute_step<T: Real>(model: &mut DualHeadModel<T>, batch: &Batch<'_>, cfg: &TrainConfig, seed: u64) -> Result<StepOutcome> {
    if batch.labeled.is_empty() {
        return Err(Error::Input("labeled batch is empty".into()));
    }
    let semi = cfg.mode.uses_unlabeled();
    if semi && batch.unlabeled.is_empty() {
        return Err(Error::Input("unlabeled batch is empty in a semi-supervised mode".into()));
    }
    model.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unlabeled_mix_seed: u64 = rng.gen();
    let labeled_mix_seed: u64 = rng.gen();
    let sample_seed: u64 = rng.gen();
    let mut diag = StepDiagnostics::default();

    // Labeled inputs with optional weak flip and optional mixing.
    let mut l_data: Vec<Array2<f32>> = Vec::with_capacity(batch.labeled.len());
    let mut l_gt: Vec<Array2<i32>> = Vec::with_capacity(batch.labeled.len());
    for &(d, g) in &batch.labeled {
        if cfg.flip_labeled && rng.gen_bool(0.5) {
            l_data.push(flip_columns(d));
            l_gt.push(flip_columns(g));
        } else {
            l_data.push(d.clone());
            l_gt.push(g.clone());
        }
    }
    if cfg.sda.enabled_labeled {
        let masks = batch_masks(&cfg.sda, &l_gt, labeled_mix_seed)?;
        let data = masks.iter().enumerate().map(|(i, m)| apply_sda(m, &l_data[i], &l_data[m.partner])).collect::<Result<Vec<_>>>()?;
        let gt = masks.iter().enumerate().map(|(i, m)| apply_sda(m, &l_gt[i], &l_gt[m.partner])).collect::<Result<Vec<_>>>()?;
        diag.labeled_mix = masks.iter().map(|m| mix_record(m)).collect();
        l_data = data;
        l_gt = gt;
    }

    // Unlabeled: pseudo-label pass, mixing, gradient pass.
    let mut u_pass = None;
    let mut u_regions = Vec::new();
    if semi {
        let inputs: Vec<Tensor<T>> = batch.unlabeled.iter().map(|d| slice_tensor(d)).collect();
        let first = model.forward(&inputs, false)?;
        let probs: Vec<Array3<f64>> = first.outputs.iter().map(probabilities).collect();
        let pseudo: Vec<Array2<i32>> = first.outputs.iter().map(predict_labels).collect();
        let regions = probs.iter().map(|p| regions_unlabeled(p.view(), &cfg.thresholds)).collect::<Result<Vec<_>>>()?;
        drop(first);
        diag.pseudo_labels = pseudo.clone();
        let (data, regions) = if cfg.sda.enabled_unlabeled {
            let masks = batch_masks(&cfg.sda, &pseudo, unlabeled_mix_seed)?;
            let data = masks
                .iter()
                .enumerate()
                .map(|(i, m)| apply_sda(m, batch.unlabeled[i], batch.unlabeled[m.partner]))
                .collect::<Result<Vec<_>>>()?;
            diag.pseudo_labels = masks.iter().enumerate().map(|(i, m)| apply_sda(m, &pseudo[i], &pseudo[m.partner])).collect::<Result<Vec<_>>>()?;
            let mixed = masks.iter().enumerate().map(|(i, m)| apply_sda(m, &regions[i], &regions[m.partner])).collect::<Result<Vec<_>>>()?;
            diag.unlabeled_mix = masks.iter().map(|m| mix_record(m)).collect();
            (data, mixed)
        } else {
            (batch.unlabeled.iter().map(|d| (*d).clone()).collect(), regions)
        };
        let inputs: Vec<Tensor<T>> = data.iter().map(slice_tensor).collect();
        u_pass = Some(model.forward(&inputs, true)?);
        u_regions = regions;
    }

    let l_inputs: Vec<Tensor<T>> = l_data.iter().map(slice_tensor).collect();
    let l_pass = model.forward(&l_inputs, true)?;
    let l_logits: Vec<Array3<f64>> = l_pass.outputs.iter().map(|o| to_array3(&o.seg_logits)).collect();
    let sup = supervised_loss(
        &l_logits.iter().map(|a| a.view()).collect::<Vec<_>>(),
        &l_gt.iter().map(|a| a.view()).collect::<Vec<_>>(),
        cfg.epsilon,
        cfg.normalized_smoothing,
    )?;

    let n_u = u_regions.len();
    let mut u_grads: Vec<OutputGrad<T>> = u_pass.as_ref().map_or_else(Vec::new, |p| p.outputs.iter().map(OutputGrad::zeros_like).collect());
    let mut l_grads: Vec<OutputGrad<T>> = l_pass.outputs.iter().map(OutputGrad::zeros_like).collect();
    for (g, sg) in l_grads.iter_mut().zip(&sup.grad) {
        g.seg_logits.data = sg.iter().map(|&v| T::of(v)).collect();
    }

    let mut con_value = 0.0;
    if semi {
        let mut regions = u_regions;
        for (out, gt) in l_pass.outputs.iter().zip(&l_gt) {
            let p = probabilities(out);
            regions.push(regions_labeled(p.view(), gt.view(), &cfg.thresholds)?);
        }
        let u_outs = &u_pass.as_ref().expect("semi-supervised pass").outputs;
        let reps: Vec<&Tensor<T>> = u_outs.iter().chain(&l_pass.outputs).map(|o| &o.rep_map).collect();
        let counts = SampleCounts {
            queries: cfg.queries,
            negatives: cfg.negatives,
        };
        let samples = draw_samples(&regions, &reps, counts, sample_seed)?;
        let con = contrastive_loss(&samples, cfg.tau)?;
        con_value = con.value;
        diag.contrastive_skipped = con.skipped;
        diag.pairs = con.pairs;
        diag.contributing_classes = con.contributing_classes;
        diag.degenerate_similarities = con.degenerate_similarities;
        let classes = model.spec().classes;
        diag.weak_counts = (0..classes).map(|c| regions.iter().map(|r| r.weak_count(c)).sum()).collect();
        diag.strong_counts = (0..classes).map(|c| regions.iter().map(|r| r.strong_count(c)).sum()).collect();
        diag.query_positions = samples.classes.iter().map(|c| c.queries.iter().map(|q| q.at).collect()).collect();
        diag.negative_positions = samples.classes.iter().map(|c| c.negatives.iter().map(|q| q.at).collect()).collect();
        if con.skipped {
            warn!("no class had queries, a positive and negatives; contrastive term skipped");
        }

        let mut route = |at: PixelRef, g: &[f64], scale: f64| {
            if at.slice < n_u {
                add_rep_grad(&mut u_grads, at, g, scale);
            } else {
                add_rep_grad(&mut l_grads, PixelRef { slice: at.slice - n_u, ..at }, g, scale);
            }
        };
        for (cs, cg) in samples.classes.iter().zip(&con.grads) {
            for (q, g) in cs.queries.iter().zip(&cg.queries) {
                route(q.at, g, 1.0);
            }
            if cfg.grad_through_keys {
                for (n, g) in cs.negatives.iter().zip(&cg.negatives) {
                    route(n.at, g, 1.0);
                }
                if let Some(g) = &cg.positive {
                    let scale = 1.0 / cs.strong_pool.len() as f64;
                    for &at in &cs.strong_pool {
                        route(at, g, scale);
                    }
                }
            }
        }
        diag.regions = regions;
    }

    let total = total_loss(sup.value, con_value)?;
    if let Some(p) = &u_pass {
        model.backward(p.cache.as_ref().expect("gradient pass keeps a cache"), &u_grads)?;
    }
    model.backward(l_pass.cache.as_ref().expect("gradient pass keeps a cache"), &l_grads)?;
    Ok(StepOutcome {
        losses: LossComponents { sup: sup.value, con: con_value, total },
        diagnostics: diag,
    })
}

/// One full step: losses, gradients, clipping and one Adam update.
pub fn contrastive_step<T: Real>(
    model: &mut DualHeadModel<T>,
    opt: &mut AdamState<T>,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    lr: f64,
    seed: u64,
) -> Result<StepOutcome> {
    let mut out = compute_step(model, batch, cfg, seed)?;
    let mut params = model.params_mut();
    let norm = match cfg.grad_clip {
        Some(max) => clip_global_norm(&mut params, max),
        None => clip_global_norm(&mut params, f64::INFINITY),
    };
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm ({norm})")));
    }
    cfg.adam.step(opt, &mut params, lr);
    out.diagnostics.grad_norm = norm;
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<LabeledSlice>,
    pub unlabeled: Vec<UnlabeledSlice>,
    /// Used only to pick the best checkpoint.
    pub validation: Vec<LabeledSlice>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where `losses.csv`, checkpoints and debug dumps go.
    pub run_dir: Option<PathBuf>,
    /// Continue from `checkpoints/last.ckpt` when it exists.
    pub resume: bool,
    /// Dump region masks every n steps.
    pub region_dump_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub sup: f64,
    pub con: f64,
    pub total: f64,
    pub con_skipped: bool,
    pub pairs: usize,
    pub mixed_pixels: usize,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_miou: Option<f64>,
}

pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch (the last epoch without validation data).
    pub best: DualHeadModel<T>,
    pub last: DualHeadModel<T>,
    pub best_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub skipped_contrastive_steps: usize,
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,lr,sup,con,total,con_skipped,pairs,mixed_pixels,grad_norm";

fn csv_line(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.epoch, r.step, r.lr, r.sup, r.con, r.total, r.con_skipped as u8, r.pairs, r.mixed_pixels, r.grad_norm
    )
}

/// Epoch-local order that visits every element once per pass, reshuffling
/// between passes.
fn stream(n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let mut pass: Vec<usize> = (0..n).collect();
        pass.shuffle(rng);
        out.extend(pass);
    }
    out.truncate(len);
    out
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeMeta {
    best_epoch: usize,
    best_score: Option<f64>,
}

fn dump_regions(dir: &Path, step: usize, regions: &[ConfidenceRegions]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, r) in regions.iter().enumerate() {
        let weak = r.weak.map_axis(ndarray::Axis(0), |v| v.iter().any(|&b| b));
        let strong = r.strong.map_axis(ndarray::Axis(0), |v| v.iter().any(|&b| b));
        write_mask_png(weak.view(), &dir.join(format!("step{step:06}_slice{s}_weak.png")))?;
        write_mask_png(strong.view(), &dir.join(format!("step{step:06}_slice{s}_strong.png")))?;
    }
    Ok(())
}

pub fn train<T: Real>(mut model: DualHeadModel<T>, data: &TrainData, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Input("no labeled slice to train on".into()));
    }
    if cfg.mode.uses_unlabeled() && data.unlabeled.is_empty() {
        return Err(Error::Input("no unlabeled slice for a semi-supervised mode".into()));
    }
    let classes = model.spec().classes;
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or_else(|| data.labeled.len().div_ceil(cfg.batch_size));
    let ckpt_dir = opts.run_dir.as_ref().map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let mut opt = AdamState::new(model.params().iter().map(|p| p.len()));
    let mut start_epoch = 0;
    let mut meta = ResumeMeta {
        best_epoch: 0,
        best_score: None,
    };
    let mut best = model.clone();
    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    if let (true, Some(d)) = (opts.resume, &ckpt_dir) {
        let last = d.join("last.ckpt");
        if last.exists() {
            let ck = Checkpoint::<T>::load(&last)?;
            if ck.model.spec() != model.spec() {
                return Err(Error::Config("checkpoint model spec differs from the configured model".into()));
            }
            model = ck.model;
            opt = ck.optimizer.ok_or_else(|| Error::Config("last checkpoint has no optimizer state".into()))?;
            start_epoch = ck.epoch as usize;
            meta = serde_json::from_value(ck.meta)?;
            let best_path = d.join("best.ckpt");
            best = if best_path.exists() { Checkpoint::<T>::load(&best_path)?.model } else { model.clone() };
            let csv_path = opts.run_dir.as_ref().unwrap().join("losses.csv");
            if let Ok(prev) = fs::read_to_string(&csv_path) {
                for line in prev.lines().skip(1) {
                    let epoch: usize = line.split(',').next().and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
                    if epoch < start_epoch {
                        csv.push_str(line);
                        csv.push('\n');
                    }
                }
            }
            info!("resuming after epoch {start_epoch}");
        }
    }

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut skipped = 0;
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let l_order = stream(data.labeled.len(), steps_per_epoch * cfg.batch_size, &mut rng);
        let u_order = if cfg.mode.uses_unlabeled() {
            stream(data.unlabeled.len(), steps_per_epoch * cfg.batch_size, &mut rng)
        } else {
            Vec::new()
        };
        let mut epoch_total = 0.0;
        for k in 0..steps_per_epoch {
            let global = epoch * steps_per_epoch + k;
            let range = k * cfg.batch_size..(k + 1) * cfg.batch_size;
            let batch = Batch {
                labeled: l_order[range.clone()]
                    .iter()
                    .map(|&i| (&data.labeled[i].data, &data.labeled[i].labels))
                    .collect(),
                unlabeled: u_order.get(range.clone()).unwrap_or(&[]).iter().map(|&i| &data.unlabeled[i].data).collect(),
            };
            let step_seed: u64 = rng.gen();
            let out = match contrastive_step(&mut model, &mut opt, &batch, cfg, lr, step_seed) {
                Ok(o) => o,
                Err(Error::Numeric(msg)) => {
                    let dump = write_step_dump(opts, epoch, global, lr, &msg, &l_order[range.clone()], u_order.get(range.clone()).unwrap_or(&[]), data);
                    return Err(Error::Numeric(match dump {
                        Some(p) => format!("{msg}; step dump written to {}", p.display()),
                        None => msg,
                    }));
                }
                Err(e) => return Err(e),
            };
            let d = &out.diagnostics;
            skipped += d.contrastive_skipped as usize;
            debug!(
                "step {global}: sup {:.4} con {:.4} weak {:?} strong {:?}",
                out.losses.sup, out.losses.con, d.weak_counts, d.strong_counts
            );
            let rec = StepRecord {
                epoch,
                step: global,
                lr,
                sup: out.losses.sup,
                con: out.losses.con,
                total: out.losses.total,
                con_skipped: d.contrastive_skipped,
                pairs: d.pairs,
                mixed_pixels: d.unlabeled_mix.iter().chain(&d.labeled_mix).map(|m| m.from_partner).sum(),
                grad_norm: d.grad_norm,
            };
            csv.push_str(&csv_line(&rec));
            csv.push('\n');
            epoch_total += rec.total;
            steps.push(rec);
            if let (Some(every), Some(dir)) = (opts.region_dump_every, &opts.run_dir) {
                if every > 0 && global % every == 0 && !d.regions.is_empty() {
                    dump_regions(&dir.join("debug"), global, &d.regions)?;
                }
            }
        }

        let val_miou = if data.validation.is_empty() {
            None
        } else {
            Some(metrics(&evaluate(&model, &data.validation, cfg.batch_size)?)?.miou)
        };
        let improved = match (val_miou, meta.best_score) {
            (None, _) => true,
            (Some(v), None) => v.is_finite(),
            (Some(v), Some(b)) => v > b,
        };
        if improved {
            meta.best_epoch = epoch;
            meta.best_score = val_miou;
            best = model.clone();
        }
        let mean_total = epoch_total / steps_per_epoch as f64;
        info!(
            "epoch {epoch}: lr {lr:.2e} mean loss {mean_total:.4}{}",
            val_miou.map_or(String::new(), |v| format!(" val MIOU {v:.2}"))
        );
        epochs.push(EpochRecord { epoch, mean_total, val_miou });

        if let (Some(run), Some(d)) = (&opts.run_dir, &ckpt_dir) {
            let csv_path = run.join("losses.csv");
            fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
            let m = serde_json::to_value(&meta)?;
            if improved {
                Checkpoint {
                    model: model.clone(),
                    epoch: epoch as u64 + 1,
                    optimizer: None,
                    meta: m.clone(),
                }
                .save(&d.join("best.ckpt"))?;
            }
            Checkpoint {
                model: model.clone(),
                epoch: epoch as u64 + 1,
                optimizer: Some(opt.clone()),
                meta: m,
            }
            .save(&d.join("last.ckpt"))?;
        }
    }
    if skipped > 0 {
        info!("contrastive term skipped in {skipped} steps");
    }
    debug_assert_eq!(best.spec().classes, classes);
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch: meta.best_epoch,
        steps,
        epochs,
        skipped_contrastive_steps: skipped,
    })
}

#[allow(clippy::too_many_arguments)]
fn write_step_dump(
    opts: &TrainOptions,
    epoch: usize,
    step: usize,
    lr: f64,
    msg: &str,
    labeled: &[usize],
    unlabeled: &[usize],
    data: &TrainData,
) -> Option<PathBuf> {
    let dir = opts.run_dir.as_ref()?;
    let mut text = String::new();
    let _ = writeln!(text, "epoch {epoch}\nstep {step}\nlr {lr}\nerror {msg}");
    let _ = writeln!(text, "labeled inlines {:?}", labeled.iter().map(|&i| data.labeled[i].inline).collect::<Vec<_>>());
    let _ = writeln!(text, "unlabeled inlines {:?}", unlabeled.iter().map(|&i| data.unlabeled[i].inline).collect::<Vec<_>>());
    let path = dir.join(format!("step_dump_{step}.txt"));
    fs::write(&path, text).ok().map(|_| path)
}

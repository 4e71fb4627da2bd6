//! Teacher-student protocol. The frozen teacher picks saliency crops at the
//! start of an epoch, the student trains on the combined objective, and the
//! teacher is refreshed once per epoch as an exponential moving average of
//! the student. The teacher is never gradient-updated.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::losses::{
    info_nce_with_grad, l1_grad, l1_loss, total_loss, EmbeddingBatch, InfoNceOptions,
};
use crate::model::{ForwardOptions, ModelState, Params};
use crate::optim::Optimizer;
use crate::rng::{derive_seed, labels, stream};
use crate::saliency::PixelRect;
use crate::sampling::{
    assemble_batch_with_rects, saliency_rect, BatchOptions, CropBatch, CropIndex,
};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaConfig {
    pub beta: f64,
    /// Refresh the teacher after every optimizer step instead of once per
    /// epoch.
    #[serde(default)]
    pub per_step: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            beta: 0.99,
            per_step: false,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "ema beta {} must lie in [0,1]",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl Default for EpochSchedule {
    fn default() -> Self {
        Self {
            epochs: 9,
            lr_initial: 2e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 3,
        }
    }
}

impl EpochSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.lr_decay_every == 0 {
            return Err(Error::InvalidConfig(
                "lr decay interval must be positive".into(),
            ));
        }
        if !(self.lr_initial.is_finite() && self.lr_initial >= 0.0) || self.lr_decay_factor < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "lr {} with decay factor {} is not a valid schedule",
                self.lr_initial, self.lr_decay_factor
            )));
        }
        Ok(())
    }

    /// Learning rate at a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_initial
            / self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

/// theta_t <- beta * theta_t + (1 - beta) * theta_s, elementwise over every
/// named parameter. Returns the refreshed teacher with its version bumped.
pub fn ema_update<T: Scalar>(
    teacher: &ModelState<T>,
    student: &ModelState<T>,
    beta: f64,
) -> Result<ModelState<T>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "ema beta {beta} must lie in [0,1]"
        )));
    }
    let mut out = teacher.clone();
    let b = c::<T>(beta);
    let one_minus = c::<T>(1.0 - beta);
    let student_arrays = student.params.named_arrays();
    let mut out_arrays = out.params.named_arrays_mut();
    if out_arrays.len() != student_arrays.len() {
        return Err(Error::ParamMismatch(format!(
            "teacher has {} parameter blocks, student {}",
            out_arrays.len(),
            student_arrays.len()
        )));
    }
    for ((tname, t_arr), (sname, s_arr)) in out_arrays.iter_mut().zip(student_arrays.iter()) {
        if tname != sname || t_arr.dim() != s_arr.dim() {
            return Err(Error::ParamMismatch(format!(
                "teacher {tname} {:?} vs student {sname} {:?}",
                t_arr.dim(),
                s_arr.dim()
            )));
        }
        t_arr.zip_mut_with(s_arr, |tv, &sv| *tv = b * *tv + one_minus * sv);
    }
    out.version = teacher.version + 1;
    Ok(out)
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    #[serde(default)]
    pub include_positive_in_denominator: bool,
    #[serde(default)]
    pub include_other_saliency: bool,
    #[serde(default)]
    pub sum_anchors_per_image: bool,
    /// Keep same-image negatives in the denominator; false is the baseline
    /// contrastive ablation.
    #[serde(default = "default_true")]
    pub intra_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            alpha: 0.5,
            include_positive_in_denominator: false,
            include_other_saliency: false,
            sum_anchors_per_image: false,
            intra_negatives: true,
        }
    }
}

impl LossConfig {
    pub fn info_options(&self) -> InfoNceOptions {
        InfoNceOptions {
            include_positive_in_denominator: self.include_positive_in_denominator,
            include_other_saliency: self.include_other_saliency,
            sum_anchors_per_image: self.sum_anchors_per_image,
            exclude_intra: !self.intra_negatives,
        }
    }
}

/// Where the contrastive positive crop comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveSource {
    /// The teacher's max-attention window.
    #[default]
    Saliency,
    /// An extra random crop (ablation).
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub images: usize,
    pub l1: f64,
    pub info_nce: f64,
    pub total: f64,
}

/// Forwards every crop of a batch, combines the contrastive and regression
/// objectives, and backpropagates into a fresh gradient buffer without
/// touching the parameters. `targets` are per-image regression targets in
/// model units.
pub fn loss_and_grads<T: Scalar>(
    student: &ModelState<T>,
    batch: &CropBatch<T>,
    targets: &[f64],
    loss_cfg: &LossConfig,
) -> Result<(StepStats, Params<T>)> {
    if targets.len() != batch.t_images {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {} images",
            targets.len(),
            batch.t_images
        )));
    }
    let scored = ForwardOptions {
        decoder: true,
        attention: false,
    };
    let embed_only = ForwardOptions {
        decoder: false,
        attention: false,
    };
    let mut forwards = Vec::with_capacity(batch.t_images * (batch.h_crops + 1));
    let mut features: Vec<Array1<T>> = Vec::with_capacity(forwards.capacity());
    for t in 1..=batch.t_images {
        for h in 1..=batch.h_crops {
            let fwd = student.forward(batch.crop(t, CropIndex::Random(h)), &scored)?;
            features.push(fwd.unit_feature.clone());
            forwards.push(fwd);
        }
        let fwd = student.forward(batch.crop(t, CropIndex::Saliency), &embed_only)?;
        features.push(fwd.unit_feature.clone());
        forwards.push(fwd);
    }

    let embeddings = EmbeddingBatch::new(batch.t_images, batch.h_crops, loss_cfg.tau, features)?;
    let (info, feature_grads) = info_nce_with_grad(&embeddings, &loss_cfg.info_options())?;

    let mut l1_terms = Vec::with_capacity(batch.t_images);
    let mut score_grads: Vec<Vec<T>> = Vec::with_capacity(batch.t_images);
    for t in 1..=batch.t_images {
        let target = c::<T>(targets[t - 1]);
        let predictions: Vec<T> = (1..=batch.h_crops)
            .map(|h| {
                forwards[embeddings.position(t, CropIndex::Random(h))]
                    .score
                    .expect("scored forward")
            })
            .collect();
        let per_crop_targets = vec![target; batch.h_crops];
        l1_terms.push(l1_loss(&predictions, &per_crop_targets)?);
        score_grads.push(l1_grad(&predictions, &per_crop_targets)?);
    }

    let breakdown = total_loss(&l1_terms, &info.per_image, loss_cfg.alpha)?;
    let total = breakdown.total.to_f64_lossy();
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {total} (l1 {}, contrastive {})",
            breakdown.l1.to_f64_lossy(),
            breakdown.info_nce.to_f64_lossy()
        )));
    }

    let alpha = c::<T>(loss_cfg.alpha);
    let one_minus_alpha = c::<T>(1.0 - loss_cfg.alpha);
    let mut grads = Params::zeros(&student.config);
    for t in 1..=batch.t_images {
        for h in 1..=batch.h_crops {
            let pos = embeddings.position(t, CropIndex::Random(h));
            let d_unit = feature_grads[pos].mapv(|v| v * alpha);
            let d_score = score_grads[t - 1][h - 1] * one_minus_alpha;
            student.backward(
                &forwards[pos],
                None,
                Some(&d_unit),
                Some(d_score),
                &mut grads,
            )?;
        }
        let pos = embeddings.position(t, CropIndex::Saliency);
        let d_unit = feature_grads[pos].mapv(|v| v * alpha);
        student.backward(&forwards[pos], None, Some(&d_unit), None, &mut grads)?;
    }

    let stats = StepStats {
        step: 0,
        images: batch.t_images,
        l1: breakdown.l1.to_f64_lossy(),
        info_nce: breakdown.info_nce.to_f64_lossy(),
        total,
    };
    Ok((stats, grads))
}

/// One optimizer step on a crop batch, updating the student in place.
pub fn train_step<T: Scalar>(
    student: &mut ModelState<T>,
    batch: &CropBatch<T>,
    targets: &[f64],
    loss_cfg: &LossConfig,
    optimizer: &mut Optimizer<T>,
    lr: f64,
) -> Result<StepStats> {
    let (stats, grads) = loss_and_grads(student, batch, targets, loss_cfg)?;
    optimizer.step(&mut student.params, &grads, lr)?;
    student.version += 1;
    Ok(stats)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub h_crops: usize,
    pub crop_size: usize,
    pub batch_images: usize,
    pub aggregate_layers: Option<usize>,
    pub window_side: Option<usize>,
    pub loss: LossConfig,
    pub ema: EmaConfig,
    #[serde(default)]
    pub positive_source: PositiveSource,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub steps: Vec<StepStats>,
    pub mean_l1: f64,
    pub mean_info_nce: f64,
    pub mean_total: f64,
    /// Mean L1 displacement of saliency-window centers vs the previous
    /// epoch's rects, when given.
    pub saliency_drift: Option<f64>,
    pub rects: Vec<PixelRect>,
}

fn rect_center(rect: &PixelRect) -> (f64, f64) {
    (
        rect.x as f64 + rect.width as f64 / 2.0,
        rect.y as f64 + rect.height as f64 / 2.0,
    )
}

pub fn saliency_drift(previous: &[PixelRect], current: &[PixelRect]) -> Result<f64> {
    if previous.len() != current.len() {
        return Err(Error::InvalidArgument(format!(
            "{} previous rects vs {} current",
            previous.len(),
            current.len()
        )));
    }
    if previous.is_empty() {
        return Err(Error::InvalidArgument("no rects to compare".into()));
    }
    let mut total = 0.0;
    for (p, c) in previous.iter().zip(current) {
        let (px, py) = rect_center(p);
        let (cx, cy) = rect_center(c);
        total += (px - cx).abs() + (py - cy).abs();
    }
    Ok(total / previous.len() as f64)
}

/// One full epoch: teacher scans all images for saliency rects, the student
/// trains over shuffled mini-batches, then the teacher is EMA-refreshed.
/// Returns the refreshed teacher and the epoch report.
pub fn run_epoch_protocol<T: Scalar>(
    teacher: ModelState<T>,
    student: &mut ModelState<T>,
    images: &[Image<T>],
    targets: &[f64],
    epoch: usize,
    schedule: &EpochSchedule,
    cfg: &ProtocolConfig,
    optimizer: &mut Optimizer<T>,
    previous_rects: Option<&[PixelRect]>,
) -> Result<(ModelState<T>, EpochReport)> {
    schedule.validate()?;
    cfg.ema.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if images.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} targets",
            images.len(),
            targets.len()
        )));
    }
    let lr = schedule.lr_at(epoch);

    let mut rects = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let rect = match cfg.positive_source {
            PositiveSource::Saliency => saliency_rect(
                image,
                &teacher,
                cfg.aggregate_layers,
                cfg.window_side,
                cfg.crop_size,
            )?,
            PositiveSource::Random => {
                let (h, w, _) = image.dim();
                if cfg.crop_size > w || cfg.crop_size > h {
                    return Err(Error::InvalidArgument(format!(
                        "crop {} exceeds image {w}x{h}",
                        cfg.crop_size
                    )));
                }
                let mut rng = stream(cfg.seed, &[labels::POSITIVE, epoch as u64, i as u64]);
                let x = rng.random_range(0..=w - cfg.crop_size);
                let y = rng.random_range(0..=h - cfg.crop_size);
                PixelRect {
                    x,
                    y,
                    width: cfg.crop_size,
                    height: cfg.crop_size,
                }
            }
        };
        rects.push(rect);
    }
    let drift = match previous_rects {
        Some(prev) => Some(saliency_drift(prev, &rects)?),
        None => None,
    };

    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut stream(cfg.seed, &[labels::SHUFFLE, epoch as u64]));

    let mut teacher = teacher;
    let mut steps = Vec::new();
    for (step, chunk) in order.chunks(cfg.batch_images.max(1)).enumerate() {
        let batch_images: Vec<Image<T>> = chunk.iter().map(|&i| images[i].clone()).collect();
        let batch_targets: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
        let batch_rects: Vec<PixelRect> = chunk.iter().map(|&i| rects[i]).collect();
        let opts = BatchOptions {
            h_crops: cfg.h_crops,
            crop_size: cfg.crop_size,
            seed: derive_seed(cfg.seed, &[labels::CROPS, epoch as u64, step as u64]),
            aggregate_layers: cfg.aggregate_layers,
            window_side: cfg.window_side,
        };
        let batch = assemble_batch_with_rects(&batch_images, &batch_targets, &batch_rects, &opts)?;
        let mut stats = train_step(student, &batch, &batch_targets, &cfg.loss, optimizer, lr)
            .map_err(|e| Error::Numerical {
                context: format!("epoch {epoch} step {step}"),
                detail: e.to_string(),
            })?;
        stats.step = step;
        steps.push(stats);
        if cfg.ema.per_step {
            teacher = ema_update(&teacher, student, cfg.ema.beta)?;
        }
    }
    if !cfg.ema.per_step {
        teacher = ema_update(&teacher, student, cfg.ema.beta)?;
    }

    let n = steps.len() as f64;
    let report = EpochReport {
        epoch,
        lr,
        mean_l1: steps.iter().map(|s| s.l1).sum::<f64>() / n,
        mean_info_nce: steps.iter().map(|s| s.info_nce).sum::<f64>() / n,
        mean_total: steps.iter().map(|s| s.total).sum::<f64>() / n,
        steps,
        saliency_drift: drift,
        rects,
    };
    Ok((teacher, report))
}

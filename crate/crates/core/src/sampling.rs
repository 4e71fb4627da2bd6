//! Batch construction: H random crops plus one teacher-selected saliency
//! crop per image, and the positive / intra-class / inter-class index sets
//! each anchor needs for the contrastive loss. Image ids `t` and random-crop
//! indices `h` are 1-based throughout, matching the pair-set conventions.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde_json::json;

use crate::data::{crop_image, resize_bilinear, Image};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::{labels, stream};
use crate::saliency::{
    aggregate_last_k, default_window_side, find_window, window_to_pixel_rect, PixelRect,
};
use crate::scalar::Scalar;

pub const DEFAULT_AGGREGATE_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CropIndex {
    Random(usize), // 1..=H
    Saliency,
}

impl fmt::Display for CropIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CropIndex::Random(h) => write!(f, "{h}"),
            CropIndex::Saliency => write!(f, "s"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropRole {
    Random,
    Saliency,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropRecord {
    /// 1-based image index within the batch; 0 until a batch assigns it.
    pub image_id: usize,
    pub crop_index: CropIndex,
    pub rect: PixelRect,
    pub role: CropRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropBatch<T> {
    pub t_images: usize,
    pub h_crops: usize,
    /// Image-major: for each image, crops 1..=H then the saliency crop.
    pub records: Vec<CropRecord>,
    pub pixels: Vec<Image<T>>,
    pub mos: Vec<f64>,
}

impl<T: Scalar> CropBatch<T> {
    /// Position of crop `(t, index)` in `records`/`pixels`.
    pub fn position(&self, t: usize, index: CropIndex) -> usize {
        let base = (t - 1) * (self.h_crops + 1);
        match index {
            CropIndex::Random(h) => base + h - 1,
            CropIndex::Saliency => base + self.h_crops,
        }
    }

    pub fn crop(&self, t: usize, index: CropIndex) -> &Image<T> {
        &self.pixels[self.position(t, index)]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.t_images * (self.h_crops + 1);
        if self.records.len() != expected || self.pixels.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "batch should hold {expected} crops, has {} records and {} tensors",
                self.records.len(),
                self.pixels.len()
            )));
        }
        if self.mos.len() != self.t_images {
            return Err(Error::InvalidArgument(format!(
                "batch needs {} scores, has {}",
                self.t_images,
                self.mos.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut saliency_per_image = vec![0usize; self.t_images];
        for record in &self.records {
            if record.image_id == 0 || record.image_id > self.t_images {
                return Err(Error::OutOfRange(format!(
                    "record image id {}",
                    record.image_id
                )));
            }
            if !seen.insert((record.image_id, record.crop_index)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate crop ({}, {})",
                    record.image_id, record.crop_index
                )));
            }
            if record.role == CropRole::Saliency {
                saliency_per_image[record.image_id - 1] += 1;
            }
        }
        if saliency_per_image.iter().any(|&n| n != 1) {
            return Err(Error::InvalidArgument(
                "each image needs exactly one saliency crop".into(),
            ));
        }
        Ok(())
    }

    /// One JSON object per record: image id, crop index, rect, role.
    pub fn dump_records_jsonl(&self, mut out: impl Write) -> Result<()> {
        for record in &self.records {
            let line = json!({
                "t": record.image_id,
                "h": record.crop_index.to_string(),
                "x": record.rect.x,
                "y": record.rect.y,
                "width": record.rect.width,
                "height": record.rect.height,
                "role": match record.role {
                    CropRole::Random => "random",
                    CropRole::Saliency => "saliency",
                },
            });
            writeln!(out, "{line}").map_err(|e| Error::io("writing crop records", e))?;
        }
        Ok(())
    }
}

/// `h_count` uniformly placed square crops; the top-left corner is drawn x
/// then y, both inclusive of the maximal placement. `image_id` is left 0 for
/// the batch assembler to fill in.
pub fn random_crops<T: Scalar>(
    image: &Image<T>,
    h_count: usize,
    crop_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<CropRecord>> {
    let (h, w, _) = image.dim();
    if h < crop_size || w < crop_size {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} smaller than crop size {crop_size}"
        )));
    }
    Ok((1..=h_count)
        .map(|idx| {
            let x = rng.random_range(0..=w - crop_size);
            let y = rng.random_range(0..=h - crop_size);
            CropRecord {
                image_id: 0,
                crop_index: CropIndex::Random(idx),
                rect: PixelRect {
                    x,
                    y,
                    width: crop_size,
                    height: crop_size,
                },
                role: CropRole::Random,
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub h_crops: usize,
    pub crop_size: usize,
    pub seed: u64,
    /// Encoder layers aggregated for saliency; None clamps the default (3)
    /// to the teacher's depth.
    pub aggregate_layers: Option<usize>,
    /// Window side on the patch grid; None picks the default for the grid.
    pub window_side: Option<usize>,
}

fn with_image_context(e: Error, t: usize) -> Error {
    if e.is_validation() {
        Error::InvalidArgument(format!("image {t}: {e}"))
    } else {
        Error::Numerical {
            context: format!("image {t}"),
            detail: e.to_string(),
        }
    }
}

/// Computes the teacher's saliency rect for one full image.
pub fn saliency_rect<T: Scalar>(
    image: &Image<T>,
    teacher: &ModelState<T>,
    aggregate_layers: Option<usize>,
    window_side: Option<usize>,
    crop_size: usize,
) -> Result<PixelRect> {
    let cfg = &teacher.config;
    let teacher_input = resize_bilinear(image, cfg.image_size, cfg.image_size)?;
    let encoded = teacher.encode(&teacher_input)?;
    let k = aggregate_layers
        .unwrap_or(DEFAULT_AGGREGATE_LAYERS)
        .min(cfg.num_layers);
    let grid = aggregate_last_k(&encoded.attention, k)?;
    let m = window_side.unwrap_or_else(|| default_window_side(grid.side()));
    let selection = find_window(&grid, m)?;
    let (h, w, _) = image.dim();
    window_to_pixel_rect(
        &selection,
        cfg.image_size,
        cfg.patch_size,
        (w, h),
        crop_size,
    )
}

/// Builds a batch: for each image, H random crops plus the teacher's
/// saliency crop, with per-image RNG streams split from `opts.seed`.
pub fn assemble_batch<T: Scalar>(
    images: &[Image<T>],
    mos: &[f64],
    teacher: &ModelState<T>,
    opts: &BatchOptions,
) -> Result<CropBatch<T>> {
    let mut rects = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let rect = saliency_rect(
            image,
            teacher,
            opts.aggregate_layers,
            opts.window_side,
            opts.crop_size,
        )
        .map_err(|e| with_image_context(e, i + 1))?;
        rects.push(rect);
    }
    assemble_batch_with_rects(images, mos, &rects, opts)
}

/// Same as `assemble_batch` but with the saliency rects already computed,
/// as when a frozen teacher scanned the whole epoch's images up front.
pub fn assemble_batch_with_rects<T: Scalar>(
    images: &[Image<T>],
    mos: &[f64],
    rects: &[PixelRect],
    opts: &BatchOptions,
) -> Result<CropBatch<T>> {
    if images.len() != mos.len() || images.len() != rects.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images, {} scores, {} saliency rects",
            images.len(),
            mos.len(),
            rects.len()
        )));
    }
    if images.is_empty() || opts.h_crops == 0 {
        return Err(Error::InvalidArgument(
            "batch needs at least one image and one random crop".into(),
        ));
    }
    let mut records = Vec::new();
    let mut pixels = Vec::new();
    for (i, image) in images.iter().enumerate() {
        let t = i + 1;
        let mut rng = stream(opts.seed, &[labels::CROPS, t as u64]);
        let mut crops = random_crops(image, opts.h_crops, opts.crop_size, &mut rng)
            .map_err(|e| with_image_context(e, t))?;
        for record in crops.iter_mut() {
            record.image_id = t;
        }
        crops.push(CropRecord {
            image_id: t,
            crop_index: CropIndex::Saliency,
            rect: rects[i],
            role: CropRole::Saliency,
        });
        for record in &crops {
            pixels.push(crop_image(image, &record.rect).map_err(|e| with_image_context(e, t))?);
        }
        records.extend(crops);
    }
    let batch = CropBatch {
        t_images: images.len(),
        h_crops: opts.h_crops,
        records,
        pixels,
        mos: mos.to_vec(),
    };
    batch.validate()?;
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndexSets {
    /// (t, h), both 1-based.
    pub anchor: (usize, usize),
    /// Image whose saliency crop is the positive (always the anchor's).
    pub positive_image: usize,
    /// (t, h~) with h~ != h, ascending.
    pub intra_negatives: Vec<(usize, usize)>,
    /// (t~, h') over all other images' random crops, ascending.
    pub inter_negatives: Vec<(usize, usize)>,
}

/// Index sets for one anchor in a T x H batch of random crops. Saliency
/// crops never appear as negatives here; the loss exposes a separate switch
/// for pulling other images' saliency crops into the inter-class pool.
pub fn enumerate_pairs(
    t_images: usize,
    h_crops: usize,
    anchor: (usize, usize),
) -> Result<PairIndexSets> {
    let (t, h) = anchor;
    if t == 0 || t > t_images || h == 0 || h > h_crops {
        return Err(Error::OutOfRange(format!(
            "anchor ({t},{h}) outside batch {t_images}x{h_crops}"
        )));
    }
    let intra_negatives = (1..=h_crops)
        .filter(|&other| other != h)
        .map(|other| (t, other))
        .collect();
    let inter_negatives = (1..=t_images)
        .filter(|&other_t| other_t != t)
        .flat_map(|other_t| (1..=h_crops).map(move |other_h| (other_t, other_h)))
        .collect();
    Ok(PairIndexSets {
        anchor,
        positive_image: t,
        intra_negatives,
        inter_negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelState};
    use crate::saliency::WindowSelection;
    use ndarray::Array3;

    fn teacher() -> ModelState<f64> {
        let config = ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            decoder_layers: 1,
            mlp_ratio: 2,
            mlp_head_dims: vec![8, 1],
            seed: 41,
        };
        ModelState::init(config).unwrap()
    }

    fn gradient_image(size: usize) -> Image<f64> {
        Array3::from_shape_fn((size, size, 1), |(y, x, _)| {
            (x + y) as f64 / (2 * size - 2) as f64
        })
    }

    #[test]
    fn crops_on_exact_size_image_are_pinned() {
        let image = gradient_image(32);
        let mut rng = stream(1, &[labels::CROPS]);
        let crops = random_crops(&image, 5, 32, &mut rng).unwrap();
        assert_eq!(crops.len(), 5);
        for (i, record) in crops.iter().enumerate() {
            assert_eq!(
                record.rect,
                PixelRect {
                    x: 0,
                    y: 0,
                    width: 32,
                    height: 32
                }
            );
            assert_eq!(record.crop_index, CropIndex::Random(i + 1));
            assert_eq!(record.role, CropRole::Random);
        }
    }

    #[test]
    fn crops_are_reproducible_and_bounded() {
        let image = gradient_image(64);
        let a = random_crops(&image, 20, 32, &mut stream(7, &[labels::CROPS])).unwrap();
        let b = random_crops(&image, 20, 32, &mut stream(7, &[labels::CROPS])).unwrap();
        assert_eq!(a, b);
        for record in &a {
            assert!(record.rect.x <= 32 && record.rect.y <= 32);
        }
        assert!(random_crops(&image, 3, 65, &mut stream(7, &[1])).is_err());
    }

    #[test]
    fn crop_positions_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let image = gradient_image(64);
        let crops = random_crops(&image, 10_000, 32, &mut stream(123, &[labels::CROPS])).unwrap();
        let mut x_counts = [0usize; 33];
        let mut y_counts = [0usize; 33];
        for record in &crops {
            x_counts[record.rect.x] += 1;
            y_counts[record.rect.y] += 1;
        }
        let critical = ChiSquared::new(32.0).unwrap().inverse_cdf(0.99);
        for counts in [x_counts, y_counts] {
            let expected = 10_000.0 / 33.0;
            let stat: f64 = counts
                .iter()
                .map(|&n| {
                    let d = n as f64 - expected;
                    d * d / expected
                })
                .sum();
            assert!(stat < critical, "chi-square {stat} >= {critical}");
        }
    }

    #[test]
    fn pair_sets_match_hand_enumeration() {
        let single = enumerate_pairs(1, 2, (1, 1)).unwrap();
        assert_eq!(single.intra_negatives, vec![(1, 2)]);
        assert!(single.inter_negatives.is_empty());
        assert_eq!(single.positive_image, 1);

        let sets = enumerate_pairs(2, 3, (1, 2)).unwrap();
        assert_eq!(sets.intra_negatives, vec![(1, 1), (1, 3)]);
        assert_eq!(sets.inter_negatives, vec![(2, 1), (2, 2), (2, 3)]);

        assert!(enumerate_pairs(2, 3, (3, 1)).is_err());
        assert!(enumerate_pairs(2, 3, (1, 0)).is_err());
    }

    #[test]
    fn pair_sets_partition_the_random_crops() {
        for t_images in 1..4 {
            for h_crops in 1..5 {
                for t in 1..=t_images {
                    for h in 1..=h_crops {
                        let sets = enumerate_pairs(t_images, h_crops, (t, h)).unwrap();
                        assert_eq!(sets.intra_negatives.len(), h_crops - 1);
                        assert_eq!(sets.inter_negatives.len(), (t_images - 1) * h_crops);
                        let mut all: Vec<(usize, usize)> = sets
                            .intra_negatives
                            .iter()
                            .chain(&sets.inter_negatives)
                            .cloned()
                            .collect();
                        all.push(sets.anchor);
                        all.sort_unstable();
                        all.dedup();
                        assert_eq!(all.len(), t_images * h_crops);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_has_expected_shape_and_roles() {
        let images = vec![gradient_image(64), gradient_image(64)];
        let mos = vec![80.0, 40.0];
        let opts = BatchOptions {
            h_crops: 3,
            crop_size: 32,
            seed: 5,
            aggregate_layers: None,
            window_side: None,
        };
        let batch = assemble_batch(&images, &mos, &teacher(), &opts).unwrap();
        assert_eq!(batch.records.len(), 8);
        let saliency = batch
            .records
            .iter()
            .filter(|r| r.role == CropRole::Saliency)
            .count();
        assert_eq!(saliency, 2);
        batch.validate().unwrap();
        for record in &batch.records {
            let pix = batch.crop(record.image_id, record.crop_index);
            assert_eq!(pix.dim(), (32, 32, 1));
        }
        assert_eq!(batch.mos, mos);
    }

    #[test]
    fn uniform_attention_teacher_uses_tie_break_window() {
        let mut state = teacher();
        for layer in &mut state.params.encoder {
            layer.attn.wq.w.fill(0.0);
            layer.attn.wq.b.fill(0.0);
            layer.attn.wk.w.fill(0.0);
            layer.attn.wk.b.fill(0.0);
        }
        let image = gradient_image(64);
        let rect = saliency_rect(&image, &state, None, None, 32).unwrap();
        let sel = WindowSelection {
            a: 0,
            b: 0,
            m: default_window_side(4),
            score: 0.0f64,
        };
        let expected = window_to_pixel_rect(&sel, 32, 8, (64, 64), 32).unwrap();
        assert_eq!(rect, expected);
    }

    #[test]
    fn batches_are_bitwise_reproducible() {
        let images = vec![gradient_image(64), gradient_image(64)];
        let mos = vec![80.0, 40.0];
        let state = teacher();
        let opts = BatchOptions {
            h_crops: 4,
            crop_size: 32,
            seed: 9,
            aggregate_layers: Some(2),
            window_side: Some(2),
        };
        let a = assemble_batch(&images, &mos, &state, &opts).unwrap();
        let b = assemble_batch(&images, &mos, &state, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn record_dump_is_one_json_line_each() {
        let images = vec![gradient_image(64)];
        let opts = BatchOptions {
            h_crops: 2,
            crop_size: 32,
            seed: 1,
            aggregate_layers: None,
            window_side: None,
        };
        let batch = assemble_batch(&images, &[55.0], &teacher(), &opts).unwrap();
        let mut buf = Vec::new();
        batch.dump_records_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["t"], 1);
        assert_eq!(first["h"], "1");
        let last: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(last["h"], "s");
        assert_eq!(last["role"], "saliency");
    }
}

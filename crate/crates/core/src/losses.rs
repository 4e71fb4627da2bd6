//! Contrastive and regression objectives with auditable intermediate terms.
//! Every anchor is a random crop; its positive is the same image's saliency
//! crop, its negatives are the other random crops of the batch. The
//! denominator excludes the positive term by default, which can drive a
//! per-anchor loss negative; `include_positive_in_denominator` restores the
//! conventional form for comparison runs.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::sampling::{enumerate_pairs, CropIndex};
use crate::scalar::{c, Scalar};

pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    pub t_images: usize,
    pub h_crops: usize,
    pub tau: f64,
    /// Image-major: per image, crops 1..=H then the saliency embedding.
    features: Vec<Array1<T>>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(
        t_images: usize,
        h_crops: usize,
        tau: f64,
        features: Vec<Array1<T>>,
    ) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature {tau} must be positive"
            )));
        }
        let expected = t_images * (h_crops + 1);
        if features.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} embeddings for a {t_images}x{h_crops} batch, got {}",
                features.len()
            )));
        }
        let dim = features.first().map(|f| f.len()).unwrap_or(0);
        for (i, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::shape(
                    "embedding batch",
                    format!("dimension {dim}"),
                    format!("dimension {} at position {i}", f.len()),
                ));
            }
            let norm = f.iter().map(|&v| v * v).sum::<T>().sqrt().to_f64_lossy();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "embedding {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self {
            t_images,
            h_crops,
            tau,
            features,
        })
    }

    pub fn position(&self, t: usize, index: CropIndex) -> usize {
        let base = (t - 1) * (self.h_crops + 1);
        match index {
            CropIndex::Random(h) => base + h - 1,
            CropIndex::Saliency => base + self.h_crops,
        }
    }

    pub fn feature(&self, t: usize, index: CropIndex) -> &Array1<T> {
        &self.features[self.position(t, index)]
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn exp_sim(&self, a: &Array1<T>, b: &Array1<T>) -> T {
        (a.dot(b) / c::<T>(self.tau)).exp()
    }
}

/// Sum over the anchor image's other random crops of exp(f.f~/tau).
pub fn p_intra<T: Scalar>(batch: &EmbeddingBatch<T>, anchor: (usize, usize)) -> Result<T> {
    let sets = enumerate_pairs(batch.t_images, batch.h_crops, anchor)?;
    let f = batch.feature(anchor.0, CropIndex::Random(anchor.1));
    let mut total = T::zero();
    for (t, h) in sets.intra_negatives {
        total = total + batch.exp_sim(f, batch.feature(t, CropIndex::Random(h)));
    }
    Ok(total)
}

/// Sum over every other image's random crops of exp(f.f'/tau).
pub fn p_inter<T: Scalar>(batch: &EmbeddingBatch<T>, anchor: (usize, usize)) -> Result<T> {
    let sets = enumerate_pairs(batch.t_images, batch.h_crops, anchor)?;
    let f = batch.feature(anchor.0, CropIndex::Random(anchor.1));
    let mut total = T::zero();
    for (t, h) in sets.inter_negatives {
        total = total + batch.exp_sim(f, batch.feature(t, CropIndex::Random(h)));
    }
    Ok(total)
}

/// Sum over other images' saliency crops; only used when the study flag
/// pulls them into the inter-class pool.
pub fn p_other_saliency<T: Scalar>(batch: &EmbeddingBatch<T>, anchor: (usize, usize)) -> Result<T> {
    let (t, h) = anchor;
    if t == 0 || t > batch.t_images || h == 0 || h > batch.h_crops {
        return Err(Error::OutOfRange(format!("anchor ({t},{h})")));
    }
    let f = batch.feature(t, CropIndex::Random(h));
    let mut total = T::zero();
    for other_t in (1..=batch.t_images).filter(|&x| x != t) {
        total = total + batch.exp_sim(f, batch.feature(other_t, CropIndex::Saliency));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InfoNceOptions {
    /// Adds the positive term to the denominator (conventional InfoNCE).
    pub include_positive_in_denominator: bool,
    /// Adds other images' saliency embeddings to the inter-class pool.
    pub include_other_saliency: bool,
    /// Sum anchors within an image instead of averaging them.
    pub sum_anchors_per_image: bool,
    /// Drops same-image negatives from the denominator (baseline
    /// contrastive ablation); excluded terms are reported as zero.
    pub exclude_intra: bool,
}

impl Default for InfoNceOptions {
    fn default() -> Self {
        Self {
            include_positive_in_denominator: false,
            include_other_saliency: false,
            sum_anchors_per_image: false,
            exclude_intra: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerAnchorRecord<T> {
    pub anchor: (usize, usize),
    pub numerator: T,
    pub p_intra: T,
    pub p_inter: T,
    pub loss: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceResult<T> {
    /// Mean over all T*H anchors.
    pub mean: T,
    /// Per-image contrastive term (anchor mean, or sum under the flag).
    pub per_image: Vec<T>,
    pub per_anchor: Vec<PerAnchorRecord<T>>,
}

pub fn info_nce<T: Scalar>(batch: &EmbeddingBatch<T>) -> Result<InfoNceResult<T>> {
    info_nce_opts(batch, &InfoNceOptions::default())
}

pub fn info_nce_opts<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    opts: &InfoNceOptions,
) -> Result<InfoNceResult<T>> {
    Ok(info_nce_impl(batch, opts, None)?)
}

/// Also returns d(sum over images of the per-image term)/d(embedding), in
/// batch position order, treating every embedding as a free vector.
pub fn info_nce_with_grad<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    opts: &InfoNceOptions,
) -> Result<(InfoNceResult<T>, Vec<Array1<T>>)> {
    let dim = batch.features.first().map(|f| f.len()).unwrap_or(0);
    let mut grads = vec![Array1::zeros(dim); batch.len()];
    let result = info_nce_impl(batch, opts, Some(&mut grads))?;
    Ok((result, grads))
}

fn info_nce_impl<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    opts: &InfoNceOptions,
    mut grads: Option<&mut Vec<Array1<T>>>,
) -> Result<InfoNceResult<T>> {
    let (t_images, h_crops) = (batch.t_images, batch.h_crops);
    if t_images == 0 || h_crops == 0 {
        return Err(Error::InvalidConfig(
            "contrastive batch needs at least one image and one random crop".into(),
        ));
    }
    let no_negatives = t_images == 1 && (h_crops == 1 || opts.exclude_intra);
    if no_negatives && !opts.include_positive_in_denominator {
        return Err(Error::InvalidConfig(
            "batch shape leaves the contrastive denominator empty".into(),
        ));
    }
    let inv_tau = T::one() / c::<T>(batch.tau);
    let anchor_weight = if opts.sum_anchors_per_image {
        T::one()
    } else {
        T::one() / c::<T>(h_crops as f64)
    };

    let mut per_image = Vec::with_capacity(t_images);
    let mut per_anchor = Vec::with_capacity(t_images * h_crops);
    let mut anchor_sum = T::zero();
    for t in 1..=t_images {
        let mut image_sum = T::zero();
        for h in 1..=h_crops {
            let anchor_pos = batch.position(t, CropIndex::Random(h));
            let f = &batch.features[anchor_pos];
            let positive_pos = batch.position(t, CropIndex::Saliency);
            let f_pos = &batch.features[positive_pos];
            let numerator = batch.exp_sim(f, f_pos);

            // (position, exp term) for every denominator entry.
            let mut denom_terms: Vec<(usize, T)> = Vec::new();
            let mut intra = T::zero();
            if !opts.exclude_intra {
                for other_h in (1..=h_crops).filter(|&x| x != h) {
                    let pos = batch.position(t, CropIndex::Random(other_h));
                    let e = batch.exp_sim(f, &batch.features[pos]);
                    intra = intra + e;
                    denom_terms.push((pos, e));
                }
            }
            let mut inter = T::zero();
            for other_t in (1..=t_images).filter(|&x| x != t) {
                for other_h in 1..=h_crops {
                    let pos = batch.position(other_t, CropIndex::Random(other_h));
                    let e = batch.exp_sim(f, &batch.features[pos]);
                    inter = inter + e;
                    denom_terms.push((pos, e));
                }
                if opts.include_other_saliency {
                    let pos = batch.position(other_t, CropIndex::Saliency);
                    let e = batch.exp_sim(f, &batch.features[pos]);
                    inter = inter + e;
                    denom_terms.push((pos, e));
                }
            }
            let mut denominator = intra + inter;
            if opts.include_positive_in_denominator {
                denominator = denominator + numerator;
                denom_terms.push((positive_pos, numerator));
            }
            if !(denominator > T::zero()) {
                return Err(Error::Numerical {
                    context: format!("contrastive anchor ({t},{h})"),
                    detail: format!("denominator {denominator} not positive"),
                });
            }
            let loss = -(numerator / denominator).ln();
            per_anchor.push(PerAnchorRecord {
                anchor: (t, h),
                numerator,
                p_intra: intra,
                p_inter: inter,
                loss,
            });
            image_sum = image_sum + loss;
            anchor_sum = anchor_sum + loss;

            if let Some(grads) = grads.as_deref_mut() {
                // d loss / d f = -f_pos/tau + sum_i w_i f_i / tau,
                // w_i = exp_i / denominator; each negative i gets w_i f/tau,
                // the positive gets -f/tau (plus its w term under the flag).
                let scale = anchor_weight;
                let mut df: Array1<T> = f_pos.mapv(|v| -v * inv_tau);
                for &(pos, e) in &denom_terms {
                    let w = e / denominator;
                    df = df + &batch.features[pos].mapv(|v| v * w * inv_tau);
                    let dn = f.mapv(|v| v * w * inv_tau * scale);
                    grads[pos] = &grads[pos] + &dn;
                }
                grads[positive_pos] = &grads[positive_pos] + &f.mapv(|v| -v * inv_tau * scale);
                grads[anchor_pos] = &grads[anchor_pos] + &df.mapv(|v| v * scale);
            }
        }
        per_image.push(image_sum * anchor_weight);
    }
    let mean = anchor_sum / c::<T>((t_images * h_crops) as f64);
    Ok(InfoNceResult {
        mean,
        per_image,
        per_anchor,
    })
}

/// Sum of absolute errors over aligned prediction/target lists.
pub fn l1_loss<T: Scalar>(predictions: &[T], targets: &[T]) -> Result<T> {
    if predictions.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| (p - y).abs())
        .sum())
}

/// Subgradient of `l1_loss` in the predictions (sign of the residual, 0 at
/// exact agreement).
pub fn l1_grad<T: Scalar>(predictions: &[T], targets: &[T]) -> Result<Vec<T>> {
    if predictions.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            if p > y {
                T::one()
            } else if p < y {
                -T::one()
            } else {
                T::zero()
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    /// Sum of per-image contrastive terms.
    pub info_nce: T,
    /// Sum of per-image regression terms.
    pub l1: T,
    /// (1 - alpha) * l1 + alpha * info_nce.
    pub total: T,
    pub alpha: f64,
    pub per_anchor: Vec<PerAnchorRecord<T>>,
}

/// Combines aligned per-image term lists into the training objective.
pub fn total_loss<T: Scalar>(
    l1_terms: &[T],
    info_terms: &[T],
    alpha: f64,
) -> Result<LossBreakdown<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} must lie in [0,1]"
        )));
    }
    if l1_terms.len() != info_terms.len() {
        return Err(Error::InvalidArgument(format!(
            "{} regression terms vs {} contrastive terms",
            l1_terms.len(),
            info_terms.len()
        )));
    }
    let l1: T = l1_terms.iter().cloned().sum();
    let info: T = info_terms.iter().cloned().sum();
    let total = c::<T>(1.0 - alpha) * l1 + c::<T>(alpha) * info;
    Ok(LossBreakdown {
        info_nce: info,
        l1,
        total,
        alpha,
        per_anchor: Vec::new(),
    })
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn with_anchors(mut self, per_anchor: Vec<PerAnchorRecord<T>>) -> Self {
        self.per_anchor = per_anchor;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;

    use crate::rng::stream;

    fn unit(v: Vec<f64>) -> Array1<f64> {
        let a = Array1::from_vec(v);
        let n = a.dot(&a).sqrt();
        a.mapv(|x| x / n)
    }

    fn random_batch(t: usize, h: usize, dim: usize, tau: f64, seed: u64) -> EmbeddingBatch<f64> {
        let mut rng = stream(seed, &[50]);
        let features = (0..t * (h + 1))
            .map(|_| unit((0..dim).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect();
        EmbeddingBatch::new(t, h, tau, features).unwrap()
    }

    fn identical_batch(t: usize, h: usize, tau: f64) -> EmbeddingBatch<f64> {
        let f = unit(vec![1.0, 2.0, -0.5, 0.25]);
        EmbeddingBatch::new(t, h, tau, vec![f; t * (h + 1)]).unwrap()
    }

    #[test]
    fn batch_construction_validates() {
        let f = unit(vec![1.0, 0.0]);
        assert!(EmbeddingBatch::new(1, 2, 1.0, vec![f.clone(); 3]).is_ok());
        assert!(EmbeddingBatch::new(1, 2, 0.0, vec![f.clone(); 3]).is_err());
        assert!(EmbeddingBatch::new(1, 2, 1.0, vec![f.clone(); 2]).is_err());
        let bad = Array1::from_vec(vec![1.0, 1.0]);
        assert!(EmbeddingBatch::new(1, 2, 1.0, vec![f.clone(), bad, f]).is_err());
    }

    #[test]
    fn p_intra_examples() {
        let single = identical_batch(1, 1, 1.0);
        assert_eq!(p_intra(&single, (1, 1)).unwrap(), 0.0);

        let batch = identical_batch(2, 3, 1.0);
        let two_e = 2.0 * std::f64::consts::E;
        assert!((p_intra(&batch, (1, 2)).unwrap() - two_e).abs() < 1e-12);
    }

    #[test]
    fn p_inter_examples() {
        let batch = identical_batch(1, 3, 1.0);
        assert_eq!(p_inter(&batch, (1, 1)).unwrap(), 0.0);

        let batch = identical_batch(2, 3, 1.0);
        let three_e = 3.0 * std::f64::consts::E;
        assert!((p_inter(&batch, (2, 1)).unwrap() - three_e).abs() < 1e-12);
    }

    #[test]
    fn p_terms_match_loop_oracle() {
        let batch = random_batch(3, 4, 6, 0.37, 7);
        for t in 1..=3 {
            for h in 1..=4 {
                let f = batch.feature(t, CropIndex::Random(h));
                let mut intra = 0.0;
                for other in (1..=4).filter(|&x| x != h) {
                    intra += (f.dot(batch.feature(t, CropIndex::Random(other))) / 0.37).exp();
                }
                let mut inter = 0.0;
                for ot in (1..=3).filter(|&x| x != t) {
                    for oh in 1..=4 {
                        inter += (f.dot(batch.feature(ot, CropIndex::Random(oh))) / 0.37).exp();
                    }
                }
                assert!((p_intra(&batch, (t, h)).unwrap() - intra).abs() < 1e-12);
                assert!((p_inter(&batch, (t, h)).unwrap() - inter).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_embeddings_give_log5() {
        let batch = identical_batch(2, 3, 1.0);
        let result = info_nce(&batch).unwrap();
        let expected = 5.0f64.ln();
        assert!((result.mean - expected).abs() < 1e-12);
        for record in &result.per_anchor {
            assert!((record.loss - expected).abs() < 1e-12);
        }
        assert_eq!(result.per_image.len(), 2);
        assert!((result.per_image[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn excluded_positive_can_go_negative() {
        let ex = unit(vec![1.0, 0.0]);
        let ey = unit(vec![0.0, 1.0]);
        let batch = EmbeddingBatch::new(1, 2, 1.0, vec![ex.clone(), ey, ex]).unwrap();
        let result = info_nce(&batch).unwrap();
        let first = &result.per_anchor[0];
        assert_eq!(first.anchor, (1, 1));
        assert!((first.loss - (-1.0)).abs() < 1e-15);
        assert!((first.numerator - std::f64::consts::E).abs() < 1e-12);
        assert!((first.p_intra - 1.0).abs() < 1e-15);
        assert_eq!(first.p_inter, 0.0);
    }

    #[test]
    fn matches_from_scratch_oracle() {
        let batch = random_batch(2, 3, 5, 0.8, 21);
        let result = info_nce(&batch).unwrap();
        // Independent recomputation, straight from the formulas.
        let mut total = 0.0;
        for t in 1..=2usize {
            for h in 1..=3usize {
                let f = batch.feature(t, CropIndex::Random(h));
                let fs = batch.feature(t, CropIndex::Saliency);
                let num = (f.dot(fs) / 0.8).exp();
                let mut denom = 0.0;
                for ot in 1..=2usize {
                    for oh in 1..=3usize {
                        if (ot, oh) != (t, h) {
                            denom += (f.dot(batch.feature(ot, CropIndex::Random(oh))) / 0.8).exp();
                        }
                    }
                }
                total += -(num / denom).ln();
            }
        }
        assert!((result.mean - total / 6.0).abs() < 1e-10);
    }

    #[test]
    fn singleton_batch_is_a_config_error() {
        let batch = identical_batch(1, 1, 1.0);
        assert!(matches!(info_nce(&batch), Err(Error::InvalidConfig(_))));
        let opts = InfoNceOptions {
            include_positive_in_denominator: true,
            ..Default::default()
        };
        let res = info_nce_opts(&batch, &opts).unwrap();
        assert!((res.mean - 0.0).abs() < 1e-12, "num/num = 1");
    }

    #[test]
    fn include_positive_gives_log6_on_identical() {
        let batch = identical_batch(2, 3, 1.0);
        let opts = InfoNceOptions {
            include_positive_in_denominator: true,
            ..Default::default()
        };
        let result = info_nce_opts(&batch, &opts).unwrap();
        assert!((result.mean - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn other_saliency_flag_enlarges_denominator() {
        let batch = identical_batch(2, 3, 1.0);
        let opts = InfoNceOptions {
            include_other_saliency: true,
            ..Default::default()
        };
        let result = info_nce_opts(&batch, &opts).unwrap();
        // Denominator gains one extra e per other image: -log(e/6e) = log 6.
        assert!((result.mean - 6.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exclude_intra_leaves_inter_only() {
        let batch = identical_batch(2, 3, 1.0);
        let opts = InfoNceOptions {
            exclude_intra: true,
            ..Default::default()
        };
        let result = info_nce_opts(&batch, &opts).unwrap();
        // Only the 3 inter terms remain: -log(e/3e) = log 3.
        assert!((result.mean - 3.0f64.ln()).abs() < 1e-12);
        assert_eq!(result.per_anchor[0].p_intra, 0.0);
        let single = identical_batch(1, 3, 1.0);
        assert!(info_nce_opts(&single, &opts).is_err());
    }

    #[test]
    fn invariant_under_common_permutations() {
        let batch = random_batch(3, 4, 6, 0.5, 33);
        let image_perm = [3usize, 1, 2];
        let crop_perm = [2usize, 4, 1, 3];
        let mut features = Vec::new();
        for t in 0..3 {
            for h in 0..4 {
                features.push(
                    batch
                        .feature(image_perm[t], CropIndex::Random(crop_perm[h]))
                        .clone(),
                );
            }
            features.push(batch.feature(image_perm[t], CropIndex::Saliency).clone());
        }
        let permuted = EmbeddingBatch::new(3, 4, 0.5, features).unwrap();
        let a = info_nce(&batch).unwrap();
        let b = info_nce(&permuted).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
    }

    #[test]
    fn large_tau_approaches_count_limit() {
        let batch = random_batch(3, 4, 6, 1e6, 44);
        let result = info_nce(&batch).unwrap();
        let expected = ((4 - 1 + (3 - 1) * 4) as f64).ln();
        for record in &result.per_anchor {
            assert!((record.loss - expected).abs() < 1e-4);
        }
    }

    #[test]
    fn per_anchor_records_are_consistent() {
        let batch = random_batch(2, 3, 5, 0.3, 55);
        let result = info_nce(&batch).unwrap();
        assert_eq!(result.per_anchor.len(), 6);
        for record in &result.per_anchor {
            let recomputed = -(record.numerator / (record.p_intra + record.p_inter)).ln();
            assert!((record.loss - recomputed).abs() < 1e-12);
        }
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l1_loss(&[2.0, 0.0], &[1.0, 3.0]).unwrap(), 4.0);
        assert!(l1_loss(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(
            l1_grad(&[2.0, 0.0, 5.0], &[1.0, 3.0, 5.0]).unwrap(),
            vec![1.0, -1.0, 0.0]
        );
    }

    #[test]
    fn total_loss_weighting() {
        let l1 = [2.0f64, 4.0];
        let info = [1.0f64, 3.0];
        let b = total_loss(&l1, &info, 0.5).unwrap();
        assert_eq!(b.total, 5.0);
        assert_eq!(b.l1, 6.0);
        assert_eq!(b.info_nce, 4.0);

        assert_eq!(total_loss(&l1, &info, 0.0).unwrap().total, 6.0);
        assert_eq!(total_loss(&l1, &info, 1.0).unwrap().total, 4.0);
        assert!(total_loss(&l1, &info, 1.5).is_err());
        assert!(total_loss(&l1, &info[..1], 0.5).is_err());

        let identity = (1.0 - 0.5) * b.l1 + 0.5 * b.info_nce;
        assert!((b.total - identity).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for opts in [
            InfoNceOptions::default(),
            InfoNceOptions {
                include_positive_in_denominator: true,
                ..Default::default()
            },
            InfoNceOptions {
                include_other_saliency: true,
                ..Default::default()
            },
            InfoNceOptions {
                sum_anchors_per_image: true,
                ..Default::default()
            },
            InfoNceOptions {
                exclude_intra: true,
                ..Default::default()
            },
        ] {
            let batch = random_batch(2, 3, 5, 0.6, 66);
            let (_, grads) = info_nce_with_grad(&batch, &opts).unwrap();
            let objective = |b: &EmbeddingBatch<f64>| -> f64 {
                info_nce_opts(b, &opts)
                    .unwrap()
                    .per_image
                    .iter()
                    .sum::<f64>()
            };
            let eps = 1e-6;
            for pos in 0..batch.len() {
                for d in 0..5 {
                    let mut plus = batch.clone();
                    plus.features[pos][d] += eps;
                    let mut minus = batch.clone();
                    minus.features[pos][d] -= eps;
                    let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                    let g = grads[pos][d];
                    let denom = g.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        ((g - fd).abs() / denom) < 1e-6,
                        "opts {opts:?} pos {pos} dim {d}: {g} vs {fd}"
                    );
                }
            }
        }
    }
}

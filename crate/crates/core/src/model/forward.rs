//! Whole-network forward pass with caching, plus the matching backward pass.
//! Gradients can flow in through the raw class feature, the unit-normalized
//! feature, the regression score, or any combination.

use ndarray::{s, Array1, Array2, Array3, Axis};

use super::layers::{gelu, gelu_grad, AttentionCache, MlpCache};
use super::{AttentionStack, EncodeOutput, ModelState, Params};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Run the cross-attention decoder and regression head.
    pub decoder: bool,
    /// Collect head-averaged attention matrices per encoder layer.
    pub attention: bool,
}

impl ForwardOptions {
    pub fn encode_only() -> Self {
        Self {
            decoder: false,
            attention: true,
        }
    }

    pub fn full() -> Self {
        Self {
            decoder: true,
            attention: true,
        }
    }

    pub fn training() -> Self {
        Self {
            decoder: true,
            attention: false,
        }
    }
}

struct EncoderLayerCache<T> {
    x_in: Array2<T>,
    attn: AttentionCache<T>,
    x_mid: Array2<T>,
    mlp: MlpCache<T>,
}

struct DecoderLayerCache<T> {
    q_in: Array2<T>,
    cross: AttentionCache<T>,
    q_mid: Array2<T>,
    mlp: MlpCache<T>,
}

pub(super) struct ForwardCache<T> {
    patches: Array2<T>,
    enc: Vec<EncoderLayerCache<T>>,
    final_ln_in: Array2<T>,
    memory: Array2<T>,
    dec: Vec<DecoderLayerCache<T>>,
    dec_ln_in: Option<Array2<T>>,
    head_in: Vec<Array2<T>>,
    head_pre: Vec<Array2<T>>,
}

/// Output of one crop's forward pass, retaining what backward needs.
pub struct CropForward<T> {
    pub class_feature: Array1<T>,
    pub unit_feature: Array1<T>,
    pub feature_norm: T,
    pub score: Option<T>,
    pub attention: Option<AttentionStack<T>>,
    cache: ForwardCache<T>,
}

/// Splits an `(H, W, C)` image into non-overlapping square patches, row-major
/// over the patch grid, each flattened row-major as `(py, px, c)`.
pub fn patchify<T: Scalar>(image: &Array3<T>, patch_size: usize) -> Array2<T> {
    let (h, w, ch) = image.dim();
    let rows = h / patch_size;
    let cols = w / patch_size;
    let mut out = Array2::zeros((rows * cols, patch_size * patch_size * ch));
    for gy in 0..rows {
        for gx in 0..cols {
            let mut col = 0;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for c in 0..ch {
                        out[[gy * cols + gx, col]] =
                            image[[gy * patch_size + py, gx * patch_size + px, c]];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// Returns the unit vector and the original Euclidean norm.
pub fn normalize_feature<T: Scalar>(feature: &Array1<T>) -> Result<(Array1<T>, T)> {
    let norm = feature.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !norm.is_finite() || norm <= T::zero() {
        return Err(Error::Numerical {
            context: "feature normalization".into(),
            detail: format!("feature norm {norm} must be finite and positive"),
        });
    }
    Ok((feature.mapv(|v| v / norm), norm))
}

impl<T: Scalar> ModelState<T> {
    pub fn forward(&self, image: &Array3<T>, opts: &ForwardOptions) -> Result<CropForward<T>> {
        let cfg = &self.config;
        let expected = (cfg.image_size, cfg.image_size, cfg.channels);
        if image.dim() != expected {
            return Err(Error::shape(
                "model input",
                format!("{expected:?}"),
                format!("{:?}", image.dim()),
            ));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }

        let p = &self.params;
        // [0,1] pixels carry a large shared DC component; centering keeps the
        // patch embeddings from all pointing the same way.
        let patches = patchify(image, cfg.patch_size).mapv(|v| (v - c::<T>(0.5)) * c::<T>(2.0));
        let embedded = p.patch_embed.forward(&patches);
        let mut tokens: Array2<T> = Array2::zeros((cfg.num_tokens(), cfg.embed_dim));
        tokens.row_mut(0).assign(&p.class_token.row(0));
        tokens.slice_mut(s![1.., ..]).assign(&embedded);
        tokens = tokens + &p.pos_embed;

        let mut enc = Vec::with_capacity(p.encoder.len());
        let mut attn_layers = Vec::new();
        let mut x = tokens;
        for layer in &p.encoder {
            let x_in = x;
            let ln1_out = layer.ln1.forward(&x_in);
            let (attn_out, attn_cache) = layer.attn.forward(&ln1_out, &ln1_out);
            let x_mid = &x_in + &attn_out;
            let ln2_out = layer.ln2.forward(&x_mid);
            let (mlp_out, mlp_cache) = layer.mlp.forward(&ln2_out);
            x = &x_mid + &mlp_out;
            if opts.attention {
                attn_layers.push(layer.attn.head_average(&attn_cache));
            }
            enc.push(EncoderLayerCache {
                x_in,
                attn: attn_cache,
                x_mid,
                mlp: mlp_cache,
            });
        }
        let final_ln_in = x;
        let memory = p.final_ln.forward(&final_ln_in);
        let class_feature = memory.row(0).to_owned();
        let (unit_feature, feature_norm) = normalize_feature(&class_feature)?;

        let mut dec = Vec::new();
        let mut dec_ln_in = None;
        let mut head_in = Vec::new();
        let mut head_pre = Vec::new();
        let mut score = None;
        if opts.decoder {
            let mut q = p.dec_query.clone();
            for layer in &p.decoder {
                let q_in = q;
                let lnq_out = layer.ln_q.forward(&q_in);
                let (cross_out, cross_cache) = layer.cross.forward(&lnq_out, &memory);
                let q_mid = &q_in + &cross_out;
                let lnf_out = layer.ln_f.forward(&q_mid);
                let (mlp_out, mlp_cache) = layer.mlp.forward(&lnf_out);
                q = &q_mid + &mlp_out;
                dec.push(DecoderLayerCache {
                    q_in,
                    cross: cross_cache,
                    q_mid,
                    mlp: mlp_cache,
                });
            }
            let mut z = p.dec_final_ln.forward(&q);
            dec_ln_in = Some(q);
            let last = p.head.len() - 1;
            for (i, lin) in p.head.iter().enumerate() {
                head_in.push(z.clone());
                let pre = lin.forward(&z);
                head_pre.push(pre.clone());
                z = if i < last { pre.mapv(gelu) } else { pre };
            }
            score = Some(z[[0, 0]]);
        }

        let attention = opts.attention.then(|| AttentionStack {
            layers: attn_layers,
        });
        Ok(CropForward {
            class_feature,
            unit_feature,
            feature_norm,
            score,
            attention,
            cache: ForwardCache {
                patches,
                enc,
                final_ln_in,
                memory,
                dec,
                dec_ln_in,
                head_in,
                head_pre,
            },
        })
    }

    /// Feature path only, with attention maps for saliency.
    pub fn encode(&self, image: &Array3<T>) -> Result<EncodeOutput<T>> {
        let fwd = self.forward(image, &ForwardOptions::encode_only())?;
        Ok(EncodeOutput {
            class_feature: fwd.class_feature,
            unit_feature: fwd.unit_feature,
            attention: fwd.attention.expect("attention requested"),
        })
    }

    /// Full path down to the scalar quality score.
    pub fn predict_quality(&self, image: &Array3<T>) -> Result<T> {
        let fwd = self.forward(image, &ForwardOptions::training())?;
        Ok(fwd.score.expect("decoder requested"))
    }

    /// Accumulates parameter gradients for one crop into `grads`.
    ///
    /// `d_class` is dL/d(class_feature), `d_unit` is dL/d(unit_feature) and
    /// is pulled back through the normalization, `d_score` is dL/d(score).
    pub fn backward(
        &self,
        fwd: &CropForward<T>,
        d_class: Option<&Array1<T>>,
        d_unit: Option<&Array1<T>>,
        d_score: Option<T>,
        grads: &mut Params<T>,
    ) -> Result<()> {
        let cfg = &self.config;
        let p = &self.params;
        let cache = &fwd.cache;
        let mut d_memory: Array2<T> = Array2::zeros(cache.memory.raw_dim());

        if let Some(ds) = d_score {
            if fwd.score.is_none() {
                return Err(Error::InvalidArgument(
                    "score gradient given but the forward pass skipped the decoder".into(),
                ));
            }
            let mut dz = Array2::from_elem((1, 1), ds);
            let last = p.head.len() - 1;
            for i in (0..p.head.len()).rev() {
                let dpre = if i < last {
                    &dz * &cache.head_pre[i].mapv(gelu_grad)
                } else {
                    dz.clone()
                };
                dz = p.head[i].backward(&cache.head_in[i], &dpre, &mut grads.head[i]);
            }
            let ln_in = cache.dec_ln_in.as_ref().expect("decoder cache present");
            let mut dq = p.dec_final_ln.backward(ln_in, &dz, &mut grads.dec_final_ln);
            for (i, layer) in p.decoder.iter().enumerate().rev() {
                let lc = &cache.dec[i];
                let d_lnf_out = layer.mlp.backward(&lc.mlp, &dq, &mut grads.decoder[i].mlp);
                let d_q_mid = &dq
                    + &layer
                        .ln_f
                        .backward(&lc.q_mid, &d_lnf_out, &mut grads.decoder[i].ln_f);
                let (d_lnq_out, d_mem) =
                    layer
                        .cross
                        .backward(&lc.cross, &d_q_mid, &mut grads.decoder[i].cross);
                d_memory = d_memory + &d_mem;
                dq = &d_q_mid
                    + &layer
                        .ln_q
                        .backward(&lc.q_in, &d_lnq_out, &mut grads.decoder[i].ln_q);
            }
            grads.dec_query = &grads.dec_query + &dq;
        }

        let mut d_class_total: Array1<T> = Array1::zeros(cfg.embed_dim);
        if let Some(dc) = d_class {
            d_class_total = d_class_total + dc;
        }
        if let Some(du) = d_unit {
            let f = &fwd.unit_feature;
            let dot = f.iter().zip(du.iter()).map(|(&a, &b)| a * b).sum::<T>();
            let inv = T::one() / fwd.feature_norm;
            for j in 0..cfg.embed_dim {
                d_class_total[j] = d_class_total[j] + (du[j] - f[j] * dot) * inv;
            }
        }
        for j in 0..cfg.embed_dim {
            d_memory[[0, j]] = d_memory[[0, j]] + d_class_total[j];
        }

        let d_final_in = p
            .final_ln
            .backward(&cache.final_ln_in, &d_memory, &mut grads.final_ln);
        let mut dx = d_final_in;
        for (i, layer) in p.encoder.iter().enumerate().rev() {
            let lc = &cache.enc[i];
            let d_ln2_out = layer.mlp.backward(&lc.mlp, &dx, &mut grads.encoder[i].mlp);
            let d_x_mid = &dx
                + &layer
                    .ln2
                    .backward(&lc.x_mid, &d_ln2_out, &mut grads.encoder[i].ln2);
            let (d_q_side, d_m_side) =
                layer
                    .attn
                    .backward(&lc.attn, &d_x_mid, &mut grads.encoder[i].attn);
            let d_ln1_out = d_q_side + d_m_side;
            dx = &d_x_mid
                + &layer
                    .ln1
                    .backward(&lc.x_in, &d_ln1_out, &mut grads.encoder[i].ln1);
        }

        grads.pos_embed = &grads.pos_embed + &dx;
        let d_class_token = dx.row(0).to_owned().insert_axis(Axis(0));
        grads.class_token = &grads.class_token + &d_class_token;
        let d_embedded = dx.slice(s![1.., ..]).to_owned();
        p.patch_embed
            .backward(&cache.patches, &d_embedded, &mut grads.patch_embed);
        Ok(())
    }
}

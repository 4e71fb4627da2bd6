//! Tiny vision transformer trained from scratch: patch embedding, pre-norm
//! encoder blocks, a cross-attention decoder head for quality regression, and
//! per-layer head-averaged attention maps for saliency.

mod forward;
mod gradcheck;
pub mod layers;

pub use forward::{normalize_feature, patchify, CropForward, ForwardOptions};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{labels, stream, truncated_normal};
use crate::scalar::{c, Scalar};
use layers::{AttentionParams, LayerNormParams, LinearParams, MlpParams};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default = "default_decoder_layers")]
    pub decoder_layers: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub mlp_head_dims: Vec<usize>,
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}

fn default_decoder_layers() -> usize {
    1
}

fn default_mlp_ratio() -> usize {
    4
}

impl ModelConfig {
    /// Small default used by the bundled experiments.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            decoder_layers: 1,
            mlp_ratio: 4,
            mlp_head_dims: vec![32, 1],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::InvalidConfig(detail));
        if self.image_size == 0 || self.patch_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return fail("embed_dim, num_layers and num_heads must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "num_heads {} must divide embed_dim {}",
                self.num_heads, self.embed_dim
            ));
        }
        if self.decoder_layers == 0 || self.mlp_ratio == 0 {
            return fail("decoder_layers and mlp_ratio must be positive".into());
        }
        if self.mlp_head_dims.is_empty() {
            return fail("mlp_head_dims must not be empty".into());
        }
        if *self.mlp_head_dims.last().unwrap() != 1 {
            return fail(format!(
                "mlp_head_dims must end in 1, got {:?}",
                self.mlp_head_dims
            ));
        }
        if self.mlp_head_dims.iter().any(|&d| d == 0) {
            return fail("mlp_head_dims entries must be positive".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Per-layer head-averaged attention matrices, one `(tokens, tokens)` matrix
/// per encoder layer, ordered from the first layer to the last.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T> {
    pub layers: Vec<Array2<T>>,
}

impl<T: Scalar> AttentionStack<T> {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Largest deviation of any row sum from one, across all layers.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for layer in &self.layers {
            for row in layer.outer_iter() {
                let err = (row.sum().to_f64_lossy() - 1.0).abs();
                worst = worst.max(err);
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
pub struct EncodeOutput<T> {
    pub class_feature: Array1<T>,
    pub unit_feature: Array1<T>,
    pub attention: AttentionStack<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub ln1: LayerNormParams<T>,
    pub attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp: MlpParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams<T> {
    pub ln_q: LayerNormParams<T>,
    pub cross: AttentionParams<T>,
    pub ln_f: LayerNormParams<T>,
    pub mlp: MlpParams<T>,
}

/// All learnable arrays. Every parameter is a 2-d array so checkpointing,
/// optimizers and the EMA update can treat them uniformly by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub patch_embed: LinearParams<T>,
    pub class_token: Array2<T>, // (1, embed_dim)
    pub pos_embed: Array2<T>,   // (tokens, embed_dim)
    pub encoder: Vec<EncoderLayerParams<T>>,
    pub final_ln: LayerNormParams<T>,
    pub dec_query: Array2<T>, // (1, embed_dim)
    pub decoder: Vec<DecoderLayerParams<T>>,
    pub dec_final_ln: LayerNormParams<T>,
    pub head: Vec<LinearParams<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let heads = config.num_heads;
        let hidden = config.mlp_hidden();
        let encoder = (0..config.num_layers)
            .map(|_| EncoderLayerParams {
                ln1: LayerNormParams::zeros(d),
                attn: AttentionParams::zeros(d, heads),
                ln2: LayerNormParams::zeros(d),
                mlp: MlpParams::zeros(d, hidden),
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayerParams {
                ln_q: LayerNormParams::zeros(d),
                cross: AttentionParams::zeros(d, heads),
                ln_f: LayerNormParams::zeros(d),
                mlp: MlpParams::zeros(d, hidden),
            })
            .collect();
        let mut head = Vec::new();
        let mut prev = d;
        for &width in &config.mlp_head_dims {
            head.push(LinearParams::zeros(prev, width));
            prev = width;
        }
        Self {
            patch_embed: LinearParams::zeros(config.patch_dim(), d),
            class_token: Array2::zeros((1, d)),
            pos_embed: Array2::zeros((config.num_tokens(), d)),
            encoder,
            final_ln: LayerNormParams::zeros(d),
            dec_query: Array2::zeros((1, d)),
            decoder,
            dec_final_ln: LayerNormParams::zeros(d),
            head,
        }
    }

    /// Named references to every array, in a fixed order. The order defines
    /// the initialization stream and the optimizer/EMA pairing, so it must
    /// stay stable.
    pub fn named_arrays(&self) -> Vec<(String, &Array2<T>)> {
        let mut out: Vec<(String, &Array2<T>)> = Vec::new();
        out.push(("patch_embed.w".into(), &self.patch_embed.w));
        out.push(("patch_embed.b".into(), &self.patch_embed.b));
        out.push(("class_token".into(), &self.class_token));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, layer) in self.encoder.iter().enumerate() {
            push_block(
                &mut out,
                &format!("encoder.{i}"),
                &layer.ln1,
                &layer.attn,
                &layer.ln2,
                &layer.mlp,
                "ln1",
                "attn",
                "ln2",
            );
        }
        out.push(("final_ln.gamma".into(), &self.final_ln.gamma));
        out.push(("final_ln.beta".into(), &self.final_ln.beta));
        out.push(("decoder.query".into(), &self.dec_query));
        for (i, layer) in self.decoder.iter().enumerate() {
            push_block(
                &mut out,
                &format!("decoder.{i}"),
                &layer.ln_q,
                &layer.cross,
                &layer.ln_f,
                &layer.mlp,
                "ln_q",
                "cross",
                "ln_f",
            );
        }
        out.push(("decoder.final_ln.gamma".into(), &self.dec_final_ln.gamma));
        out.push(("decoder.final_ln.beta".into(), &self.dec_final_ln.beta));
        for (i, layer) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.w"), &layer.w));
            out.push((format!("head.{i}.b"), &layer.b));
        }
        out
    }

    /// Mutable counterpart of [`named_arrays`], same order.
    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut out: Vec<(String, &mut Array2<T>)> = Vec::new();
        out.push(("patch_embed.w".into(), &mut self.patch_embed.w));
        out.push(("patch_embed.b".into(), &mut self.patch_embed.b));
        out.push(("class_token".into(), &mut self.class_token));
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            push_block_mut(
                &mut out,
                &format!("encoder.{i}"),
                &mut layer.ln1,
                &mut layer.attn,
                &mut layer.ln2,
                &mut layer.mlp,
                "ln1",
                "attn",
                "ln2",
            );
        }
        out.push(("final_ln.gamma".into(), &mut self.final_ln.gamma));
        out.push(("final_ln.beta".into(), &mut self.final_ln.beta));
        out.push(("decoder.query".into(), &mut self.dec_query));
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            push_block_mut(
                &mut out,
                &format!("decoder.{i}"),
                &mut layer.ln_q,
                &mut layer.cross,
                &mut layer.ln_f,
                &mut layer.mlp,
                "ln_q",
                "cross",
                "ln_f",
            );
        }
        out.push((
            "decoder.final_ln.gamma".into(),
            &mut self.dec_final_ln.gamma,
        ));
        out.push(("decoder.final_ln.beta".into(), &mut self.dec_final_ln.beta));
        for (i, layer) in self.head.iter_mut().enumerate() {
            out.push((format!("head.{i}.w"), &mut layer.w));
            out.push((format!("head.{i}.b"), &mut layer.b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Name of the first array containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named_arrays()
            .into_iter()
            .find(|(_, a)| a.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }
}

fn push_block<'a, T: Scalar>(
    out: &mut Vec<(String, &'a Array2<T>)>,
    prefix: &str,
    ln_a: &'a LayerNormParams<T>,
    attn: &'a AttentionParams<T>,
    ln_b: &'a LayerNormParams<T>,
    mlp: &'a MlpParams<T>,
    ln_a_name: &str,
    attn_name: &str,
    ln_b_name: &str,
) {
    out.push((format!("{prefix}.{ln_a_name}.gamma"), &ln_a.gamma));
    out.push((format!("{prefix}.{ln_a_name}.beta"), &ln_a.beta));
    for (proj, lin) in [
        ("wq", &attn.wq),
        ("wk", &attn.wk),
        ("wv", &attn.wv),
        ("wo", &attn.wo),
    ] {
        out.push((format!("{prefix}.{attn_name}.{proj}.w"), &lin.w));
        out.push((format!("{prefix}.{attn_name}.{proj}.b"), &lin.b));
    }
    out.push((format!("{prefix}.{ln_b_name}.gamma"), &ln_b.gamma));
    out.push((format!("{prefix}.{ln_b_name}.beta"), &ln_b.beta));
    out.push((format!("{prefix}.mlp.fc1.w"), &mlp.fc1.w));
    out.push((format!("{prefix}.mlp.fc1.b"), &mlp.fc1.b));
    out.push((format!("{prefix}.mlp.fc2.w"), &mlp.fc2.w));
    out.push((format!("{prefix}.mlp.fc2.b"), &mlp.fc2.b));
}

fn push_block_mut<'a, T: Scalar>(
    out: &mut Vec<(String, &'a mut Array2<T>)>,
    prefix: &str,
    ln_a: &'a mut LayerNormParams<T>,
    attn: &'a mut AttentionParams<T>,
    ln_b: &'a mut LayerNormParams<T>,
    mlp: &'a mut MlpParams<T>,
    ln_a_name: &str,
    attn_name: &str,
    ln_b_name: &str,
) {
    out.push((format!("{prefix}.{ln_a_name}.gamma"), &mut ln_a.gamma));
    out.push((format!("{prefix}.{ln_a_name}.beta"), &mut ln_a.beta));
    for (proj, lin) in [
        ("wq", &mut attn.wq),
        ("wk", &mut attn.wk),
        ("wv", &mut attn.wv),
        ("wo", &mut attn.wo),
    ] {
        out.push((format!("{prefix}.{attn_name}.{proj}.w"), &mut lin.w));
        out.push((format!("{prefix}.{attn_name}.{proj}.b"), &mut lin.b));
    }
    out.push((format!("{prefix}.{ln_b_name}.gamma"), &mut ln_b.gamma));
    out.push((format!("{prefix}.{ln_b_name}.beta"), &mut ln_b.beta));
    out.push((format!("{prefix}.mlp.fc1.w"), &mut mlp.fc1.w));
    out.push((format!("{prefix}.mlp.fc1.b"), &mut mlp.fc1.b));
    out.push((format!("{prefix}.mlp.fc2.w"), &mut mlp.fc2.w));
    out.push((format!("{prefix}.mlp.fc2.b"), &mut mlp.fc2.b));
}

/// A model plus its configuration and a monotone version counter that is
/// bumped on every in-place parameter update.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub version: u64,
}

impl<T: Scalar> ModelState<T> {
    /// Builds a freshly initialized model. Weight matrices and embeddings are
    /// drawn from a truncated normal (std 0.02, clipped at two sigma); biases
    /// and norm offsets start at zero, norm scales at one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let mut rng = stream(config.seed, &[labels::INIT]);
        for (name, array) in params.named_arrays_mut() {
            if name.ends_with(".b") || name.ends_with(".beta") {
                continue; // stays zero
            }
            if name.ends_with(".gamma") {
                array.fill(T::one());
                continue;
            }
            for v in array.iter_mut() {
                *v = c::<T>(truncated_normal(&mut rng, INIT_STD));
            }
        }
        Ok(Self {
            config,
            params,
            version: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }
}

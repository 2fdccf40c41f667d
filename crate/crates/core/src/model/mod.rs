//! Context encoder, EMA target encoder, predictor and mask token.

mod encoder;
mod objective;
mod posembed;
mod predictor;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use encoder::{Encoder, EncoderCache};
pub use objective::{Gradients, LossReport};
pub use posembed::sincos_2d;
pub use predictor::{PredictionRequest, Predictor, PredictorCache};

use crate::data::{patchify, ImageTensor, PatchSequence};
use crate::error::{Error, FieldError, Result};
use crate::nn::{slice2, Parameters};
use crate::rng::{derive_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: f64,
    pub input_bands: usize,
    /// Square input side in pixels; fixes the patch grid.
    pub image_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            depth: 4,
            n_heads: 4,
            patch_size: 8,
            mlp_ratio: 4.0,
            input_bands: 3,
            image_size: 32,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size.max(1);
        (g, g)
    }

    pub fn n_tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn token_dim(&self) -> usize {
        self.input_bands * self.patch_size * self.patch_size
    }

    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let f = |n: &str| format!("{prefix}{n}");
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            errs.push(FieldError::new(f("embed_dim"), "must be a positive multiple of 4"));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads.max(1) != 0 {
            errs.push(FieldError::new(f("n_heads"), "must divide embed_dim"));
        }
        if self.depth == 0 {
            errs.push(FieldError::new(f("depth"), "must be at least 1"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            errs.push(FieldError::new(f("mlp_ratio"), "must be positive"));
        }
        if self.input_bands == 0 {
            errs.push(FieldError::new(f("input_bands"), "must be at least 1"));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            errs.push(FieldError::new(
                f("image_size"),
                "must be a positive multiple of patch_size",
            ));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            depth: 4,
            n_heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl PredictorConfig {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let f = |n: &str| format!("{prefix}{n}");
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            errs.push(FieldError::new(f("embed_dim"), "must be a positive multiple of 4"));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads.max(1) != 0 {
            errs.push(FieldError::new(f("n_heads"), "must divide embed_dim"));
        }
        if self.depth == 0 {
            errs.push(FieldError::new(f("depth"), "must be at least 1"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            errs.push(FieldError::new(f("mlp_ratio"), "must be positive"));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
}

impl ModelConfig {
    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = self.encoder.field_errors(&format!("{prefix}encoder."));
        errs.extend(self.predictor.field_errors(&format!("{prefix}predictor.")));
        errs
    }
}

/// Which encoder produces embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Context,
    #[default]
    Target,
}

/// Embeddings of selected tokens; row `i` belongs to token `index_map[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub vectors: Array2<f64>,
    pub index_map: Vec<usize>,
}

impl TokenEmbeddings {
    /// Rows for the given token indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<TokenEmbeddings> {
        let mut rows = Vec::with_capacity(indices.len());
        for &t in indices {
            let r = self
                .index_map
                .iter()
                .position(|&i| i == t)
                .ok_or_else(|| Error::Contract(format!("token {t} was not embedded")))?;
            rows.push(r);
        }
        Ok(TokenEmbeddings {
            vectors: self.vectors.select(Axis(0), &rows),
            index_map: indices.to_vec(),
        })
    }

    pub fn mean(&self) -> Array1<f64> {
        self.vectors.mean_axis(Axis(0)).expect("non-empty embeddings")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    /// Trained by gradient descent.
    pub context: Encoder,
    /// Exponential moving average of `context`; never receives gradients.
    pub target: Encoder,
    /// Includes the shared mask token.
    pub predictor: Predictor,
    /// Fixed sinusoidal table at encoder width, one row per token.
    pub pos_embed: Array2<f64>,
    /// The same table at predictor width.
    pub predictor_pos_embed: Array2<f64>,
}

impl ModelState {
    /// Fresh model; the target encoder starts as an exact copy of the context encoder.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let errs = config.field_errors("");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Self::build(config, seed)
    }

    /// Like [`ModelState::new`] but only checks what construction needs,
    /// so a zero-depth (identity) stack is allowed.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let grid = config.encoder.grid();
        let pos_embed = sincos_2d(config.encoder.embed_dim, grid)?;
        let predictor_pos_embed = sincos_2d(config.predictor.embed_dim, grid)?;
        for (dim, heads, what) in [
            (config.encoder.embed_dim, config.encoder.n_heads, "encoder.n_heads"),
            (config.predictor.embed_dim, config.predictor.n_heads, "predictor.n_heads"),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::config(what, "must divide embed_dim"));
            }
        }
        let mut rng = derive_rng(seed, Stream::Init, 0, 0);
        let context = Encoder::new(&config.encoder, &mut rng);
        let target = context.clone();
        let predictor = Predictor::new(&config.encoder, &config.predictor, &mut rng);
        Ok(Self {
            config,
            context,
            target,
            predictor,
            pos_embed,
            predictor_pos_embed,
        })
    }

    pub fn mask_token(&self) -> &Array1<f64> {
        &self.predictor.mask_token
    }

    pub fn encoder(&self, which: EncoderKind) -> &Encoder {
        match which {
            EncoderKind::Context => &self.context,
            EncoderKind::Target => &self.target,
        }
    }

    /// Parameters updated by the optimizer, in registry order.
    pub fn trainable_params(&self) -> Vec<(String, &[f64])> {
        let mut out = self.context.named_params("context");
        out.extend(self.predictor.named_params("predictor"));
        out
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.context.params_mut();
        out.extend(self.predictor.params_mut());
        out
    }

    /// Every stored tensor, including the target encoder and positional tables.
    pub fn all_params(&self) -> Vec<(String, &[f64])> {
        let mut out = self.trainable_params();
        out.extend(self.target.named_params("target"));
        out.push(("pos_embed".into(), slice2(&self.pos_embed)));
        out.push(("predictor_pos_embed".into(), slice2(&self.predictor_pos_embed)));
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.context.params_mut();
        out.extend(self.predictor.params_mut());
        out.extend(self.target.params_mut());
        out.push(self.pos_embed.as_slice_mut().expect("contiguous"));
        out.push(self.predictor_pos_embed.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn check_patches(&self, patches: &PatchSequence) -> Result<()> {
        let enc = &self.config.encoder;
        if patches.grid != enc.grid() || patches.token_dim() != enc.token_dim() {
            return Err(Error::Shape(format!(
                "patch sequence grid {:?} x {} does not match model grid {:?} x {}",
                patches.grid,
                patches.token_dim(),
                enc.grid(),
                enc.token_dim()
            )));
        }
        Ok(())
    }

    pub fn patchify(&self, image: &ImageTensor) -> Result<PatchSequence> {
        let seq = patchify(image, self.config.encoder.patch_size)?;
        self.check_patches(&seq)?;
        Ok(seq)
    }

    fn check_indices(&self, indices: &[usize], what: &str) -> Result<()> {
        let n = self.config.encoder.n_tokens();
        if indices.is_empty() {
            return Err(Error::Contract(format!("{what} index set is empty")));
        }
        let mut seen = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::Contract(format!("{what} index {i} out of range {n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("{what} index {i} repeated")));
            }
        }
        Ok(())
    }

    /// Embeds only the selected tokens with the context encoder; masked
    /// tokens never enter attention.
    pub fn encode_context(&self, patches: &PatchSequence, context_indices: &[usize]) -> Result<TokenEmbeddings> {
        self.check_patches(patches)?;
        self.check_indices(context_indices, "context")?;
        let tokens = patches.tokens.select(Axis(0), context_indices);
        let pos = self.pos_embed.select(Axis(0), context_indices);
        let vectors = self.context.infer(&tokens, &pos, &[0, context_indices.len()]);
        Ok(TokenEmbeddings {
            vectors,
            index_map: context_indices.to_vec(),
        })
    }

    /// Embeds the full sequence with the target encoder.
    pub fn encode_target(&self, patches: &PatchSequence) -> Result<TokenEmbeddings> {
        self.encode_full(patches, EncoderKind::Target)
    }

    pub fn encode_full(&self, patches: &PatchSequence, which: EncoderKind) -> Result<TokenEmbeddings> {
        self.check_patches(patches)?;
        let n = patches.len();
        let vectors = self
            .encoder(which)
            .infer(&patches.tokens, &self.pos_embed, &[0, n]);
        Ok(TokenEmbeddings {
            vectors,
            index_map: (0..n).collect(),
        })
    }

    /// One predictor application per target group.
    pub fn predict_targets(
        &self,
        context: &TokenEmbeddings,
        target_groups: &[Vec<usize>],
    ) -> Result<Vec<TokenEmbeddings>> {
        self.check_indices(&context.index_map, "context")?;
        if context.vectors.dim() != (context.index_map.len(), self.config.encoder.embed_dim) {
            return Err(Error::Contract("context embeddings do not match their index map".into()));
        }
        for g in target_groups {
            self.check_indices(g, "target")?;
        }
        let requests: Vec<PredictionRequest> = target_groups
            .iter()
            .map(|g| PredictionRequest {
                image: 0,
                targets: g.clone(),
            })
            .collect();
        let (out, _) = self.predictor.forward(
            &context.vectors,
            &[0, context.index_map.len()],
            &context.index_map,
            &requests,
            &self.predictor_pos_embed,
        );
        let mut start = 0;
        Ok(target_groups
            .iter()
            .map(|g| {
                let rows = out.slice(s![start..start + g.len(), ..]).to_owned();
                start += g.len();
                TokenEmbeddings {
                    vectors: rows,
                    index_map: g.clone(),
                }
            })
            .collect())
    }

    /// Mean of the full-sequence token embeddings of one image.
    pub fn pooled_embedding(&self, image: &ImageTensor, which: EncoderKind) -> Result<Array1<f64>> {
        let patches = self.patchify(image)?;
        Ok(self.encode_full(&patches, which)?.mean())
    }

    /// Pooled embeddings for many images, one row each, in input order.
    pub fn embed_images(&self, images: &[&ImageTensor], which: EncoderKind) -> Result<Array2<f64>> {
        const CHUNK: usize = 64;
        let n_tok = self.config.encoder.n_tokens();
        let d = self.config.encoder.embed_dim;
        let mut out = Array2::zeros((images.len(), d));
        for (chunk_idx, chunk) in images.chunks(CHUNK).enumerate() {
            let mut tokens = Array2::zeros((chunk.len() * n_tok, self.config.encoder.token_dim()));
            let mut pos = Array2::zeros((chunk.len() * n_tok, d));
            for (i, img) in chunk.iter().enumerate() {
                let seq = self.patchify(img)?;
                tokens.slice_mut(s![i * n_tok..(i + 1) * n_tok, ..]).assign(&seq.tokens);
                pos.slice_mut(s![i * n_tok..(i + 1) * n_tok, ..]).assign(&self.pos_embed);
            }
            let offsets: Vec<usize> = (0..=chunk.len()).map(|i| i * n_tok).collect();
            let encoded = self.encoder(which).infer(&tokens, &pos, &offsets);
            for i in 0..chunk.len() {
                let mean = encoded
                    .slice(s![i * n_tok..(i + 1) * n_tok, ..])
                    .mean_axis(Axis(0))
                    .expect("non-empty");
                out.row_mut(chunk_idx * CHUNK + i).assign(&mean);
            }
        }
        Ok(out)
    }
}

/// `target <- m * target + (1 - m) * context`, elementwise.
pub fn ema_update(target: &mut Encoder, context: &Encoder, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Contract(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    let src = context.named_params("");
    let dst = target.params_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|((_, s), d)| s.len() != d.len()) {
        return Err(Error::Contract("EMA between encoders of different shapes".into()));
    }
    for ((_, s), d) in src.into_iter().zip(dst) {
        for (t, &c) in d.iter_mut().zip(s) {
            // written as a step toward `c` so equal weights stay bit-identical
            *t = if momentum == 0.0 { c } else { *t + (1.0 - momentum) * (c - *t) };
        }
    }
    Ok(())
}

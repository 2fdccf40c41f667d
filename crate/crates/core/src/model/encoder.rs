use ndarray::Array2;
use rand::Rng;

use super::EncoderConfig;
use crate::nn::{join, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Parameters};

/// Patch projection, transformer stack and closing layer norm.
///
/// With `depth == 0` the stack is the identity: no blocks and no norm, so the
/// output is the patch projection plus the positional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    tokens: Array2<f64>,
    blocks: Vec<BlockCache>,
    norm: Option<LayerNormCache>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_embed: Linear::new(cfg.token_dim(), d, rng),
            blocks: (0..cfg.depth)
                .map(|_| Block::new(d, cfg.n_heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(d),
        }
    }

    /// `tokens` and `pos` are packed row-aligned; `offsets` delimit images.
    pub fn forward(
        &self,
        tokens: &Array2<f64>,
        pos: &Array2<f64>,
        offsets: &[usize],
    ) -> (Array2<f64>, EncoderCache) {
        let mut x = self.patch_embed.forward(tokens);
        x += pos;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, offsets);
            caches.push(c);
            x = y;
        }
        let norm = if self.blocks.is_empty() {
            None
        } else {
            let (y, c) = self.norm.forward(&x);
            x = y;
            Some(c)
        };
        let cache = EncoderCache {
            tokens: tokens.clone(),
            blocks: caches,
            norm,
        };
        (x, cache)
    }

    /// Forward pass without keeping activations.
    pub fn infer(&self, tokens: &Array2<f64>, pos: &Array2<f64>, offsets: &[usize]) -> Array2<f64> {
        let mut x = self.patch_embed.forward(tokens);
        x += pos;
        for block in &self.blocks {
            x = block.forward(&x, offsets).0;
        }
        if !self.blocks.is_empty() {
            x = self.norm.forward(&x).0;
        }
        x
    }

    /// Accumulates parameter gradients. Inputs are data, so no input gradient.
    pub fn backward(&self, cache: &EncoderCache, dout: &Array2<f64>, offsets: &[usize], grad: &mut Encoder) {
        let mut dx = match &cache.norm {
            Some(c) => self.norm.backward(c, dout, &mut grad.norm),
            None => dout.clone(),
        };
        for ((block, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dx = block.backward(c, &dx, offsets, g);
        }
        self.patch_embed.accumulate(&cache.tokens, &dx, &mut grad.patch_embed);
    }
}

impl Parameters for Encoder {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.patch_embed.collect_params(&join(prefix, "patch_embed"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect_params(&join(prefix, "norm"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.patch_embed.collect_params_mut(out);
        for b in self.blocks.iter_mut() {
            b.collect_params_mut(out);
        }
        self.norm.collect_params_mut(out);
    }
}

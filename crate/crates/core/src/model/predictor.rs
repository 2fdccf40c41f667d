use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{EncoderConfig, PredictorConfig};
use crate::nn::{
    join, slice1, slice1_mut, trunc_normal, Block, BlockCache, LayerNorm, LayerNormCache, Linear,
    Parameters, INIT_STD,
};

/// One predictor application: the context of image `image` plus one mask
/// token per index in `targets`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRequest {
    pub image: usize,
    pub targets: Vec<usize>,
}

/// Narrow transformer mapping context embeddings and positional mask tokens
/// to predicted target embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    /// Encoder width to predictor width.
    pub embed: Linear,
    /// The single shared mask token.
    pub mask_token: Array1<f64>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    /// Predictor width back to encoder width.
    pub head: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Context(usize),
    Mask,
}

#[derive(Debug, Clone)]
pub struct PredictorCache {
    context: Array2<f64>,
    sources: Vec<Source>,
    offsets: Vec<usize>,
    mask_rows: Vec<usize>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    head_input: Array2<f64>,
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(enc: &EncoderConfig, cfg: &PredictorConfig, rng: &mut R) -> Self {
        let p = cfg.embed_dim;
        Self {
            embed: Linear::new(enc.embed_dim, p, rng),
            mask_token: Array1::from_shape_simple_fn(p, || trunc_normal(rng, INIT_STD)),
            blocks: (0..cfg.depth)
                .map(|_| Block::new(p, cfg.n_heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(p),
            head: Linear::new(p, enc.embed_dim, rng),
        }
    }

    /// Runs one predictor sequence per request.
    ///
    /// `context` holds encoder outputs packed by image (`context_offsets`),
    /// with `context_positions[r]` the token index of row `r`. Each sequence
    /// is `[embed(context) + pos ; mask_token + pos(target)]` and the returned
    /// rows are the head outputs at the mask positions, request by request in
    /// target order.
    pub fn forward(
        &self,
        context: &Array2<f64>,
        context_offsets: &[usize],
        context_positions: &[usize],
        requests: &[PredictionRequest],
        pos: &Array2<f64>,
    ) -> (Array2<f64>, PredictorCache) {
        let embedded = self.embed.forward(context);
        let width = self.mask_token.len();
        let total: usize = requests
            .iter()
            .map(|r| context_offsets[r.image + 1] - context_offsets[r.image] + r.targets.len())
            .sum();
        let mut x = Array2::zeros((total, width));
        let mut sources = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(requests.len() + 1);
        let mut mask_rows = Vec::new();
        offsets.push(0);
        let mut row = 0;
        for req in requests {
            for r in context_offsets[req.image]..context_offsets[req.image + 1] {
                let mut out = x.row_mut(row);
                out.assign(&embedded.row(r));
                out += &pos.row(context_positions[r]);
                sources.push(Source::Context(r));
                row += 1;
            }
            for &t in &req.targets {
                let mut out = x.row_mut(row);
                out.assign(&self.mask_token);
                out += &pos.row(t);
                sources.push(Source::Mask);
                mask_rows.push(row);
                row += 1;
            }
            offsets.push(row);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, &offsets);
            caches.push(c);
            x = y;
        }
        let (normed, norm) = self.norm.forward(&x);
        let head_input = normed.select(Axis(0), &mask_rows);
        let out = self.head.forward(&head_input);
        let cache = PredictorCache {
            context: context.clone(),
            sources,
            offsets,
            mask_rows,
            blocks: caches,
            norm,
            head_input,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the packed context embeddings.
    pub fn backward(&self, cache: &PredictorCache, dout: &Array2<f64>, grad: &mut Predictor) -> Array2<f64> {
        let dhead = self.head.backward(&cache.head_input, dout, &mut grad.head);
        let width = self.mask_token.len();
        let mut dnormed = Array2::zeros((cache.sources.len(), width));
        for (i, &r) in cache.mask_rows.iter().enumerate() {
            dnormed.row_mut(r).assign(&dhead.row(i));
        }
        let mut dx = self.norm.backward(&cache.norm, &dnormed, &mut grad.norm);
        for ((block, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dx = block.backward(c, &dx, &cache.offsets, g);
        }
        let mut dembedded = Array2::zeros((cache.context.nrows(), width));
        for (row, src) in dx.rows().into_iter().zip(&cache.sources) {
            match *src {
                Source::Context(r) => {
                    let mut acc = dembedded.row_mut(r);
                    acc += &row;
                }
                Source::Mask => grad.mask_token += &row,
            }
        }
        self.embed.backward(&cache.context, &dembedded, &mut grad.embed)
    }
}

impl Parameters for Predictor {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.embed.collect_params(&join(prefix, "embed"), out);
        out.push((join(prefix, "mask_token"), slice1(&self.mask_token)));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect_params(&join(prefix, "norm"), out);
        self.head.collect_params(&join(prefix, "head"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.embed.collect_params_mut(out);
        out.push(slice1_mut(&mut self.mask_token));
        for b in self.blocks.iter_mut() {
            b.collect_params_mut(out);
        }
        self.norm.collect_params_mut(out);
        self.head.collect_params_mut(out);
    }
}

use ndarray::Array2;
use rand::Rng;

use super::{
    gelu, gelu_backward, join, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear,
    Parameters,
};

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    norm1: LayerNormCache,
    attn: AttentionCache,
    norm2: LayerNormCache,
    h2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_heads: usize, mlp_ratio: f64, rng: &mut R) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(dim, n_heads, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, offsets: &[usize]) -> (Array2<f64>, BlockCache) {
        let (h1, norm1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&h1, offsets);
        let x2 = x + &a;
        let (h2, norm2) = self.norm2.forward(&x2);
        let pre_act = self.fc1.forward(&h2);
        let act = gelu(&pre_act);
        let y = x2 + &self.fc2.forward(&act);
        let cache = BlockCache {
            norm1,
            attn,
            norm2,
            h2,
            pre_act,
            act,
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        dy: &Array2<f64>,
        offsets: &[usize],
        grad: &mut Block,
    ) -> Array2<f64> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let dpre = gelu_backward(&cache.pre_act, &dact);
        let dh2 = self.fc1.backward(&cache.h2, &dpre, &mut grad.fc1);
        let dx2 = dy + &self.norm2.backward(&cache.norm2, &dh2, &mut grad.norm2);
        let dh1 = self.attn.backward(&cache.attn, &dx2, offsets, &mut grad.attn);
        dx2 + &self.norm1.backward(&cache.norm1, &dh1, &mut grad.norm1)
    }
}

impl Parameters for Block {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.attn.collect_params(&join(prefix, "attn"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.norm1.collect_params_mut(out);
        self.attn.collect_params_mut(out);
        self.norm2.collect_params_mut(out);
        self.fc1.collect_params_mut(out);
        self.fc2.collect_params_mut(out);
    }
}

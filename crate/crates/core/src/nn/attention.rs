use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use super::{join, segments, Linear, Parameters};

/// Multi-head self-attention over packed sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    qkv: Array2<f64>,
    /// Softmax weights, sequence-major then head.
    probs: Vec<Array2<f64>>,
    heads: Array2<f64>,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_heads: usize, rng: &mut R) -> Self {
        assert!(dim % n_heads == 0, "width {dim} not divisible by {n_heads} heads");
        Self {
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            n_heads,
        }
    }

    fn dim(&self) -> usize {
        self.proj.inputs()
    }

    pub fn forward(&self, x: &Array2<f64>, offsets: &[usize]) -> (Array2<f64>, AttentionCache) {
        let d = self.dim();
        let hd = d / self.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut heads = Array2::zeros((x.nrows(), d));
        let mut probs = Vec::with_capacity((offsets.len() - 1) * self.n_heads);
        for seg in segments(offsets) {
            for h in 0..self.n_heads {
                let (a, b) = (h * hd, (h + 1) * hd);
                let q = qkv.slice(s![seg.clone(), a..b]);
                let k = qkv.slice(s![seg.clone(), d + a..d + b]);
                let v = qkv.slice(s![seg.clone(), 2 * d + a..2 * d + b]);
                let mut p = q.dot(&k.t());
                p *= scale;
                softmax_rows(&mut p);
                heads.slice_mut(s![seg.clone(), a..b]).assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let y = self.proj.forward(&heads);
        let cache = AttentionCache {
            x: x.clone(),
            qkv,
            probs,
            heads,
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        offsets: &[usize],
        grad: &mut Attention,
    ) -> Array2<f64> {
        let d = self.dim();
        let hd = d / self.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let dheads = self.proj.backward(&cache.heads, dy, &mut grad.proj);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        let mut probs = cache.probs.iter();
        for seg in segments(offsets) {
            for h in 0..self.n_heads {
                let p = probs.next().expect("one cache entry per sequence and head");
                let (a, b) = (h * hd, (h + 1) * hd);
                let q = cache.qkv.slice(s![seg.clone(), a..b]);
                let k = cache.qkv.slice(s![seg.clone(), d + a..d + b]);
                let v = cache.qkv.slice(s![seg.clone(), 2 * d + a..2 * d + b]);
                let dout = dheads.slice(s![seg.clone(), a..b]);
                let dp = dout.dot(&v.t());
                let dv = p.t().dot(&dout);
                // softmax backward: ds = p * (dp - sum_j dp_j p_j)
                let inner = (&dp * p).sum_axis(Axis(1));
                let mut ds = dp;
                Zip::from(ds.rows_mut())
                    .and(p.rows())
                    .and(&inner)
                    .for_each(|mut row, prow, &c| {
                        Zip::from(&mut row).and(&prow).for_each(|g, &pv| *g = pv * (*g - c));
                    });
                ds *= scale;
                dqkv.slice_mut(s![seg.clone(), a..b]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![seg.clone(), d + a..d + b]).assign(&ds.t().dot(&q));
                dqkv.slice_mut(s![seg.clone(), 2 * d + a..2 * d + b]).assign(&dv);
            }
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grad.qkv)
    }
}

impl Parameters for Attention {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.qkv.collect_params(&join(prefix, "qkv"), out);
        self.proj.collect_params(&join(prefix, "proj"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.qkv.collect_params_mut(out);
        self.proj.collect_params_mut(out);
    }
}

//! Batched training objective and its gradient.

use std::borrow::Borrow;

use ndarray::{s, Array2, Axis};

use super::{Encoder, ModelState, PredictionRequest, Predictor};
use crate::data::PatchSequence;
use crate::error::{Error, Result};
use crate::losses::{
    prediction_loss, prediction_loss_grad, total_loss, vicreg_loss, vicreg_loss_grad,
    EmbeddingMatrix, VicregBreakdown, VicregConfig,
};
use crate::masking::MaskPair;
use crate::nn::{join, Parameters};

/// Loss values for one batch plus the pooled matrices they were computed on.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub pred: f64,
    pub vicreg: VicregBreakdown,
    pub total: f64,
    /// Per image: mean of the context-encoder outputs over context tokens.
    pub context_pooled: EmbeddingMatrix,
    /// Per image: mean of the predictions over all target tokens.
    pub predicted_pooled: EmbeddingMatrix,
    /// Per image: mean of the target-encoder outputs over the same tokens.
    pub target_pooled: EmbeddingMatrix,
}

/// Gradients for the trainable parameters only. The target encoder has no
/// slot here by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub context: Encoder,
    pub predictor: Predictor,
}

impl Gradients {
    pub fn zeros(model: &ModelState) -> Self {
        Self {
            context: model.context.zeros_like(),
            predictor: model.predictor.zeros_like(),
        }
    }
}

impl Parameters for Gradients {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.context.collect_params(&join(prefix, "context"), out);
        self.predictor.collect_params(&join(prefix, "predictor"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.context.collect_params_mut(out);
        self.predictor.collect_params_mut(out);
    }
}

struct Packed {
    tokens: Array2<f64>,
    pos: Array2<f64>,
    offsets: Vec<usize>,
    positions: Vec<usize>,
}

fn pack_context<P: Borrow<PatchSequence>>(model: &ModelState, patches: &[P], masks: &[MaskPair]) -> Packed {
    let total: usize = masks.iter().map(|m| m.context.len()).sum();
    let d = model.config.encoder.embed_dim;
    let mut tokens = Array2::zeros((total, model.config.encoder.token_dim()));
    let mut pos = Array2::zeros((total, d));
    let mut offsets = vec![0];
    let mut positions = Vec::with_capacity(total);
    let mut row = 0;
    for (p, m) in patches.iter().zip(masks) {
        let p = p.borrow();
        for &t in &m.context {
            tokens.row_mut(row).assign(&p.tokens.row(t));
            pos.row_mut(row).assign(&model.pos_embed.row(t));
            positions.push(t);
            row += 1;
        }
        offsets.push(row);
    }
    Packed {
        tokens,
        pos,
        offsets,
        positions,
    }
}

/// Target-encoder outputs for the full sequences, packed by image.
fn encode_targets<P: Borrow<PatchSequence>>(model: &ModelState, patches: &[P]) -> Array2<f64> {
    let n = model.config.encoder.n_tokens();
    let mut tokens = Array2::zeros((patches.len() * n, model.config.encoder.token_dim()));
    let mut pos = Array2::zeros((patches.len() * n, model.config.encoder.embed_dim));
    for (i, p) in patches.iter().enumerate() {
        tokens.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&p.borrow().tokens);
        pos.slice_mut(s![i * n..(i + 1) * n, ..]).assign(&model.pos_embed);
    }
    let offsets: Vec<usize> = (0..=patches.len()).map(|i| i * n).collect();
    model.target.infer(&tokens, &pos, &offsets)
}

fn mean_rows(m: &Array2<f64>, rows: std::ops::Range<usize>) -> ndarray::Array1<f64> {
    m.slice(s![rows, ..]).mean_axis(Axis(0)).expect("non-empty rows")
}

impl ModelState {
    fn check_batch<P: Borrow<PatchSequence>>(&self, patches: &[P], masks: &[MaskPair], vicreg: &VicregConfig) -> Result<()> {
        if patches.is_empty() || patches.len() != masks.len() {
            return Err(Error::Contract(format!(
                "batch needs one mask per image, got {} images and {} masks",
                patches.len(),
                masks.len()
            )));
        }
        if !vicreg.is_disabled() && patches.len() < 2 {
            return Err(Error::Contract("VICReg batch statistics need at least 2 images".into()));
        }
        let n = self.config.encoder.n_tokens();
        for (p, m) in patches.iter().zip(masks) {
            self.check_patches(p.borrow())?;
            if m.n_tokens != n {
                return Err(Error::Contract(format!("mask over {} tokens, model has {n}", m.n_tokens)));
            }
            m.check()?;
        }
        Ok(())
    }

    /// `L_pred + L_VICReg` for a batch, without gradients.
    pub fn batch_loss<P: Borrow<PatchSequence>>(&self, patches: &[P], masks: &[MaskPair], vicreg: &VicregConfig) -> Result<LossReport> {
        self.forward_backward(patches, masks, vicreg, false).map(|(r, _)| r)
    }

    /// Batch loss and the gradient with respect to context encoder,
    /// predictor and mask token. Target-encoder outputs are constants.
    pub fn loss_and_grad<P: Borrow<PatchSequence>>(
        &self,
        patches: &[P],
        masks: &[MaskPair],
        vicreg: &VicregConfig,
    ) -> Result<(LossReport, Gradients)> {
        self.forward_backward(patches, masks, vicreg, true)
            .map(|(r, g)| (r, g.expect("gradients requested")))
    }

    fn forward_backward<P: Borrow<PatchSequence>>(
        &self,
        patches: &[P],
        masks: &[MaskPair],
        vicreg: &VicregConfig,
        want_grad: bool,
    ) -> Result<(LossReport, Option<Gradients>)> {
        self.check_batch(patches, masks, vicreg)?;
        let b = patches.len();
        let d = self.config.encoder.embed_dim;
        let n = self.config.encoder.n_tokens();

        let ctx = pack_context(self, patches, masks);
        let (ctx_out, enc_cache) = self.context.forward(&ctx.tokens, &ctx.pos, &ctx.offsets);
        let requests: Vec<PredictionRequest> = masks
            .iter()
            .enumerate()
            .flat_map(|(i, m)| {
                m.targets.iter().map(move |g| PredictionRequest {
                    image: i,
                    targets: g.clone(),
                })
            })
            .collect();
        let (preds, pred_cache) = self.predictor.forward(
            &ctx_out,
            &ctx.offsets,
            &ctx.positions,
            &requests,
            &self.predictor_pos_embed,
        );
        let targets_full = encode_targets(self, patches);

        let mut pred_groups = Vec::with_capacity(requests.len());
        let mut tgt_groups = Vec::with_capacity(requests.len());
        let mut pred_offsets = vec![0];
        let mut row = 0;
        for req in &requests {
            let len = req.targets.len();
            pred_groups.push(preds.slice(s![row..row + len, ..]).to_owned());
            let rows: Vec<usize> = req.targets.iter().map(|&t| req.image * n + t).collect();
            tgt_groups.push(targets_full.select(Axis(0), &rows));
            row += len;
        }
        // prediction rows per image
        let mut r = 0;
        for m in masks {
            r += m.target_count();
            pred_offsets.push(r);
        }

        let pred = prediction_loss(&pred_groups, &tgt_groups)?;

        let mut context_pooled = Array2::zeros((b, d));
        let mut predicted_pooled = Array2::zeros((b, d));
        let mut target_pooled = Array2::zeros((b, d));
        let mut g = 0;
        for (i, m) in masks.iter().enumerate() {
            context_pooled.row_mut(i).assign(&mean_rows(&ctx_out, ctx.offsets[i]..ctx.offsets[i + 1]));
            predicted_pooled.row_mut(i).assign(&mean_rows(&preds, pred_offsets[i]..pred_offsets[i + 1]));
            let mut acc = ndarray::Array1::zeros(d);
            for tg in &tgt_groups[g..g + m.targets.len()] {
                acc += &tg.sum_axis(Axis(0));
            }
            target_pooled.row_mut(i).assign(&(acc / m.target_count() as f64));
            g += m.targets.len();
        }

        let vic = if vicreg.is_disabled() {
            VicregBreakdown::default()
        } else {
            vicreg_loss(&context_pooled, &predicted_pooled, &target_pooled, vicreg)?
        };
        let total = total_loss(pred, vic.total)?;

        let grads = if want_grad {
            let mut grads = Gradients::zeros(self);
            let dgroups = prediction_loss_grad(&pred_groups, &tgt_groups)?;
            let mut dpreds = Array2::zeros(preds.raw_dim());
            let mut row = 0;
            for dg in &dgroups {
                dpreds.slice_mut(s![row..row + dg.nrows(), ..]).assign(dg);
                row += dg.nrows();
            }
            let mut dctx = Array2::zeros(ctx_out.raw_dim());
            if !vicreg.is_disabled() {
                let (dcp, dpp) = vicreg_loss_grad(&context_pooled, &predicted_pooled, &target_pooled, vicreg)?;
                for i in 0..b {
                    let (lo, hi) = (ctx.offsets[i], ctx.offsets[i + 1]);
                    let share = &dcp.row(i) / (hi - lo) as f64;
                    dctx.slice_mut(s![lo..hi, ..]).zip_mut_with(&share.broadcast((hi - lo, d)).unwrap(), |a, &v| *a += v);
                    let (lo, hi) = (pred_offsets[i], pred_offsets[i + 1]);
                    let share = &dpp.row(i) / (hi - lo) as f64;
                    dpreds.slice_mut(s![lo..hi, ..]).zip_mut_with(&share.broadcast((hi - lo, d)).unwrap(), |a, &v| *a += v);
                }
            }
            dctx += &self.predictor.backward(&pred_cache, &dpreds, &mut grads.predictor);
            self.context.backward(&enc_cache, &dctx, &ctx.offsets, &mut grads.context);
            Some(grads)
        } else {
            None
        };

        Ok((
            LossReport {
                pred,
                vicreg: vic,
                total,
                context_pooled,
                predicted_pooled,
                target_pooled,
            },
            grads,
        ))
    }
}

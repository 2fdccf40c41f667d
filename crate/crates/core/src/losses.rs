//! Prediction loss and VICReg regularization terms, with analytic gradients.
//!
//! All statistics use the unbiased `n - 1` denominator. At the variance hinge
//! kink (`sqrt(var + eps) == gamma`) the term is treated as inactive and its
//! gradient is zero.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FieldError, Result};

/// `n × d` batch of feature vectors.
pub type EmbeddingMatrix = Array2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VicregConfig {
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_i: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for VicregConfig {
    fn default() -> Self {
        Self {
            lambda_v: 25.0,
            lambda_c: 25.0,
            lambda_i: 1.0,
            gamma: 1.0,
            epsilon: 1e-4,
        }
    }
}

impl VicregConfig {
    /// All three weights zero: the regularizer is switched off.
    pub fn disabled() -> Self {
        Self {
            lambda_v: 0.0,
            lambda_c: 0.0,
            lambda_i: 0.0,
            ..Self::default()
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.lambda_v == 0.0 && self.lambda_c == 0.0 && self.lambda_i == 0.0
    }

    pub fn field_errors(&self, prefix: &str) -> Vec<FieldError> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("lambda_v", self.lambda_v),
            ("lambda_c", self.lambda_c),
            ("lambda_i", self.lambda_i),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(FieldError::new(format!("{prefix}{name}"), "must be finite and >= 0"));
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            errs.push(FieldError::new(format!("{prefix}gamma"), "must be finite and >= 0"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            errs.push(FieldError::new(format!("{prefix}epsilon"), "must be finite and > 0"));
        }
        errs
    }
}

fn same_shape(a: &EmbeddingMatrix, b: &EmbeddingMatrix, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn need_batch(z: &EmbeddingMatrix, what: &str) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::Contract(format!("{what} needs at least 2 rows, got {}", z.nrows())));
    }
    if z.ncols() == 0 {
        return Err(Error::Contract(format!("{what} needs at least one column")));
    }
    Ok(())
}

fn centered(z: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mean = z.mean_axis(Axis(0)).expect("non-empty");
    z - &mean
}

fn check_groups(predicted: &[EmbeddingMatrix], targets: &[EmbeddingMatrix]) -> Result<()> {
    if predicted.len() != targets.len() || predicted.is_empty() {
        return Err(Error::Contract(format!(
            "prediction loss needs equal non-empty group lists, got {} and {}",
            predicted.len(),
            targets.len()
        )));
    }
    for (p, t) in predicted.iter().zip(targets) {
        same_shape(p, t, "prediction loss")?;
        if p.nrows() == 0 {
            return Err(Error::Contract("empty target group".into()));
        }
    }
    Ok(())
}

/// Mean over groups of the per-group mean squared L2 distance between rows.
pub fn prediction_loss(predicted: &[EmbeddingMatrix], targets: &[EmbeddingMatrix]) -> Result<f64> {
    check_groups(predicted, targets)?;
    let m = predicted.len() as f64;
    let total: f64 = predicted
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).mapv(|v| v * v).sum() / p.nrows() as f64)
        .sum();
    Ok(total / m)
}

/// Gradient of [`prediction_loss`] with respect to the predictions.
pub fn prediction_loss_grad(
    predicted: &[EmbeddingMatrix],
    targets: &[EmbeddingMatrix],
) -> Result<Vec<EmbeddingMatrix>> {
    check_groups(predicted, targets)?;
    let m = predicted.len() as f64;
    Ok(predicted
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (2.0 / (m * p.nrows() as f64)))
        .collect())
}

fn regularized_std(z: &EmbeddingMatrix, epsilon: f64) -> (EmbeddingMatrix, Array1<f64>) {
    let zc = centered(z);
    let n = z.nrows() as f64;
    let std = zc.mapv(|v| v * v).sum_axis(Axis(0)).mapv(|s| (s / (n - 1.0) + epsilon).sqrt());
    (zc, std)
}

/// `(1/d) sum_j max(0, gamma - sqrt(Var(z_j) + epsilon))`.
pub fn variance_term(z: &EmbeddingMatrix, gamma: f64, epsilon: f64) -> Result<f64> {
    need_batch(z, "variance term")?;
    let (_, std) = regularized_std(z, epsilon);
    Ok(std.iter().map(|s| (gamma - s).max(0.0)).sum::<f64>() / z.ncols() as f64)
}

pub fn variance_term_grad(z: &EmbeddingMatrix, gamma: f64, epsilon: f64) -> Result<EmbeddingMatrix> {
    need_batch(z, "variance term")?;
    let (n, d) = z.dim();
    let (mut zc, std) = regularized_std(z, epsilon);
    let coef = std.mapv(|s| if gamma - s > 0.0 { -1.0 / (d as f64 * (n as f64 - 1.0) * s) } else { 0.0 });
    zc *= &coef;
    Ok(zc)
}

fn covariance(zc: &EmbeddingMatrix) -> Array2<f64> {
    zc.t().dot(zc) / (zc.nrows() as f64 - 1.0)
}

/// Sum of squared off-diagonal covariance entries, divided by `d`.
pub fn covariance_term(z: &EmbeddingMatrix) -> Result<f64> {
    need_batch(z, "covariance term")?;
    let cov = covariance(&centered(z));
    let d = z.ncols();
    let mut sum = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                sum += cov[[i, j]] * cov[[i, j]];
            }
        }
    }
    Ok(sum / d as f64)
}

pub fn covariance_term_grad(z: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    need_batch(z, "covariance term")?;
    let (n, d) = z.dim();
    let zc = centered(z);
    let mut off = covariance(&zc);
    off.diag_mut().fill(0.0);
    // centering needs no correction: columns of zc sum to zero
    Ok(zc.dot(&off) * (4.0 / (d as f64 * (n as f64 - 1.0))))
}

/// Mean squared L2 distance between paired rows.
pub fn invariance_term(z: &EmbeddingMatrix, z_prime: &EmbeddingMatrix) -> Result<f64> {
    same_shape(z, z_prime, "invariance term")?;
    if z.nrows() == 0 {
        return Err(Error::Contract("invariance term needs at least one row".into()));
    }
    Ok((z - z_prime).mapv(|v| v * v).sum() / z.nrows() as f64)
}

/// Gradient of [`invariance_term`] with respect to `z`; the gradient with
/// respect to `z_prime` is its negation.
pub fn invariance_term_grad(z: &EmbeddingMatrix, z_prime: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    same_shape(z, z_prime, "invariance term")?;
    if z.nrows() == 0 {
        return Err(Error::Contract("invariance term needs at least one row".into()));
    }
    Ok((z - z_prime) * (2.0 / z.nrows() as f64))
}

/// Unweighted term values plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VicregBreakdown {
    pub variance: f64,
    pub covariance: f64,
    pub invariance: f64,
    pub total: f64,
}

/// Variance and covariance are averaged over the pooled context batch and
/// the pooled prediction batch; invariance pairs predictions with targets.
pub fn vicreg_loss(
    context_pooled: &EmbeddingMatrix,
    predicted_pooled: &EmbeddingMatrix,
    target_pooled: &EmbeddingMatrix,
    config: &VicregConfig,
) -> Result<VicregBreakdown> {
    same_shape(context_pooled, predicted_pooled, "vicreg")?;
    same_shape(predicted_pooled, target_pooled, "vicreg")?;
    let (g, e) = (config.gamma, config.epsilon);
    let variance =
        0.5 * (variance_term(context_pooled, g, e)? + variance_term(predicted_pooled, g, e)?);
    let covariance = 0.5 * (covariance_term(context_pooled)? + covariance_term(predicted_pooled)?);
    let invariance = invariance_term(predicted_pooled, target_pooled)?;
    let total =
        config.lambda_v * variance + config.lambda_c * covariance + config.lambda_i * invariance;
    Ok(VicregBreakdown {
        variance,
        covariance,
        invariance,
        total,
    })
}

/// Gradients of the weighted VICReg total with respect to the pooled context
/// and pooled prediction batches. Targets are treated as constants.
pub fn vicreg_loss_grad(
    context_pooled: &EmbeddingMatrix,
    predicted_pooled: &EmbeddingMatrix,
    target_pooled: &EmbeddingMatrix,
    config: &VicregConfig,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    same_shape(context_pooled, predicted_pooled, "vicreg")?;
    same_shape(predicted_pooled, target_pooled, "vicreg")?;
    let (g, e) = (config.gamma, config.epsilon);
    let reg_grad = |z: &EmbeddingMatrix| -> Result<EmbeddingMatrix> {
        let mut out = Array2::zeros(z.raw_dim());
        if config.lambda_v != 0.0 {
            out.scaled_add(0.5 * config.lambda_v, &variance_term_grad(z, g, e)?);
        }
        if config.lambda_c != 0.0 {
            out.scaled_add(0.5 * config.lambda_c, &covariance_term_grad(z)?);
        }
        Ok(out)
    };
    let d_context = reg_grad(context_pooled)?;
    let mut d_pred = reg_grad(predicted_pooled)?;
    if config.lambda_i != 0.0 {
        d_pred.scaled_add(config.lambda_i, &invariance_term_grad(predicted_pooled, target_pooled)?);
    }
    Ok((d_context, d_pred))
}

/// `L = L_pred + L_VICReg`; non-finite inputs are a divergence.
pub fn total_loss(pred_loss: f64, vicreg: f64) -> Result<f64> {
    let total = pred_loss + vicreg;
    if !pred_loss.is_finite() || !vicreg.is_finite() || !total.is_finite() {
        return Err(Error::Divergence {
            step: None,
            message: format!("non-finite loss: L_pred={pred_loss}, L_VICReg={vicreg}"),
        });
    }
    Ok(total)
}

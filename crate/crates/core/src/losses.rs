//! Training objectives and their analytic gradients.
//!
//! Intensity and gradient losses are reported as means over their summed
//! terms so default weights carry across resolutions; the raw sums are
//! available through the `*_sum` variants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncodedFeatures;
use crate::tensor::{Frame, Mat};

/// Floor applied to probabilities inside the KL logarithms.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_n: f64,
    pub lambda_p: f64,
    pub lambda_cst: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_n: 1.0,
            lambda_p: 1.0,
            lambda_cst: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_n", self.lambda_n),
            ("lambda_p", self.lambda_p),
            ("lambda_cst", self.lambda_cst),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step loss values; `_o` is the normal branch, `_p` the pseudo-anomaly branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_int_o: f64,
    pub l_gd_o: f64,
    pub l_n: f64,
    pub l_int_p: f64,
    pub l_gd_p: f64,
    pub l_p: f64,
    pub l_cst: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills in `l_n`, `l_p` and `total` from the constituent terms.
    pub fn assemble(
        l_int_o: f64,
        l_gd_o: f64,
        l_int_p: f64,
        l_gd_p: f64,
        l_cst: f64,
        w: &LossWeights,
    ) -> Self {
        let l_n = l_int_o + l_gd_o;
        let l_p = l_int_p + l_gd_p;
        LossBreakdown {
            l_int_o,
            l_gd_o,
            l_n,
            l_int_p,
            l_gd_p,
            l_p,
            l_cst,
            total: w.lambda_n * l_n + w.lambda_p * l_p + w.lambda_cst * l_cst,
        }
    }

    /// Element-wise mean over a batch.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.l_int_o += b.l_int_o;
            m.l_gd_o += b.l_gd_o;
            m.l_n += b.l_n;
            m.l_int_p += b.l_int_p;
            m.l_gd_p += b.l_gd_p;
            m.l_p += b.l_p;
            m.l_cst += b.l_cst;
            m.total += b.total;
        }
        for v in [
            &mut m.l_int_o,
            &mut m.l_gd_o,
            &mut m.l_n,
            &mut m.l_int_p,
            &mut m.l_gd_p,
            &mut m.l_p,
            &mut m.l_cst,
            &mut m.total,
        ] {
            *v /= n;
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_int_o,
            self.l_gd_o,
            self.l_n,
            self.l_int_p,
            self.l_gd_p,
            self.l_p,
            self.l_cst,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Squared L2 distance summed over every pixel and channel.
pub fn intensity_loss_sum(pred: &Frame, target: &Frame) -> Result<f64> {
    pred.ensure_same_shape(target, "intensity loss")?;
    Ok(pred.data.iter().zip(&target.data).map(|(p, t)| (p - t) * (p - t)).sum())
}

/// [`intensity_loss_sum`] divided by the number of values.
pub fn intensity_loss(pred: &Frame, target: &Frame) -> Result<f64> {
    Ok(intensity_loss_sum(pred, target)? / pred.num_values() as f64)
}

/// Mean intensity loss and its gradient with respect to `pred`.
pub fn intensity_loss_grad(pred: &Frame, target: &Frame) -> Result<(f64, Frame)> {
    let loss = intensity_loss(pred, target)?;
    let scale = 2.0 / pred.num_values() as f64;
    let mut grad = Frame::zeros(pred.height, pred.width, pred.channels);
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        *g = scale * (p - t);
    }
    Ok((loss, grad))
}

fn check_gradient_shape(pred: &Frame, target: &Frame) -> Result<()> {
    pred.ensure_same_shape(target, "gradient loss")?;
    if pred.height < 2 || pred.width < 2 {
        return Err(Error::shape(format!(
            "gradient loss needs frames of at least 2x2, got {}x{}",
            pred.height, pred.width
        )));
    }
    Ok(())
}

/// Number of terms summed by the gradient loss.
pub fn gradient_term_count(frame: &Frame) -> usize {
    frame.channels * ((frame.height - 1) * frame.width + frame.height * (frame.width - 1))
}

/// Visits every (current, previous) index pair along rows and columns.
fn for_each_neighbour_pair(frame: &Frame, mut f: impl FnMut(usize, usize)) {
    for y in 0..frame.height {
        for x in 0..frame.width {
            for c in 0..frame.channels {
                let here = frame.index(y, x, c);
                if y >= 1 {
                    f(here, frame.index(y - 1, x, c));
                }
                if x >= 1 {
                    f(here, frame.index(y, x - 1, c));
                }
            }
        }
    }
}

/// Sum of absolute differences between predicted and target gradient magnitudes.
pub fn gradient_loss_sum(pred: &Frame, target: &Frame) -> Result<f64> {
    check_gradient_shape(pred, target)?;
    let (p, t) = (&pred.data, &target.data);
    let mut sum = 0.0;
    for_each_neighbour_pair(pred, |a, b| {
        sum += ((p[a] - p[b]).abs() - (t[a] - t[b]).abs()).abs();
    });
    Ok(sum)
}

pub fn gradient_loss(pred: &Frame, target: &Frame) -> Result<f64> {
    Ok(gradient_loss_sum(pred, target)? / gradient_term_count(pred) as f64)
}

/// Mean gradient loss and its (sub)gradient with respect to `pred`.
pub fn gradient_loss_grad(pred: &Frame, target: &Frame) -> Result<(f64, Frame)> {
    check_gradient_shape(pred, target)?;
    let count = gradient_term_count(pred) as f64;
    let (p, t) = (&pred.data, &target.data);
    let mut grad = Frame::zeros(pred.height, pred.width, pred.channels);
    let mut sum = 0.0;
    for_each_neighbour_pair(pred, |a, b| {
        let diff = p[a] - p[b];
        let term = diff.abs() - (t[a] - t[b]).abs();
        sum += term.abs();
        let g = sign(term) * sign(diff) / count;
        grad.data[a] += g;
        grad.data[b] -= g;
    });
    Ok((sum / count, grad))
}

fn check_features(a: &EncodedFeatures, b: &EncodedFeatures) -> Result<()> {
    if a.tokens.shape() != b.tokens.shape() {
        return Err(Error::shape(format!(
            "consistency loss: feature shapes differ, {:?} vs {:?}",
            a.tokens.shape(),
            b.tokens.shape()
        )));
    }
    if !a.tokens.is_finite() || !b.tokens.is_finite() {
        return Err(Error::Numeric("consistency loss: non-finite features".into()));
    }
    if a.tokens.rows == 0 {
        return Err(Error::shape("consistency loss: no tokens"));
    }
    Ok(())
}

/// Row-wise softmax probabilities and floored log-probabilities.
fn softmax_and_log(row: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let floor = KL_EPS.ln();
    let log: Vec<f64> = row.iter().map(|v| (v - lse).max(floor)).collect();
    let prob = row.iter().map(|v| (v - lse).exp()).collect();
    (prob, log)
}

/// Symmetric KL between per-token softmax distributions, averaged over tokens.
pub fn consistency_loss(f_o: &EncodedFeatures, f_p: &EncodedFeatures) -> Result<f64> {
    Ok(consistency_loss_grad(f_o, f_p)?.0)
}

/// Consistency loss with gradients for both feature sets.
pub fn consistency_loss_grad(f_o: &EncodedFeatures, f_p: &EncodedFeatures) -> Result<(f64, Mat, Mat)> {
    check_features(f_o, f_p)?;
    let (rows, cols) = f_o.tokens.shape();
    let scale = 0.5 / rows as f64;
    let mut grad_o = Mat::zeros(rows, cols);
    let mut grad_p = Mat::zeros(rows, cols);
    let mut total = 0.0;
    for r in 0..rows {
        let (p, log_p) = softmax_and_log(f_o.tokens.row(r));
        let (q, log_q) = softmax_and_log(f_p.tokens.row(r));
        let ratio: Vec<f64> = log_p.iter().zip(&log_q).map(|(a, b)| a - b).collect();
        let kl_pq: f64 = p.iter().zip(&ratio).map(|(pi, ri)| pi * ri).sum();
        let kl_qp: f64 = q.iter().zip(&ratio).map(|(qi, ri)| -qi * ri).sum();
        total += kl_pq + kl_qp;
        // d/d logits of sum (p - q)(log p - log q).
        let go = grad_o.row_mut(r);
        for k in 0..cols {
            go[k] = scale * (p[k] * (ratio[k] - kl_pq) + (p[k] - q[k]));
        }
        let gp = grad_p.row_mut(r);
        for k in 0..cols {
            gp[k] = scale * (q[k] * (-ratio[k] - kl_qp) + (q[k] - p[k]));
        }
    }
    Ok((total * scale, grad_o, grad_p))
}

/// Weighted objective over both branches.
pub fn total_loss(
    pred_o: &Frame,
    pred_p: &Frame,
    target: &Frame,
    f_o: &EncodedFeatures,
    f_p: &EncodedFeatures,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown::assemble(
        intensity_loss(pred_o, target)?,
        gradient_loss(pred_o, target)?,
        intensity_loss(pred_p, target)?,
        gradient_loss(pred_p, target)?,
        consistency_loss(f_o, f_p)?,
        w,
    ))
}

/// Gradients of the weighted objective, see [`total_loss_grad`].
#[derive(Debug, Clone)]
pub struct TotalLossGrad {
    pub breakdown: LossBreakdown,
    pub d_pred_o: Frame,
    pub d_pred_p: Frame,
    pub d_f_o: Mat,
    pub d_f_p: Mat,
}

pub fn total_loss_grad(
    pred_o: &Frame,
    pred_p: &Frame,
    target: &Frame,
    f_o: &EncodedFeatures,
    f_p: &EncodedFeatures,
    w: &LossWeights,
) -> Result<TotalLossGrad> {
    let (int_o, gi_o) = intensity_loss_grad(pred_o, target)?;
    let (gd_o, gg_o) = gradient_loss_grad(pred_o, target)?;
    let (int_p, gi_p) = intensity_loss_grad(pred_p, target)?;
    let (gd_p, gg_p) = gradient_loss_grad(pred_p, target)?;
    let (cst, mut d_f_o, mut d_f_p) = consistency_loss_grad(f_o, f_p)?;
    let combine = |a: Frame, b: &Frame, lambda: f64| {
        let mut out = a;
        for (x, y) in out.data.iter_mut().zip(&b.data) {
            *x = lambda * (*x + y);
        }
        out
    };
    d_f_o.data.iter_mut().for_each(|v| *v *= w.lambda_cst);
    d_f_p.data.iter_mut().for_each(|v| *v *= w.lambda_cst);
    Ok(TotalLossGrad {
        breakdown: LossBreakdown::assemble(int_o, gd_o, int_p, gd_p, cst, w),
        d_pred_o: combine(gi_o, &gg_o, w.lambda_n),
        d_pred_p: combine(gi_p, &gg_p, w.lambda_p),
        d_f_o,
        d_f_p,
    })
}

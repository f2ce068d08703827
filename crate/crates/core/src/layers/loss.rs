//! Softmax cross-entropy losses for labels and for per-pixel fg/bg maps.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax_slice, Tensor};

fn one_hot_index(target: &Tensor) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in target.data().iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::arg("target is not one-hot"));
        }
    }
    hot.ok_or_else(|| Error::arg("target is not one-hot"))
}

/// `-log softmax(logits)[t]` and its gradient `softmax(logits) - target`.
pub fn softmax_xent(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != target.shape() {
        return Err(Error::dim(format!("logits {:?} vs target {:?}", logits.shape(), target.shape())));
    }
    let t = one_hot_index(target)?;
    Ok(softmax_xent_index(logits, t))
}

pub(crate) fn softmax_xent_index(logits: &Tensor, t: usize) -> (f64, Tensor) {
    let loss = log_sum_exp(logits.data()) - logits.data()[t];
    let mut grad = softmax_slice(logits.data());
    grad[t] -= 1.0;
    (loss, Tensor::from_parts(logits.shape().to_vec(), grad))
}

/// Mean over pixels of two-way softmax cross-entropy. Channel 0 is
/// background, channel 1 foreground; `mask` holds 0/1 per pixel.
pub fn pixel_softmax_loss(fgbg: &Tensor, mask: &Tensor) -> Result<(f64, Tensor)> {
    let (c, h, w) = fgbg.dims3()?;
    if c != 2 || mask.shape() != [h, w] {
        return Err(Error::dim(format!(
            "pixel loss expects [2, H, W] scores and [H, W] mask, got {:?} and {:?}",
            fgbg.shape(),
            mask.shape()
        )));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::arg("mask must be binary"));
    }
    let n = h * w;
    let (bg, fg) = fgbg.data().split_at(n);
    let inv = 1.0 / n as f64;
    let mut grad = vec![0.0; 2 * n];
    let mut total = 0.0;
    for i in 0..n {
        let (right, wrong) = if mask.data()[i] == 1.0 { (fg[i], bg[i]) } else { (bg[i], fg[i]) };
        // -log σ(right - wrong) = softplus(wrong - right)
        let d = wrong - right;
        total += if d > 0.0 { d + libm::log1p(libm::exp(-d)) } else { libm::log1p(libm::exp(d)) };
        let p_fg = 1.0 / (1.0 + libm::exp(bg[i] - fg[i]));
        let p_bg = 1.0 - p_fg;
        let m = mask.data()[i];
        grad[i] = (p_bg - (1.0 - m)) * inv;
        grad[n + i] = (p_fg - m) * inv;
    }
    Ok((total * inv, Tensor::from_parts(vec![2, h, w], grad)))
}

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{encode, forward_encoded, ModelParams, NetConfig};
use crate::tensor::Tensor;

/// Outcome of [`attention_specificity`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecificityReport {
    /// Two-object images examined.
    pub images: usize,
    /// Images whose two attention peaks fall on two different objects.
    pub distinct: usize,
    /// Images where each label's peak falls on that label's own object.
    pub own_object: usize,
}

impl SpecificityReport {
    pub fn rate(&self) -> f64 {
        if self.images == 0 {
            0.0
        } else {
            self.distinct as f64 / self.images as f64
        }
    }
}

/// For each label of the image, the index (into `masks`) of the object
/// under that label's attention peak, or `None` if the peak's receptive
/// cell touches no object.
///
/// A feature site covers an `s x s` block of pixels, `s` being the total
/// pooling factor; the object overlapping that block most wins, lower
/// index on ties.
pub fn attention_argmax_regions(
    image: &Tensor,
    labels: &[usize],
    masks: &[Tensor],
    params: &ModelParams,
    cfg: &NetConfig,
) -> Result<Vec<Option<usize>>> {
    if params.attention().is_none() {
        return Err(Error::arg("attention specificity needs a TransferNet model"));
    }
    let enc = encode(image, &params.encoder, cfg)?;
    let trace = forward_encoded(&enc, labels, params, cfg, false)?;
    let (h, w) = cfg.feature_dims();
    let cell = cfg.image[1] / h;
    let width = cfg.image[2];
    trace
        .labels
        .iter()
        .map(|t| {
            let alpha = &t.attention.as_ref().expect("TransferNet traces carry attention").alpha;
            let site = alpha.argmax();
            let (i, j) = (site / w, site % w);
            let mut best: Option<(usize, usize)> = None;
            for (k, m) in masks.iter().enumerate() {
                let mut overlap = 0;
                for y in i * cell..(i + 1) * cell {
                    for x in j * cell..(j + 1) * cell {
                        overlap += usize::from(m.data()[y * width + x] > 0.5);
                    }
                }
                if overlap > 0 && best.is_none_or(|(_, o)| overlap > o) {
                    best = Some((k, overlap));
                }
            }
            Ok(best.map(|(k, _)| k))
        })
        .collect()
}

/// Checks, over the two-object images of `ds`, whether the attention peaks
/// of the two present labels land on different objects.
pub fn attention_specificity(ds: &Dataset, params: &ModelParams, cfg: &NetConfig) -> Result<SpecificityReport> {
    let mut report = SpecificityReport { images: 0, distinct: 0, own_object: 0 };
    for s in ds.samples.iter().filter(|s| s.labels.len() == 2 && s.has_masks()) {
        let r = attention_argmax_regions(&s.image, &s.labels, &s.masks, params, cfg)?;
        report.images += 1;
        if let [Some(a), Some(b)] = r[..] {
            if a != b {
                report.distinct += 1;
            }
            if a == 0 && b == 1 {
                report.own_object += 1;
            }
        }
    }
    Ok(report)
}

use super::decoder::decode_traced;
use super::{encode, Arch, BaselineHead, ClassifierParams, DecoderTrace, Encoded, Head, ModelParams, NetConfig};
use crate::attention::{attend, context, densify, AttentionMap, ContextVector, DensifiedAttention, LabelOneHot};
use crate::error::{Error, Result};
use crate::layers::conv2d;
use crate::tensor::{ensure_finite, matvec, Tensor};

/// Everything computed for one label of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTrace {
    pub label: usize,
    /// Attention scores and weights (TransferNet only).
    pub attention: Option<AttentionMap>,
    pub context: Option<ContextVector>,
    pub(crate) hidden_pre: Option<Vec<f64>>,
    pub logits: Tensor,
    /// Decoder input: `s = A z` for TransferNet, the bridged score map for
    /// BaselineNet.
    pub densified: DensifiedAttention,
    pub decoder: Option<DecoderTrace>,
}

impl LabelTrace {
    /// `[2, H, W]` decoder scores, if the pass decoded.
    pub fn fgbg(&self) -> Option<&Tensor> {
        self.decoder.as_ref().map(|d| &d.output)
    }
}

/// One forward pass: a single encode and one [`LabelTrace`] per label, in
/// the order the labels were given.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub encoded: Encoded,
    pub labels: Vec<LabelTrace>,
    /// BaselineNet per-category score maps `[L, H'/2, W'/2]`.
    pub score_maps: Option<Tensor>,
}

impl ForwardTrace {
    pub fn label_ids(&self) -> Vec<usize> {
        self.labels.iter().map(|t| t.label).collect()
    }
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::arg("label set is empty"));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::arg(format!("label {l} out of range for {n} categories")));
        }
        if labels[..i].contains(&l) {
            return Err(Error::arg(format!("label {l} appears twice")));
        }
    }
    Ok(())
}

pub(crate) fn classify_traced(z: &[f64], c: &ClassifierParams) -> Result<(Vec<f64>, Tensor)> {
    let mut pre = matvec(&c.w1, z)?;
    for (v, b) in pre.iter_mut().zip(c.b1.data()) {
        *v += b;
    }
    let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let mut logits = matvec(&c.w2, &hidden)?;
    for (v, b) in logits.iter_mut().zip(c.b2.data()) {
        *v += b;
    }
    ensure_finite(&logits, "classify")?;
    let n = logits.len();
    Ok((pre, Tensor::from_parts(vec![n], logits)))
}

/// `f_cls(z; θ_c)`: affine, relu, affine to `L` logits.
pub fn classify(z: &ContextVector, c: &ClassifierParams) -> Result<Tensor> {
    if z.0.len() != c.w1.shape()[1] {
        return Err(Error::dim(format!("context of length {} for classifier input {}", z.0.len(), c.w1.shape()[1])));
    }
    Ok(classify_traced(z.0.data(), c)?.1)
}

fn score_maps(enc: &Encoded, head: &BaselineHead) -> Result<Tensor> {
    conv2d(&enc.features.to_channels(), &head.score.kernels, &head.score.bias, 2, 0)
}

fn baseline_label(
    enc: &Encoded,
    maps: &Tensor,
    l: usize,
    head: &BaselineHead,
    params: &ModelParams,
    cfg: &NetConfig,
    with_decoder: bool,
) -> Result<LabelTrace> {
    let cells = cfg.score_cells();
    let logits: Vec<f64> = maps.data().chunks(cells).map(|c| c.iter().sum::<f64>() / cells as f64).collect();
    let map = &maps.data()[l * cells..(l + 1) * cells];
    let mut s = matvec(&head.bridge_w, map)?;
    for (v, b) in s.iter_mut().zip(head.bridge_b.data()) {
        *v += b;
    }
    ensure_finite(&s, "baseline bridge")?;
    let densified = DensifiedAttention(Tensor::from_parts(vec![s.len()], s));
    let decoder =
        if with_decoder { Some(decode_traced(&densified, &enc.switches, &params.decoder, cfg)?) } else { None };
    Ok(LabelTrace {
        label: l,
        attention: None,
        context: None,
        hidden_pre: None,
        logits: Tensor::from_parts(vec![logits.len()], logits),
        densified,
        decoder,
    })
}

fn transfer_label(
    enc: &Encoded,
    l: usize,
    params: &ModelParams,
    cfg: &NetConfig,
    with_decoder: bool,
) -> Result<LabelTrace> {
    let Head::Attention { attention, classifier } = &params.head else { unreachable!("checked by caller") };
    let a = &enc.features;
    let att = attend(a, &LabelOneHot::new(l, cfg.labels)?, attention)?;
    let z = context(a, &att.alpha)?;
    let (hidden_pre, logits) = classify_traced(z.0.data(), classifier)?;
    let s = densify(a, &z)?;
    let decoder = if with_decoder { Some(decode_traced(&s, &enc.switches, &params.decoder, cfg)?) } else { None };
    Ok(LabelTrace {
        label: l,
        attention: Some(att),
        context: Some(z),
        hidden_pre: Some(hidden_pre),
        logits,
        densified: s,
        decoder,
    })
}

/// Per-label forward pass on an already-encoded image. With
/// `with_decoder == false` the decoder is skipped, which is all the
/// classification objective needs.
pub fn forward_encoded(
    enc: &Encoded,
    labels: &[usize],
    params: &ModelParams,
    cfg: &NetConfig,
    with_decoder: bool,
) -> Result<ForwardTrace> {
    check_labels(labels, cfg.labels)?;
    let (traces, score_maps) = match &params.head {
        Head::Attention { .. } => {
            let t = labels.iter().map(|&l| transfer_label(enc, l, params, cfg, with_decoder)).collect::<Result<_>>()?;
            (t, None)
        }
        Head::Baseline(head) => {
            let maps = score_maps(enc, head)?;
            let t = labels
                .iter()
                .map(|&l| baseline_label(enc, &maps, l, head, params, cfg, with_decoder))
                .collect::<Result<_>>()?;
            (t, Some(maps))
        }
    };
    Ok(ForwardTrace { encoded: enc.clone(), labels: traces, score_maps })
}

fn forward_arch(
    x: &Tensor,
    labels: &[usize],
    params: &ModelParams,
    cfg: &NetConfig,
    arch: Arch,
) -> Result<ForwardTrace> {
    if params.arch() != arch {
        return Err(Error::arg(format!("parameters are for {}, not {}", params.arch().as_str(), arch.as_str())));
    }
    check_labels(labels, cfg.labels)?;
    let enc = encode(x, &params.encoder, cfg)?;
    forward_encoded(&enc, labels, params, cfg, true)
}

/// Encode once, then per label attend, pool the context, classify,
/// densify and decode.
pub fn transfernet_forward(
    x: &Tensor,
    labels: &[usize],
    params: &ModelParams,
    cfg: &NetConfig,
) -> Result<ForwardTrace> {
    forward_arch(x, labels, params, cfg, Arch::TransferNet)
}

/// Encode once, compute per-category score maps, and decode each
/// requested label's map after a fully-connected bridge.
pub fn baselinenet_forward(
    x: &Tensor,
    labels: &[usize],
    params: &ModelParams,
    cfg: &NetConfig,
) -> Result<ForwardTrace> {
    forward_arch(x, labels, params, cfg, Arch::BaselineNet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_normal, Rng};

    fn setup(arch: Arch, seed: u64) -> (NetConfig, ModelParams, Tensor) {
        let cfg = NetConfig::default();
        let mut rng = Rng::new(seed);
        let p = ModelParams::init(arch, &cfg, &mut rng).unwrap();
        let x = random_normal(&[1, 32, 32], 0.5, 0.2, &mut rng).unwrap();
        (cfg, p, x)
    }

    #[test]
    fn trace_cardinality_and_normalization() {
        let (cfg, p, x) = setup(Arch::TransferNet, 1);
        let t = transfernet_forward(&x, &[4, 1, 0], &p, &cfg).unwrap();
        assert_eq!(t.labels.len(), 3);
        assert_eq!(t.label_ids(), vec![4, 1, 0]);
        for lt in &t.labels {
            assert!((lt.attention.as_ref().unwrap().alpha.sum() - 1.0).abs() <= 1e-9);
            assert_eq!(lt.fgbg().unwrap().shape(), &[2, 32, 32]);
            assert_eq!(lt.logits.shape(), &[6]);
        }
    }

    #[test]
    fn labels_are_computed_independently() {
        for arch in [Arch::TransferNet, Arch::BaselineNet] {
            let (cfg, p, x) = setup(arch, 2);
            let f = if arch == Arch::TransferNet { transfernet_forward } else { baselinenet_forward };
            let joint = f(&x, &[2, 5], &p, &cfg).unwrap();
            let single = f(&x, &[5], &p, &cfg).unwrap();
            assert_eq!(joint.labels[1], single.labels[0]);
        }
    }

    #[test]
    fn empty_or_bad_labels_are_rejected() {
        let (cfg, p, x) = setup(Arch::TransferNet, 3);
        assert!(matches!(transfernet_forward(&x, &[], &p, &cfg), Err(Error::Argument(_))));
        assert!(matches!(transfernet_forward(&x, &[6], &p, &cfg), Err(Error::Argument(_))));
        assert!(matches!(transfernet_forward(&x, &[1, 1], &p, &cfg), Err(Error::Argument(_))));
        assert!(matches!(baselinenet_forward(&x, &[1], &p, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_classifier_weights_give_bias_logits() {
        let (cfg, mut p, x) = setup(Arch::TransferNet, 4);
        if let Head::Attention { classifier, .. } = &mut p.head {
            classifier.w1 = Tensor::zeros_like(&classifier.w1);
            classifier.w2 = Tensor::zeros_like(&classifier.w2);
            classifier.b2 = Tensor::vector(&[1., 2., 3., 4., 5., 6.]).unwrap();
        }
        let t = transfernet_forward(&x, &[0], &p, &cfg).unwrap();
        assert_eq!(t.labels[0].logits.data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn baseline_shapes_and_map_selection() {
        let (cfg, p, x) = setup(Arch::BaselineNet, 5);
        let t = baselinenet_forward(&x, &[3], &p, &cfg).unwrap();
        assert_eq!(t.labels[0].densified.0.shape(), &[64]);
        assert_eq!(t.labels[0].fgbg().unwrap().shape(), &[2, 32, 32]);
        let maps = t.score_maps.as_ref().unwrap();
        assert_eq!(maps.shape(), &[6, 4, 4]);

        // zeroing every other category's map leaves the decoder input alone
        let Head::Baseline(head) = &p.head else { unreachable!() };
        let mut only = vec![0.0; maps.len()];
        only[3 * 16..4 * 16].copy_from_slice(&maps.data()[3 * 16..4 * 16]);
        let only = Tensor::new(&[6, 4, 4], only).unwrap();
        let lt = baseline_label(&t.encoded, &only, 3, head, &p, &cfg, true).unwrap();
        assert_eq!(lt.densified, t.labels[0].densified);
        assert_eq!(lt.decoder, t.labels[0].decoder);
    }
}

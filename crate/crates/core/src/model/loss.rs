//! Classification, segmentation and joint objectives with gradients.
//!
//! The encoder is frozen, so gradients stop at the feature map: nothing
//! here ever produces a nonzero encoder gradient.

use super::decoder::decode_backward;
use super::forward::forward_encoded;
use super::{Encoded, ForwardTrace, Head, ModelParams, NetConfig};
use crate::attention::{attend_backward_into, LabelOneHot};
use crate::error::{Error, Result};
use crate::layers::{conv_param_grads, pixel_softmax_loss, softmax_xent_index, Geometry};
use crate::tensor::{matvec, matvec_t, outer_add, Tensor};

/// Backpropagates one label's logit and/or fg/bg-score gradients into
/// `grads`.
fn label_backward(
    trace: &ForwardTrace,
    i: usize,
    d_logits: Option<&Tensor>,
    d_fgbg: Option<&Tensor>,
    params: &ModelParams,
    cfg: &NetConfig,
    grads: &mut ModelParams,
) -> Result<()> {
    let lt = &trace.labels[i];
    let a = &trace.encoded.features;
    let ds = match d_fgbg {
        Some(g) => {
            let dec =
                lt.decoder.as_ref().ok_or_else(|| Error::Protocol("trace was computed without the decoder".into()))?;
            Some(decode_backward(dec, &trace.encoded.switches, &params.decoder, g, &mut grads.decoder, cfg)?)
        }
        None => None,
    };
    match (&params.head, &mut grads.head) {
        (Head::Attention { attention, classifier }, Head::Attention { attention: ga, classifier: gc }) => {
            let mut dz = vec![0.0; a.channels()];
            if let Some(ds) = &ds {
                dz = matvec_t(a.matrix(), ds.data())?;
            }
            if let Some(dl) = d_logits {
                let pre = lt.hidden_pre.as_ref().expect("transfer trace");
                let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                outer_add(gc.w2.data_mut(), dl.data(), &hidden);
                gc.b2.add_assign(dl);
                let dh = matvec_t(&classifier.w2, dl.data())?;
                let dpre: Vec<f64> = dh.iter().zip(pre).map(|(&g, &p)| if p > 0.0 { g } else { 0.0 }).collect();
                let z = lt.context.as_ref().expect("transfer trace");
                outer_add(gc.w1.data_mut(), &dpre, z.0.data());
                for (b, d) in gc.b1.data_mut().iter_mut().zip(&dpre) {
                    *b += d;
                }
                for (acc, v) in dz.iter_mut().zip(matvec_t(&classifier.w1, &dpre)?) {
                    *acc += v;
                }
            }
            let d_alpha = matvec(a.matrix(), &dz)?;
            let att = lt.attention.as_ref().expect("transfer trace");
            let y = LabelOneHot::new(lt.label, cfg.labels)?;
            attend_backward_into(a, &y, attention, att, &d_alpha, ga, false)?;
        }
        (Head::Baseline(head), Head::Baseline(gh)) => {
            let maps = trace.score_maps.as_ref().expect("baseline trace");
            let cells = cfg.score_cells();
            let mut d_maps = vec![0.0; maps.len()];
            if let Some(ds) = &ds {
                let range = lt.label * cells..(lt.label + 1) * cells;
                outer_add(gh.bridge_w.data_mut(), ds.data(), &maps.data()[range.clone()]);
                gh.bridge_b.add_assign(ds);
                for (acc, v) in d_maps[range].iter_mut().zip(matvec_t(&head.bridge_w, ds.data())?) {
                    *acc += v;
                }
            }
            if let Some(dl) = d_logits {
                for (chunk, g) in d_maps.chunks_mut(cells).zip(dl.data()) {
                    for v in chunk {
                        *v += g / cells as f64;
                    }
                }
            }
            let a_ch = a.to_channels();
            let geom = Geometry::conv(a_ch.shape(), &head.score.kernels, 2, 0)?;
            let d_maps = Tensor::from_parts(maps.shape().to_vec(), d_maps);
            let (dk, db) = conv_param_grads(&geom, &a_ch, &head.score.kernels, &d_maps);
            gh.score.kernels.add_assign(&dk);
            gh.score.bias.add_assign(&db);
        }
        _ => return Err(Error::arg("gradient accumulator does not match the model architecture")),
    }
    Ok(())
}

fn same_label_set(a: &[usize], b: &[usize]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

/// `Σ_l e_c(y^l, f_cls(z^l))` over the traced labels, which must be
/// exactly `targets`.
pub fn loss_cls(
    trace: &ForwardTrace,
    targets: &[usize],
    params: &ModelParams,
    cfg: &NetConfig,
) -> Result<(f64, ModelParams)> {
    if !same_label_set(targets, &trace.label_ids()) {
        return Err(Error::arg(format!("targets {targets:?} do not match traced labels {:?}", trace.label_ids())));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (i, lt) in trace.labels.iter().enumerate() {
        let (loss, g) = softmax_xent_index(&lt.logits, lt.label);
        total += loss;
        label_backward(trace, i, Some(&g), None, params, cfg, &mut grads)?;
    }
    Ok((total, grads))
}

/// `Σ_l e_s(d^l, f_dec(s^l))` with `masks` given in trace label order.
pub fn loss_seg(
    trace: &ForwardTrace,
    masks: &[Tensor],
    params: &ModelParams,
    cfg: &NetConfig,
) -> Result<(f64, ModelParams)> {
    if masks.len() != trace.labels.len() {
        return Err(Error::arg(format!("{} masks for {} labels", masks.len(), trace.labels.len())));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (i, (lt, mask)) in trace.labels.iter().zip(masks).enumerate() {
        let fgbg = lt.fgbg().ok_or_else(|| Error::Protocol("trace was computed without the decoder".into()))?;
        let (loss, g) = pixel_softmax_loss(fgbg, mask)?;
        total += loss;
        label_backward(trace, i, None, Some(&g), params, cfg, &mut grads)?;
    }
    Ok((total, grads))
}

/// One batch element for [`loss_joint`]. `masks` is present exactly for
/// source-domain samples, one per label in label order.
#[derive(Clone, Copy, Debug)]
pub struct LossSample<'a> {
    pub encoded: &'a Encoded,
    pub labels: &'a [usize],
    pub masks: Option<&'a [Tensor]>,
}

#[derive(Clone, Debug)]
pub struct JointLoss {
    /// `cls + λ·seg`.
    pub total: f64,
    pub cls: f64,
    pub seg: f64,
    pub grads: ModelParams,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct SampleLoss {
    pub cls: f64,
    pub seg: f64,
}

/// Forward and backward for one sample, adding `weight`-scaled gradients
/// into `grads`. The segmentation term is evaluated only when `segment` is
/// set and the sample carries masks; its gradient is skipped when
/// `lambda == 0`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_sample(
    sample: LossSample<'_>,
    params: &ModelParams,
    cfg: &NetConfig,
    lambda: f64,
    weight: f64,
    segment: bool,
    grads: &mut ModelParams,
) -> Result<SampleLoss> {
    let masks = if segment { sample.masks } else { None };
    if let Some(m) = masks {
        if m.len() != sample.labels.len() {
            return Err(Error::arg(format!("{} masks for {} labels", m.len(), sample.labels.len())));
        }
    }
    let trace = forward_encoded(sample.encoded, sample.labels, params, cfg, masks.is_some())?;
    let mut out = SampleLoss::default();
    for (i, lt) in trace.labels.iter().enumerate() {
        let (cls, g_cls) = softmax_xent_index(&lt.logits, lt.label);
        out.cls += cls;
        let mut g_seg = None;
        if let Some(m) = masks {
            let (seg, g) = pixel_softmax_loss(lt.fgbg().expect("decoded"), &m[i])?;
            out.seg += seg;
            if lambda != 0.0 {
                g_seg = Some(g.scale(weight * lambda));
            }
        }
        label_backward(&trace, i, Some(&g_cls.scale(weight)), g_seg.as_ref(), params, cfg, grads)?;
    }
    Ok(out)
}

/// `Σ_j Σ_l e_c + λ Σ_{j ∈ S} Σ_l e_s` over a batch; target-domain samples
/// (no masks) contribute only to the classification term.
pub fn loss_joint(batch: &[LossSample<'_>], params: &ModelParams, cfg: &NetConfig, lambda: f64) -> Result<JointLoss> {
    let mut grads = params.zeros_like();
    let (mut cls, mut seg) = (0.0, 0.0);
    for &sample in batch {
        let l = accumulate_sample(sample, params, cfg, lambda, 1.0, true, &mut grads)?;
        cls += l.cls;
        seg += l.seg;
    }
    Ok(JointLoss { total: cls + lambda * seg, cls, seg, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::grad_check_fn;
    use crate::model::{encode, forward_encoded, Arch, Group};
    use crate::tensor::{random_normal, Rng};

    fn tiny() -> NetConfig {
        NetConfig { image: [1, 8, 8], channels: vec![2, 3], labels: 3, factors: 4, hidden: 5, ..Default::default() }
    }

    /// Parameters with every tensor at a moderate random scale, so the
    /// probe point is generic.
    fn generic_params(arch: Arch, cfg: &NetConfig, rng: &mut Rng) -> ModelParams {
        let mut p = ModelParams::init(arch, cfg, rng).unwrap();
        for (_, t) in p.named_mut() {
            *t = random_normal(t.shape(), 0.0, 0.6, rng).unwrap();
        }
        p
    }

    fn mask(rng: &mut Rng) -> Tensor {
        let v = (0..64).map(|_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[8, 8], v).unwrap()
    }

    #[test]
    fn cls_loss_closed_forms() {
        let cfg = NetConfig { labels: 4, ..tiny() };
        let mut rng = Rng::new(1);
        let mut p = ModelParams::init(Arch::TransferNet, &cfg, &mut rng).unwrap();
        if let Head::Attention { classifier, .. } = &mut p.head {
            classifier.w2 = Tensor::zeros_like(&classifier.w2);
        }
        let enc = encode(&random_normal(&[1, 8, 8], 0.0, 1.0, &mut rng).unwrap(), &p.encoder, &cfg).unwrap();
        let trace = forward_encoded(&enc, &[0, 2, 3], &p, &cfg, false).unwrap();
        let (loss, _) = loss_cls(&trace, &[3, 0, 2], &p, &cfg).unwrap();
        assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(loss_cls(&trace, &[0, 2], &p, &cfg), Err(Error::Argument(_))));

        if let Head::Attention { classifier, .. } = &mut p.head {
            classifier.b2 = Tensor::vector(&[60., 0., 0., 0.]).unwrap();
        }
        let trace = forward_encoded(&enc, &[0], &p, &cfg, false).unwrap();
        assert!(loss_cls(&trace, &[0], &p, &cfg).unwrap().0 < 1e-20);
    }

    #[test]
    fn seg_loss_closed_forms() {
        let cfg = tiny();
        let mut rng = Rng::new(2);
        let mut p = ModelParams::init(Arch::TransferNet, &cfg, &mut rng).unwrap();
        let last = p.decoder.len() - 1;
        p.decoder[last].kernels = Tensor::zeros_like(&p.decoder[last].kernels);
        let enc = encode(&random_normal(&[1, 8, 8], 0.0, 1.0, &mut rng).unwrap(), &p.encoder, &cfg).unwrap();
        let trace = forward_encoded(&enc, &[0, 1], &p, &cfg, true).unwrap();
        let masks = [mask(&mut rng), mask(&mut rng)];
        let (loss, _) = loss_seg(&trace, &masks, &p, &cfg).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(matches!(loss_seg(&trace, &masks[..1], &p, &cfg), Err(Error::Argument(_))));

        // saturate toward the ground truth of an all-foreground mask
        p.decoder[last].bias = Tensor::vector(&[-40., 40.]).unwrap();
        let trace = forward_encoded(&enc, &[0], &p, &cfg, true).unwrap();
        let full = Tensor::full(&[8, 8], 1.0);
        assert!(loss_seg(&trace, &[full], &p, &cfg).unwrap().0 < 1e-30);
    }

    #[test]
    fn joint_decomposes_and_ignores_target_masks() {
        let cfg = tiny();
        let mut rng = Rng::new(3);
        let p = generic_params(Arch::TransferNet, &cfg, &mut rng);
        let encs: Vec<Encoded> = (0..3)
            .map(|_| encode(&random_normal(&[1, 8, 8], 0.0, 1.0, &mut rng).unwrap(), &p.encoder, &cfg).unwrap())
            .collect();
        let masks = [mask(&mut rng), mask(&mut rng)];
        let batch = [
            LossSample { encoded: &encs[0], labels: &[0, 1], masks: Some(&masks) },
            LossSample { encoded: &encs[1], labels: &[2], masks: None },
            LossSample { encoded: &encs[2], labels: &[1], masks: Some(&masks[1..]) },
        ];
        let lambda = 0.7;
        let joint = loss_joint(&batch, &p, &cfg, lambda).unwrap();
        let mut cls = 0.0;
        let mut seg = 0.0;
        for s in &batch {
            let t = forward_encoded(s.encoded, s.labels, &p, &cfg, true).unwrap();
            cls += loss_cls(&t, s.labels, &p, &cfg).unwrap().0;
            if let Some(m) = s.masks {
                seg += loss_seg(&t, m, &p, &cfg).unwrap().0;
            }
        }
        assert_eq!(joint.cls, cls);
        assert_eq!(joint.seg, seg);
        assert_eq!(joint.total, cls + lambda * seg);

        let zero = loss_joint(&batch, &p, &cfg, 0.0).unwrap();
        assert_eq!(zero.total, zero.cls);
        for (name, g, t) in zero.grads.named() {
            if g == Group::Decoder {
                assert_eq!(t.max_abs(), 0.0, "{name}");
            }
        }

        let target_only = loss_joint(&batch[1..2], &p, &cfg, 5.0).unwrap();
        assert_eq!(target_only.seg, 0.0);
        assert_eq!(target_only.total, target_only.cls);
    }

    fn check_joint(arch: Arch, seed: u64, groups: &[Group], lambda: f64) -> f64 {
        let cfg = tiny();
        let mut rng = Rng::new(seed);
        let p = generic_params(arch, &cfg, &mut rng);
        let enc = encode(&random_normal(&[1, 8, 8], 0.0, 1.0, &mut rng).unwrap(), &p.encoder, &cfg).unwrap();
        let masks = [mask(&mut rng), mask(&mut rng)];
        let labels = [2, 0];
        let batch = [LossSample { encoded: &enc, labels: &labels, masks: Some(&masks) }];
        let analytic = loss_joint(&batch, &p, &cfg, lambda).unwrap().grads.group_tensors(groups);
        let f = |a: &[Tensor]| {
            let mut q = p.clone();
            q.set_group_tensors(groups, a)?;
            Ok(loss_joint(&batch, &q, &cfg, lambda)?.total)
        };
        grad_check_fn(f, &p.group_tensors(groups), &analytic, 1e-5).unwrap().max_rel_error
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let all = [Group::Attention, Group::Classifier, Group::Decoder];
        for seed in 0..3 {
            let e = check_joint(Arch::TransferNet, 100 + seed, &all, 0.8);
            assert!(e <= 1e-4, "transfernet seed {seed}: {e}");
            let e = check_joint(Arch::BaselineNet, 200 + seed, &all, 0.8);
            assert!(e <= 1e-4, "baselinenet seed {seed}: {e}");
        }
    }

    #[test]
    fn encoder_never_receives_gradient() {
        let cfg = tiny();
        let mut rng = Rng::new(9);
        let p = generic_params(Arch::TransferNet, &cfg, &mut rng);
        let enc = encode(&random_normal(&[1, 8, 8], 0.0, 1.0, &mut rng).unwrap(), &p.encoder, &cfg).unwrap();
        let masks = [mask(&mut rng)];
        let batch = [LossSample { encoded: &enc, labels: &[1], masks: Some(&masks) }];
        let g = loss_joint(&batch, &p, &cfg, 1.0).unwrap().grads;
        for (_, group, t) in g.named() {
            if group == Group::Encoder {
                assert_eq!(t.max_abs(), 0.0);
            }
        }
    }
}

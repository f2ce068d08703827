//! Finite-difference checks over every layer and composite loss.

use crate::attention::{
    context, context_backward, densify, densify_backward, AttentionLayer, AttentionVariant, ContextVector, FeatureMap,
    LabelOneHot,
};
use crate::error::Result;
use crate::layers::{
    grad_check_fn, grad_check_report, maxpool2d, Conv2d, Deconv2d, FullyConnected, GradCheckReport, LayerContract,
    MaxPool2d, MaxUnpool2d, PixelSoftmaxLoss, Relu, SoftmaxXent,
};
use crate::model::{
    decode_backward, decode_traced, encode, encode_backward, encode_traced, forward_encoded, loss_cls, loss_joint,
    loss_seg, Arch, ConvParams, Group, LossSample, ModelParams, NetConfig,
};
use crate::tensor::{random_normal, softmax_slice, Rng, Tensor};

/// Central-difference step.
pub const SUITE_STEP: f64 = 1e-5;
/// Largest acceptable relative error.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Worst relative error of one check over all of its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub instances: usize,
    pub coordinates: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= SUITE_TOLERANCE
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    random_normal(shape, 0.0, std, rng).expect("suite shapes are valid")
}

fn layer<L: LayerContract>(l: &L, input: Tensor, params: &[Tensor]) -> Result<GradCheckReport> {
    grad_check_report(l, &input, params, SUITE_STEP)
}

/// Small network used for the composite checks.
fn tiny() -> NetConfig {
    NetConfig { image: [1, 8, 8], channels: vec![2, 3], labels: 3, factors: 4, hidden: 5, ..Default::default() }
}

fn generic_params(arch: Arch, cfg: &NetConfig, rng: &mut Rng) -> Result<ModelParams> {
    let mut p = ModelParams::init(arch, cfg, rng)?;
    for (_, t) in p.named_mut() {
        *t = normal(t.shape(), 0.3, rng);
    }
    Ok(p)
}

fn binary_mask(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n).map(|_| if rng.next_f64() < 0.4 { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, v).expect("mask shape is valid")
}

fn one_hot(len: usize, at: usize) -> Tensor {
    let mut v = vec![0.0; len];
    v[at] = 1.0;
    Tensor::new(&[len], v).expect("one-hot shape is valid")
}

/// Checks a loss of `params` restricted to `groups`.
fn params_check(
    p: &ModelParams,
    groups: &[Group],
    analytic: &ModelParams,
    loss: impl Fn(&ModelParams) -> Result<f64>,
) -> Result<GradCheckReport> {
    let f = |a: &[Tensor]| {
        let mut q = p.clone();
        q.set_group_tensors(groups, a)?;
        loss(&q)
    };
    grad_check_fn(f, &p.group_tensors(groups), &analytic.group_tensors(groups), SUITE_STEP)
}

const HEAD: &[Group] = &[Group::Attention, Group::Classifier];
const HEAD_AND_DECODER: &[Group] = &[Group::Attention, Group::Classifier, Group::Decoder];

fn composite(name: &'static str, rng: &mut Rng) -> Result<GradCheckReport> {
    let cfg = tiny();
    let arch = if name.contains("baselinenet") { Arch::BaselineNet } else { Arch::TransferNet };
    let p = generic_params(arch, &cfg, rng)?;
    let enc = encode(&normal(&[1, 8, 8], 1.0, rng), &p.encoder, &cfg)?;
    let labels = [2, 0];
    let masks = [binary_mask(&[8, 8], rng), binary_mask(&[8, 8], rng)];
    if name.starts_with("loss_cls") {
        let (_, g) = loss_cls(&forward_encoded(&enc, &labels, &p, &cfg, false)?, &labels, &p, &cfg)?;
        params_check(&p, HEAD, &g, |q| {
            Ok(loss_cls(&forward_encoded(&enc, &labels, q, &cfg, false)?, &labels, q, &cfg)?.0)
        })
    } else if name.starts_with("loss_seg") {
        let (_, g) = loss_seg(&forward_encoded(&enc, &labels, &p, &cfg, true)?, &masks, &p, &cfg)?;
        params_check(&p, HEAD_AND_DECODER, &g, |q| {
            Ok(loss_seg(&forward_encoded(&enc, &labels, q, &cfg, true)?, &masks, q, &cfg)?.0)
        })
    } else {
        let target = encode(&normal(&[1, 8, 8], 1.0, rng), &p.encoder, &cfg)?;
        let batch = [
            LossSample { encoded: &enc, labels: &labels, masks: Some(&masks) },
            LossSample { encoded: &target, labels: &[1], masks: None },
        ];
        let lambda = 0.7;
        let g = loss_joint(&batch, &p, &cfg, lambda)?.grads;
        params_check(&p, HEAD_AND_DECODER, &g, |q| Ok(loss_joint(&batch, q, &cfg, lambda)?.total))
    }
}

fn encoder_check(rng: &mut Rng) -> Result<GradCheckReport> {
    let cfg = tiny();
    let p = generic_params(Arch::TransferNet, &cfg, rng)?;
    let x = normal(&[1, 8, 8], 1.0, rng);
    let (top, trace) = encode_traced(&x, &p.encoder, &cfg)?;
    let dir = normal(top.shape(), 1.0, rng);
    let grads = encode_backward(&trace, &p.encoder, &dir, &cfg)?;
    let args: Vec<Tensor> = p.encoder.iter().flat_map(|c| [c.kernels.clone(), c.bias.clone()]).collect();
    let analytic: Vec<Tensor> = grads.into_iter().flat_map(|c| [c.kernels, c.bias]).collect();
    let f = |a: &[Tensor]| {
        let layers: Vec<ConvParams> =
            a.chunks(2).map(|c| ConvParams { kernels: c[0].clone(), bias: c[1].clone() }).collect();
        encode_traced(&x, &layers, &cfg)?.0.dot(&dir)
    };
    grad_check_fn(f, &args, &analytic, SUITE_STEP)
}

fn decoder_check(rng: &mut Rng) -> Result<GradCheckReport> {
    let cfg = tiny();
    let p = generic_params(Arch::TransferNet, &cfg, rng)?;
    let enc = encode(&normal(&[1, 8, 8], 1.0, rng), &p.encoder, &cfg)?;
    let s = normal(&[cfg.sites()], 1.0, rng);
    let dir = normal(&[2, 8, 8], 1.0, rng);
    let ds = crate::attention::DensifiedAttention(s.clone());
    let trace = decode_traced(&ds, &enc.switches, &p.decoder, &cfg)?;
    let mut grads: Vec<ConvParams> = p.decoder.iter().map(ConvParams::zeros_like).collect();
    let d_s = decode_backward(&trace, &enc.switches, &p.decoder, &dir, &mut grads, &cfg)?;
    let mut args = vec![s];
    args.extend(p.decoder.iter().flat_map(|c| [c.kernels.clone(), c.bias.clone()]));
    let mut analytic = vec![d_s];
    analytic.extend(grads.into_iter().flat_map(|c| [c.kernels, c.bias]));
    let f = |a: &[Tensor]| {
        let layers: Vec<ConvParams> =
            a[1..].chunks(2).map(|c| ConvParams { kernels: c[0].clone(), bias: c[1].clone() }).collect();
        let t = decode_traced(&crate::attention::DensifiedAttention(a[0].clone()), &enc.switches, &layers, &cfg)?;
        t.output.dot(&dir)
    };
    grad_check_fn(f, &args, &analytic, SUITE_STEP)
}

/// Context and densification checked jointly in `A` and their second input.
fn bilinear_check(densifying: bool, rng: &mut Rng) -> Result<GradCheckReport> {
    let (h, w, d) = (2, 3, 4);
    let a = normal(&[h * w, d], 1.0, rng);
    if densifying {
        let z = normal(&[d], 1.0, rng);
        let dir = normal(&[h * w], 1.0, rng);
        let fm = FeatureMap::new(a.clone(), h, w)?;
        let (da, dz) = densify_backward(&fm, &ContextVector(z.clone()), &dir)?;
        let f =
            |x: &[Tensor]| densify(&FeatureMap::new(x[0].clone(), h, w)?, &ContextVector(x[1].clone()))?.0.dot(&dir);
        grad_check_fn(f, &[a, z], &[da, dz], SUITE_STEP)
    } else {
        let alpha = Tensor::new(&[h * w], softmax_slice(normal(&[h * w], 1.0, rng).data()))?;
        let dir = normal(&[d], 1.0, rng);
        let fm = FeatureMap::new(a.clone(), h, w)?;
        let (da, dalpha) = context_backward(&fm, &alpha, &dir)?;
        let f = |x: &[Tensor]| context(&FeatureMap::new(x[0].clone(), h, w)?, &x[1])?.0.dot(&dir);
        grad_check_fn(f, &[a, alpha], &[da, dalpha], SUITE_STEP)
    }
}

fn instance(name: &'static str, rng: &mut Rng) -> Result<GradCheckReport> {
    match name {
        "conv2d" => layer(
            &Conv2d { stride: 1, pad: 1 },
            normal(&[2, 5, 5], 1.0, rng),
            &[normal(&[3, 2, 3, 3], 0.7, rng), normal(&[3], 0.5, rng)],
        ),
        "conv2d_stride2" => layer(
            &Conv2d { stride: 2, pad: 0 },
            normal(&[3, 4, 4], 1.0, rng),
            &[normal(&[2, 3, 2, 2], 0.7, rng), normal(&[2], 0.5, rng)],
        ),
        "deconv2d" => layer(
            &Deconv2d { stride: 1, pad: 1 },
            normal(&[3, 4, 4], 1.0, rng),
            &[normal(&[3, 2, 3, 3], 0.7, rng), normal(&[2], 0.5, rng)],
        ),
        "fully_connected" => {
            layer(&FullyConnected, normal(&[5], 1.0, rng), &[normal(&[4, 5], 0.7, rng), normal(&[4], 0.5, rng)])
        }
        "relu" => layer(&Relu, normal(&[3, 4, 4], 1.0, rng), &[]),
        "maxpool2d" => layer(&MaxPool2d, normal(&[2, 4, 6], 1.0, rng), &[]),
        "maxunpool2d" => {
            let (_, switches) = maxpool2d(&normal(&[2, 4, 6], 1.0, rng))?;
            layer(&MaxUnpool2d { switches }, normal(&[2, 2, 3], 1.0, rng), &[])
        }
        "softmax_xent" => {
            let t = rng.below(5);
            layer(&SoftmaxXent { target: one_hot(5, t) }, normal(&[5], 1.5, rng), &[])
        }
        "pixel_softmax_loss" => {
            let mask = binary_mask(&[4, 5], rng);
            layer(&PixelSoftmaxLoss { mask }, normal(&[2, 4, 5], 1.5, rng), &[])
        }
        "attention_global" | "attention_location_shared" => {
            let variant =
                if name == "attention_global" { AttentionVariant::Global } else { AttentionVariant::LocationShared };
            let l = AttentionLayer { label: LabelOneHot::new(rng.below(5), 5)?, variant, height: 2, width: 3 };
            let mut p = crate::attention::AttentionParams::init(variant, 6, 4, 5, 3, rng)?;
            for (_, t) in p.tensors_mut() {
                *t = normal(t.shape(), 0.7, rng);
            }
            let params: Vec<Tensor> = p.tensors().iter().map(|(_, t)| (*t).clone()).collect();
            layer(&l, normal(&[6, 4], 1.0, rng), &params)
        }
        "context" => bilinear_check(false, rng),
        "densify" => bilinear_check(true, rng),
        "encoder" => encoder_check(rng),
        "decoder" => decoder_check(rng),
        _ => composite(name, rng),
    }
}

/// Names of every check, in report order.
pub const SUITE_CHECKS: &[&str] = &[
    "conv2d",
    "conv2d_stride2",
    "deconv2d",
    "fully_connected",
    "relu",
    "maxpool2d",
    "maxunpool2d",
    "softmax_xent",
    "pixel_softmax_loss",
    "attention_global",
    "attention_location_shared",
    "context",
    "densify",
    "encoder",
    "decoder",
    "loss_cls_transfernet",
    "loss_cls_baselinenet",
    "loss_seg_transfernet",
    "loss_seg_baselinenet",
    "loss_joint_transfernet",
    "loss_joint_baselinenet",
];

/// Runs every check on `instances` seeded random instances.
pub fn gradient_suite(instances: usize) -> Result<Vec<SuiteEntry>> {
    SUITE_CHECKS
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut entry = SuiteEntry { name, max_rel_error: 0.0, instances, coordinates: 0 };
            for i in 0..instances {
                let mut rng = Rng::stream(0x67AD_C4EC + k as u64, i as u64);
                let r = instance(name, &mut rng)?;
                entry.max_rel_error = entry.max_rel_error.max(r.max_rel_error);
                entry.coordinates += r.coordinates;
            }
            Ok(entry)
        })
        .collect()
}

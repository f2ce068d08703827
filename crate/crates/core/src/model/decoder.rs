use super::{ConvParams, NetConfig};
use crate::attention::DensifiedAttention;
use crate::error::{Error, Result};
use crate::layers::{
    deconv2d, deconv2d_backward, deconv2d_backward_sparse, maxunpool2d, maxunpool2d_backward, relu, relu_backward,
    PoolSwitches,
};
use crate::tensor::Tensor;

/// Intermediate values of one decoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderTrace {
    /// Input of each transposed convolution; the first is `s` as `[1, H', W']`.
    inputs: Vec<Tensor>,
    /// Pre-relu output of every transposed convolution but the last.
    pre: Vec<Tensor>,
    /// `[2, H, W]` scores, channel 0 background and channel 1 foreground.
    pub output: Tensor,
}

fn check_switches(switches: &[PoolSwitches], layers: &[ConvParams], cfg: &NetConfig) -> Result<()> {
    if switches.len() + 1 != layers.len() || switches.len() != cfg.channels.len() {
        return Err(Error::Protocol(format!(
            "decoder with {} layers needs {} pooling switch sets from a preceding encode, got {}",
            layers.len(),
            layers.len().saturating_sub(1),
            switches.len()
        )));
    }
    let mut h = cfg.image[1];
    let mut w = cfg.image[2];
    for (sw, &c) in switches.iter().zip(&cfg.channels) {
        if sw.input_shape() != [c, h, w] {
            return Err(Error::Protocol(format!(
                "pooling switches for input {:?} do not come from this encoder (expected {:?})",
                sw.input_shape(),
                [c, h, w]
            )));
        }
        h /= 2;
        w /= 2;
    }
    Ok(())
}

pub(crate) fn decode_traced(
    s: &DensifiedAttention,
    switches: &[PoolSwitches],
    layers: &[ConvParams],
    cfg: &NetConfig,
) -> Result<DecoderTrace> {
    check_switches(switches, layers, cfg)?;
    let (h, w) = cfg.feature_dims();
    if s.0.len() != h * w {
        return Err(Error::dim(format!("decoder input has {} entries, feature map has {}", s.0.len(), h * w)));
    }
    let pad = cfg.kernel / 2;
    let n = layers.len() - 1;
    let mut inputs = vec![s.0.reshape(&[1, h, w])?];
    let mut pre = Vec::with_capacity(n);
    for (i, layer) in layers.iter().enumerate() {
        let y = deconv2d(&inputs[i], &layer.kernels, &layer.bias, 1, pad)?;
        if i == n {
            return Ok(DecoderTrace { inputs, pre, output: y });
        }
        inputs.push(maxunpool2d(&relu(&y), &switches[n - 1 - i])?);
        pre.push(y);
    }
    unreachable!("decoder has at least one layer")
}

/// `f_dec(s; θ_s)`: foreground/background scores at full image resolution.
pub fn decode(
    s: &DensifiedAttention,
    switches: &[PoolSwitches],
    layers: &[ConvParams],
    cfg: &NetConfig,
) -> Result<Tensor> {
    Ok(decode_traced(s, switches, layers, cfg)?.output)
}

/// Accumulates decoder parameter gradients into `grads` and returns the
/// gradient w.r.t. `s`.
pub(crate) fn decode_backward(
    trace: &DecoderTrace,
    switches: &[PoolSwitches],
    layers: &[ConvParams],
    grad_out: &Tensor,
    grads: &mut [ConvParams],
    cfg: &NetConfig,
) -> Result<Tensor> {
    let pad = cfg.kernel / 2;
    let n = layers.len() - 1;
    let mut g = grad_out.clone();
    for i in (0..=n).rev() {
        let cg = if i == 0 {
            deconv2d_backward(&trace.inputs[0], &layers[0].kernels, &g, 1, pad)?
        } else {
            // inputs past the first are unpooled relu outputs, so the input
            // gradient is only needed where they are nonzero
            deconv2d_backward_sparse(&trace.inputs[i], &layers[i].kernels, &g, 1, pad)?
        };
        grads[i].kernels.add_assign(&cg.kernels);
        grads[i].bias.add_assign(&cg.bias);
        if i == 0 {
            let m = cg.input.len();
            return cg.input.reshape(&[m]);
        }
        let g_act = maxunpool2d_backward(&cg.input, &switches[n - i])?;
        g = relu_backward(&trace.pre[i - 1], &g_act)?;
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::grad_check_fn;
    use crate::model::{encode, Arch, ModelParams};
    use crate::tensor::{random_normal, Rng};

    fn tiny() -> NetConfig {
        NetConfig { image: [1, 8, 8], channels: vec![2, 3], labels: 3, factors: 4, hidden: 5, ..Default::default() }
    }

    #[test]
    fn output_matches_image_size() {
        let cfg = NetConfig::default();
        let mut rng = Rng::new(1);
        let p = ModelParams::init(Arch::TransferNet, &cfg, &mut rng).unwrap();
        let x = random_normal(&[1, 32, 32], 0.5, 0.3, &mut rng).unwrap();
        let enc = encode(&x, &p.encoder, &cfg).unwrap();
        let s = DensifiedAttention(random_normal(&[64], 0.0, 1.0, &mut rng).unwrap());
        let out = decode(&s, &enc.switches, &p.decoder, &cfg).unwrap();
        assert_eq!(out.shape(), &[2, 32, 32]);
    }

    #[test]
    fn zero_input_and_kernels_give_bias_planes() {
        let cfg = tiny();
        let mut rng = Rng::new(2);
        let mut p = ModelParams::init(Arch::TransferNet, &cfg, &mut rng).unwrap();
        for c in &mut p.decoder {
            c.kernels = Tensor::zeros_like(&c.kernels);
        }
        let last = p.decoder.len() - 1;
        p.decoder[last].bias = Tensor::vector(&[-0.5, 0.25]).unwrap();
        let enc = encode(&random_normal(&[1, 8, 8], 0.0, 1.0, &mut rng).unwrap(), &p.encoder, &cfg).unwrap();
        let out = decode(&DensifiedAttention(Tensor::zeros(&[4])), &enc.switches, &p.decoder, &cfg).unwrap();
        assert!(out.data()[..64].iter().all(|&v| v == -0.5));
        assert!(out.data()[64..].iter().all(|&v| v == 0.25));
    }

    #[test]
    fn missing_switches_are_a_protocol_error() {
        let cfg = tiny();
        let p = ModelParams::init(Arch::TransferNet, &cfg, &mut Rng::new(3)).unwrap();
        let s = DensifiedAttention(Tensor::zeros(&[4]));
        assert!(matches!(decode(&s, &[], &p.decoder, &cfg), Err(Error::Protocol(_))));
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let cfg = tiny();
        for seed in 0..5 {
            let mut rng = Rng::new(10 + seed);
            let mut p = ModelParams::init(Arch::TransferNet, &cfg, &mut rng).unwrap();
            for c in &mut p.decoder {
                c.kernels = random_normal(c.kernels.shape(), 0.0, 0.7, &mut rng).unwrap();
                c.bias = random_normal(c.bias.shape(), 0.0, 0.3, &mut rng).unwrap();
            }
            let enc = encode(&random_normal(&[1, 8, 8], 0.0, 1.0, &mut rng).unwrap(), &p.encoder, &cfg).unwrap();
            let s = random_normal(&[4], 0.0, 1.0, &mut rng).unwrap();
            let dir = random_normal(&[2, 8, 8], 0.0, 1.0, &mut rng).unwrap();
            let trace = decode_traced(&DensifiedAttention(s.clone()), &enc.switches, &p.decoder, &cfg).unwrap();
            let mut grads: Vec<ConvParams> = p.decoder.iter().map(ConvParams::zeros_like).collect();
            let ds = decode_backward(&trace, &enc.switches, &p.decoder, &dir, &mut grads, &cfg).unwrap();

            let mut args = vec![s];
            args.extend(p.decoder.iter().flat_map(|c| [c.kernels.clone(), c.bias.clone()]));
            let mut analytic = vec![ds];
            analytic.extend(grads.into_iter().flat_map(|c| [c.kernels, c.bias]));
            let f = |a: &[Tensor]| {
                let layers: Vec<ConvParams> =
                    a[1..].chunks(2).map(|c| ConvParams { kernels: c[0].clone(), bias: c[1].clone() }).collect();
                decode(&DensifiedAttention(a[0].clone()), &enc.switches, &layers, &cfg)?.dot(&dir)
            };
            let r = grad_check_fn(f, &args, &analytic, 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
        }
    }
}

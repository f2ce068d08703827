use super::{ConvParams, NetConfig};
use crate::attention::FeatureMap;
use crate::error::{Error, Result};
use crate::layers::{conv2d, conv2d_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, PoolSwitches};
use crate::tensor::Tensor;

/// Encoder output for one image: the feature map and the pooling switches
/// the decoder unpools with, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub features: FeatureMap,
    pub switches: Vec<PoolSwitches>,
}

/// Per-layer inputs and pre-activations, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct EncoderTrace {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    pub switches: Vec<PoolSwitches>,
}

fn check_image(x: &Tensor, cfg: &NetConfig) -> Result<()> {
    if x.shape() != cfg.image {
        return Err(Error::dim(format!("image has shape {:?}, network expects {:?}", x.shape(), cfg.image)));
    }
    Ok(())
}

/// Runs the encoder, returning the last pooled activation `[D, H', W']`.
pub(crate) fn encode_traced(x: &Tensor, layers: &[ConvParams], cfg: &NetConfig) -> Result<(Tensor, EncoderTrace)> {
    check_image(x, cfg)?;
    let pad = cfg.kernel / 2;
    let mut trace = EncoderTrace { inputs: Vec::new(), pre: Vec::new(), switches: Vec::new() };
    let mut h = x.clone();
    for layer in layers {
        let pre = conv2d(&h, &layer.kernels, &layer.bias, 1, pad)?;
        let (pooled, sw) = maxpool2d(&relu(&pre))?;
        trace.inputs.push(std::mem::replace(&mut h, pooled));
        trace.pre.push(pre);
        trace.switches.push(sw);
    }
    Ok((h, trace))
}

/// `A = f_enc(x; θ_e)` as an `M x D` feature map, plus pooling switches.
pub fn encode(x: &Tensor, layers: &[ConvParams], cfg: &NetConfig) -> Result<Encoded> {
    let (top, trace) = encode_traced(x, layers, cfg)?;
    Ok(Encoded { features: FeatureMap::from_channels(&top)?, switches: trace.switches })
}

/// Parameter gradients of the encoder given the gradient w.r.t. its last
/// pooled activation.
pub(crate) fn encode_backward(
    trace: &EncoderTrace,
    layers: &[ConvParams],
    grad_top: &Tensor,
    cfg: &NetConfig,
) -> Result<Vec<ConvParams>> {
    let pad = cfg.kernel / 2;
    let mut grads = Vec::with_capacity(layers.len());
    let mut g = grad_top.clone();
    for i in (0..layers.len()).rev() {
        let g_act = maxpool2d_backward(&g, &trace.switches[i])?;
        let g_pre = relu_backward(&trace.pre[i], &g_act)?;
        let cg = conv2d_backward(&trace.inputs[i], &layers[i].kernels, &g_pre, 1, pad)?;
        grads.push(ConvParams { kernels: cg.kernels, bias: cg.bias });
        g = cg.input;
    }
    grads.reverse();
    Ok(grads)
}

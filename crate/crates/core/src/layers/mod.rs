//! Differentiable layers with explicit forward and backward passes.
//!
//! The free functions are the primitives; the [`LayerContract`] wrappers
//! bundle them with their parameters so [`grad_check`] can probe any of them
//! the same way.

mod conv;
mod dense;
mod gradcheck;
mod loss;
mod pool;

pub use conv::{conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvGrads};
pub(crate) use conv::{conv_param_grads, deconv2d_backward_sparse, Geometry};
pub use dense::{fully_connected, fully_connected_backward, relu, relu_backward, DenseGrads};
pub use gradcheck::{
    grad_check, grad_check_fn, grad_check_report, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR,
};
pub(crate) use loss::softmax_xent_index;
pub use loss::{pixel_softmax_loss, softmax_xent};
pub use pool::{maxpool2d, maxpool2d_backward, maxunpool2d, maxunpool2d_backward, PoolSwitches};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A layer as a pair of pure functions. `forward` maps an input and
/// parameters to an output plus whatever `backward` needs; `backward` maps
/// that cache and an output gradient to the input gradient and one gradient
/// per parameter, in parameter order.
pub trait LayerContract {
    type Cache;

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, Self::Cache)>;

    fn backward(&self, cache: &Self::Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)>;
}

fn expect_params<'a>(params: &'a [Tensor], n: usize, layer: &str) -> Result<&'a [Tensor]> {
    if params.len() != n {
        return Err(Error::arg(format!("{layer} takes {n} parameters, got {}", params.len())));
    }
    Ok(params)
}

/// Params: `[kernels, bias]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl LayerContract for Conv2d {
    type Cache = (Tensor, Tensor);

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, Self::Cache)> {
        let p = expect_params(params, 2, "conv2d")?;
        let y = conv2d(input, &p[0], &p[1], self.stride, self.pad)?;
        Ok((y, (input.clone(), p[0].clone())))
    }

    fn backward(&self, (x, k): &Self::Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let g = conv2d_backward(x, k, grad_out, self.stride, self.pad)?;
        Ok((g.input, vec![g.kernels, g.bias]))
    }
}

/// Params: `[kernels, bias]`.
#[derive(Clone, Copy, Debug)]
pub struct Deconv2d {
    pub stride: usize,
    pub pad: usize,
}

impl LayerContract for Deconv2d {
    type Cache = (Tensor, Tensor);

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, Self::Cache)> {
        let p = expect_params(params, 2, "deconv2d")?;
        let y = deconv2d(input, &p[0], &p[1], self.stride, self.pad)?;
        Ok((y, (input.clone(), p[0].clone())))
    }

    fn backward(&self, (x, k): &Self::Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let g = deconv2d_backward(x, k, grad_out, self.stride, self.pad)?;
        Ok((g.input, vec![g.kernels, g.bias]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaxPool2d;

impl LayerContract for MaxPool2d {
    type Cache = PoolSwitches;

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, Self::Cache)> {
        expect_params(params, 0, "maxpool2d")?;
        maxpool2d(input)
    }

    fn backward(&self, switches: &Self::Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok((maxpool2d_backward(grad_out, switches)?, vec![]))
    }
}

/// Unpooling with switches fixed at construction.
#[derive(Clone, Debug)]
pub struct MaxUnpool2d {
    pub switches: PoolSwitches,
}

impl LayerContract for MaxUnpool2d {
    type Cache = ();

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, ())> {
        expect_params(params, 0, "maxunpool2d")?;
        Ok((maxunpool2d(input, &self.switches)?, ()))
    }

    fn backward(&self, _: &(), grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok((maxunpool2d_backward(grad_out, &self.switches)?, vec![]))
    }
}

/// Params: `[weights, bias]`.
#[derive(Clone, Copy, Debug)]
pub struct FullyConnected;

impl LayerContract for FullyConnected {
    type Cache = (Tensor, Tensor);

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, Self::Cache)> {
        let p = expect_params(params, 2, "fully_connected")?;
        Ok((fully_connected(input, &p[0], &p[1])?, (input.clone(), p[0].clone())))
    }

    fn backward(&self, (x, w): &Self::Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let g = fully_connected_backward(x, w, grad_out)?;
        Ok((g.input, vec![g.weights, g.bias]))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Relu;

impl LayerContract for Relu {
    type Cache = Tensor;

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, Tensor)> {
        expect_params(params, 0, "relu")?;
        Ok((relu(input), input.clone()))
    }

    fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok((relu_backward(x, grad_out)?, vec![]))
    }
}

/// Softmax cross-entropy against a fixed one-hot target; output is `[1]`.
#[derive(Clone, Debug)]
pub struct SoftmaxXent {
    pub target: Tensor,
}

impl LayerContract for SoftmaxXent {
    type Cache = Tensor;

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, Tensor)> {
        expect_params(params, 0, "softmax_xent")?;
        let (loss, grad) = softmax_xent(input, &self.target)?;
        Ok((Tensor::from_parts(vec![1], vec![loss]), grad))
    }

    fn backward(&self, grad: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok((grad.scale(grad_out.data()[0]), vec![]))
    }
}

/// Pixel-wise fg/bg loss against a fixed mask; output is `[1]`.
#[derive(Clone, Debug)]
pub struct PixelSoftmaxLoss {
    pub mask: Tensor,
}

impl LayerContract for PixelSoftmaxLoss {
    type Cache = Tensor;

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, Tensor)> {
        expect_params(params, 0, "pixel_softmax_loss")?;
        let (loss, grad) = pixel_softmax_loss(input, &self.mask)?;
        Ok((Tensor::from_parts(vec![1], vec![loss]), grad))
    }

    fn backward(&self, grad: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        Ok((grad.scale(grad_out.data()[0]), vec![]))
    }
}

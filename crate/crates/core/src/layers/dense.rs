use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, matvec, matvec_t, outer_add, Tensor};

/// Affine map `W x + b` for `x: [N]`, `W: [M, N]`, `b: [M]`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = weights.dims2()?;
    if input.len() != n || bias.shape() != [m] {
        return Err(Error::dim(format!(
            "fully_connected: input {:?}, weights {:?}, bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let mut y = matvec(weights, input.data())?;
    for (v, b) in y.iter_mut().zip(bias.data()) {
        *v += b;
    }
    ensure_finite(&y, "fully_connected")?;
    Ok(Tensor::from_parts(vec![m], y))
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (m, n) = weights.dims2()?;
    if input.len() != n || grad_out.len() != m {
        return Err(Error::dim(format!(
            "fully_connected_backward: input {:?}, weights {:?}, grad {:?}",
            input.shape(),
            weights.shape(),
            grad_out.shape()
        )));
    }
    let dx = matvec_t(weights, grad_out.data())?;
    let mut dw = vec![0.0; m * n];
    outer_add(&mut dw, grad_out.data(), input.data());
    Ok(DenseGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx),
        weights: Tensor::from_parts(vec![m, n], dw),
        bias: Tensor::from_parts(vec![m], grad_out.data().to_vec()),
    })
}

/// `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes gradient where the forward input was strictly positive. The
/// subgradient at exactly zero is taken to be 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::dim(format!("relu_backward: {:?} vs {:?}", input.shape(), grad_out.shape())));
    }
    let data = input.data().iter().zip(grad_out.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data))
}

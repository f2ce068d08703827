use crate::error::{Error, Result};
use crate::model::{Group, ModelParams};
use crate::tensor::Tensor;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.0005, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter tensor, and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`, named by position.
    pub fn for_tensors(params: &[Tensor]) -> Self {
        let names = (0..params.len()).map(|i| i.to_string()).collect();
        AdamState::named(names, params.iter())
    }

    fn named<'a>(names: Vec<String>, shapes: impl Iterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = shapes.map(Tensor::zeros_like).collect();
        AdamState { t: 0, names, v: m.clone(), m }
    }

    /// Zero moments for the tensors of `groups`, in canonical order.
    pub fn for_model(params: &ModelParams, groups: &[Group]) -> Self {
        let sel: Vec<_> = params.named().into_iter().filter(|(_, g, _)| groups.contains(g)).collect();
        let names = sel.iter().map(|(n, _, _)| n.clone()).collect();
        AdamState::named(names, sel.iter().map(|(_, _, t)| *t))
    }
}

fn update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, hp: &AdamConfig) {
    let c1 = 1.0 - libm::pow(hp.beta1, t as f64);
    let c2 = 1.0 - libm::pow(hp.beta2, t as f64);
    for i in 0..theta.len() {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

fn check(params: &[&Tensor], grads: &[&Tensor], state: &AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!(
                "parameter {i}: shape {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, hp: &AdamConfig) -> Result<()> {
    check(&params.iter().collect::<Vec<_>>(), &grads.iter().collect::<Vec<_>>(), state)?;
    state.t += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        update(p.data_mut(), g.data(), state.m[i].data_mut(), state.v[i].data_mut(), state.t, hp);
    }
    Ok(())
}

/// Adam update restricted to `groups`; every other tensor is left
/// bit-identical.
pub(crate) fn adam_step_model(
    params: &mut ModelParams,
    grads: &ModelParams,
    groups: &[Group],
    state: &mut AdamState,
    hp: &AdamConfig,
) -> Result<()> {
    let g: Vec<&Tensor> =
        grads.named().into_iter().filter(|(_, gr, _)| groups.contains(gr)).map(|(_, _, t)| t).collect();
    let mut p: Vec<&mut Tensor> =
        params.named_mut().into_iter().filter(|(gr, _)| groups.contains(gr)).map(|(_, t)| t).collect();
    check(&p.iter().map(|t| &**t).collect::<Vec<_>>(), &g, state)?;
    state.t += 1;
    for (i, (pt, gt)) in p.iter_mut().zip(&g).enumerate() {
        update(pt.data_mut(), gt.data(), state.m[i].data_mut(), state.v[i].data_mut(), state.t, hp);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::zeros(&[1])];
        let g = vec![Tensor::full(&[1], 1.0)];
        let mut s = AdamState::for_tensors(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        assert!((p[0].data()[0] + 0.0005 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut p = vec![Tensor::vector(&[0.3, -2.0]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::for_tensors(&p);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic_bowl() {
        let mut p = vec![Tensor::full(&[1], 1.0)];
        let mut s = AdamState::for_tensors(&p);
        let hp = AdamConfig { lr: 0.01, ..Default::default() };
        // A scalar oracle: gradient of θ² is 2θ.
        for _ in 0..500 {
            let g = vec![p[0].scale(2.0)];
            adam_step(&mut p, &g, &mut s, &hp).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-3, "{}", p[0].data()[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::for_tensors(&p);
        let g = vec![Tensor::zeros(&[3])];
        assert!(matches!(adam_step(&mut p, &g, &mut s, &AdamConfig::default()), Err(Error::Dimension(_))));
    }
}

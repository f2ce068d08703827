//! 2x2 max pooling with recorded switches, and the matching unpooling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flat input index of the winning element for every pooled cell, plus the
/// shape of the pooled input so unpooling can restore it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSwitches {
    input_shape: [usize; 3],
    indices: Vec<u32>,
}

impl PoolSwitches {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.input_shape;
        [c, h / 2, w / 2]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }
}

/// Non-overlapping 2x2 max pooling. Ties go to the lowest flat index.
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, PoolSwitches)> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("maxpool2d needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut indices = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                // row-major scan order == ascending flat index
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                indices.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out), PoolSwitches { input_shape: [c, h, w], indices }))
}

/// Places each value at its recorded switch position, zeros elsewhere.
pub fn maxunpool2d(input: &Tensor, switches: &PoolSwitches) -> Result<Tensor> {
    if input.shape() != switches.output_shape() {
        return Err(Error::dim(format!(
            "unpool input {:?} does not match switches for pooled shape {:?}",
            input.shape(),
            switches.output_shape()
        )));
    }
    let [c, h, w] = switches.input_shape;
    let mut out = vec![0.0; c * h * w];
    for (&idx, &v) in switches.indices.iter().zip(input.data()) {
        out[idx as usize] = v;
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Gradient of [`maxunpool2d`] w.r.t. its input: reads the switch positions.
pub fn maxunpool2d_backward(grad_out: &Tensor, switches: &PoolSwitches) -> Result<Tensor> {
    if grad_out.shape() != switches.input_shape {
        return Err(Error::dim(format!(
            "unpool gradient {:?} does not match switch input shape {:?}",
            grad_out.shape(),
            switches.input_shape
        )));
    }
    let g = grad_out.data();
    let data = switches.indices.iter().map(|&i| g[i as usize]).collect();
    Ok(Tensor::from_parts(switches.output_shape().to_vec(), data))
}

/// Gradient of [`maxpool2d`] w.r.t. its input is unpooling the gradient.
pub fn maxpool2d_backward(grad_out: &Tensor, switches: &PoolSwitches) -> Result<Tensor> {
    maxunpool2d(grad_out, switches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{random_normal, Rng};

    #[test]
    fn picks_maximum_and_records_switch() {
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, sw) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(sw.indices(), &[3]);
        let (y, sw) = maxpool2d(&Tensor::full(&[1, 2, 2], 5.0)).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(sw.indices(), &[0]);
        assert!(matches!(maxpool2d(&Tensor::zeros(&[1, 3, 2])), Err(Error::Config(_))));
    }

    #[test]
    fn pooled_value_dominates_window() {
        let mut rng = Rng::new(8);
        let x = random_normal(&[3, 6, 8], 0.0, 1.0, &mut rng).unwrap();
        let (y, sw) = maxpool2d(&x).unwrap();
        for ch in 0..3 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let o = (ch * 3 + oy) * 4 + ox;
                    let idx = sw.indices()[o] as usize;
                    let (iy, ix) = ((idx / 8) % 6, idx % 8);
                    assert_eq!((iy / 2, ix / 2), (oy, ox), "switch outside window");
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x.data()[(ch * 6 + 2 * oy + dy) * 8 + 2 * ox + dx];
                            assert!(y.data()[o] >= v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unpool_places_values_and_preserves_mass() {
        let x = Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, sw) = maxpool2d(&x).unwrap();
        let u = maxunpool2d(&y, &sw).unwrap();
        assert_eq!(u.data(), &[0., 0., 0., 4.]);

        let mut rng = Rng::new(9);
        let x = random_normal(&[2, 4, 6], 0.0, 1.0, &mut rng).unwrap();
        let (pooled, sw) = maxpool2d(&x).unwrap();
        let back = maxunpool2d(&pooled, &sw).unwrap();
        for (&i, &p) in sw.indices().iter().zip(pooled.data()) {
            assert_eq!(back.data()[i as usize], p);
        }
        let y = random_normal(&[2, 2, 3], 0.0, 1.0, &mut rng).unwrap();
        let u = maxunpool2d(&y, &sw).unwrap();
        assert!((u.sum() - y.sum()).abs() < 1e-12);
        // at most one nonzero per window
        for ch in 0..2 {
            for oy in 0..2 {
                for ox in 0..3 {
                    let nz = (0..4).filter(|q| u.data()[(ch * 4 + 2 * oy + q / 2) * 6 + 2 * ox + q % 2] != 0.0).count();
                    assert!(nz <= 1);
                }
            }
        }
        assert!(maxunpool2d(&Tensor::zeros(&[2, 3, 3]), &sw).is_err());
    }
}

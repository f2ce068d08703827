//! Category-specific soft attention over encoder features.
//!
//! Given a feature map `A` (`M` spatial sites by `D` channels) and a one-hot
//! label `y`, the attention scores are a factored multiplicative interaction
//!
//! ```text
//! v = W_att (W_feat vec(A) ⊙ W_label y) + b,      alpha = softmax(v)
//! ```
//!
//! with `d` factors. The context vector `z = Aᵀ alpha` summarizes the
//! attended features, and the densified attention `s = A z = (A Aᵀ) alpha`
//! spreads that focus to every site whose features correlate with it.

use crate::error::{Error, Result};
use crate::layers::LayerContract;
use crate::tensor::{dot_slices, matvec, matvec_t, outer_add, random_normal, softmax_slice, Rng, Tensor};

/// How `W_feat` sees the feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    /// `W_feat: [d, M*D]` over the flattened map, `W_att: [M, d]`.
    Global,
    /// `W_feat: [d, D]` applied at every site, `W_att: [1, d]` shared.
    LocationShared,
}

impl AttentionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Global => "global",
            AttentionVariant::LocationShared => "location-shared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AttentionVariant::Global),
            "location-shared" => Ok(AttentionVariant::LocationShared),
            _ => Err(Error::config(format!("unknown attention variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub variant: AttentionVariant,
    pub w_feat: Tensor,
    pub w_label: Tensor,
    pub w_att: Tensor,
    pub b: Tensor,
}

pub(crate) const ATTENTION_INIT_STD: f64 = 0.01;

impl AttentionParams {
    /// Weights drawn from N(0, 0.01²), bias zero.
    pub fn init(
        variant: AttentionVariant,
        sites: usize,
        channels: usize,
        labels: usize,
        factors: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (feat_cols, att_rows) = match variant {
            AttentionVariant::Global => (sites * channels, sites),
            AttentionVariant::LocationShared => (channels, 1),
        };
        let w_feat = random_normal(&[factors, feat_cols], 0.0, ATTENTION_INIT_STD, rng)?;
        let w_label = random_normal(&[factors, labels], 0.0, ATTENTION_INIT_STD, rng)?;
        let w_att = random_normal(&[att_rows, factors], 0.0, ATTENTION_INIT_STD, rng)?;
        Ok(AttentionParams { variant, w_feat, w_label, w_att, b: Tensor::zeros(&[sites]) })
    }

    pub fn factors(&self) -> usize {
        self.w_label.shape()[0]
    }

    pub fn labels(&self) -> usize {
        self.w_label.shape()[1]
    }

    pub fn sites(&self) -> usize {
        self.b.len()
    }

    /// Checks every shape against `(M, D)` and the factor/label counts.
    pub fn validate(&self, sites: usize, channels: usize) -> Result<()> {
        let d = self.factors();
        let (feat_cols, att_rows) = match self.variant {
            AttentionVariant::Global => (sites * channels, sites),
            AttentionVariant::LocationShared => (channels, 1),
        };
        let ok =
            self.w_feat.shape() == [d, feat_cols] && self.w_att.shape() == [att_rows, d] && self.b.shape() == [sites];
        if !ok {
            return Err(Error::dim(format!(
                "attention params W_feat {:?}, W_label {:?}, W_att {:?}, b {:?} inconsistent with M={sites}, D={channels}",
                self.w_feat.shape(),
                self.w_label.shape(),
                self.w_att.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            variant: self.variant,
            w_feat: Tensor::zeros_like(&self.w_feat),
            w_label: Tensor::zeros_like(&self.w_label),
            w_att: Tensor::zeros_like(&self.w_att),
            b: Tensor::zeros_like(&self.b),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("w_feat", &self.w_feat), ("w_label", &self.w_label), ("w_att", &self.w_att), ("b", &self.b)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [("w_feat", &mut self.w_feat), ("w_label", &mut self.w_label), ("w_att", &mut self.w_att), ("b", &mut self.b)]
    }
}

/// Encoder output laid out as `M x D`, row `m` holding the channel vector
/// of spatial site `m` (row-major over `height x width`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    a: Tensor,
    height: usize,
    width: usize,
}

impl FeatureMap {
    pub fn new(a: Tensor, height: usize, width: usize) -> Result<Self> {
        let (m, _) = a.dims2()?;
        if m != height * width {
            return Err(Error::dim(format!("feature map has {m} sites, spatial dims {height}x{width}")));
        }
        Ok(FeatureMap { a, height, width })
    }

    /// From a channel-major activation `[D, H', W']`.
    pub fn from_channels(act: &Tensor) -> Result<Self> {
        let (d, h, w) = act.dims3()?;
        let a = act.reshape(&[d, h * w])?.transpose()?;
        FeatureMap::new(a, h, w)
    }

    /// Back to channel-major `[D, H', W']`.
    pub fn to_channels(&self) -> Tensor {
        let t = self.a.transpose().expect("matrix");
        Tensor::from_parts(vec![self.channels(), self.height, self.width], t.into_data())
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }

    pub fn sites(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// One-hot category vector `y^l` over `len` categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelOneHot {
    id: usize,
    len: usize,
}

impl LabelOneHot {
    pub fn new(id: usize, len: usize) -> Result<Self> {
        if id >= len {
            return Err(Error::arg(format!("label {id} out of range for {len} categories")));
        }
        Ok(LabelOneHot { id, len })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut v = vec![0.0; self.len];
        v[self.id] = 1.0;
        Tensor::from_parts(vec![self.len], v)
    }
}

/// Unnormalized scores `v` and their softmax `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub v: Tensor,
    pub alpha: Tensor,
    /// `W_feat vec(A)` (global) or `W_featᵀ (W_att ⊙ w)` (location-shared),
    /// kept for the backward pass.
    factors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct DensifiedAttention(pub Tensor);

impl DensifiedAttention {
    /// Reshaped to the feature map's spatial grid, `[1, H', W']`.
    pub fn as_map(&self, height: usize, width: usize) -> Result<Tensor> {
        self.0.reshape(&[1, height, width])
    }
}

fn check_label(y: &LabelOneHot, p: &AttentionParams) -> Result<()> {
    if y.len() != p.labels() {
        return Err(Error::dim(format!("label vector of length {} but W_label has {} columns", y.len(), p.labels())));
    }
    Ok(())
}

fn label_column(p: &AttentionParams, l: usize) -> Vec<f64> {
    let n = p.labels();
    p.w_label.data().iter().skip(l).step_by(n).copied().collect()
}

/// Scores and attention weights for label `y` over the sites of `a`.
pub fn attend(a: &FeatureMap, y: &LabelOneHot, p: &AttentionParams) -> Result<AttentionMap> {
    p.validate(a.sites(), a.channels())?;
    check_label(y, p)?;
    let w = label_column(p, y.id());
    let (mut v, factors) = match p.variant {
        AttentionVariant::Global => {
            let u = matvec(&p.w_feat, a.matrix().data())?;
            let h: Vec<f64> = u.iter().zip(&w).map(|(x, y)| x * y).collect();
            (matvec(&p.w_att, &h)?, u)
        }
        AttentionVariant::LocationShared => {
            let q: Vec<f64> = p.w_att.data().iter().zip(&w).map(|(x, y)| x * y).collect();
            let g = matvec_t(&p.w_feat, &q)?;
            (matvec(a.matrix(), &g)?, g)
        }
    };
    for (vi, bi) in v.iter_mut().zip(p.b.data()) {
        *vi += bi;
    }
    crate::tensor::ensure_finite(&v, "attend")?;
    let alpha = softmax_slice(&v);
    let m = v.len();
    Ok(AttentionMap { v: Tensor::from_parts(vec![m], v), alpha: Tensor::from_parts(vec![m], alpha), factors })
}

/// Accumulates parameter gradients of `attend` into `grads` given
/// `d_alpha`. Returns the feature-map gradient when `want_features` is set.
pub fn attend_backward_into(
    a: &FeatureMap,
    y: &LabelOneHot,
    p: &AttentionParams,
    att: &AttentionMap,
    d_alpha: &[f64],
    grads: &mut AttentionParams,
    want_features: bool,
) -> Result<Option<Tensor>> {
    let m = att.alpha.len();
    if d_alpha.len() != m {
        return Err(Error::dim(format!("attention gradient of length {} for {m} sites", d_alpha.len())));
    }
    let alpha = att.alpha.data();
    let inner = dot_slices(d_alpha, alpha);
    let dv: Vec<f64> = alpha.iter().zip(d_alpha).map(|(&al, &g)| al * (g - inner)).collect();
    let l = y.id();
    let n_labels = p.labels();
    let w = label_column(p, l);
    for (gb, d) in grads.b.data_mut().iter_mut().zip(&dv) {
        *gb += d;
    }
    match p.variant {
        AttentionVariant::Global => {
            let u = &att.factors;
            let h: Vec<f64> = u.iter().zip(&w).map(|(x, y)| x * y).collect();
            outer_add(grads.w_att.data_mut(), &dv, &h);
            let dh = matvec_t(&p.w_att, &dv)?;
            let du: Vec<f64> = dh.iter().zip(&w).map(|(x, y)| x * y).collect();
            for (k, (dhk, uk)) in dh.iter().zip(u).enumerate() {
                grads.w_label.data_mut()[k * n_labels + l] += dhk * uk;
            }
            outer_add(grads.w_feat.data_mut(), &du, a.matrix().data());
            if want_features {
                let da = matvec_t(&p.w_feat, &du)?;
                return Ok(Some(Tensor::from_parts(a.matrix().shape().to_vec(), da)));
            }
        }
        AttentionVariant::LocationShared => {
            let g = &att.factors;
            let dg = matvec_t(a.matrix(), &dv)?;
            let q: Vec<f64> = p.w_att.data().iter().zip(&w).map(|(x, y)| x * y).collect();
            outer_add(grads.w_feat.data_mut(), &q, &dg);
            let dq = matvec(&p.w_feat, &dg)?;
            for (k, dqk) in dq.iter().enumerate() {
                grads.w_att.data_mut()[k] += dqk * w[k];
                grads.w_label.data_mut()[k * n_labels + l] += dqk * p.w_att.data()[k];
            }
            if want_features {
                let mut da = vec![0.0; a.matrix().len()];
                outer_add(&mut da, &dv, g);
                return Ok(Some(Tensor::from_parts(a.matrix().shape().to_vec(), da)));
            }
        }
    }
    Ok(None)
}

/// Fresh-gradient form of [`attend_backward_into`]: returns the parameter
/// gradients and the feature-map gradient.
pub fn attend_backward(
    a: &FeatureMap,
    y: &LabelOneHot,
    p: &AttentionParams,
    att: &AttentionMap,
    d_alpha: &Tensor,
) -> Result<(AttentionParams, Tensor)> {
    let mut grads = p.zeros_like();
    let da = attend_backward_into(a, y, p, att, d_alpha.data(), &mut grads, true)?.expect("requested");
    Ok((grads, da))
}

/// `z = Aᵀ alpha`. `alpha` may be any weight vector over the sites.
pub fn context(a: &FeatureMap, alpha: &Tensor) -> Result<ContextVector> {
    if alpha.len() != a.sites() {
        return Err(Error::dim(format!("alpha of length {} for {} sites", alpha.len(), a.sites())));
    }
    let z = matvec_t(a.matrix(), alpha.data())?;
    Ok(ContextVector(Tensor::from_parts(vec![a.channels()], z)))
}

/// Returns `(dA, d_alpha)`.
pub fn context_backward(a: &FeatureMap, alpha: &Tensor, dz: &Tensor) -> Result<(Tensor, Tensor)> {
    if dz.len() != a.channels() || alpha.len() != a.sites() {
        return Err(Error::dim("context_backward: gradient or weights do not match the feature map"));
    }
    let mut da = vec![0.0; a.matrix().len()];
    outer_add(&mut da, alpha.data(), dz.data());
    let dalpha = matvec(a.matrix(), dz.data())?;
    Ok((Tensor::from_parts(a.matrix().shape().to_vec(), da), Tensor::from_parts(vec![a.sites()], dalpha)))
}

/// `s = A z`.
pub fn densify(a: &FeatureMap, z: &ContextVector) -> Result<DensifiedAttention> {
    if z.0.len() != a.channels() {
        return Err(Error::dim(format!("context of length {} for {} channels", z.0.len(), a.channels())));
    }
    let s = matvec(a.matrix(), z.0.data())?;
    Ok(DensifiedAttention(Tensor::from_parts(vec![a.sites()], s)))
}

/// Returns `(dA, dz)`.
pub fn densify_backward(a: &FeatureMap, z: &ContextVector, ds: &Tensor) -> Result<(Tensor, Tensor)> {
    if ds.len() != a.sites() || z.0.len() != a.channels() {
        return Err(Error::dim("densify_backward: gradient or context do not match the feature map"));
    }
    let mut da = vec![0.0; a.matrix().len()];
    outer_add(&mut da, ds.data(), z.0.data());
    let dz = matvec_t(a.matrix(), ds.data())?;
    Ok((Tensor::from_parts(a.matrix().shape().to_vec(), da), Tensor::from_parts(vec![a.channels()], dz)))
}

/// Pixel-pixel feature similarity `G = A Aᵀ`, symmetric by construction.
pub fn gram(a: &FeatureMap) -> Tensor {
    let m = a.sites();
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let v = dot_slices(a.matrix().row(i), a.matrix().row(j));
            g[i * m + j] = v;
            g[j * m + i] = v;
        }
    }
    Tensor::from_parts(vec![m, m], g)
}

/// Densified attention for a one-hot attention on `pixel`, i.e. row
/// `pixel` of the Gram matrix, shaped `[H', W']`.
pub fn gram_row_viz(a: &FeatureMap, pixel: usize) -> Result<Tensor> {
    if pixel >= a.sites() {
        return Err(Error::arg(format!("pixel {pixel} out of range for {} sites", a.sites())));
    }
    let mut alpha = vec![0.0; a.sites()];
    alpha[pixel] = 1.0;
    let z = context(a, &Tensor::from_parts(vec![a.sites()], alpha))?;
    let s = densify(a, &z)?;
    let (h, w) = a.spatial();
    s.0.reshape(&[h, w])
}

/// `attend` as a layer: input `A` (`[M, D]`), params
/// `[W_feat, W_label, W_att, b]`, output `alpha`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLayer {
    pub label: LabelOneHot,
    pub variant: AttentionVariant,
    pub height: usize,
    pub width: usize,
}

impl LayerContract for AttentionLayer {
    type Cache = (FeatureMap, AttentionParams, AttentionMap);

    fn forward(&self, input: &Tensor, params: &[Tensor]) -> Result<(Tensor, Self::Cache)> {
        let [w_feat, w_label, w_att, b] = params else {
            return Err(Error::arg("attention takes [W_feat, W_label, W_att, b]"));
        };
        let p = AttentionParams {
            variant: self.variant,
            w_feat: w_feat.clone(),
            w_label: w_label.clone(),
            w_att: w_att.clone(),
            b: b.clone(),
        };
        let fm = FeatureMap::new(input.clone(), self.height, self.width)?;
        let att = attend(&fm, &self.label, &p)?;
        Ok((att.alpha.clone(), (fm, p, att)))
    }

    fn backward(&self, (fm, p, att): &Self::Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (g, da) = attend_backward(fm, &self.label, p, att, grad_out)?;
        Ok((da, vec![g.w_feat, g.w_label, g.w_att, g.b]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::grad_check;
    use crate::tensor::matmul;

    fn fm(rows: &[&[f64]], h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(), h, w).unwrap()
    }

    fn random_setup(variant: AttentionVariant, seed: u64) -> (FeatureMap, AttentionParams) {
        let mut rng = Rng::new(seed);
        let a = FeatureMap::new(random_normal(&[6, 4], 0.0, 1.0, &mut rng).unwrap(), 2, 3).unwrap();
        let mut p = AttentionParams::init(variant, 6, 4, 5, 3, &mut rng).unwrap();
        for (_, t) in p.tensors_mut() {
            *t = random_normal(t.shape(), 0.0, 0.7, &mut rng).unwrap();
        }
        (a, p)
    }

    #[test]
    fn zero_w_att_gives_bias_scores() {
        let (a, mut p) = random_setup(AttentionVariant::Global, 1);
        p.w_att = Tensor::zeros_like(&p.w_att);
        let att = attend(&a, &LabelOneHot::new(2, 5).unwrap(), &p).unwrap();
        assert_eq!(att.v, p.b);
        assert_eq!(att.alpha, crate::tensor::softmax(&p.b).unwrap());
    }

    #[test]
    fn one_hot_selects_label_column() {
        let (_, p) = random_setup(AttentionVariant::Global, 2);
        for l in 0..5 {
            let y = LabelOneHot::new(l, 5).unwrap();
            let via_product = matvec(&p.w_label, y.to_tensor().data()).unwrap();
            let direct: Vec<f64> = (0..p.factors()).map(|k| p.w_label.data()[k * 5 + l]).collect();
            assert_eq!(via_product, direct);
            assert_eq!(label_column(&p, l), direct);
        }
        assert!(LabelOneHot::new(5, 5).is_err());
    }

    #[test]
    fn attention_is_normalized() {
        for variant in [AttentionVariant::Global, AttentionVariant::LocationShared] {
            let (a, p) = random_setup(variant, 3);
            let att = attend(&a, &LabelOneHot::new(0, 5).unwrap(), &p).unwrap();
            assert!((att.alpha.sum() - 1.0).abs() <= 1e-9);
            assert!(att.alpha.data().iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn permuting_labels_leaves_scores_unchanged() {
        let (a, p) = random_setup(AttentionVariant::Global, 4);
        let perm = [3, 0, 4, 1, 2];
        let mut q = p.clone();
        let d = p.factors();
        let mut permuted = vec![0.0; d * 5];
        for k in 0..d {
            for (j, &pj) in perm.iter().enumerate() {
                permuted[k * 5 + pj] = p.w_label.data()[k * 5 + j];
            }
        }
        q.w_label = Tensor::new(&[d, 5], permuted).unwrap();
        for l in 0..5 {
            let v1 = attend(&a, &LabelOneHot::new(l, 5).unwrap(), &p).unwrap().v;
            let v2 = attend(&a, &LabelOneHot::new(perm[l], 5).unwrap(), &q).unwrap().v;
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn context_examples() {
        let a = fm(&[&[1., 2.], &[3., 4.]], 1, 2);
        let z = context(&a, &Tensor::vector(&[1., 0.]).unwrap()).unwrap();
        assert_eq!(z.0.data(), &[1., 2.]);
        let z = context(&a, &Tensor::vector(&[0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(z.0.data(), &[2., 3.]);
        let s = densify(&a, &context(&a, &Tensor::vector(&[1., 0.]).unwrap()).unwrap()).unwrap();
        assert_eq!(s.0.data(), &[5., 11.]);
        assert!(context(&a, &Tensor::vector(&[1., 0., 0.]).unwrap()).is_err());
    }

    #[test]
    fn context_is_convex_combination() {
        let (a, p) = random_setup(AttentionVariant::Global, 5);
        let att = attend(&a, &LabelOneHot::new(1, 5).unwrap(), &p).unwrap();
        let z = context(&a, &att.alpha).unwrap();
        for c in 0..a.channels() {
            let col: Vec<f64> = (0..a.sites()).map(|m| a.matrix().row(m)[c]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(z.0.data()[c] >= lo - 1e-12 && z.0.data()[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn identity_features_give_alpha_back() {
        let eye = fm(&[&[1., 0., 0.], &[0., 1., 0.], &[0., 0., 1.]], 1, 3);
        let alpha = Tensor::vector(&[0.2, 0.3, 0.5]).unwrap();
        let s = densify(&eye, &context(&eye, &alpha).unwrap()).unwrap();
        assert_eq!(s.0, alpha);
    }

    #[test]
    fn densify_matches_gram_path() {
        let mut rng = Rng::new(6);
        for _ in 0..100 {
            let a = FeatureMap::new(random_normal(&[8, 5], 0.0, 2.0, &mut rng).unwrap(), 2, 4).unwrap();
            let alpha =
                Tensor::new(&[8], softmax_slice(random_normal(&[8], 0.0, 2.0, &mut rng).unwrap().data())).unwrap();
            let s = densify(&a, &context(&a, &alpha).unwrap()).unwrap();
            let g = matmul(a.matrix(), &a.matrix().transpose().unwrap()).unwrap();
            let s2 = matmul(&g, &alpha.reshape(&[8, 1]).unwrap()).unwrap();
            let scale = a.matrix().max_abs().powi(2).max(1.0);
            assert!(s.0.sub(&s2.reshape(&[8]).unwrap()).unwrap().max_abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn gram_examples() {
        let a = fm(&[&[1., 2.], &[3., 4.]], 1, 2);
        let g = gram(&a);
        assert_eq!(g.data(), &[5., 11., 11., 25.]);
        let (a, _) = random_setup(AttentionVariant::Global, 7);
        let g = gram(&a);
        assert_eq!(g, g.transpose().unwrap());
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let x = random_normal(&[6], 0.0, 1.0, &mut rng).unwrap();
            let gx = matvec(&g, x.data()).unwrap();
            assert!(dot_slices(x.data(), &gx) >= -1e-10);
        }
    }

    #[test]
    fn gram_row_viz_reads_gram_rows() {
        let (a, _) = random_setup(AttentionVariant::Global, 9);
        let g = gram(&a);
        for p in 0..a.sites() {
            let row = gram_row_viz(&a, p).unwrap();
            assert_eq!(row.shape(), &[2, 3]);
            for (x, y) in row.data().iter().zip(g.row(p)) {
                assert!((x - y).abs() <= 1e-12);
            }
            let self_sim = dot_slices(a.matrix().row(p), a.matrix().row(p));
            assert_eq!(g.data()[p * 6 + p], self_sim);
            assert!(self_sim >= 0.0);
        }
        assert!(matches!(gram_row_viz(&a, 6), Err(Error::Argument(_))));
        let dup = fm(&[&[1., 2.], &[0.5, -1.], &[1., 2.]], 1, 3);
        assert_eq!(gram_row_viz(&dup, 0).unwrap(), gram_row_viz(&dup, 2).unwrap());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for variant in [AttentionVariant::Global, AttentionVariant::LocationShared] {
            for seed in 0..3 {
                let (a, p) = random_setup(variant, 100 + seed);
                let layer =
                    AttentionLayer { label: LabelOneHot::new(seed as usize, 5).unwrap(), variant, height: 2, width: 3 };
                let params: Vec<Tensor> = p.tensors().iter().map(|(_, t)| (*t).clone()).collect();
                let err = grad_check(&layer, a.matrix(), &params, 1e-5).unwrap();
                assert!(err <= 1e-4, "{variant:?} seed {seed}: {err}");
            }
        }
    }
}

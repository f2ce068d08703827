//! TransferNet and BaselineNet: encoder, category-specific head and a
//! category-agnostic decoder, with their losses.

mod decoder;
mod encoder;
mod forward;
mod loss;

pub use decoder::{decode, DecoderTrace};
pub use encoder::{encode, Encoded};
pub use forward::{baselinenet_forward, classify, forward_encoded, transfernet_forward, ForwardTrace, LabelTrace};
pub use loss::{loss_cls, loss_joint, loss_seg, JointLoss, LossSample};

pub(crate) use decoder::{decode_backward, decode_traced};
pub(crate) use encoder::{encode_backward, encode_traced};
pub(crate) use loss::accumulate_sample;

use crate::attention::{AttentionParams, AttentionVariant};
use crate::error::{Error, Result};
use crate::tensor::{random_normal, Rng, Tensor};

/// Network geometry and inference thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// `[channels, height, width]` of input images.
    pub image: [usize; 3],
    /// Output channels of each encoder conv; each is followed by relu and a
    /// 2x2 max-pool.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Factor count `d` of the attention interaction.
    pub factors: usize,
    /// Total number of categories `L` across both domains.
    pub labels: usize,
    /// Hidden width of the two-layer classifier.
    pub hidden: usize,
    pub variant: AttentionVariant,
    pub tau_bg: f64,
    pub tau_cls: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image: [1, 32, 32],
            channels: vec![16, 32],
            kernel: 3,
            factors: 64,
            labels: 6,
            hidden: 64,
            variant: AttentionVariant::Global,
            tau_bg: 0.5,
            tau_cls: 0.5,
        }
    }
}

impl NetConfig {
    /// Spatial extent `(H', W')` of the feature map.
    pub fn feature_dims(&self) -> (usize, usize) {
        let f = 1 << self.channels.len();
        (self.image[1] / f, self.image[2] / f)
    }

    /// Number of feature-map sites `M`.
    pub fn sites(&self) -> usize {
        let (h, w) = self.feature_dims();
        h * w
    }

    /// Feature channels `D`.
    pub fn depth(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Cells per BaselineNet score map (`H'/2 x W'/2`).
    pub fn score_cells(&self) -> usize {
        let (h, w) = self.feature_dims();
        (h / 2) * (w / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("encoder needs at least one conv with positive width"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel)));
        }
        let f = 1 << self.channels.len();
        if h % (2 * f) != 0 || w % (2 * f) != 0 {
            return Err(Error::config(format!(
                "image {h}x{w} must be divisible by {} for {} pooling stages and the score head",
                2 * f,
                self.channels.len()
            )));
        }
        if self.factors == 0 || self.labels < 2 || self.hidden == 0 {
            return Err(Error::config("factors and hidden must be positive, labels at least 2"));
        }
        for (name, t) in [("tau_bg", self.tau_bg), ("tau_cls", self.tau_cls)] {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::config(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }

    /// Key/value form used by config files and checkpoints. Floats use the
    /// shortest representation that round-trips exactly.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let [c, h, w] = self.image;
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        vec![
            ("image", format!("{c}x{h}x{w}")),
            ("channels", ch.join(",")),
            ("kernel", self.kernel.to_string()),
            ("factors", self.factors.to_string()),
            ("labels", self.labels.to_string()),
            ("hidden", self.hidden.to_string()),
            ("attention", self.variant.as_str().to_string()),
            ("tau_bg", format!("{:?}", self.tau_bg)),
            ("tau_cls", format!("{:?}", self.tau_cls)),
        ]
    }

    /// Applies one key; returns `false` if the key is not a network key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image" => {
                let dims: Vec<usize> = value.split('x').map(parse_num).collect::<Result<_>>()?;
                let [c, h, w] = dims[..] else {
                    return Err(Error::config(format!("image must be CxHxW, got {value:?}")));
                };
                self.image = [c, h, w];
            }
            "channels" => self.channels = value.split(',').map(parse_num).collect::<Result<_>>()?,
            "kernel" => self.kernel = parse_num(value)?,
            "factors" => self.factors = parse_num(value)?,
            "labels" => self.labels = parse_num(value)?,
            "hidden" => self.hidden = parse_num(value)?,
            "attention" => self.variant = AttentionVariant::parse(value)?,
            "tau_bg" => self.tau_bg = parse_num(value)?,
            "tau_cls" => self.tau_cls = parse_num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::config(format!("cannot parse {s:?} as a number")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    TransferNet,
    BaselineNet,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::TransferNet => "transfernet",
            Arch::BaselineNet => "baselinenet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transfernet" => Ok(Arch::TransferNet),
            "baselinenet" => Ok(Arch::BaselineNet),
            _ => Err(Error::config(format!("unknown architecture {s:?}"))),
        }
    }
}

/// Kernels and bias of one convolution or transposed convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn normal(shape: [usize; 4], out_channels: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Ok(ConvParams { kernels: random_normal(&shape, 0.0, std, rng)?, bias: Tensor::zeros(&[out_channels]) })
    }

    pub(crate) fn zeros_like(&self) -> Self {
        ConvParams { kernels: Tensor::zeros_like(&self.kernels), bias: Tensor::zeros_like(&self.bias) }
    }
}

/// Two-layer classifier `W2 relu(W1 z + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// BaselineNet head: a 2x2/stride-2 conv producing one score map per
/// category, and a fully-connected bridge from a score map to the decoder
/// input.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineHead {
    pub score: ConvParams,
    pub bridge_w: Tensor,
    pub bridge_b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Attention { attention: AttentionParams, classifier: ClassifierParams },
    Baseline(BaselineHead),
}

/// All network parameters. The encoder is `θ_e`, the attention parameters
/// `θ_α`, the classifier (or score head) `θ_c`, and the decoder (plus the
/// baseline bridge) `θ_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<ConvParams>,
    pub head: Head,
    pub decoder: Vec<ConvParams>,
}

/// Parameter groups, by the role they play in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Attention,
    Classifier,
    Decoder,
}

pub(crate) const HEAD_INIT_STD: f64 = 0.01;
pub(crate) const DECODER_INIT_STD: f64 = 0.01;

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub(crate) fn init_encoder(cfg: &NetConfig, rng: &mut Rng) -> Result<Vec<ConvParams>> {
    let k = cfg.kernel;
    let mut cin = cfg.image[0];
    let mut layers = Vec::with_capacity(cfg.channels.len());
    for &cout in &cfg.channels {
        layers.push(ConvParams::normal([cout, cin, k, k], cout, he_std(cin * k * k), rng)?);
        cin = cout;
    }
    Ok(layers)
}

fn init_decoder(cfg: &NetConfig, rng: &mut Rng) -> Result<Vec<ConvParams>> {
    let k = cfg.kernel;
    let mut widths = vec![1];
    widths.extend(cfg.channels.iter().rev());
    widths.push(2);
    widths.windows(2).map(|w| ConvParams::normal([w[0], w[1], k, k], w[1], DECODER_INIT_STD, rng)).collect()
}

fn init_bridge(cfg: &NetConfig, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let w = random_normal(&[cfg.sites(), cfg.score_cells()], 0.0, DECODER_INIT_STD, rng)?;
    Ok((w, Tensor::zeros(&[cfg.sites()])))
}

fn init_head(arch: Arch, cfg: &NetConfig, rng: &mut Rng) -> Result<Head> {
    let (m, d, l) = (cfg.sites(), cfg.depth(), cfg.labels);
    Ok(match arch {
        Arch::TransferNet => {
            let attention = AttentionParams::init(cfg.variant, m, d, l, cfg.factors, rng)?;
            let classifier = ClassifierParams {
                w1: random_normal(&[cfg.hidden, d], 0.0, HEAD_INIT_STD, rng)?,
                b1: Tensor::zeros(&[cfg.hidden]),
                w2: random_normal(&[l, cfg.hidden], 0.0, HEAD_INIT_STD, rng)?,
                b2: Tensor::zeros(&[l]),
            };
            Head::Attention { attention, classifier }
        }
        Arch::BaselineNet => {
            let score = ConvParams::normal([l, d, 2, 2], l, HEAD_INIT_STD, rng)?;
            let (bridge_w, bridge_b) = init_bridge(cfg, rng)?;
            Head::Baseline(BaselineHead { score, bridge_w, bridge_b })
        }
    })
}

impl ModelParams {
    /// Fresh parameters: He-scaled encoder, N(0, 0.01²) head and decoder,
    /// zero biases.
    pub fn init(arch: Arch, cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = init_encoder(cfg, rng)?;
        Self::with_encoder(arch, cfg, encoder, rng)
    }

    /// Fresh head and decoder around an existing encoder.
    pub fn with_encoder(arch: Arch, cfg: &NetConfig, encoder: Vec<ConvParams>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let head = init_head(arch, cfg, rng)?;
        let decoder = init_decoder(cfg, rng)?;
        let p = ModelParams { encoder, head, decoder };
        p.validate(cfg)?;
        Ok(p)
    }

    /// Redraws `θ_s` (decoder, and the bridge for BaselineNet).
    pub fn reinit_decoder(&mut self, cfg: &NetConfig, rng: &mut Rng) -> Result<()> {
        self.decoder = init_decoder(cfg, rng)?;
        if let Head::Baseline(h) = &mut self.head {
            (h.bridge_w, h.bridge_b) = init_bridge(cfg, rng)?;
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        match self.head {
            Head::Attention { .. } => Arch::TransferNet,
            Head::Baseline(_) => Arch::BaselineNet,
        }
    }

    pub fn attention(&self) -> Option<&AttentionParams> {
        match &self.head {
            Head::Attention { attention, .. } => Some(attention),
            Head::Baseline(_) => None,
        }
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, Group, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.kernels"), Group::Encoder, &c.kernels));
            out.push((format!("encoder.{i}.bias"), Group::Encoder, &c.bias));
        }
        match &self.head {
            Head::Attention { attention, classifier } => {
                for (n, t) in attention.tensors() {
                    out.push((format!("attention.{n}"), Group::Attention, t));
                }
                let c = classifier;
                for (n, t) in [("w1", &c.w1), ("b1", &c.b1), ("w2", &c.w2), ("b2", &c.b2)] {
                    out.push((format!("classifier.{n}"), Group::Classifier, t));
                }
            }
            Head::Baseline(h) => {
                out.push(("score.kernels".into(), Group::Classifier, &h.score.kernels));
                out.push(("score.bias".into(), Group::Classifier, &h.score.bias));
                out.push(("bridge.w".into(), Group::Decoder, &h.bridge_w));
                out.push(("bridge.b".into(), Group::Decoder, &h.bridge_b));
            }
        }
        for (i, c) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.kernels"), Group::Decoder, &c.kernels));
            out.push((format!("decoder.{i}.bias"), Group::Decoder, &c.bias));
        }
        out
    }

    /// Mutable view in the same order as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(Group, &mut Tensor)> {
        let mut out = Vec::new();
        for c in &mut self.encoder {
            out.push((Group::Encoder, &mut c.kernels));
            out.push((Group::Encoder, &mut c.bias));
        }
        match &mut self.head {
            Head::Attention { attention, classifier } => {
                for (_, t) in attention.tensors_mut() {
                    out.push((Group::Attention, t));
                }
                let c = classifier;
                out.push((Group::Classifier, &mut c.w1));
                out.push((Group::Classifier, &mut c.b1));
                out.push((Group::Classifier, &mut c.w2));
                out.push((Group::Classifier, &mut c.b2));
            }
            Head::Baseline(h) => {
                out.push((Group::Classifier, &mut h.score.kernels));
                out.push((Group::Classifier, &mut h.score.bias));
                out.push((Group::Decoder, &mut h.bridge_w));
                out.push((Group::Decoder, &mut h.bridge_b));
            }
        }
        for c in &mut self.decoder {
            out.push((Group::Decoder, &mut c.kernels));
            out.push((Group::Decoder, &mut c.bias));
        }
        out
    }

    /// Same structure, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let head = match &self.head {
            Head::Attention { attention, classifier } => Head::Attention {
                attention: attention.zeros_like(),
                classifier: ClassifierParams {
                    w1: Tensor::zeros_like(&classifier.w1),
                    b1: Tensor::zeros_like(&classifier.b1),
                    w2: Tensor::zeros_like(&classifier.w2),
                    b2: Tensor::zeros_like(&classifier.b2),
                },
            },
            Head::Baseline(h) => Head::Baseline(BaselineHead {
                score: h.score.zeros_like(),
                bridge_w: Tensor::zeros_like(&h.bridge_w),
                bridge_b: Tensor::zeros_like(&h.bridge_b),
            }),
        };
        ModelParams {
            encoder: self.encoder.iter().map(ConvParams::zeros_like).collect(),
            head,
            decoder: self.decoder.iter().map(ConvParams::zeros_like).collect(),
        }
    }

    /// Checks every tensor shape against a freshly built model for `cfg`.
    pub fn validate(&self, cfg: &NetConfig) -> Result<()> {
        let reference = ModelParams::shape_template(self.arch(), cfg)?;
        let ours = self.named();
        let theirs = reference.named();
        if ours.len() != theirs.len() {
            return Err(Error::config(format!(
                "model has {} tensors, configuration expects {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, _, t), (_, _, r)) in ours.iter().zip(&theirs) {
            if t.shape() != r.shape() {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, configuration expects {:?}",
                    t.shape(),
                    r.shape()
                )));
            }
        }
        Ok(())
    }

    fn shape_template(arch: Arch, cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(0);
        let encoder = init_encoder(cfg, &mut rng)?;
        Ok(ModelParams { encoder, head: init_head(arch, cfg, &mut rng)?, decoder: init_decoder(cfg, &mut rng)? })
    }

    /// Tensors of the given groups, in canonical order.
    pub fn group_tensors(&self, groups: &[Group]) -> Vec<Tensor> {
        self.named().into_iter().filter(|(_, g, _)| groups.contains(g)).map(|(_, _, t)| t.clone()).collect()
    }

    /// Overwrites the tensors of the given groups, in canonical order.
    pub fn set_group_tensors(&mut self, groups: &[Group], values: &[Tensor]) -> Result<()> {
        let mut slots: Vec<&mut Tensor> =
            self.named_mut().into_iter().filter(|(g, _)| groups.contains(g)).map(|(_, t)| t).collect();
        if slots.len() != values.len() {
            return Err(Error::arg(format!("{} tensors for {} slots", values.len(), slots.len())));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::dim(format!("tensor {:?} for slot {:?}", v.shape(), slot.shape())));
            }
            **slot = v.clone();
        }
        Ok(())
    }
}

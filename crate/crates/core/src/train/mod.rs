//! Adam, checkpoints and the staged training protocol.
//!
//! Training runs in three steps with the encoder frozen after the first:
//! the encoder is fitted to multi-label classification through a throwaway
//! global-pool head, the attention and classifier are then trained on the
//! classification loss over both domains (stage 1), and finally a freshly
//! initialized decoder is trained jointly with them, the segmentation term
//! drawing only on annotated source samples (stage 2).

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    Stage, CKP_MAGIC, CKP_VERSION,
};

use adam::adam_step_model;

use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::layers::softmax_xent_index;
use crate::model::{
    accumulate_sample, encode, encode_backward, encode_traced, parse_num, Arch, ConvParams, Encoded, Group, LossSample,
    ModelParams, NetConfig,
};
use crate::tensor::{matvec, matvec_t, outer_add, random_normal, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    /// Weight of the segmentation term in the joint loss.
    pub lambda: f64,
    pub encoder_iters: u64,
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    /// Share of source samples whose masks are used in stage 2.
    pub annotation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch: 16,
            lambda: 1.0,
            encoder_iters: 1000,
            stage1_iters: 1000,
            stage2_iters: 3000,
            annotation_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda must be a non-negative number"));
        }
        if !(self.annotation_fraction > 0.0 && self.annotation_fraction <= 1.0) {
            return Err(Error::config("annotation_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", format!("{:?}", self.adam.lr)),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("eps", format!("{:?}", self.adam.eps)),
            ("batch", self.batch.to_string()),
            ("lambda", format!("{:?}", self.lambda)),
            ("encoder_iters", self.encoder_iters.to_string()),
            ("stage1_iters", self.stage1_iters.to_string()),
            ("stage2_iters", self.stage2_iters.to_string()),
            ("annotation_fraction", format!("{:?}", self.annotation_fraction)),
            ("train_seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.adam.lr = parse_num(value)?,
            "beta1" => self.adam.beta1 = parse_num(value)?,
            "beta2" => self.adam.beta2 = parse_num(value)?,
            "eps" => self.adam.eps = parse_num(value)?,
            "batch" => self.batch = parse_num(value)?,
            "lambda" => self.lambda = parse_num(value)?,
            "encoder_iters" => self.encoder_iters = parse_num(value)?,
            "stage1_iters" => self.stage1_iters = parse_num(value)?,
            "stage2_iters" => self.stage2_iters = parse_num(value)?,
            "annotation_fraction" => self.annotation_fraction = parse_num(value)?,
            "train_seed" => self.seed = parse_num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

// Independent RNG streams derived from the training seed.
const STREAM_ENCODER: u64 = 1;
const STREAM_HEAD_INIT: u64 = 2;
const STREAM_STAGE1: u64 = 3;
const STREAM_DECODER_INIT: u64 = 4;
const STREAM_STAGE2: u64 = 5;
const STREAM_ANNOTATION: u64 = 6;

const STAGE1_GROUPS: &[Group] = &[Group::Attention, Group::Classifier];
const STAGE2_GROUPS: &[Group] = &[Group::Attention, Group::Classifier, Group::Decoder];

/// One logged iteration. Losses are batch means; `seg` is 0 in stage 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub stage: Stage,
    /// 1-based iteration within the stage.
    pub iteration: u64,
    pub total: f64,
    pub cls: f64,
    pub seg: f64,
}

/// Fits the encoder to multi-label classification over the whole dataset
/// through a temporary global-average-pool and linear head, and returns it.
pub fn pretrain_encoder(ds: &Dataset, net: &NetConfig, train: &TrainConfig) -> Result<Vec<ConvParams>> {
    net.validate()?;
    train.validate()?;
    if ds.is_empty() {
        return Err(Error::arg("cannot train on an empty dataset"));
    }
    let mut rng = Rng::stream(train.seed, STREAM_ENCODER);
    let mut encoder = crate::model::init_encoder(net, &mut rng)?;
    let d = net.depth();
    let mut head = vec![random_normal(&[net.labels, d], 0.0, 0.01, &mut rng)?, Tensor::zeros(&[net.labels])];
    let n_enc = encoder.len() * 2;
    let mut flat: Vec<Tensor> = encoder.iter().flat_map(|c| [c.kernels.clone(), c.bias.clone()]).collect();
    flat.append(&mut head);
    let mut adam = AdamState::for_tensors(&flat);
    let inv_b = 1.0 / train.batch as f64;
    for _ in 0..train.encoder_iters {
        let mut grads: Vec<Tensor> = flat.iter().map(Tensor::zeros_like).collect();
        for _ in 0..train.batch {
            let s = &ds.samples[rng.below(ds.len())];
            let (top, trace) = encode_traced(&s.image, &encoder, net)?;
            let (_, h, w) = top.dims3()?;
            let area = (h * w) as f64;
            let pooled: Vec<f64> = top.data().chunks(h * w).map(|c| c.iter().sum::<f64>() / area).collect();
            let mut logits = matvec(&flat[n_enc], &pooled)?;
            for (v, b) in logits.iter_mut().zip(flat[n_enc + 1].data()) {
                *v += b;
            }
            let logits = Tensor::new(&[net.labels], logits)?;
            let mut d_logits = vec![0.0; net.labels];
            for &l in &s.labels {
                let (_, g) = softmax_xent_index(&logits, l);
                for (a, b) in d_logits.iter_mut().zip(g.data()) {
                    *a += b * inv_b;
                }
            }
            outer_add(grads[n_enc].data_mut(), &d_logits, &pooled);
            grads[n_enc + 1].add_assign(&Tensor::new(&[net.labels], d_logits.clone())?);
            let d_pooled = matvec_t(&flat[n_enc], &d_logits)?;
            let d_top: Vec<f64> = d_pooled.iter().flat_map(|&g| std::iter::repeat_n(g / area, h * w)).collect();
            let d_top = Tensor::new(top.shape(), d_top)?;
            for (i, g) in encode_backward(&trace, &encoder, &d_top, net)?.into_iter().enumerate() {
                grads[2 * i].add_assign(&g.kernels);
                grads[2 * i + 1].add_assign(&g.bias);
            }
        }
        adam_step(&mut flat, &grads, &mut adam, &train.adam)?;
        for (i, c) in encoder.iter_mut().enumerate() {
            c.kernels = flat[2 * i].clone();
            c.bias = flat[2 * i + 1].clone();
        }
    }
    Ok(encoder)
}

/// Runs the staged protocol over a fixed dataset, with encoder features
/// computed once and cached since the encoder never changes.
pub struct Trainer<'a> {
    ds: &'a Dataset,
    encoded: Vec<Encoded>,
    annotated: Vec<bool>,
    state: Checkpoint,
    log: Vec<LossRecord>,
}

/// Source samples whose masks are used, chosen by a stream separate from
/// every training stream so that a fraction of 1 changes nothing else.
fn annotated_subset(ds: &Dataset, train: &TrainConfig) -> Result<Vec<bool>> {
    let source: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].domain == Domain::Source).collect();
    let keep = (train.annotation_fraction * source.len() as f64).round() as usize;
    if keep == 0 {
        return Err(Error::config(format!(
            "annotation fraction {} of {} source samples leaves no masks",
            train.annotation_fraction,
            source.len()
        )));
    }
    let mut order = source;
    if keep < order.len() {
        Rng::stream(train.seed, STREAM_ANNOTATION).shuffle(&mut order);
    }
    let mut flags = vec![false; ds.len()];
    for &i in &order[..keep] {
        flags[i] = ds.samples[i].has_masks();
    }
    Ok(flags)
}

impl<'a> Trainer<'a> {
    /// Pre-trains the encoder, then sets up stage 1 of `arch`.
    pub fn new(ds: &'a Dataset, arch: Arch, net: &NetConfig, train: &TrainConfig) -> Result<Self> {
        let encoder = pretrain_encoder(ds, net, train)?;
        Trainer::with_encoder(ds, arch, encoder, net, train)
    }

    /// Sets up stage 1 around an already-trained encoder.
    pub fn with_encoder(
        ds: &'a Dataset,
        arch: Arch,
        encoder: Vec<ConvParams>,
        net: &NetConfig,
        train: &TrainConfig,
    ) -> Result<Self> {
        train.validate()?;
        let params = ModelParams::with_encoder(arch, net, encoder, &mut Rng::stream(train.seed, STREAM_HEAD_INIT))?;
        let state = Checkpoint {
            stage: Stage::Stage1,
            iteration: 0,
            net: net.clone(),
            train: train.clone(),
            adam: AdamState::for_model(&params, STAGE1_GROUPS),
            params,
            rng: Rng::stream(train.seed, STREAM_STAGE1),
        };
        Trainer::resume(ds, state)
    }

    /// Continues from a checkpoint.
    pub fn resume(ds: &'a Dataset, state: Checkpoint) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::arg("cannot train on an empty dataset"));
        }
        state.train.validate()?;
        state.params.validate(&state.net)?;
        let encoded =
            ds.samples.iter().map(|s| encode(&s.image, &state.params.encoder, &state.net)).collect::<Result<_>>()?;
        let annotated = annotated_subset(ds, &state.train)?;
        Ok(Trainer { ds, encoded, annotated, state, log: Vec::new() })
    }

    pub fn params(&self) -> &ModelParams {
        &self.state.params
    }

    pub fn stage(&self) -> Stage {
        self.state.stage
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    /// Loss records of the iterations run by this trainer.
    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    /// Indices of source samples whose masks stage 2 uses.
    pub fn annotated(&self) -> impl Iterator<Item = usize> + '_ {
        self.annotated.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i)
    }

    /// One optimization step of the current stage.
    pub fn step(&mut self) -> Result<LossRecord> {
        let st = &mut self.state;
        let segment = st.stage == Stage::Stage2;
        let groups = if segment { STAGE2_GROUPS } else { STAGE1_GROUPS };
        let mut grads = st.params.zeros_like();
        let weight = 1.0 / st.train.batch as f64;
        let (mut cls, mut seg) = (0.0, 0.0);
        for _ in 0..st.train.batch {
            let i = st.rng.below(self.ds.len());
            let s = &self.ds.samples[i];
            let masks = (segment && self.annotated[i]).then_some(&s.masks[..]);
            let sample = LossSample { encoded: &self.encoded[i], labels: &s.labels, masks };
            let l = accumulate_sample(sample, &st.params, &st.net, st.train.lambda, weight, segment, &mut grads)?;
            cls += l.cls * weight;
            seg += l.seg * weight;
        }
        adam_step_model(&mut st.params, &grads, groups, &mut st.adam, &st.train.adam)?;
        st.iteration += 1;
        let rec = LossRecord { stage: st.stage, iteration: st.iteration, total: cls + st.train.lambda * seg, cls, seg };
        self.log.push(rec);
        Ok(rec)
    }

    /// Steps until `iteration` reaches `until` (capped at the stage length).
    pub fn run_until(&mut self, until: u64) -> Result<()> {
        let total = match self.state.stage {
            Stage::Stage1 => self.state.train.stage1_iters,
            Stage::Stage2 => self.state.train.stage2_iters,
        };
        while self.state.iteration < until.min(total) {
            self.step()?;
        }
        Ok(())
    }

    /// Finishes the current stage.
    pub fn finish_stage(&mut self) -> Result<()> {
        self.run_until(u64::MAX)
    }

    /// Moves from a completed stage 1 to stage 2: redraws the decoder and
    /// resets the optimizer.
    pub fn begin_stage2(&mut self) -> Result<()> {
        let st = &mut self.state;
        if st.stage != Stage::Stage1 || !st.stage_complete() {
            return Err(Error::Protocol(format!(
                "stage 2 needs a completed stage 1, have {} at iteration {}",
                st.stage.as_str(),
                st.iteration
            )));
        }
        st.params.reinit_decoder(&st.net, &mut Rng::stream(st.train.seed, STREAM_DECODER_INIT))?;
        st.adam = AdamState::for_model(&st.params, STAGE2_GROUPS);
        st.rng = Rng::stream(st.train.seed, STREAM_STAGE2);
        st.stage = Stage::Stage2;
        st.iteration = 0;
        Ok(())
    }

    /// Runs whatever remains of both stages.
    pub fn run_to_end(&mut self) -> Result<()> {
        self.finish_stage()?;
        if self.state.stage == Stage::Stage1 {
            self.begin_stage2()?;
            self.finish_stage()?;
        }
        Ok(())
    }
}

/// Stage 1 from fresh head parameters around `params.encoder`.
pub fn pretrain_stage1(
    params: &ModelParams,
    ds: &Dataset,
    net: &NetConfig,
    train: &TrainConfig,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let mut t = Trainer::with_encoder(ds, params.arch(), params.encoder.clone(), net, train)?;
    t.finish_stage()?;
    let log = t.log.clone();
    Ok((t.into_checkpoint(), log))
}

/// Stage 2 from a completed stage-1 checkpoint.
pub fn train_stage2(ck: &Checkpoint, ds: &Dataset) -> Result<(Checkpoint, Vec<LossRecord>)> {
    if ck.stage != Stage::Stage1 {
        return Err(Error::Protocol(format!("expected a stage-1 checkpoint, got {}", ck.stage.as_str())));
    }
    let mut t = Trainer::resume(ds, ck.clone())?;
    t.begin_stage2()?;
    t.finish_stage()?;
    let log = t.log.clone();
    Ok((t.into_checkpoint(), log))
}

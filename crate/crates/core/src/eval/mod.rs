//! Inference, mean-IoU scoring and the experiments built on them.

mod experiment;
mod gradients;
mod pgm;
mod specificity;

pub use experiment::{
    run_annotation_sweep, run_transfer_experiment, spearman, SeedOutcome, SweepReport, SweepRow, TransferReport,
};
pub use gradients::{gradient_suite, SuiteEntry, SUITE_CHECKS, SUITE_STEP, SUITE_TOLERANCE};
pub use pgm::{pgm_bytes, read_pgm, render_pgm};
pub use specificity::{attention_argmax_regions, attention_specificity, SpecificityReport};

use crate::data::{Category, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{encode, forward_encoded, Encoded, ModelParams, NetConfig};
use crate::tensor::{softmax_slice, Tensor};

/// Background in label maps.
pub const BACKGROUND: i32 = -1;

/// Per-pixel class ids, row-major; [`BACKGROUND`] or a category id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

impl LabelMap {
    /// Ground truth from per-label binary masks (disjoint by construction).
    pub fn from_masks(labels: &[usize], masks: &[Tensor]) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::arg("ground truth needs at least one mask"));
        };
        if labels.len() != masks.len() {
            return Err(Error::arg(format!("{} labels but {} masks", labels.len(), masks.len())));
        }
        let (height, width) = first.dims2()?;
        let mut data = vec![BACKGROUND; height * width];
        for (&l, m) in labels.iter().zip(masks) {
            if m.shape() != first.shape() {
                return Err(Error::dim(format!("mask shapes {:?} and {:?} differ", first.shape(), m.shape())));
            }
            for (d, &v) in data.iter_mut().zip(m.data()) {
                if v > 0.5 {
                    *d = l as i32;
                }
            }
        }
        Ok(LabelMap { height, width, data })
    }

    /// Ground truth of a sample that carries masks.
    pub fn ground_truth(sample: &Sample) -> Result<Self> {
        LabelMap::from_masks(&sample.labels, &sample.masks)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.data.iter().map(|&v| v as f64).collect())
            .expect("label map dimensions match its data")
    }
}

/// Output of [`segment`]: the label map and the foreground probability map
/// `[H, W]` of each label, labels ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub labels: Vec<usize>,
    pub probabilities: Vec<Tensor>,
    pub label_map: LabelMap,
}

/// Own-class classification probability of each candidate label.
pub fn label_probabilities(
    enc: &Encoded,
    params: &ModelParams,
    cfg: &NetConfig,
    candidates: &[usize],
) -> Result<Vec<f64>> {
    let trace = forward_encoded(enc, candidates, params, cfg, false)?;
    Ok(trace.labels.iter().map(|t| softmax_slice(t.logits.data())[t.label]).collect())
}

/// Labels whose own-class probability reaches `tau_cls`, ascending; if none
/// does, the single most probable candidate (lowest id on ties).
pub fn predict_labels_encoded(
    enc: &Encoded,
    params: &ModelParams,
    cfg: &NetConfig,
    candidates: &[usize],
    tau_cls: f64,
) -> Result<Vec<usize>> {
    let mut cand = candidates.to_vec();
    cand.sort_unstable();
    let probs = label_probabilities(enc, params, cfg, &cand)?;
    let picked: Vec<usize> = cand.iter().zip(&probs).filter(|(_, &p)| p >= tau_cls).map(|(&l, _)| l).collect();
    if !picked.is_empty() {
        return Ok(picked);
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(vec![cand[best]])
}

/// [`predict_labels_encoded`] over every category the network knows.
pub fn predict_labels(x: &Tensor, params: &ModelParams, cfg: &NetConfig, tau_cls: f64) -> Result<Vec<usize>> {
    let enc = encode(x, &params.encoder, cfg)?;
    let all: Vec<usize> = (0..cfg.labels).collect();
    predict_labels_encoded(&enc, params, cfg, &all, tau_cls)
}

/// The per-pixel decision rule: the label with the highest foreground
/// probability (lowest id on ties) if that probability reaches `tau_bg`,
/// background otherwise. `labels` must be ascending.
pub fn decide(labels: &[usize], probabilities: &[Tensor], tau_bg: f64) -> Result<LabelMap> {
    let Some(first) = probabilities.first() else {
        return Err(Error::arg("label set is empty"));
    };
    if labels.len() != probabilities.len() {
        return Err(Error::arg(format!("{} labels but {} probability maps", labels.len(), probabilities.len())));
    }
    let (height, width) = first.dims2()?;
    if probabilities.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::dim("probability maps differ in shape"));
    }
    let data = (0..height * width)
        .map(|px| {
            let mut best = 0;
            for i in 1..labels.len() {
                if probabilities[i].data()[px] > probabilities[best].data()[px] {
                    best = i;
                }
            }
            if probabilities[best].data()[px] >= tau_bg {
                labels[best] as i32
            } else {
                BACKGROUND
            }
        })
        .collect();
    Ok(LabelMap { height, width, data })
}

/// Foreground probability map of a `[2, H, W]` decoder output.
pub fn foreground_probability(fgbg: &Tensor) -> Result<Tensor> {
    let (c, h, w) = fgbg.dims3()?;
    if c != 2 {
        return Err(Error::dim(format!("decoder output has {c} channels, expected 2")));
    }
    let (bg, fg) = fgbg.data().split_at(h * w);
    let p = bg.iter().zip(fg).map(|(&b, &f)| softmax_slice(&[b, f])[1]).collect();
    Tensor::new(&[h, w], p)
}

pub fn segment_encoded(
    enc: &Encoded,
    labels: &[usize],
    params: &ModelParams,
    cfg: &NetConfig,
    tau_bg: f64,
) -> Result<SegmentationResult> {
    if labels.is_empty() {
        return Err(Error::arg("segmentation needs at least one label"));
    }
    let mut labels = labels.to_vec();
    labels.sort_unstable();
    let trace = forward_encoded(enc, &labels, params, cfg, true)?;
    let probabilities = trace
        .labels
        .iter()
        .map(|t| foreground_probability(t.fgbg().expect("decoded pass has decoder output")))
        .collect::<Result<Vec<_>>>()?;
    let label_map = decide(&labels, &probabilities, tau_bg)?;
    Ok(SegmentationResult { labels, probabilities, label_map })
}

/// Segments `x` for the given label set.
pub fn segment(
    x: &Tensor,
    labels: &[usize],
    params: &ModelParams,
    cfg: &NetConfig,
    tau_bg: f64,
) -> Result<SegmentationResult> {
    segment_encoded(&encode(x, &params.encoder, cfg)?, labels, params, cfg, tau_bg)
}

/// Intersection and union pixel counts of one class over a set of images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassScore {
    pub class: i32,
    pub intersection: u64,
    pub union: u64,
}

impl ClassScore {
    /// `None` when the class appears in neither prediction nor ground truth.
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

pub fn class_name(class: i32) -> &'static str {
    if class == BACKGROUND {
        return "bkg";
    }
    usize::try_from(class).ok().and_then(Category::from_id).map_or("unknown", Category::name)
}

/// Per-class IoU over a set of images and its mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassScore>,
    /// Mean over classes with a non-empty union; `None` if there are none.
    pub mean_iou: Option<f64>,
    pub samples: usize,
    /// Settings echoed into the text form.
    pub config: Vec<(String, String)>,
}

impl EvalReport {
    /// Classes left out of the mean because their union is empty.
    pub fn skipped(&self) -> Vec<i32> {
        self.classes.iter().filter(|c| c.union == 0).map(|c| c.class).collect()
    }

    pub fn iou(&self, class: i32) -> Option<f64> {
        self.classes.iter().find(|c| c.class == class).and_then(ClassScore::iou)
    }

    pub fn with_config<K: ToString, V: ToString>(mut self, entries: impl IntoIterator<Item = (K, V)>) -> Self {
        self.config.extend(entries.into_iter().map(|(k, v)| (k.to_string(), v.to_string())));
        self
    }

    /// Tab-separated text: `# key=value` echo lines and `# samples=N`, a
    /// header `class name intersection union iou`, one row per class (iou
    /// printed as `skipped` for empty unions) and a final `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config {
            s += &format!("# {k}={v}\n");
        }
        s += &format!("# samples={}\n", self.samples);
        s += "class\tname\tintersection\tunion\tiou\n";
        for c in &self.classes {
            let iou = c.iou().map_or_else(|| "skipped".to_string(), |v| format!("{v:.6}"));
            s += &format!("{}\t{}\t{}\t{}\t{iou}\n", c.class, class_name(c.class), c.intersection, c.union);
        }
        let mean = self.mean_iou.map_or_else(|| "none".to_string(), |v| format!("{v:.6}"));
        s += &format!("mean\t-\t-\t-\t{mean}\n");
        s
    }
}

/// Scores `predictions` against `truth` on `classes`, accumulating counts
/// over all images before dividing.
pub fn mean_iou(predictions: &[LabelMap], truth: &[LabelMap], classes: &[i32]) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::dim(format!("{} predictions but {} ground truths", predictions.len(), truth.len())));
    }
    let mut scores: Vec<ClassScore> =
        classes.iter().map(|&class| ClassScore { class, intersection: 0, union: 0 }).collect();
    for (i, (p, t)) in predictions.iter().zip(truth).enumerate() {
        if (p.height, p.width) != (t.height, t.width) || p.data.len() != t.data.len() {
            return Err(Error::dim(format!(
                "image {i}: prediction {}x{} vs ground truth {}x{}",
                p.height, p.width, t.height, t.width
            )));
        }
        for s in &mut scores {
            for (&a, &b) in p.data.iter().zip(&t.data) {
                let (pa, tb) = (a == s.class, b == s.class);
                s.intersection += u64::from(pa && tb);
                s.union += u64::from(pa || tb);
            }
        }
    }
    let ious: Vec<f64> = scores.iter().filter_map(ClassScore::iou).collect();
    let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    Ok(EvalReport { classes: scores, mean_iou, samples: predictions.len(), config: Vec::new() })
}

/// Which label set each evaluation image is segmented with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    /// The model's own [`predict_labels`] output.
    Predicted,
    /// The image's true labels.
    GroundTruth,
}

/// Segmentations and label sets of a model over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub label_sets: Vec<Vec<usize>>,
    pub results: Vec<SegmentationResult>,
    pub report: EvalReport,
}

/// Labels predicted by `params` for every image of `ds`, choosing among
/// `candidates`.
pub fn predict_dataset(
    ds: &Dataset,
    params: &ModelParams,
    cfg: &NetConfig,
    candidates: &[usize],
) -> Result<Vec<Vec<usize>>> {
    ds.samples
        .iter()
        .map(|s| predict_labels_encoded(&encode(&s.image, &params.encoder, cfg)?, params, cfg, candidates, cfg.tau_cls))
        .collect()
}

/// Segments every image of `ds` with the given label sets and scores the
/// result on background plus `categories`.
pub fn evaluate_with_labels(
    ds: &Dataset,
    params: &ModelParams,
    cfg: &NetConfig,
    label_sets: Vec<Vec<usize>>,
    categories: &[usize],
) -> Result<Evaluation> {
    if label_sets.len() != ds.len() {
        return Err(Error::arg(format!("{} label sets for {} images", label_sets.len(), ds.len())));
    }
    let mut results = Vec::with_capacity(ds.len());
    let mut truth = Vec::with_capacity(ds.len());
    for (s, labels) in ds.samples.iter().zip(&label_sets) {
        results.push(segment(&s.image, labels, params, cfg, cfg.tau_bg)?);
        truth.push(LabelMap::ground_truth(s)?);
    }
    let mut classes = vec![BACKGROUND];
    classes.extend(categories.iter().map(|&c| c as i32));
    let preds: Vec<LabelMap> = results.iter().map(|r| r.label_map.clone()).collect();
    let report = mean_iou(&preds, &truth, &classes)?.with_config([("arch", params.arch().as_str())]);
    Ok(Evaluation { label_sets, results, report })
}

/// [`evaluate_with_labels`] with predicted or true label sets. Predictions
/// choose among `categories` only, the vocabulary the images are scored on.
pub fn evaluate(
    ds: &Dataset,
    params: &ModelParams,
    cfg: &NetConfig,
    source: LabelSource,
    categories: &[usize],
) -> Result<Evaluation> {
    let label_sets = match source {
        LabelSource::Predicted => predict_dataset(ds, params, cfg, categories)?,
        LabelSource::GroundTruth => ds.samples.iter().map(|s| s.labels.clone()).collect(),
    };
    let mut ev = evaluate_with_labels(ds, params, cfg, label_sets, categories)?;
    let tag = match source {
        LabelSource::Predicted => "predicted",
        LabelSource::GroundTruth => "ground_truth",
    };
    ev.report.config.push(("labels".into(), tag.into()));
    Ok(ev)
}

/// Per-category F1 of predicted label sets against true ones.
pub fn label_f1(predicted: &[Vec<usize>], truth: &[Vec<usize>], categories: &[usize]) -> Result<Vec<(usize, f64)>> {
    if predicted.len() != truth.len() {
        return Err(Error::dim(format!("{} predictions but {} ground truths", predicted.len(), truth.len())));
    }
    Ok(categories
        .iter()
        .map(|&c| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (p, t) in predicted.iter().zip(truth) {
                match (p.contains(&c), t.contains(&c)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            (c, if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, data: &[i32]) -> LabelMap {
        LabelMap { height: h, width: w, data: data.to_vec() }
    }

    fn tiny() -> NetConfig {
        NetConfig { image: [1, 8, 8], channels: vec![2, 3], labels: 3, factors: 4, hidden: 5, ..Default::default() }
    }

    #[test]
    fn decision_rule_examples() {
        let p = |v: f64| Tensor::full(&[1, 1], v);
        assert_eq!(decide(&[1, 2], &[p(0.8), p(0.6)], 0.5).unwrap().data, vec![1]);
        assert_eq!(decide(&[1, 2], &[p(0.3), p(0.4)], 0.5).unwrap().data, vec![BACKGROUND]);
        // ties go to the lower id
        assert_eq!(decide(&[1, 2], &[p(0.7), p(0.7)], 0.5).unwrap().data, vec![1]);
        assert_eq!(decide(&[3], &[p(0.5)], 0.5).unwrap().data, vec![3]);
        assert!(matches!(decide(&[], &[], 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn iou_examples() {
        let gt = map(1, 4, &[-1, 2, 2, -1]);
        assert_eq!(
            mean_iou(std::slice::from_ref(&gt), std::slice::from_ref(&gt), &[-1, 2]).unwrap().mean_iou,
            Some(1.0)
        );

        // prediction {p1, p2}, truth {p2, p3}
        let pred = map(1, 4, &[-1, 2, 2, -1]);
        let truth = map(1, 4, &[-1, -1, 2, 2]);
        let r = mean_iou(&[pred], &[truth], &[2]).unwrap();
        assert!((r.iou(2).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let r = mean_iou(&[map(1, 2, &[4, -1])], &[map(1, 2, &[-1, 4])], &[4, 5]).unwrap();
        assert_eq!(r.iou(4), Some(0.0));
        assert_eq!(r.skipped(), vec![5]);
        assert_eq!(r.mean_iou, Some(0.0));
        assert!(r.to_tsv().contains("5\tsquare\t0\t0\tskipped"));

        assert!(matches!(mean_iou(&[map(1, 2, &[0, 0])], &[map(2, 1, &[0, 0])], &[0]), Err(Error::Dimension(_))));
        assert!(matches!(mean_iou(&[], &[map(1, 1, &[0])], &[0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn saturated_decoder_reproduces_the_mask() {
        let mask = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let fgbg = Tensor::new(&[2, 2, 2], vec![-50.0, 50.0, 50.0, -50.0, 50.0, -50.0, -50.0, 50.0]).unwrap();
        let p = foreground_probability(&fgbg).unwrap();
        let lm = decide(&[4], &[p], 0.5).unwrap();
        assert_eq!(lm, LabelMap::from_masks(&[4], &[mask]).unwrap());
    }

    #[test]
    fn thresholds_bound_the_label_set() {
        let cfg = tiny();
        let mut rng = Rng::new(2);
        let p = ModelParams::init(Arch::TransferNet, &cfg, &mut rng).unwrap();
        let x = crate::tensor::random_normal(&[1, 8, 8], 0.5, 0.2, &mut rng).unwrap();
        assert_eq!(predict_labels(&x, &p, &cfg, 0.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(predict_labels(&x, &p, &cfg, 1.0 + 1e-9).unwrap().len(), 1);
        // a zero head gives uniform probabilities; the fallback picks id 0
        let mut z = p.clone();
        for (g, t) in z.named_mut() {
            if g != crate::model::Group::Encoder {
                *t = Tensor::zeros_like(t);
            }
        }
        assert_eq!(predict_labels(&x, &z, &cfg, 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn segmentation_uses_only_requested_labels() {
        let cfg = tiny();
        let mut rng = Rng::new(3);
        let p = ModelParams::init(Arch::BaselineNet, &cfg, &mut rng).unwrap();
        let x = crate::tensor::random_normal(&[1, 8, 8], 0.5, 0.2, &mut rng).unwrap();
        let r = segment(&x, &[2, 0], &p, &cfg, 0.0).unwrap();
        assert_eq!(r.labels, vec![0, 2]);
        assert!(r.label_map.data.iter().all(|&v| v == 0 || v == 2));
        assert_eq!(decide(&r.labels, &r.probabilities, 0.0).unwrap(), r.label_map);
        assert!(matches!(segment(&x, &[], &p, &cfg, 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn f1_counts() {
        let f = label_f1(&[vec![4], vec![4, 5], vec![5]], &[vec![4], vec![4], vec![4, 5]], &[4, 5]).unwrap();
        assert!((f[0].1 - 0.8).abs() < 1e-15);
        assert!((f[1].1 - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mean_iou_ignores_image_order(
            imgs in prop::collection::vec((prop::collection::vec(-1i32..3, 6), prop::collection::vec(-1i32..3, 6)), 1..6),
            rot in 0usize..6,
        ) {
            let preds: Vec<LabelMap> = imgs.iter().map(|(p, _)| map(2, 3, p)).collect();
            let gts: Vec<LabelMap> = imgs.iter().map(|(_, g)| map(2, 3, g)).collect();
            let a = mean_iou(&preds, &gts, &[-1, 0, 1, 2]).unwrap();
            let k = rot % preds.len();
            let mut p2 = preds.clone();
            let mut g2 = gts.clone();
            p2.rotate_left(k);
            g2.rotate_left(k);
            p2.reverse();
            g2.reverse();
            prop_assert_eq!(a, mean_iou(&p2, &g2, &[-1, 0, 1, 2]).unwrap());
        }

        #[test]
        fn label_map_follows_the_decision_rule(
            probs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..4),
            tau in 0.0f64..1.0,
        ) {
            let labels: Vec<usize> = (0..probs.len()).map(|i| i * 2).collect();
            let maps: Vec<Tensor> = probs.iter().map(|p| Tensor::new(&[2, 2], p.clone()).unwrap()).collect();
            let lm = decide(&labels, &maps, tau).unwrap();
            for px in 0..4 {
                let best = (0..labels.len()).fold(0, |b, i| if probs[i][px] > probs[b][px] { i } else { b });
                let want = if probs[best][px] >= tau { labels[best] as i32 } else { BACKGROUND };
                prop_assert_eq!(lm.data[px], want);
                prop_assert!(lm.data[px] == BACKGROUND || labels.contains(&(lm.data[px] as usize)));
            }
        }

        #[test]
        fn iou_is_a_fraction(
            p in prop::collection::vec(-1i32..2, 9),
            g in prop::collection::vec(-1i32..2, 9),
        ) {
            let r = mean_iou(&[map(3, 3, &p)], &[map(3, 3, &g)], &[-1, 0, 1]).unwrap();
            for c in &r.classes {
                if let Some(v) = c.iou() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}

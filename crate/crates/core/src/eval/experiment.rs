//! Multi-seed comparison of TransferNet and BaselineNet, and the
//! annotation-budget sweep.

use super::{evaluate, evaluate_with_labels, label_f1, EvalReport, LabelSource};
use crate::config::RunConfig;
use crate::data::{generate_dataset, generate_eval_set, Category, Dataset, EvalObjects};
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::train::{pretrain_encoder, train_stage2, Checkpoint, LossRecord, Trainer};

/// Everything one seed of [`run_transfer_experiment`] produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub transfernet: EvalReport,
    /// TransferNet segmenting with the true label sets.
    pub transfernet_gt: EvalReport,
    /// BaselineNet segmenting with TransferNet's predicted label sets.
    pub baselinenet: EvalReport,
    /// Per target category F1 of TransferNet's predicted label sets.
    pub label_f1: Vec<(usize, f64)>,
    /// Final TransferNet and BaselineNet states, in that order.
    pub checkpoints: Vec<Checkpoint>,
    /// Loss logs of both stages, in the order of `checkpoints`.
    pub logs: Vec<Vec<LossRecord>>,
}

impl SeedOutcome {
    /// Set when true labels scored below predicted ones.
    pub fn gt_below_predicted(&self) -> bool {
        miou(&self.transfernet_gt) < miou(&self.transfernet)
    }
}

fn miou(r: &EvalReport) -> f64 {
    r.mean_iou.unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub config: RunConfig,
    pub seeds: Vec<SeedOutcome>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl TransferReport {
    pub fn mean_transfernet(&self) -> f64 {
        mean(self.seeds.iter().map(|s| miou(&s.transfernet)))
    }

    pub fn mean_baselinenet(&self) -> f64 {
        mean(self.seeds.iter().map(|s| miou(&s.baselinenet)))
    }

    pub fn mean_transfernet_gt(&self) -> f64 {
        mean(self.seeds.iter().map(|s| miou(&s.transfernet_gt)))
    }

    /// Seeds on which true labels scored below predicted ones.
    pub fn flagged(&self) -> Vec<u64> {
        self.seeds.iter().filter(|s| s.gt_below_predicted()).map(|s| s.seed).collect()
    }

    /// Config echo, then one row per seed and a mean row with columns
    /// `seed transfernet baselinenet transfernet_gt gt_below_pred`.
    pub fn to_tsv(&self) -> String {
        let mut s: String = self.config.entries().into_iter().map(|(k, v)| format!("# {k}={v}\n")).collect();
        s += "seed\ttransfernet\tbaselinenet\ttransfernet_gt\tgt_below_pred\n";
        for o in &self.seeds {
            s += &format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                o.seed,
                miou(&o.transfernet),
                miou(&o.baselinenet),
                miou(&o.transfernet_gt),
                if o.gt_below_predicted() { "FLAG" } else { "ok" }
            );
        }
        s += &format!(
            "mean\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            self.mean_transfernet(),
            self.mean_baselinenet(),
            self.mean_transfernet_gt(),
            self.flagged().len()
        );
        s
    }
}

fn seeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.set_seed(seed);
    c
}

fn target_ids(cfg: &RunConfig) -> Vec<usize> {
    let mut t: Vec<usize> = cfg.data.target.iter().map(|c| Category::id(*c)).collect();
    t.sort_unstable();
    t
}

fn eval_set(cfg: &RunConfig) -> Result<Dataset> {
    generate_eval_set(&cfg.data, cfg.eval.samples, EvalObjects::Mixed)
}

/// Trains TransferNet and BaselineNet on the same data for every seed in
/// `cfg.eval.seeds` and scores both on held-out target images.
///
/// For each seed the dataset and training seeds are set to that seed and
/// both models share one pre-trained encoder. BaselineNet segments with
/// the label sets TransferNet predicts, so the two differ only in how the
/// decoder input is formed.
pub fn run_transfer_experiment(cfg: &RunConfig) -> Result<TransferReport> {
    cfg.validate()?;
    let targets = target_ids(cfg);
    let mut seeds = Vec::with_capacity(cfg.eval.seeds.len());
    for &seed in &cfg.eval.seeds {
        let c = seeded(cfg, seed);
        let ds = generate_dataset(&c.data)?;
        let encoder = pretrain_encoder(&ds, &c.net, &c.train)?;
        let mut checkpoints = Vec::with_capacity(2);
        let mut logs = Vec::with_capacity(2);
        for arch in [Arch::TransferNet, Arch::BaselineNet] {
            let mut t = Trainer::with_encoder(&ds, arch, encoder.clone(), &c.net, &c.train)?;
            t.run_to_end()?;
            logs.push(t.log().to_vec());
            checkpoints.push(t.into_checkpoint());
        }
        let test = eval_set(&c)?;
        let tn = evaluate(&test, &checkpoints[0].params, &c.net, LabelSource::Predicted, &targets)?;
        let gt = evaluate(&test, &checkpoints[0].params, &c.net, LabelSource::GroundTruth, &targets)?;
        let truth: Vec<Vec<usize>> = test.samples.iter().map(|s| s.labels.clone()).collect();
        let f1 = label_f1(&tn.label_sets, &truth, &targets)?;
        let mut bn = evaluate_with_labels(&test, &checkpoints[1].params, &c.net, tn.label_sets.clone(), &targets)?;
        bn.report.config.push(("labels".into(), "transfernet_predicted".into()));
        seeds.push(SeedOutcome {
            seed,
            transfernet: tn.report,
            transfernet_gt: gt.report,
            baselinenet: bn.report,
            label_f1: f1,
            checkpoints,
            logs,
        });
    }
    Ok(TransferReport { config: cfg.clone(), seeds })
}

/// One annotation fraction of [`run_annotation_sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    /// Target mean IoU per seed, in seed order.
    pub per_seed: Vec<f64>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        mean(self.per_seed.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub config: RunConfig,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Rank correlation between fraction and mean target mIoU.
    pub fn spearman(&self) -> f64 {
        let f: Vec<f64> = self.rows.iter().map(|r| r.fraction).collect();
        let m: Vec<f64> = self.rows.iter().map(SweepRow::mean).collect();
        spearman(&f, &m)
    }

    /// Config echo, then `fraction seed_<s>... mean` rows and a final
    /// `# spearman=` line.
    pub fn to_tsv(&self) -> String {
        let mut s: String = self.config.entries().into_iter().map(|(k, v)| format!("# {k}={v}\n")).collect();
        s += "fraction";
        for seed in &self.config.eval.seeds {
            s += &format!("\tseed_{seed}");
        }
        s += "\tmean\n";
        for r in &self.rows {
            s += &format!("{}", r.fraction);
            for v in &r.per_seed {
                s += &format!("\t{v:.6}");
            }
            s += &format!("\t{:.6}\n", r.mean());
        }
        s += &format!("# spearman={:.6}\n", self.spearman());
        s
    }
}

/// Trains TransferNet once per seed and annotation fraction, keeping mask
/// supervision for only that fraction of source images, and scores each
/// on held-out target images.
///
/// Stage 1 never sees masks, so each seed runs the encoder and stage 1
/// once and branches into stage 2 per fraction; with fraction 1 this is
/// exactly the TransferNet run of [`run_transfer_experiment`].
pub fn run_annotation_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.eval.fractions.is_empty() {
        return Err(Error::config("the sweep needs at least one fraction"));
    }
    let targets = target_ids(cfg);
    let mut rows: Vec<SweepRow> =
        cfg.eval.fractions.iter().map(|&fraction| SweepRow { fraction, per_seed: Vec::new() }).collect();
    for &seed in &cfg.eval.seeds {
        let c = seeded(cfg, seed);
        let ds = generate_dataset(&c.data)?;
        let encoder = pretrain_encoder(&ds, &c.net, &c.train)?;
        let mut t = Trainer::with_encoder(&ds, Arch::TransferNet, encoder, &c.net, &c.train)?;
        t.finish_stage()?;
        let stage1 = t.into_checkpoint();
        let test = eval_set(&c)?;
        for row in &mut rows {
            let mut ck = stage1.clone();
            ck.train.annotation_fraction = row.fraction;
            let (done, _) = train_stage2(&ck, &ds)?;
            let ev = evaluate(&test, &done.params, &c.net, LabelSource::Predicted, &targets)?;
            row.per_seed.push(miou(&ev.report));
        }
    }
    Ok(SweepReport { config: cfg.clone(), rows })
}

/// Average ranks, ties sharing the mean of the ranks they span.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// Returns 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

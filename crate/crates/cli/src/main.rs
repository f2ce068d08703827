use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnxfer::config::RunConfig;
use attnxfer::data::{generate_dataset, generate_eval_set, load_dataset, save_dataset, Category, Dataset, EvalObjects};
use attnxfer::eval::{
    evaluate, gradient_suite, predict_labels, render_pgm, run_annotation_sweep, run_transfer_experiment, segment,
    LabelSource, SUITE_TOLERANCE,
};
use attnxfer::model::{encode, forward_encoded, Arch};
use attnxfer::tensor::Tensor;
use attnxfer::train::{load_checkpoint_for, save_checkpoint, Checkpoint, Stage, Trainer};
use attnxfer::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Attention-based segmentation transfer on synthetic shapes.
#[derive(Parser, Debug)]
#[command(name = "attnxfer", version, arg_required_else_help = true)]
struct Cli {
    /// Seed for data generation and training (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training set and a held-out evaluation set.
    GenData,
    /// Pre-train the encoder and run both training stages.
    Train(TrainArgs),
    /// Score a checkpoint on held-out target images.
    Eval(EvalArgs),
    /// Segment one image, writing its label map and attention maps.
    Infer(ImageArgs),
    /// Check every layer and loss against finite differences.
    Gradcheck {
        /// Random instances per check.
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
    /// Target mIoU as a function of the annotated share of source images.
    Sweep,
    /// TransferNet against BaselineNet over the configured seeds.
    Compare,
    /// Attention aggregated over every label (per-pixel max).
    Viz(ImageArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "transfernet", value_parser = ["transfernet", "baselinenet"])]
    arch: String,
    /// Training set written by gen-data (generated from the config if absent).
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting over.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "FILE", required = true)]
    checkpoint: PathBuf,
    /// Evaluation set written by gen-data (generated from the config if absent).
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Segment with the true label sets instead of predicted ones.
    #[arg(long)]
    true_labels: bool,
}

#[derive(Args, Debug)]
struct ImageArgs {
    #[arg(long, value_name = "FILE", required = true)]
    checkpoint: PathBuf,
    /// Dataset to take the image from (the evaluation set if absent).
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Index of the image within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
        cfg.eval.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn target_ids(cfg: &RunConfig) -> Vec<usize> {
    let mut t: Vec<usize> = cfg.data.target.iter().map(|c| c.id()).collect();
    t.sort_unstable();
    t
}

fn eval_data(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => load_dataset(p),
        None => generate_eval_set(&cfg.data, cfg.eval.samples, EvalObjects::Mixed),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn image(ds: &Dataset, index: usize) -> Result<&attnxfer::data::Sample> {
    ds.samples
        .get(index)
        .ok_or_else(|| Error::Argument(format!("image index {index} is out of range for {} images", ds.len())))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train = generate_dataset(&cfg.data)?;
    let eval = generate_eval_set(&cfg.data, cfg.eval.samples, EvalObjects::Mixed)?;
    save_dataset(&train, out.join("train.dsf"))?;
    save_dataset(&eval, out.join("eval.dsf"))?;
    println!("wrote {} training and {} evaluation images to {}", train.len(), eval.len(), out.display());
    Ok(())
}

fn train(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    let ds = match &args.data {
        Some(p) => load_dataset(p)?,
        None => generate_dataset(&cfg.data)?,
    };
    let arch = Arch::parse(&args.arch)?;
    let mut t = match &args.resume {
        Some(p) => {
            let ck = load_checkpoint_for(p, &cfg.net)?;
            if ck.params.arch() != arch {
                return Err(Error::Config(format!("checkpoint holds a {} model", ck.params.arch().as_str())));
            }
            Trainer::resume(&ds, ck)?
        }
        None => Trainer::new(&ds, arch, &cfg.net, &cfg.train)?,
    };
    let name = arch.as_str();
    if t.stage() == Stage::Stage1 {
        t.finish_stage()?;
        save_checkpoint(t.checkpoint(), out.join(format!("{name}_stage1.ckp")))?;
        t.begin_stage2()?;
    }
    t.finish_stage()?;
    let path = out.join(format!("{name}.ckp"));
    save_checkpoint(t.checkpoint(), &path)?;
    let mut log = String::from("stage\titeration\ttotal\tcls\tseg\n");
    for r in t.log() {
        log += &format!("{}\t{}\t{:.6}\t{:.6}\t{:.6}\n", r.stage.as_str(), r.iteration, r.total, r.cls, r.seg);
    }
    write(&out.join(format!("{name}_loss.tsv")), &log)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = load_checkpoint_for(path, &cfg.net)?;
    if ck.stage != Stage::Stage2 || !ck.stage_complete() {
        return Err(Error::Protocol(format!(
            "{} is not a finished model ({} at iteration {})",
            path.display(),
            ck.stage.as_str(),
            ck.iteration
        )));
    }
    Ok(ck)
}

fn eval(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> Result<()> {
    let ck = load_model(cfg, &args.checkpoint)?;
    let ds = eval_data(cfg, args.data.as_deref())?;
    let source = if args.true_labels { LabelSource::GroundTruth } else { LabelSource::Predicted };
    let ev = evaluate(&ds, &ck.params, &cfg.net, source, &target_ids(cfg))?;
    let tsv = ev.report.with_config(cfg.entries()).to_tsv();
    print!("{tsv}");
    write(&out.join("eval.tsv"), &tsv)
}

/// `[H', W']` map of one label's attention weights.
fn attention_maps(cfg: &RunConfig, ck: &Checkpoint, x: &Tensor, labels: &[usize]) -> Result<Vec<(usize, Tensor)>> {
    let enc = encode(x, &ck.params.encoder, &cfg.net)?;
    let trace = forward_encoded(&enc, labels, &ck.params, &cfg.net, false)?;
    let (h, w) = cfg.net.feature_dims();
    trace
        .labels
        .iter()
        .map(|t| {
            let map = match &t.attention {
                Some(a) => a.alpha.reshape(&[h, w])?,
                // BaselineNet has no attention; show its bridged decoder input
                None => t.densified.as_map(h, w)?,
            };
            Ok((t.label, map))
        })
        .collect()
}

fn label_name(id: usize) -> &'static str {
    Category::from_id(id).map_or("unknown", Category::name)
}

fn infer(cfg: &RunConfig, args: &ImageArgs, out: &Path) -> Result<()> {
    let ck = load_model(cfg, &args.checkpoint)?;
    let ds = eval_data(cfg, args.data.as_deref())?;
    let s = image(&ds, args.index)?;
    let labels = predict_labels(&s.image, &ck.params, &cfg.net, cfg.net.tau_cls)?;
    let seg = segment(&s.image, &labels, &ck.params, &cfg.net, cfg.net.tau_bg)?;
    let names: Vec<&str> = labels.iter().map(|&l| label_name(l)).collect();
    println!("predicted labels: {}", names.join(", "));
    render_pgm(&s.image.reshape(&[cfg.data.image_size, cfg.data.image_size])?, out.join("image.pgm"))?;
    render_pgm(&seg.label_map.to_tensor(), out.join("label_map.pgm"))?;
    for (l, p) in seg.labels.iter().zip(&seg.probabilities) {
        render_pgm(p, out.join(format!("foreground_{}.pgm", label_name(*l))))?;
    }
    for (l, map) in attention_maps(cfg, &ck, &s.image, &labels)? {
        render_pgm(&map, out.join(format!("attention_{}.pgm", label_name(l))))?;
    }
    let lm: String = seg
        .label_map
        .data
        .chunks(seg.label_map.width)
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\t") + "\n")
        .collect();
    write(&out.join("label_map.tsv"), &lm)
}

fn viz(cfg: &RunConfig, args: &ImageArgs, out: &Path) -> Result<()> {
    let ck = load_model(cfg, &args.checkpoint)?;
    let ds = eval_data(cfg, args.data.as_deref())?;
    let s = image(&ds, args.index)?;
    let all: Vec<usize> = (0..cfg.net.labels).collect();
    let maps = attention_maps(cfg, &ck, &s.image, &all)?;
    let mut agg = maps[0].1.data().to_vec();
    for (_, m) in &maps[1..] {
        for (a, &v) in agg.iter_mut().zip(m.data()) {
            *a = a.max(v);
        }
    }
    let agg = Tensor::new(maps[0].1.shape(), agg)?;
    let path = out.join("attention_all.pgm");
    render_pgm(&agg, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gradcheck(instances: usize, out: &Path) -> Result<bool> {
    let entries = gradient_suite(instances)?;
    let mut text = String::from("check\tinstances\tcoordinates\tmax_rel_error\tstatus\n");
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        text += &format!("{}\t{}\t{}\t{:.3e}\t{status}\n", e.name, e.instances, e.coordinates, e.max_rel_error);
    }
    print!("{text}");
    write(&out.join("gradcheck.tsv"), &text)?;
    let ok = entries.iter().all(|e| e.passed());
    if !ok {
        eprintln!("gradient check failed: relative error above {SUITE_TOLERANCE:e}");
    }
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => gen_data(&cfg, out)?,
        Command::Train(a) => train(&cfg, a, out)?,
        Command::Eval(a) => eval(&cfg, a, out)?,
        Command::Infer(a) => infer(&cfg, a, out)?,
        Command::Viz(a) => viz(&cfg, a, out)?,
        Command::Gradcheck { instances } => return gradcheck(*instances, out),
        Command::Sweep => {
            let r = run_annotation_sweep(&cfg)?;
            let tsv = r.to_tsv();
            print!("{tsv}");
            write(&out.join("sweep.tsv"), &tsv)?;
        }
        Command::Compare => {
            let r = run_transfer_experiment(&cfg)?;
            let tsv = r.to_tsv();
            print!("{tsv}");
            write(&out.join("compare.tsv"), &tsv)?;
            for s in &r.seeds {
                let path = out.join(format!("compare_seed{}_", s.seed));
                for ck in &s.checkpoints {
                    save_checkpoint(ck, format!("{}{}.ckp", path.display(), ck.params.arch().as_str()))?;
                }
            }
            let flagged = r.flagged();
            if !flagged.is_empty() {
                eprintln!("warning: TransferNet with true labels scored below predicted labels on seeds {flagged:?}");
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

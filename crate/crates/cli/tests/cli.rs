use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use attnxfer::eval::read_pgm;

const TINY: &str = "\
# small enough to train in a few seconds
n_source=40
n_target=20
max_objects=2
channels=4,6
factors=8
hidden=8
batch=4
encoder_iters=15
stage1_iters=15
stage2_iters=15
eval_samples=6
pair_samples=4
seeds=0
fractions=0.5,1.0
";

fn attnxfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnxfer")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = attnxfer(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = attnxfer(&["gen-data", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--bogus"));
}

#[test]
fn infer_without_checkpoint_names_the_flag() {
    let o = attnxfer(&["infer"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
}

#[test]
fn bad_config_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key=1\n").unwrap();
    let o = attnxfer(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_file_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = attnxfer(&["eval", "--checkpoint", "/no/such.ckp", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = attnxfer(&["gradcheck", "--instances", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for name in ["conv2d", "deconv2d", "maxunpool2d", "attention_global", "densify", "loss_joint_transfernet"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{name}\t"))), "missing {name}");
    }
    assert!(!text.contains("FAIL"));
    assert!(dir.path().join("gradcheck.tsv").exists());
}

#[test]
fn train_eval_infer_viz_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let run = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend(["--config", &cfg, "--out", out_s, "--seed", "3"]);
        let o = attnxfer(&full);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };

    run(&["gen-data"]);
    let train = out.join("train.dsf");
    let eval_set = out.join("eval.dsf");
    assert!(train.exists() && eval_set.exists());

    run(&["train", "--data", train.to_str().unwrap()]);
    let ckp = out.join("transfernet.ckp");
    assert!(out.join("transfernet_stage1.ckp").exists());
    let log = fs::read_to_string(out.join("transfernet_loss.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 15 + 15);

    let e1 = stdout(&run(&["eval", "--checkpoint", ckp.to_str().unwrap(), "--data", eval_set.to_str().unwrap()]));
    let tsv = fs::read_to_string(out.join("eval.tsv")).unwrap();
    assert!(e1.starts_with(&tsv));
    assert!(tsv.contains("class\tname\tintersection\tunion\tiou"));
    assert!(tsv.lines().last().unwrap().starts_with("mean\t"));
    let e2 = stdout(&run(&["eval", "--checkpoint", ckp.to_str().unwrap(), "--data", eval_set.to_str().unwrap()]));
    assert_eq!(e1, e2);

    run(&["infer", "--checkpoint", ckp.to_str().unwrap(), "--index", "1"]);
    let (w, h, px) = read_pgm(&fs::read(out.join("label_map.pgm")).unwrap()).unwrap();
    assert_eq!((w, h, px.len()), (32, 32, 1024));
    let attention: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("attention_"))
        .collect();
    assert!(!attention.is_empty());
    for a in attention {
        let (w, h, _) = read_pgm(&fs::read(a.path()).unwrap()).unwrap();
        assert_eq!((w, h), (8, 8));
    }

    run(&["viz", "--checkpoint", ckp.to_str().unwrap()]);
    assert_eq!(read_pgm(&fs::read(out.join("attention_all.pgm")).unwrap()).unwrap().0, 8);

    // a stage-1 checkpoint is not a finished model
    let o = attnxfer(&["eval", "--config", &cfg, "--checkpoint", out.join("transfernet_stage1.ckp").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--arch", "baselinenet", "--config", &cfg, "--out", out.to_str().unwrap()];
        args.extend(extra);
        let o = attnxfer(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read(out.join("baselinenet.ckp")).unwrap()
    };
    let a = train(&dir.path().join("a"), &[]);
    let b = train(&dir.path().join("b"), &[]);
    assert_eq!(a, b);
    let stage1 = dir.path().join("a/baselinenet_stage1.ckp");
    let c = train(&dir.path().join("c"), &["--resume", stage1.to_str().unwrap()]);
    assert_eq!(a, c);
}

#[test]
fn compare_and_sweep_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().to_str().unwrap();
    let o = attnxfer(&["compare", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = fs::read_to_string(dir.path().join("compare.tsv")).unwrap();
    assert!(t.lines().last().unwrap().starts_with("mean\t"));
    assert!(dir.path().join("compare_seed0_transfernet.ckp").exists());

    let o = attnxfer(&["sweep", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = fs::read_to_string(dir.path().join("sweep.tsv")).unwrap();
    let rows = t.lines().filter(|l| !l.starts_with('#')).count();
    // header plus one row per fraction
    assert_eq!(rows, 3, "{t}");
}

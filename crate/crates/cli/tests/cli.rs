use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "height=8\nwidth=8\ntrain_samples=6\neval_samples=4\nsteps=12\nchannels=4\n";

fn cdgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdgc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_both_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("data");
    let res = cdgc(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{res:?}");
    let train = cdgc_core::data::load_dataset(out.join("train")).unwrap();
    let eval = cdgc_core::data::load_dataset(out.join("eval")).unwrap();
    assert_eq!((train.len(), eval.len()), (6, 4));
}

#[test]
fn train_eval_and_dump_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let out_s = out.to_str().unwrap();
    let res = cdgc(&[
        "train", "--config", &cfg, "--variant", "class-ds", "--ratio", "0.6", "--fusion", "sum",
        "--seed", "4", "--out", out_s,
    ]);
    assert!(res.status.success(), "{res:?}");
    let text = stdout(&res);
    assert!(text.contains("class-ds:0.6,4,"), "{text}");

    let rows = cdgc_core::experiment::read_results(out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    let run = out.join("class-ds-0.6_seed4");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("iter,lr,l_c,l_f,l_a,l_total"));
    assert_eq!(metrics.lines().count(), 13);

    let ckpt = run.join("checkpoint");
    let res = cdgc(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(res.status.success(), "{res:?}");
    let text = stdout(&res);
    let refined: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("refined_miou "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((refined - rows[0].refined_miou).abs() < 1e-6, "{text}");

    let dumps = tmp.path().join("dumps");
    let res = cdgc(&[
        "dump-features", "--checkpoint", ckpt.to_str().unwrap(), "--class", "1", "--out",
        dumps.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{res:?}");
    let before = cdgc_core::cdt::read(dumps.join("class1_before.cdt")).unwrap();
    let after = cdgc_core::cdt::read(dumps.join("class1_after.cdt")).unwrap();
    assert_eq!(before.shape(), &[4, 8, 8]);
    assert_eq!(after.shape(), &[4, 8, 8]);
}

#[test]
fn sweep_reports_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("sweep");
    let res = cdgc(&[
        "sweep", "--config", &cfg, "--seeds", "0", "--variants", "none,class-sim", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{res:?}");
    let text = stdout(&res);
    assert!(text.lines().any(|l| l.starts_with("none,")));
    assert!(text.lines().any(|l| l.starts_with("class-sim,")));
    let rows = cdgc_core::experiment::read_results(out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn gradcheck_succeeds() {
    let res = cdgc(&["gradcheck", "--seeds", "1"]);
    assert!(res.status.success(), "{res:?}");
    assert!(stdout(&res).contains(" 0 failed"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for args in [
        vec!["train", "--variant", "gcn", "--out", out],
        vec!["train", "--variant", "class-sim", "--ratio", "0.5", "--out", out],
        vec!["train", "--ratio", "1.5", "--out", out],
        vec!["train", "--fusion", "max", "--out", out],
        vec!["eval", "--checkpoint", "/nonexistent/ckpt"],
    ] {
        let res = cdgc(&args);
        assert_eq!(res.status.code(), Some(2), "{args:?}: {res:?}");
        assert!(String::from_utf8_lossy(&res.stderr).contains("error"));
    }
    let bad_cfg = tmp.path().join("bad.cfg");
    fs::write(&bad_cfg, "learning_rate=0.1\n").unwrap();
    let res = cdgc(&["train", "--config", bad_cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn dump_features_rejects_coarse_only_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let res = cdgc(&["train", "--config", &cfg, "--variant", "none", "--out", out.to_str().unwrap()]);
    assert!(res.status.success());
    let ckpt = out.join("none_seed0").join("checkpoint");
    let res = cdgc(&[
        "dump-features", "--checkpoint", ckpt.to_str().unwrap(), "--class", "0", "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

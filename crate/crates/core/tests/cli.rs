use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use weakcount::checkpoint::load_checkpoint;
use weakcount::datagen::load_dataset;
use weakcount::eval::read_records;

const SMALL: &str = "epochs = 1\nnum_scenes = 14\ntrain_scenes = 10\nseeds = 0,1,2\n";

fn weakcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakcount")).args(args).output().expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn datagen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, ckpt, hist, csv) = (
        path(dir.path(), "run.cfg"),
        path(dir.path(), "scenes.wcds"),
        path(dir.path(), "model.ckpt"),
        path(dir.path(), "history.csv"),
        path(dir.path(), "eval.csv"),
    );
    fs::write(&cfg, SMALL).unwrap();
    ok(&weakcount(&["datagen", "--spec", &cfg, "--out", &data]));
    assert_eq!(load_dataset(&data).unwrap().len(), 14);

    ok(&weakcount(&["train", "--config", &cfg, "--data", &data, "--out", &ckpt, "--history", &hist]));
    let history = fs::read_to_string(&hist).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert!(history.starts_with("epoch,l_r,l_c,l_gt,alpha,total\n"));
    let checkpoint = load_checkpoint(&ckpt).unwrap();
    assert!(checkpoint.tensors.contains_key("sfsl.f_hat"));

    ok(&weakcount(&["eval", "--ckpt", &ckpt, "--data", &data, "--out", &csv]));
    let records = read_records(fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].config_digest, checkpoint.config_digest);
    assert!(records[0].mae.is_finite());
}

#[test]
fn robustness_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = (path(dir.path(), "run.cfg"), path(dir.path(), "scenes.wcds"));
    fs::write(&cfg, SMALL).unwrap();
    ok(&weakcount(&["datagen", "--spec", &cfg, "--out", &data]));
    let mut outputs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = path(dir.path(), name);
        ok(&weakcount(&["robustness", "--config", &cfg, "--data", &data, "--sigmas", "0,0.1", "--out", &out]));
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let records = read_records(&outputs[0][..]).unwrap();
    assert_eq!(records.len(), 6);
    assert_eq!(records[3].arm, "sigma=0.1");
}

#[test]
fn exit_codes_separate_bad_input_from_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, ckpt) = (
        path(dir.path(), "run.cfg"),
        path(dir.path(), "scenes.wcds"),
        path(dir.path(), "model.ckpt"),
    );
    fs::write(&cfg, SMALL).unwrap();
    ok(&weakcount(&["datagen", "--spec", &cfg, "--out", &data]));

    let bad = path(dir.path(), "bad.cfg");
    fs::write(&bad, "alphaa = 1\n").unwrap();
    let out = weakcount(&["train", "--config", &bad, "--data", &data, "--out", &ckpt]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alphaa"));

    let out = weakcount(&["eval", "--ckpt", &data, "--data", &data, "--out", &ckpt]);
    assert_eq!(out.status.code(), Some(1));

    let exploding = path(dir.path(), "explode.cfg");
    fs::write(&exploding, format!("{SMALL}lr = 1e200\n")).unwrap();
    let out = weakcount(&["train", "--config", &exploding, "--data", &data, "--out", &ckpt]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use veinmotion::checkpoint::Checkpoint;
use veinmotion::dataset::{ingest, save_image};

const TINY: &str = "\
height = 32
width = 48
classes = 4
samples = 4
tx_range = 3
roll_range = 8
keypoints = 3
widths = 4, 8, 8, 8
epochs = 1
batch_size = 4
decay_epoch = 1
n_basis = 3
variants = 2
train_per_class = 2
fvr_epochs = 1
fvr_batch_classes = 2
fvr_batch_samples = 2
grid_rows = 2
grid_dirs = 2
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_veinmotion"))
        .args(args)
        .current_dir(dir)
        .env("MT_LOG", "warn")
        .output()
        .expect("spawn veinmotion")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exit code")
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.cfg"), TINY).unwrap();
    let c = ["--config", "run.cfg"];
    ok(d, &[&c[..], &["synth-gen", "--out", "data"]].concat());
    assert_eq!(fs::read_dir(d.join("data")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count(), 4);
    assert!(d.join("data/manifest.txt").is_file());

    let log = ok(d, &[&c[..], &["train-mt", "--data", "data", "--out", "mt.ck"]].concat());
    assert_eq!(log.lines().count(), 1);
    assert_eq!(log.trim().split('\t').count(), 4);
    let tsv = fs::read_to_string(d.join("mt.ck.metrics.tsv")).unwrap();
    assert!(tsv.starts_with("epoch\tloss_perc\tloss_eq\ttotal\n1\t"));

    let comps = ok(d, &[&c[..], &["analyze-motion", "--checkpoint", "mt.ck", "--data", "data"]].concat());
    assert_eq!(comps.lines().count(), 3);
    assert!(d.join("mt.ck.basis.txt").is_file());

    ok(d, &[&c[..], &["augment", "--checkpoint", "mt.ck", "--input", "data", "--out", "aug"]].concat());
    let n: usize = fs::read_dir(d.join("aug")).unwrap().map(|e| fs::read_dir(e.unwrap().path()).unwrap().count()).sum();
    assert_eq!(n, 4 * 4 * 2);

    fs::write(d.join("zero.cfg"), format!("{TINY}aug_scale = 0\nvariants = 1\n")).unwrap();
    ok(d, &["--config", "zero.cfg", "augment", "--checkpoint", "mt.ck", "--input", "data", "--out", "zero"]);
    let model = Checkpoint::load(&d.join("mt.ck")).unwrap().to_model().unwrap();
    let ds = ingest(&d.join("data"), 32, 48).unwrap();
    for (x, name) in ds.images.iter().zip(&ds.names).take(3) {
        let expect = d.join("expect.png");
        save_image(&expect, &model.reconstruct(x).unwrap()).unwrap();
        assert_eq!(fs::read(d.join(format!("zero/{name}_aug00.png"))).unwrap(), fs::read(&expect).unwrap(), "{name}");
    }

    let eer = ok(d, &[&c[..], &["train-fvr", "--checkpoint", "mt.ck", "--data", "data", "--out", "fvr.ck"]].concat());
    assert!(eer.starts_with("EER "), "{eer}");
    let again = ok(d, &[&c[..], &["eval-eer", "--scores", "fvr.ck.scores.txt"]].concat());
    assert_eq!(eer, again);
    let from_model = ok(d, &[&c[..], &["eval-eer", "--checkpoint", "fvr.ck", "--data", "data"]].concat());
    assert!(from_model.starts_with("EER "));

    ok(d, &[&c[..], &["render-grid", "--checkpoint", "mt.ck", "--data", "data", "--out", "grid.png"]].concat());
    let img = image::open(d.join("grid.png")).unwrap();
    assert_eq!((img.width(), img.height()), (2 * 3 * 50, 2 * 34));
}

#[test]
fn separable_scores_give_zero_eer() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("s.txt"), "genuine 0.9\ngenuine 0.8\nimpostor 0.1\nimpostor 0.2\n").unwrap();
    assert_eq!(ok(tmp.path(), &["eval-eer", "--scores", "s.txt"]), "EER 0.0000\n");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.cfg"), "no_such_key = 1\n").unwrap();
    assert_eq!(code(d, &["--config", "bad.cfg", "synth-gen", "--out", "x"]), 1);
    assert_eq!(code(d, &["--bogus-flag", "synth-gen"]), 1);
    assert_eq!(code(d, &["train-mt", "--out", "m.ck"]), 1);
    assert_eq!(code(d, &["eval-eer", "--scores", "missing.txt"]), 2);
    fs::write(d.join("garbage.ck"), b"MTCK\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(code(d, &["render-grid", "--checkpoint", "garbage.ck", "--data", ".", "--out", "g.png"]), 2);
    fs::write(d.join("exists.ck"), b"").unwrap();
    assert_eq!(code(d, &["train-mt", "--data", ".", "--out", "exists.ck"]), 1);
    assert_eq!(code(d, &["--help"]), 0);
}

#[test]
fn synth_gen_respects_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.cfg"), "height = 32\nwidth = 48\nclasses = 2\nsamples = 2\n").unwrap();
    ok(d, &["--config", "run.cfg", "synth-gen", "--out", "data"]);
    let first = fs::read(d.join("data/000/00.png")).unwrap();
    assert_eq!(code(d, &["--config", "run.cfg", "synth-gen", "--out", "data"]), 1);
    ok(d, &["--config", "run.cfg", "--overwrite", "synth-gen", "--out", "data"]);
    assert_eq!(fs::read(d.join("data/000/00.png")).unwrap(), first);
    ok(d, &["--config", "run.cfg", "--seed", "5", "--overwrite", "synth-gen", "--out", "data"]);
    assert_ne!(fs::read(d.join("data/000/00.png")).unwrap(), first);
}

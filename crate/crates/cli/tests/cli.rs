use std::path::Path;
use std::process::{Command, Output};

fn sgseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgseg"))
        .args(args)
        .output()
        .expect("run sgseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&sgseg(&["--help"])), 0);
    assert_eq!(code(&sgseg(&["eval", "--help"])), 0);
    let v = sgseg(&["--version"]);
    assert_eq!(code(&v), 0);
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn usage_errors_exit_one() {
    let o = sgseg(&["eval", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--bogus"));
    assert_eq!(code(&sgseg(&[])), 1);
    // report text is only accepted by infer
    assert_eq!(code(&sgseg(&["eval", "--report", "x", "--data", "d", "--seg-ckpt", "s", "--out", "o"])), 1);
    let o = sgseg(&["ablate", "--data", "d", "--seg-ckpt", "s", "--mode", "self-guided", "--out", "o"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--det-ckpt"), "{}", stderr(&o));
    let o = sgseg(&["infer", "--image", "i.png", "--seg-ckpt", "s", "--tau", "1.5", "--out", "o"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = sgseg(&["pseudo-label", "--data", p(dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.epoch = 3\n").unwrap();
    let o = sgseg(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.epoch"));
}

const TINY: &str = "\
data.num_samples = 24
data.image_size = 32
split.train = 0.5
split.val = 0.25
split.test = 0.25
train.epochs = 1
train.batch_size = 4
";

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let (data, ck) = (root.join("data"), root.join("ck"));
    let run = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend(["--config", p(&cfg)]);
        let o = sgseg(&full);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    run(&["gen-data", "--out", p(&data)]);
    run(&["pseudo-label", "--data", p(&data)]);
    assert!(data.join("train_labels.txt").exists());
    run(&["train-seg", "--data", p(&data), "--out", p(&ck)]);
    run(&["train-seg", "--data", p(&data), "--out", p(&ck), "--kind", "text-free"]);
    run(&["train-det", "--data", p(&data), "--out", p(&ck)]);
    let (guided, free, det) = (ck.join("seg_guided.ckpt"), ck.join("seg_text_free.ckpt"), ck.join("detector.ckpt"));

    let abl = root.join("abl");
    let out = run(&[
        "ablate", "--data", p(&data), "--seg-ckpt", p(&guided), "--free-ckpt", p(&free),
        "--det-ckpt", p(&det), "--out", p(&abl),
    ]);
    for mode in ["text-free", "self-guided", "full-text"] {
        assert!(out.contains(mode), "{out}");
    }
    let prov = std::fs::read_to_string(abl.join("provenance.txt")).unwrap();
    assert!(prov.contains("config_hash=") && prov.contains("seed=0"), "{prov}");

    let image = std::fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let inf = root.join("inf");
    run(&["infer", "--image", p(&image), "--seg-ckpt", p(&guided), "--det-ckpt", p(&det), "--out", p(&inf)]);
    assert!(inf.join("mask.png").exists());
    let report = std::fs::read_to_string(inf.join("report.txt")).unwrap();
    assert!(report.lines().nth(1).unwrap().contains("config_hash="), "{report}");
    let text = run(&[
        "infer", "--image", p(&image), "--seg-ckpt", p(&guided), "--report",
        "Left lung upper zone infection.", "--out", p(&inf),
    ]);
    assert!(text.contains("Left lung upper zone"), "{text}");
}

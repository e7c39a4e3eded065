use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[phantom]
shape = [32, 32, 32]

[data]
train_count = 2

[sampler]
subvolume_sizes = [16, 32]

[net1]
base_width = 2
blocks_per_path = 2

[net2]
base_width = 2
blocks_per_path = 2
k_slices = 3

[schedule]
steps = [
    { step = 1, epochs = 1, iterations_per_epoch = 2 },
    { step = 2, epochs = 1, iterations_per_epoch = 2 },
    { step = 3, epochs = 1, iterations_per_epoch = 2 },
    { step = 4, epochs = 1, iterations_per_epoch = 2 },
]
"#;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade-seg")).args(args).current_dir(dir).output().unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn one_line_failure(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(!out.status.success(), "{args:?} succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    assert!(err.starts_with("error: "));
    err
}

#[test]
fn smoke_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), CONFIG).unwrap();

    ok(&["phantom", "--config", "c.toml", "--seed", "3", "--out", "data"], d);
    assert!(d.join("data/manifest.txt").exists());
    ok(&["train", "--config", "c.toml", "--seed", "3", "--checkpoint", "a/m.ckpt"], d);
    ok(&["train", "--config", "c.toml", "--seed", "3", "--checkpoint", "b/m.ckpt"], d);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/m.ckpt"), read("b/m.ckpt"));
    assert_eq!(read("a/m.csv"), read("b/m.csv"));
    assert_eq!(String::from_utf8(read("a/m.csv")).unwrap().lines().count(), 9);

    let image = "data/phantom_000_image.nii.gz";
    let truth = "data/phantom_000_label.nii.gz";
    ok(&["predict", "--checkpoint", "a/m.ckpt", "--input", image, "--output", "p1.nii.gz"], d);
    ok(&["predict", "--checkpoint", "a/m.ckpt", "--input", image, "--output", "p2.nii.gz"], d);
    assert_eq!(read("p1.nii.gz"), read("p2.nii.gz"));

    ok(&["evaluate", "--pred", "p1.nii.gz", "--truth", truth, "--out", "m.csv"], d);
    let csv = String::from_utf8(read("m.csv")).unwrap();
    assert!(csv.starts_with("class,dice,jaccard,asd_mm"));

    let same = ok(&["evaluate", "--pred", truth, "--truth", truth], d);
    let rows: Vec<&str> = same.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[1].parse::<f64>().unwrap(), 1.0, "{row}");
        assert_eq!(f[2].parse::<f64>().unwrap(), 1.0, "{row}");
    }

    let table = ok(&["summary", "--checkpoint", "a/m.ckpt"], d);
    assert!(table.contains("Net1") && table.contains("Net2"));
}

#[test]
fn steps_resume_and_skip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), CONFIG).unwrap();
    ok(&["train", "--config", "c.toml", "--step", "1", "--checkpoint", "s1.ckpt"], d);
    ok(&["train", "--config", "c.toml", "--step", "2", "--resume", "s1.ckpt", "--checkpoint", "s2.ckpt"], d);
    let err = one_line_failure(&["train", "--config", "c.toml", "--step", "4", "--checkpoint", "x.ckpt"], d);
    assert!(err.contains("step"), "{err}");
    ok(&["train", "--config", "c.toml", "--step", "4", "--from-scratch", "--checkpoint", "x.ckpt"], d);
}

#[test]
fn failures_print_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    one_line_failure(&["train", "--colour", "red"], d);
    one_line_failure(&["predict", "--checkpoint", "nope.ckpt", "--input", "x.nii", "--output", "y.nii"], d);
    std::fs::write(d.join("bad.toml"), "[phantom]\nshape = 3\n").unwrap();
    one_line_failure(&["phantom", "--config", "bad.toml", "--out", "o"], d);
    one_line_failure(&["train", "--config", "missing.toml"], d);
    one_line_failure(&["train", "--step", "7"], d);
}

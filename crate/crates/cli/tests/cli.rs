use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stereoforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, count: usize, seed: u64) -> PathBuf {
    let spec = dir.join("scene.cfg");
    fs::write(&spec, "dims = 32x16\nrange = -3..4\nlayers = noise/2:-1:full, stripes/3:3:random\n").unwrap();
    let out = dir.join(name);
    let o = run(&[
        "synth",
        "--spec",
        s(&spec),
        "--out",
        s(&out),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn train_cfg(dir: &Path) -> PathBuf {
    let p = dir.join("train.cfg");
    fs::write(
        &p,
        "input = 32x16\nstages = 1x4,1x4\nfc_hidden = 8\nfc_spatial = 8x4\nrange = -3..4\ninit_std = 0.1\n\
         batch_size = 2\niters = 4\ncheckpoint_every = 2\nbase_lr = 0.01\nmomentum = 0.9\n",
    )
    .unwrap();
    p
}

fn count_files(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext)).count()
}

#[test]
fn synth_writes_pairs_and_disparities() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), "data", 8, 1);
    assert_eq!(count_files(&out.join("left"), "png"), 8);
    assert_eq!(count_files(&out.join("right"), "png"), 8);
    assert_eq!(count_files(&out.join("disp"), "pfm"), 8);
}

#[test]
fn train_convert_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d, "data", 4, 1);
    let cfg = train_cfg(d);
    let ckpt = d.join("model.ckpt");
    let o = run(&["train", "--data", s(&data), "--val", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(d.join("model.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    // 40x20 input is resized to the network and back
    let img = d.join("in.png");
    stereoforge::Image::filled(40, 20, [0.3, 0.6, 0.1]).save(&img).unwrap();
    let out = d.join("conv");
    let o = run(&["convert", "--input", s(&img), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ana = stereoforge::Image::load(&out.join("in_anaglyph.png")).unwrap();
    assert_eq!(ana.dims(), (40, 20));

    let o = run(&[
        "convert",
        "--input",
        s(&img),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&out),
        "--format",
        "sbs",
        "--full-res",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // full-res output is k times the 32x16 network size, two views wide
    assert_eq!(stereoforge::Image::load(&out.join("in_sbs.png")).unwrap().dims(), (128, 32));

    let report = d.join("report.csv");
    let o = run(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--methods",
        "ground_truth,global_disparity,deep3d,deep3d+oracle",
        "--report",
        s(&report),
        "--oracle-search",
        "-1..1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 4);
    for line in csv.lines().filter(|l| l.starts_with("ground_truth,")) {
        assert_eq!(line.rsplit(',').next().unwrap().parse::<f32>().unwrap(), 0.0, "{line}");
    }
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d, "data", 4, 2);
    let cfg = train_cfg(d);
    for name in ["a", "b"] {
        let ck = d.join(format!("{name}.ckpt"));
        let o =
            run(&["train", "--data", s(&data), "--val", s(&data), "--config", s(&cfg), "--out", s(&ck), "--seed", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());

    // two iterations, then resume to four
    let half = d.join("h.ckpt");
    let o = run(&[
        "train",
        "--data",
        s(&data),
        "--val",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&half),
        "--seed",
        "5",
        "--iters",
        "2",
    ]);
    assert!(o.status.success());
    let o = run(&[
        "train",
        "--data",
        s(&data),
        "--val",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&half),
        "--seed",
        "5",
        "--resume",
        s(&half),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(&half).unwrap());
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("h.csv")).unwrap());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["synth", "--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        run(&["synth", "--spec", "/nonexistent/x.cfg", "--out", "/tmp/x", "--count", "2"]).status.code(),
        Some(1)
    );
    assert_eq!(run(&["eval", "--data", "/nonexistent", "--report", "/tmp/r.csv"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", 2, 1);
    let bogus = dir.path().join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = run(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&bogus),
        "--methods",
        "deep3d",
        "--report",
        s(&dir.path().join("r.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["eval", "--data", s(&data), "--methods", "nonsense", "--report", s(&dir.path().join("r.csv"))]);
    assert_eq!(o.status.code(), Some(1));
}

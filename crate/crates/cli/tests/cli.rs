use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn gwnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gwnet")).args(args).env("RUST_LOG", "warn").output().expect("spawn gwnet")
}

fn ok(args: &[&str]) -> String {
    let out = gwnet(args);
    assert!(out.status.success(), "gwnet {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// All files under `dir` with their bytes, sorted by relative path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A 32px toy pack and quickly trained perceptual networks.
struct Setup {
    dir: tempfile::TempDir,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let pack = dir.path().join("pack");
        ok(&["prepare", "--toy", "7", "5", "30", "--size", "32", "--out", s(&pack)]);
        ok(&[
            "classifiers",
            "--pack",
            s(&pack),
            "--out",
            s(&dir.path().join("phi")),
            "--classifier-epochs",
            "1",
            "--classifier-widths",
            "2,2,2,2,2",
        ]);
        Setup { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (pack, phi, out) = (self.path("pack"), self.path("phi"), self.path(out));
        let mut args = vec!["train", "--pack", s(&pack), "--phi", s(&phi), "--out", s(&out)];
        args.extend_from_slice(extra);
        gwnet(&args)
    }
}

#[test]
fn toy_prepare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let stdout = ok(&["prepare", "--toy", "7", "5", "30", "--out", s(&a)]);
    assert!(stdout.contains("I=5 J=30"), "{stdout}");
    ok(&["prepare", "--toy", "7", "5", "30", "--out", s(&b)]);
    let ta = tree(&a);
    assert_eq!(ta.len(), 151, "150 glyphs and a manifest");
    assert_eq!(ta, tree(&b));
}

#[test]
fn imported_pack_round_trips_every_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["prepare", "--toy", "3", "4", "6", "--m", "2", "--size", "32", "--out", s(&a)]);
    ok(&["prepare", "--input", s(&a), "--manifest", s(&a.join("manifest.json")), "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn malformed_manifest_is_rejected_by_field() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.json");
    std::fs::write(&manifest, r#"{"version": 1, "I": 2, "J": 2, "prototype_styles": [3], "holdout_styles": []}"#).unwrap();
    let out = gwnet(&["prepare", "--input", s(dir.path()), "--manifest", s(&manifest), "--out", s(&dir.path().join("o"))]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("prototype_styles"), "{}", stderr(&out));
}

#[test]
fn training_requires_classifier_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let pack = dir.path().join("pack");
    ok(&["prepare", "--toy", "7", "5", "30", "--size", "32", "--out", s(&pack)]);
    let phi = dir.path().join("phi");
    let out = gwnet(&["train", "--pack", s(&pack), "--phi", s(&phi), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("gwnet classifiers"), "{}", stderr(&out));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn both_variants_train_ten_steps_within_a_minute() {
    let setup = Setup::new();
    for variant in ["adain", "bn"] {
        let start = Instant::now();
        let out = setup.train(variant, &["--variant", variant, "--steps", "10", "--width-factor", "8", "--seed", "3"]);
        let took = start.elapsed();
        assert!(out.status.success(), "{variant}: {}", stderr(&out));
        assert!(took < Duration::from_secs(60), "{variant} took {took:?}");
        let run = setup.path(variant);
        assert!(run.join("latest.gwn").is_file() && run.join("step_000010.gwn").is_file());
        let rows = std::fs::read_to_string(run.join("losses.csv")).unwrap().lines().count();
        assert_eq!(rows, 11);
    }
}

#[test]
fn config_file_supplies_flags_and_flags_win() {
    let setup = Setup::new();
    let cfg = setup.path("train.cfg");
    let text = format!(
        "pack = {}\nphi = {}\nout = {}\nsteps = 2\nwidth_factor = 16\nbatch = 2\nn_critic = 1\n",
        s(&setup.path("pack")),
        s(&setup.path("phi")),
        s(&setup.path("from_file"))
    );
    std::fs::write(&cfg, text).unwrap();
    ok(&["train", "--config", s(&cfg), "--steps", "1"]);
    let log = std::fs::read_to_string(setup.path("from_file/losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "--steps overrides the file");
    // resuming extends the same run
    ok(&["train", "--config", s(&cfg), "--resume"]);
    let log = std::fs::read_to_string(setup.path("from_file/losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn synthesis_is_deterministic_and_set_invariant() {
    let setup = Setup::new();
    let train = setup.train("run", &["--steps", "1", "--width-factor", "16", "--batch", "2", "--n-critic", "1"]);
    assert!(train.status.success(), "{}", stderr(&train));
    let ckpt = setup.path("run/latest.gwn");
    let pack = setup.path("pack");
    let refs: Vec<PathBuf> = [1, 2, 3].iter().map(|j| pack.join(format!("5/{j}.png"))).collect();
    let sheet = |name: &str, refs: &[&PathBuf], contents: &str| {
        let out = setup.path(name);
        let mut args = vec!["synth", "--ckpt", s(&ckpt), "--pack", s(&pack), "--contents", contents, "--out", s(&out)];
        args.push("--refs");
        args.extend(refs.iter().map(|r| s(r)));
        ok(&args);
        std::fs::read(out).unwrap()
    };
    let one = sheet("one.png", &[&refs[0]], "1-10");
    let img = image::load_from_memory(&one).unwrap();
    assert_eq!((img.width(), img.height()), (32, 320), "one column, a row per content");
    assert_eq!(sheet("again.png", &[&refs[0]], "1-10"), one);
    let forward = sheet("fwd.png", &[&refs[0], &refs[1], &refs[2]], "1,4,7");
    let shuffled = sheet("shuf.png", &[&refs[2], &refs[0], &refs[1], &refs[0]], "1,4,7");
    assert_eq!(forward, shuffled);
    assert_ne!(forward, sheet("other.png", &[&refs[0]], "1,4,7"));

    let missing = setup.path("nope.png");
    let out = gwnet(&["synth", "--ckpt", s(&ckpt), "--pack", s(&pack), "--refs", s(&missing), "--out", s(&setup.path("x.png"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("nope.png"), "{}", stderr(&out));
    let garbage = setup.path("garbage.png");
    std::fs::write(&garbage, b"not a png").unwrap();
    let out = gwnet(&["synth", "--ckpt", s(&ckpt), "--pack", s(&pack), "--refs", s(&garbage), "--out", s(&setup.path("x.png"))]);
    assert_ne!(code(&out), 0);

    let report = ok(&["eval", "--ckpt", s(&ckpt), "--pack", s(&pack), "--phi", s(&setup.path("phi"))]);
    for key in ["seen_pixel_l1", "seen_content_acc", "holdout_content_acc", "holdout_style_acc"] {
        assert!(report.contains(key), "{report}");
    }
    assert!(report.contains("holdout_count = 30"), "{report}");
}

#[test]
fn gradcheck_passes_and_names_a_broken_backward() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("cases passed"), "{out}");
    let broken = gwnet(&["gradcheck", "--include-broken"]);
    assert_eq!(code(&broken), 4);
    assert!(String::from_utf8_lossy(&broken.stdout).contains("broken backward fixture"));
    assert!(stderr(&broken).contains("broken backward fixture"), "{}", stderr(&broken));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&gwnet(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&gwnet(&["prepare"])), 2, "missing --out");
    assert_eq!(code(&gwnet(&["synth", "--ckpt", "missing.gwn", "--pack", "b", "--refs", "c", "--out", "d"])), 3, "data error");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "this line has no equals sign\n").unwrap();
    assert_eq!(code(&gwnet(&["prepare", "--config", s(&bad)])), 2);
}

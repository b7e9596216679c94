use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn renet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_renet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = renet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn config(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        "# tiny run\nmodel = hrenet\nnorm = batch\ntrain_n = 4\ntest_n = 2\niters = 2\nbatch = 2\nlr = 0.01\n",
    )
    .unwrap();
    path
}

fn first_with_extension(dir: &Path, ext: &str) -> PathBuf {
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == ext) {
                return p;
            }
        }
    }
    panic!("no .{ext} under {}", dir.display());
}

#[test]
fn train_eval_predict_refine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    assert!(ok(&["gendata", "-c", cfg, "--out", &s(&data)]).contains("wrote 6 samples"));
    let trained = ok(&["train", "-c", cfg, "--data", &s(&data), "--out", &s(&ckpt)]);
    assert!(trained.contains("trained 2 iterations"), "{trained}");
    let loss = fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3, "{loss}");

    let report = ok(&["eval", "--checkpoint", &s(&ckpt), "--data", &s(&data)]);
    assert!(report.contains("pixel_accuracy"), "{report}");

    let image = first_with_extension(&data, "ppm");
    let labels = tmp.path().join("pred.pgm");
    let probs = tmp.path().join("pred.probs");
    ok(&[
        "predict",
        "--checkpoint",
        &s(&ckpt),
        "--image",
        &s(&image),
        "--out",
        &s(&labels),
        "--probs",
        &s(&probs),
    ]);
    assert!(fs::read(&labels).unwrap().starts_with(b"P5"));

    let refined = tmp.path().join("crf.pgm");
    ok(&[
        "crf",
        "--set",
        "crf.iterations=2",
        "--probs",
        &s(&probs),
        "--image",
        &s(&image),
        "--out-probs",
        &s(&tmp.path().join("crf.probs")),
        "--out-labels",
        &s(&refined),
    ]);
    assert_eq!(fs::read(&refined).unwrap().len(), fs::read(&labels).unwrap().len());

    let maps = tmp.path().join("maps");
    let dumped = ok(&[
        "dumpfeat",
        "--checkpoint",
        &s(&ckpt),
        "--image",
        &s(&image),
        "--layer",
        "conv1_1",
        "--out",
        &s(&maps),
    ]);
    assert!(dumped.starts_with("wrote "), "{dumped}");
    assert!(fs::read_dir(&maps).unwrap().count() > 0);
}

#[test]
fn config_errors_exit_with_two() {
    let out = renet(&["gendata", "--set", "train_n=lots", "--out", "/nonexistent/x"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = renet(&["gendata", "--set", "no_equals_sign", "--out", "/nonexistent/x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_fails_with_numeric_code() {
    let args = ["gradcheck", "--set", "model=hrenet", "--set", "norm=batch", "--max-elements", "2"];
    let text = ok(&args);
    assert!(text.contains("max relative error"), "{text}");
    let mut strict = args.to_vec();
    strict.extend(["--tolerance", "0"]);
    assert_eq!(renet(&strict).status.code(), Some(3));
}

#[test]
fn bench_reports_identical_sweeps() {
    let csv = ok(&["bench", "--sizes", "8x8", "--widths", "4", "--threads", "1,2"]);
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[1..].iter().all(|l| l.contains("true")), "{csv}");
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use vegchange::raster::{load_mask, save_mask, BinaryMask};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vegchange"))
        .args(args)
        .env("VCA_THREADS", "1")
        .output()
        .expect("failed to spawn vegchange")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "vegchange {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn train_small(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["train", "--synthetic", "3,4", "--iters", "4", "--seed", "11", "--out", p(&out)]);
    out
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = train_small(tmp.path(), "a");
    let b = train_small(tmp.path(), "b");

    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), vegchange::train::METRICS_HEADER);
    assert_eq!(lines.count(), 4);
    assert_eq!(json(a.join("config.json"))["iterations"], 4);

    let ma = fs::read(a.join("model.vcam")).unwrap();
    let mb = fs::read(b.join("model.vcam")).unwrap();
    assert_eq!(ma, mb, "same seed must give a bit-identical checkpoint");
}

#[test]
fn predict_masks_match_input_and_nest_by_threshold() {
    let tmp = TempDir::new().unwrap();
    let run_dir = train_small(tmp.path(), "run");
    let model = run_dir.join("model.vcam");
    let scene = tmp.path().join("s");
    ok(&["synth", "--seed", "5", "--size", "144", "--out", p(&scene)]);
    let image = tmp.path().join("s_image.ppm");

    let lo = tmp.path().join("lo");
    let hi = tmp.path().join("hi");
    ok(&["predict", "--model", p(&model), p(&image), "--out", p(&lo), "--tau", "0.1"]);
    ok(&["predict", "--model", p(&model), p(&image), "--out", p(&hi), "--tau", "0.9"]);

    let m_lo = load_mask(tmp.path().join("lo.mask.pgm")).unwrap();
    let m_hi = load_mask(tmp.path().join("hi.mask.pgm")).unwrap();
    assert_eq!((m_lo.width(), m_lo.height()), (144, 144));
    for y in 0..144 {
        for x in 0..144 {
            assert!(!m_hi.get(x, y) || m_lo.get(x, y), "tau 0.9 pixel ({x},{y}) missing at tau 0.1");
        }
    }
    let side = json(tmp.path().join("lo.json"));
    assert_eq!(side["predictor"], "sliding");
    assert_eq!(side["windows_evaluated"], 1);
    assert!(tmp.path().join("lo.prob.vcat").exists());
}

#[test]
fn region_gating_skips_empty_windows() {
    let tmp = TempDir::new().unwrap();
    let model = train_small(tmp.path(), "run").join("model.vcam");
    let scene = tmp.path().join("big");
    ok(&["synth", "--seed", "2", "--size", "256", "--blobs", "12", "--out", p(&scene)]);
    let out = tmp.path().join("gated");
    ok(&[
        "predict",
        "--model",
        p(&model),
        p(&tmp.path().join("big_image.ppm")),
        "--out",
        p(&out),
        "--window",
        "64",
        "--regions",
    ]);
    let side = json(tmp.path().join("gated.json"));
    let skipped = side["windows_skipped"].as_u64().unwrap();
    let evaluated = side["windows_evaluated"].as_u64().unwrap();
    assert!(skipped > 0, "no windows skipped: {side}");
    assert_eq!(skipped + evaluated, 49);
}

#[test]
fn window_too_large_is_a_size_error() {
    let tmp = TempDir::new().unwrap();
    let model = train_small(tmp.path(), "run").join("model.vcam");
    let scene = tmp.path().join("s");
    ok(&["synth", "--size", "96", "--out", p(&scene)]);
    let out = run(&["predict", "--model", p(&model), p(&tmp.path().join("s_image.ppm")), "--out", p(&scene)]);
    assert_eq!(out.status.code(), Some(5));
}

fn tiles_mask(cols: usize, rows: usize, empty: usize) -> BinaryMask {
    BinaryMask::from_fn(cols * 16, rows * 16, |x, y| (y / 16) * cols + x / 16 >= empty)
}

#[test]
fn assess_reports_change_and_rejects_misregistration() {
    let tmp = TempDir::new().unwrap();
    let before = tmp.path().join("before.pgm");
    let after = tmp.path().join("after.pgm");
    let small = tmp.path().join("small.pgm");
    save_mask(&tiles_mask(14, 9, 0), &before).unwrap();
    save_mask(&tiles_mask(14, 9, 16), &after).unwrap();
    save_mask(&tiles_mask(7, 9, 0), &small).unwrap();

    let same = tmp.path().join("same");
    ok(&["assess", p(&before), p(&before), "--out", p(&same)]);
    let r = json(tmp.path().join("same.json"));
    assert_eq!(r["mu"], 0.0);
    assert_eq!(r["verdict"], "unchanged");

    let fig = tmp.path().join("fig");
    ok(&["assess", p(&before), p(&after), "--out", p(&fig), "--pixel-size", "0.5"]);
    let r = json(tmp.path().join("fig.json"));
    assert_eq!(r["t_q_tiles"], 126);
    assert_eq!(r["t_h_tiles"], 110);
    assert_eq!(r["verdict"], "degradation");
    assert!((r["mu"].as_f64().unwrap() * 100.0 + 12.698).abs() < 0.01);
    assert_eq!(r["l1"], 16.0);
    assert!(tmp.path().join("fig.overlay.ppm").exists());

    let out = run(&["assess", p(&before), p(&small), "--out", p(&fig)]);
    assert_eq!(out.status.code(), Some(6));
}

#[test]
fn watershed_writes_basins_and_proposals() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("w");
    ok(&["synth", "--seed", "4", "--size", "96", "--out", p(&scene)]);
    let out = tmp.path().join("ws");
    let stdout = ok(&["watershed", p(&tmp.path().join("w_image.ppm")), "--out", p(&out)]);
    assert!(stdout.contains("basins"));
    assert!(tmp.path().join("ws.basins.pgm").exists());
    assert!(json(tmp.path().join("ws.proposals.json")).as_array().is_some_and(|a| !a.is_empty()));
}

#[test]
fn augment_and_synth_outputs() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("a");
    ok(&["synth", "--seed", "8", "--size", "96", "--remove", "2", "--out", p(&scene)]);
    for f in ["a_image.ppm", "a_mask.pgm", "a_after_image.ppm", "a_after_mask.pgm"] {
        assert!(tmp.path().join(f).exists(), "{f} missing");
    }
    let dir = tmp.path().join("aug");
    ok(&[
        "augment",
        p(&tmp.path().join("a_image.ppm")),
        p(&tmp.path().join("a_mask.pgm")),
        "--count",
        "3",
        "--out",
        p(&dir),
    ]);
    assert!(fs::read_dir(&dir).unwrap().count() >= 3);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hyperseg::decoder::argmax_classes;
use hyperseg::io::{decode_ppm, decode_tensor, encode_pgm, encode_ppm, encode_tensor, DynTensor};
use hyperseg::{Model, ModelConfig, Shape, Tensor};
use serde_json::Value;
use tempfile::TempDir;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    root().join("configs").join(format!("{name}.json"))
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn hyperseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperseg"))
        .args(args)
        .env_remove("HYPERSEG_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hyperseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn zero_ppm(dir: &Path, h: usize, w: usize) -> PathBuf {
    let p = dir.join(format!("zero_{h}x{w}.ppm"));
    fs::write(&p, encode_ppm(w, h, &vec![0; 3 * h * w])).unwrap();
    p
}

/// Smooth colour ramps with a bright square, as a PPM.
fn pattern_ppm(dir: &Path) -> PathBuf {
    let (h, w) = (64, 64);
    let mut rgb = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            let inside = (20..44).contains(&i) && (12..36).contains(&j);
            rgb.extend([(4 * i) as u8, (4 * j) as u8, if inside { 255 } else { 0 }]);
        }
    }
    let p = dir.join("pattern.ppm");
    fs::write(&p, encode_ppm(w, h, &rgb)).unwrap();
    p
}

fn tiny_weights(dir: &Path, precision: &str) -> PathBuf {
    let p = dir.join(format!("tiny_{precision}.hsegw"));
    ok(&[
        "build",
        "--config",
        s(&config("tiny")),
        "--out",
        s(&p),
        "--precision",
        precision,
    ]);
    p
}

/// Regenerates the committed goldens from the straight-line oracle.
/// Run with `cargo test -p hyperseg-cli -- --ignored bless`.
#[test]
#[ignore]
fn bless_goldens() {
    let c = ModelConfig::from_json(&fs::read_to_string(config("tiny")).unwrap()).unwrap();
    let model = Model::<f64>::build(&c).unwrap();
    let dir = TempDir::new().unwrap();
    let zero = Tensor::<f64>::zeros(Shape::new(1, 3, c.input[0], c.input[1]));
    let pattern = decode_ppm::<f64>(&fs::read(pattern_ppm(dir.path())).unwrap()).unwrap();
    for (name, image) in [("zero", zero), ("pattern", pattern)] {
        let logits = hyperseg_verify::straight::forward(&model, &image);
        let labels: Vec<u8> = argmax_classes(&logits)
            .into_iter()
            .map(|v| v as u8)
            .collect();
        let s = logits.shape();
        fs::write(
            golden(&format!("tiny_{name}.pgm")),
            encode_pgm(s.w, s.h, &labels),
        )
        .unwrap();
        fs::write(
            golden(&format!("tiny_{name}_logits.hsegt")),
            encode_tensor(&logits),
        )
        .unwrap();
    }
}

fn golden_logits(name: &str) -> Tensor<f64> {
    match decode_tensor(&fs::read(golden(&format!("tiny_{name}_logits.hsegt"))).unwrap()).unwrap() {
        DynTensor::F64(t) => t,
        DynTensor::F32(_) => panic!("golden logits are stored in f64"),
    }
}

fn read_logits(p: &Path) -> Tensor<f64> {
    match decode_tensor(&fs::read(p).unwrap()).unwrap() {
        DynTensor::F64(t) => t,
        DynTensor::F32(t) => t.cast(),
    }
}

#[test]
fn build_is_deterministic_and_reloads() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.hsegw"), dir.path().join("b.hsegw"));
    let out = ok(&[
        "build",
        "--config",
        s(&config("tiny")),
        "--out",
        s(&a),
        "--seed",
        "11",
    ]);
    assert!(out.contains("126 tensors"), "{out}");
    ok(&[
        "build",
        "--config",
        s(&config("tiny")),
        "--out",
        s(&b),
        "--seed",
        "11",
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.hsegw");
    ok(&[
        "build",
        "--config",
        s(&config("tiny")),
        "--out",
        s(&c),
        "--seed",
        "12",
    ]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let info = ok(&[
        "inspect",
        "--config",
        s(&config("tiny")),
        "--weights",
        s(&a),
    ]);
    assert!(info.contains("weights match config tiny"), "{info}");
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"name\": \"x\", \"classes\": ").unwrap();
    let out_path = dir.path().join("w.hsegw");
    let out = hyperseg(&["build", "--config", s(&bad), "--out", s(&out_path)]);
    assert_eq!(code(&out), 2);
    assert!(!out_path.exists());
    assert_eq!(
        fs::read_dir(dir.path()).unwrap().count(),
        1,
        "no temporary files left behind"
    );

    let text = fs::read_to_string(config("tiny"))
        .unwrap()
        .replace("\"grid\": [4, 4]", "\"grid\": [3, 4]");
    fs::write(&bad, text).unwrap();
    let out = hyperseg(&["build", "--config", s(&bad), "--out", s(&out_path)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
    assert!(!out_path.exists());
}

#[test]
fn missing_flags_and_files() {
    assert_eq!(
        code(&hyperseg(&["build", "--config", s(&config("tiny"))])),
        2
    );
    assert_eq!(code(&hyperseg(&["verify", "nonsense"])), 2);
    let dir = TempDir::new().unwrap();
    let out = hyperseg(&[
        "build",
        "--config",
        s(&dir.path().join("absent.json")),
        "--out",
        "x",
    ]);
    assert_eq!(code(&out), 3);
    let out = hyperseg(&[
        "run",
        "--config",
        s(&config("tiny")),
        "--weights",
        s(&dir.path().join("absent.hsegw")),
        "--in",
        "x",
        "--out",
        s(&dir.path().join("o.pgm")),
    ]);
    assert_eq!(code(&out), 3);
}

fn check_golden(name: &str, ppm: &Path, dir: &Path) {
    let want_pgm = fs::read(golden(&format!("tiny_{name}.pgm"))).unwrap();
    let want = golden_logits(name);
    for precision in ["f64", "f32"] {
        let w = tiny_weights(dir, precision);
        let (pgm, logits) = (dir.join("o.pgm"), dir.join("o.hsegt"));
        ok(&[
            "run",
            "--config",
            s(&config("tiny")),
            "--weights",
            s(&w),
            "--in",
            s(ppm),
            "--out",
            s(&pgm),
            "--logits",
            s(&logits),
            "--precision",
            precision,
        ]);
        assert_eq!(
            fs::read(&pgm).unwrap(),
            want_pgm,
            "{name} {precision} label map"
        );
        let got = read_logits(&logits);
        if precision == "f64" {
            assert!(
                got.bit_eq(&want),
                "{name}: f64 logits differ from the oracle"
            );
        } else {
            let d = got.max_abs_diff(&want);
            assert!(d <= 1e-5, "{name}: f32 logits off by {d}");
        }
    }
}

#[test]
fn zero_image_matches_golden() {
    let dir = TempDir::new().unwrap();
    let ppm = zero_ppm(dir.path(), 64, 64);
    check_golden("zero", &ppm, dir.path());
}

#[test]
fn pattern_image_matches_golden() {
    let dir = TempDir::new().unwrap();
    let ppm = pattern_ppm(dir.path());
    check_golden("pattern", &ppm, dir.path());
    // freshly initialised weights keep the label map constant, so check that
    // the image content reaches the logits instead
    let logits = golden_logits("pattern");
    let plane = logits.plane(0, 0);
    let spread = plane.iter().copied().fold(f64::MIN, f64::max)
        - plane.iter().copied().fold(f64::MAX, f64::min);
    assert!(spread > 1e-5, "logits vary across the image");
    assert!(logits.max_abs_diff(&golden_logits("zero")) > 1e-5);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = TempDir::new().unwrap();
    let w = tiny_weights(dir.path(), "f32");
    let img = dir.path().join("img.ppm");
    let rgb: Vec<u8> = (0..3 * 64 * 64).map(|k| (k * 37 % 251) as u8).collect();
    fs::write(&img, encode_ppm(64, 64, &rgb)).unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "8"] {
        let (pgm, logits) = (
            dir.path().join(format!("{workers}.pgm")),
            dir.path().join(format!("{workers}.hsegt")),
        );
        ok(&[
            "run",
            "--config",
            s(&config("tiny")),
            "--weights",
            s(&w),
            "--in",
            s(&img),
            "--out",
            s(&pgm),
            "--logits",
            s(&logits),
            "--workers",
            workers,
        ]);
        outputs.push((fs::read(&pgm).unwrap(), fs::read(&logits).unwrap()));
    }
    // the environment variable is the default for --workers
    let pgm = dir.path().join("env.pgm");
    let out = Command::new(env!("CARGO_BIN_EXE_hyperseg"))
        .args([
            "run",
            "--config",
            s(&config("tiny")),
            "--weights",
            s(&w),
            "--in",
            s(&img),
            "--out",
            s(&pgm),
        ])
        .env("HYPERSEG_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(fs::read(&pgm).unwrap(), outputs[0].0);
}

#[test]
fn wrong_image_dims_exit_2() {
    let dir = TempDir::new().unwrap();
    let w = tiny_weights(dir.path(), "f32");
    let ppm = zero_ppm(dir.path(), 32, 64);
    let pgm = dir.path().join("o.pgm");
    let out = hyperseg(&[
        "run",
        "--config",
        s(&config("tiny")),
        "--weights",
        s(&w),
        "--in",
        s(&ppm),
        "--out",
        s(&pgm),
    ]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("(1, 3, 64, 64)") && err.contains("(1, 3, 32, 64)"),
        "{err}"
    );
    assert!(!pgm.exists());
}

#[test]
fn fuse_once_only() {
    let dir = TempDir::new().unwrap();
    let w = tiny_weights(dir.path(), "f32");
    let fused = dir.path().join("fused.hsegw");
    let msg = ok(&[
        "fuse",
        "--config",
        s(&config("tiny")),
        "--weights",
        s(&w),
        "--out",
        s(&fused),
    ]);
    assert!(msg.contains("126 -> 34 tensors"), "{msg}");
    let before = fs::read(&fused).unwrap();
    let again = dir.path().join("again.hsegw");
    let out = hyperseg(&[
        "fuse",
        "--config",
        s(&config("tiny")),
        "--weights",
        s(&fused),
        "--out",
        s(&again),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!again.exists());
    let out = hyperseg(&[
        "fuse",
        "--config",
        s(&config("tiny")),
        "--weights",
        s(&fused),
        "--out",
        s(&fused),
    ]);
    assert_eq!(code(&out), 2);
    assert_eq!(fs::read(&fused).unwrap(), before, "input left untouched");
}

#[test]
fn fused_weights_give_the_same_labels() {
    let dir = TempDir::new().unwrap();
    let ppm = zero_ppm(dir.path(), 64, 64);
    for precision in ["f32", "f64"] {
        let w = tiny_weights(dir.path(), precision);
        let fused = dir.path().join(format!("fused_{precision}.hsegw"));
        ok(&[
            "fuse",
            "--config",
            s(&config("tiny")),
            "--weights",
            s(&w),
            "--out",
            s(&fused),
        ]);
        let mut maps = Vec::new();
        for weights in [&w, &fused] {
            let pgm = dir.path().join("o.pgm");
            ok(&[
                "run",
                "--config",
                s(&config("tiny")),
                "--weights",
                s(weights),
                "--in",
                s(&ppm),
                "--out",
                s(&pgm),
                "--precision",
                precision,
            ]);
            maps.push(fs::read(&pgm).unwrap());
        }
        assert_eq!(maps[0], maps[1], "{precision}");
        assert_eq!(maps[0], fs::read(golden("tiny_zero.pgm")).unwrap());
    }
}

fn totals(v: &Value) -> [u64; 4] {
    let t = &v["totals"];
    ["params", "flops", "mapper_params", "mapper_flops"].map(|k| t[k].as_u64().unwrap())
}

#[test]
fn sweep_halves_mapper_cost() {
    let out = ok(&[
        "flops",
        "--config",
        s(&config("hyperseg-m-cityscapes")),
        "--sweep-groups",
        "--json",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for w in reports.windows(2) {
        let (a, b) = (totals(&w[0]["report"]), totals(&w[1]["report"]));
        assert_eq!(a[2], 2 * b[2]);
        assert_eq!(a[3], 2 * b[3]);
    }
    let text = ok(&[
        "flops",
        "--config",
        s(&config("hyperseg-m-cityscapes")),
        "--sweep-groups",
    ]);
    assert_eq!(
        text.matches("mapper params ratio 2.000, mapper flops ratio 2.000")
            .count(),
        2,
        "{text}"
    );
}

/// Hand-enumerated cost of the tiny config: one MAC is one flop, BN is
/// `2C` parameters and `C·H·W` flops, bilinear is 8 flops per output value,
/// dynamic convolutions hold no parameters of their own, and a mapper over
/// `C_φ` signal channels in `g` groups costs `|θ|·C_φ/g` per grid cell.
fn tiny_by_hand() -> Vec<(&'static str, u64, u64)> {
    let conv = |cin: u64, cout: u64, k: u64, hw: u64| (cin * cout * k * k, cin * cout * k * k * hw);
    let bn = |c: u64, hw: u64| (2 * c, c * hw);
    let dpw = |per_pixel: u64, hw: u64| (0, per_pixel * hw);
    let mapper = |theta: u64, phi: u64, g: u64| (theta * phi / g, theta * phi / g * 16);
    let rows = [
        ("backbone.stage1.conv", conv(3, 8, 3, 32 * 32)),
        ("backbone.stage1.bn", bn(8, 32 * 32)),
        ("backbone.stage2.conv", conv(8, 16, 3, 16 * 16)),
        ("backbone.stage2.bn", bn(16, 16 * 16)),
        ("backbone.stage3.conv", conv(16, 32, 3, 8 * 8)),
        ("backbone.stage3.bn", bn(32, 8 * 8)),
        ("backbone.signal.conv", conv(32, 32, 1, 8 * 8)),
        ("backbone.signal.bn", bn(32, 8 * 8)),
        ("reduce1.conv", conv(8, 4, 1, 32 * 32)),
        ("reduce1.bn", bn(4, 32 * 32)),
        ("reduce2.conv", conv(16, 8, 1, 16 * 16)),
        ("reduce2.bn", bn(8, 16 * 16)),
        ("reduce3.conv", conv(32, 16, 1, 8 * 8)),
        ("reduce3.bn", bn(16, 8 * 8)),
        ("context.down0.conv", conv(32, 16, 2, 4 * 4)),
        ("context.down0.bn", bn(16, 4 * 4)),
        ("context.down1.conv", conv(16, 8, 2, 2 * 2)),
        ("context.down1.bn", bn(8, 2 * 2)),
        ("context.down2.conv", conv(8, 4, 2, 1)),
        ("context.down2.bn", bn(4, 1)),
        ("context.pool", (0, 4)),
        ("context.fuse2.conv", conv(12, 8, 1, 2 * 2)),
        ("context.fuse2.bn", bn(8, 2 * 2)),
        ("context.fuse1.conv", conv(24, 16, 1, 4 * 4)),
        ("context.fuse1.bn", bn(16, 4 * 4)),
        ("context.fuse0.conv", conv(48, 32, 1, 8 * 8)),
        ("context.fuse0.bn", bn(32, 8 * 8)),
        ("signal.pool", (0, 32 * 8 * 8)),
        // |θ|: 13->16->4 is 224 + 160 + 68, 18->24->8 is 456 + 240 + 200
        ("block0.mapper", mapper(224 + 160 + 68, 8, 2)),
        ("block1.mapper", mapper(456 + 240 + 200, 16, 2)),
        ("block2.mapper", mapper(26 * 12 + 12, 4, 2)),
        ("block3.mapper", mapper(18 * 16 + 16, 4, 4)),
        ("block3.pw1", dpw(18 * 16 + 16, 8 * 8)),
        ("block3.pw1.bn", bn(16, 8 * 8)),
        ("block2.upsample", (0, 8 * 16 * 16 * 16)),
        ("block2.pw1", dpw(26 * 12 + 12, 16 * 16)),
        ("block2.pw1.bn", bn(12, 16 * 16)),
        ("block1.upsample", (0, 8 * 12 * 32 * 32)),
        ("block1.pw1", dpw(18 * 24 + 24, 32 * 32)),
        ("block1.pw1.bn", bn(24, 32 * 32)),
        ("block1.dw", dpw(24 * 9 + 24, 32 * 32)),
        ("block1.dw.bn", bn(24, 32 * 32)),
        ("block1.pw2", dpw(24 * 8 + 8, 32 * 32)),
        ("block1.pw2.bn", bn(8, 32 * 32)),
        ("block0.upsample", (0, 8 * 8 * 64 * 64)),
        ("block0.pw1", dpw(13 * 16 + 16, 64 * 64)),
        ("block0.pw1.bn", bn(16, 64 * 64)),
        ("block0.dw", dpw(16 * 9 + 16, 64 * 64)),
        ("block0.dw.bn", bn(16, 64 * 64)),
        ("block0.pw2", dpw(16 * 4 + 4, 64 * 64)),
        ("block0.pw2.bn", bn(4, 64 * 64)),
    ];
    rows.into_iter().map(|(n, (p, f))| (n, p, f)).collect()
}

#[test]
fn tiny_flops_match_hand_summation() {
    let golden: Value =
        serde_json::from_str(&fs::read_to_string(golden("tiny_flops_totals.json")).unwrap())
            .unwrap();
    let hand = tiny_by_hand();
    let sum = |f: &dyn Fn(&(&str, u64, u64)) -> u64, mappers: bool| -> u64 {
        hand.iter()
            .filter(|r| !mappers || r.0.ends_with("mapper"))
            .map(f)
            .sum()
    };
    let by_hand = [
        sum(&|r| r.1, false),
        sum(&|r| r.2, false),
        sum(&|r| r.1, true),
        sum(&|r| r.2, true),
    ];
    assert_eq!(totals(&golden), by_hand);

    let v: Value =
        serde_json::from_str(&ok(&["flops", "--config", s(&config("tiny")), "--json"])).unwrap();
    assert_eq!(totals(&v), by_hand);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), hand.len());
    for (row, (name, p, f)) in rows.iter().zip(&hand) {
        assert_eq!(row["name"], *name);
        assert_eq!(
            (
                row["params"].as_u64().unwrap(),
                row["flops"].as_u64().unwrap()
            ),
            (*p, *f),
            "{name}"
        );
    }
}

/// Checks the documented report layout: every key present with the right type
/// and nothing else.
#[test]
fn flops_json_follows_schema() {
    for name in ["tiny", "hyperseg-l-pascal"] {
        for extra in [None, Some("--fused")] {
            let path = config(name);
            let mut args = vec!["flops", "--config", s(&path), "--json"];
            args.extend(extra);
            let v: Value = serde_json::from_str(&ok(&args)).unwrap();
            let obj = v.as_object().unwrap();
            let mut keys: Vec<_> = obj.keys().map(String::as_str).collect();
            keys.sort_unstable();
            assert_eq!(keys, ["fused", "model", "rows", "totals"]);
            assert_eq!(v["model"], name);
            assert_eq!(v["fused"], extra.is_some());
            let kinds = [
                "conv",
                "batchnorm",
                "dpwconv",
                "mapper",
                "bilinear",
                "avgpool",
            ];
            let mut sums = [0u64; 4];
            for row in v["rows"].as_array().unwrap() {
                let r = row.as_object().unwrap();
                assert_eq!(r.len(), 4);
                assert!(r["name"].is_string());
                let kind = r["kind"].as_str().unwrap();
                assert!(kinds.contains(&kind), "{kind}");
                let (p, f) = (r["params"].as_u64().unwrap(), r["flops"].as_u64().unwrap());
                sums[0] += p;
                sums[1] += f;
                if kind == "mapper" {
                    sums[2] += p;
                    sums[3] += f;
                }
                if extra.is_some() {
                    assert_ne!(kind, "batchnorm");
                }
            }
            assert_eq!(v["totals"].as_object().unwrap().len(), 4);
            assert_eq!(totals(&v), sums);
        }
    }
}

#[test]
fn bench_json_matches_text() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("bench.json");
    let text = ok(&[
        "bench",
        "--config",
        s(&config("tiny")),
        "--iters",
        "1",
        "--out",
        s(&report),
    ]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["iterations"], 1);
    let t = &v["totals"];
    let line = format!(
        "ops total ms: naive {:.3}  tiled {:.3}  speedup {:.2}x",
        t["ops_naive_mean_ms"].as_f64().unwrap(),
        t["ops_tiled_mean_ms"].as_f64().unwrap(),
        t["speedup"].as_f64().unwrap()
    );
    assert!(text.contains(&line), "{line}\n{text}");
    for op in v["ops"].as_array().unwrap() {
        assert_eq!(op["bit_identical"], true);
        for k in ["naive", "tiled"] {
            assert!(
                op[k].get("std_ms").is_none() && op[k].get("max_ms").is_none(),
                "single sample has no spread"
            );
        }
    }
    let json = ok(&[
        "bench",
        "--config",
        s(&config("tiny")),
        "--iters",
        "2",
        "--json",
    ]);
    let v: Value = serde_json::from_str(&json).unwrap();
    assert!(v["model_tiled"]["std_ms"].is_f64());
    assert_eq!(
        code(&hyperseg(&[
            "bench",
            "--config",
            s(&config("tiny")),
            "--iters",
            "0"
        ])),
        2
    );
}

#[test]
fn verify_reports_pass() {
    let out = ok(&["verify", "divide-channels"]);
    assert!(
        out.contains("[PASS] divide-channels") && out.contains("(64, 16, [3, 1])"),
        "{out}"
    );
    let out = ok(&["verify", "posenc"]);
    assert!(out.contains("[PASS]"));
}

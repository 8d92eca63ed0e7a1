use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use polarsdf::meshmetrics::{read_obj, read_ply};
use polarsdf::synthdata::{read_manifest, MANIFEST_NAME};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_polarsdf"));
    c.env("POLARSDF_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_TOML: &str = r#"
batch_pixels = 32
chunk_rays = 16
level_interval = 1
checkpoint_every = 0

[sampler]
n_coarse = 8
n_importance = 8
importance_rounds = 1

[schedule]
warmup = 1
ramp = 1
decay = 1

[field]
sdf_hidden = 16
color_hidden = 16

[field.grid]
levels = 4
finest_res = 32
table_size_log2 = 10
"#;

fn synth_dataset(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--scene", "sphere", "--views", "4", "--res", "24x24", "--seed", "7", "--out", out];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn tiny_train(data: &Path, out: &Path, variant: &str, iters: &str) -> Output {
    let cfg = out.with_extension("toml");
    fs::write(&cfg, TINY_TOML).unwrap();
    run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--variant",
        variant,
        "--iters",
        iters,
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ])
}

fn telemetry(out: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(out.join("telemetry.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<String> {
    let i = rows[0].iter().position(|h| h == name).unwrap();
    rows[1..].iter().map(|r| r[i].clone()).collect()
}

#[test]
fn synth_writes_frames_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let o = run(&["synth", "--scene", "sphere", "--views", "20", "--res", "64x64", "--seed", "7", "--out", d.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let frames = fs::read_dir(&d)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pframe"))
        .count();
    assert_eq!(frames, 20);
    assert_eq!(read_manifest(&d).unwrap().files.len(), 20);
}

#[test]
fn synth_rejects_unknown_scene() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--scene", "teapot", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    for name in ["sphere", "torus", "roundedbox", "twospheres"] {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth_dataset(&a, &["--material", "mixed"]);
    synth_dataset(&b, &["--material", "mixed"]);
    assert_eq!(fs::read(a.join(MANIFEST_NAME)).unwrap(), fs::read(b.join(MANIFEST_NAME)).unwrap());
}

#[test]
fn bad_resolution_and_thread_env_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--scene", "sphere", "--res", "64by64", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = bin()
        .env("POLARSDF_THREADS", "zero")
        .args(["synth", "--scene", "sphere", "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn train_variants_extract_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_dataset(&data, &[]);

    let c = dir.path().join("run_c");
    let o = tiny_train(&data, &c, "pisr-c", "4");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = telemetry(&c);
    assert_eq!(rows.len(), 5);
    assert!(column(&rows, "lambda_p").iter().all(|v| v.parse::<f32>().unwrap() == 0.0));
    assert!(column(&rows, "kernel").iter().all(|v| v == "none"));
    assert!(c.join("final.ckpt").exists());
    assert!(c.join("run_manifest.json").exists());

    let o_run = dir.path().join("run_o");
    let o = tiny_train(&data, &o_run, "pisr-o", "4");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = telemetry(&o_run);
    assert!(column(&rows, "kernel").iter().all(|v| v == "ortho"));
    assert!(column(&rows, "lambda_p").iter().any(|v| v.parse::<f32>().unwrap() > 0.0));

    let ckpt = o_run.join("final.ckpt");
    let obj = dir.path().join("m.obj");
    let ply = dir.path().join("m.ply");
    for out in [&obj, &ply] {
        let o = run(&["extract", "--ckpt", ckpt.to_str().unwrap(), "--res", "32", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = read_obj(&obj).unwrap();
    let (b, _) = read_ply(&ply).unwrap();
    assert!(!a.triangles.is_empty());
    assert_eq!(a.triangles, b.triangles);
    assert_eq!(a.vertices.len(), b.vertices.len());
    for (p, q) in a.vertices.iter().zip(&b.vertices) {
        for k in 0..3 {
            assert!((p[k] - q[k]).abs() < 1e-6);
        }
    }
    let o = run(&["extract", "--ckpt", ckpt.to_str().unwrap(), "--res", "4", "--out", obj.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let report = dir.path().join("self.txt");
    let o = run(&["eval", "--pred", obj.to_str().unwrap(), "--ref", obj.to_str().unwrap(), "--tau", "0.01", "--samples", "2000", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(report.with_extension("csv").exists());
}

#[test]
fn train_missing_dataset_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data", dir.path().join("nope").to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn train_divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_dataset(&data, &[]);
    let out = dir.path().join("run");
    let cfg = dir.path().join("huge.toml");
    fs::write(&cfg, format!("{TINY_TOML}\n[optim]\nlr_mlp = 1e38\nlr_grid = 1e38\n")).unwrap();
    let o = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--iters",
        "6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(out.join("diagnostic.ckpt").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_dataset(&data, &[]);
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "learning_rate = 3\n").unwrap();
    let o = run(&["train", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&["train", "--data", data.to_str().unwrap(), "--bogus-flag", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_identical_meshes_and_analytic_reference() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = polarsdf::meshmetrics::marching_cubes(
        |pts| pts.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.53).collect(),
        polarsdf::volrender::Aabb::new([-1.0; 3], [1.0; 3]),
        96,
        0.0,
    )
    .unwrap()
    .mesh;
    let pred = dir.path().join("pred.ply");
    polarsdf::meshmetrics::write_mesh(&mesh, &pred).unwrap();

    let same = dir.path().join("same.csv");
    let o = run(&["eval", "--pred", pred.to_str().unwrap(), "--ref", pred.to_str().unwrap(), "--samples", "3000", "--out", same.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&same).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let at = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(at("chamfer_l1"), 0.0);
    assert_eq!(at("f_score"), 100.0);

    let ref_mesh = polarsdf::meshmetrics::marching_cubes(
        |pts| pts.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5).collect(),
        polarsdf::volrender::Aabb::new([-1.0; 3], [1.0; 3]),
        160,
        0.0,
    )
    .unwrap()
    .mesh;
    let refp = dir.path().join("ref.obj");
    polarsdf::meshmetrics::write_mesh(&ref_mesh, &refp).unwrap();
    let mut cd = Vec::new();
    for r in [refp.to_str().unwrap().to_string(), "analytic:sphere:0.5".to_string()] {
        let out = dir.path().join(format!("r{}.csv", cd.len()));
        let o = run(&["eval", "--pred", pred.to_str().unwrap(), "--ref", &r, "--tau", "0.04", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = fs::read_to_string(&out).unwrap();
        cd.push(text.lines().nth(1).unwrap().split(',').next().unwrap().parse::<f64>().unwrap());
    }
    assert!(((cd[0] - cd[1]) / cd[1]).abs() < 0.02, "{cd:?}");
}

#[test]
fn eval_missing_file_and_bad_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.txt");
    let o = run(&["eval", "--pred", "/nonexistent/p.obj", "--ref", "analytic:sphere:0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let o = run(&["eval", "--pred", "/nonexistent/p.obj", "--ref", "analytic:cube:1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn inspect_channels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_dataset(&data, &[]);
    let frame = data.join("view_000.pframe");
    for (ch, color) in [("aop", image::ColorType::Rgb8), ("dop", image::ColorType::L8), ("color", image::ColorType::Rgb8)] {
        let out = dir.path().join(format!("{ch}.png"));
        let o = run(&["inspect", "--frame", frame.to_str().unwrap(), "--channel", ch, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let img = image::open(&out).unwrap();
        assert_eq!(img.color(), color);
        assert_eq!((img.width(), img.height()), (24, 24));
    }
    let o = run(&["inspect", "--frame", frame.to_str().unwrap(), "--channel", "depth", "--out", "x.png"]);
    assert_eq!(code(&o), 2);
    let o = run(&["inspect", "--frame", "/nonexistent.pframe", "--channel", "aop", "--out", "x.png"]);
    assert_eq!(code(&o), 3);
}

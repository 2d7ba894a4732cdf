use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proxpan::io::{read_raster, write_raster};
use proxpan::MultibandImage;

fn proxpan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxpan")).args(args).output().expect("spawn proxpan")
}

fn ok(args: &[&str]) -> String {
    let out = proxpan(args);
    assert!(
        out.status.success(),
        "proxpan {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    proxpan(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"
seed = 3
[synth]
count = 6
height = 16
width = 16
bands = 4
features = 4
[split]
fraction = 0.5
[network]
features = 4
bands = 4
prox_channels = 4
[train]
epochs = 2
batch_size = 2
learning_rate = 1e-2
"#;

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_is_reproducible_and_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", &cfg, "--out-dir", s(&a)]);
    ok(&["synth", "--config", &cfg, "--out-dir", s(&b), "--threads", "3"]);
    for name in ["manifest.jsonl", "train.jsonl", "test.jsonl", "generator.json", "run.json"] {
        assert!(a.join(name).exists(), "{name}");
    }
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    assert_eq!(fs::read_to_string(a.join("train.jsonl")).unwrap().lines().count(), 3);
    for entry in fs::read_dir(a.join("rasters")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join("rasters").join(&name)).unwrap(), fs::read(b.join("rasters").join(&name)).unwrap());
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["command"], "synth");
    assert_eq!(record["seed"], 3);
    assert!(record["version"].is_string());
}

#[test]
fn eval_identical_rasters_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let img = MultibandImage::<f32>::from_fn(32, 32, 3, |r, c, b| 1.0 + ((r * 7 + c * 3 + b) % 11) as f32 / 10.0);
    let path = dir.path().join("img.mbt");
    write_raster(&img, &path).unwrap();
    let out = dir.path().join("eval");
    ok(&["eval", "--fused", s(&path), "--reference", s(&path), "--out-dir", s(&out)]);
    let line = fs::read_to_string(out.join("report.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(v["sam_degrees"].as_f64().unwrap(), 0.0);
    assert_eq!(v["ergas"].as_f64().unwrap(), 0.0);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("id,mode,q2n,sam_degrees,ergas,scc,d_lambda,d_s,qnr\n"));
}

#[test]
fn full_resolution_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", &cfg, "--out-dir", s(&data)]);
    let rasters = data.join("rasters");
    let out = dir.path().join("eval");
    ok(&[
        "eval",
        "--fused",
        s(&rasters.join("s00000_ms_up.mbt")),
        "--ms",
        s(&rasters.join("s00000_ms.mbt")),
        "--pan",
        s(&rasters.join("s00000_pan.mbt")),
        "--out-dir",
        s(&out),
    ]);
    let v: serde_json::Value =
        serde_json::from_str(fs::read_to_string(out.join("report.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(v["mode"], "full");
    let qnr = v["qnr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&qnr));
    assert!(v.get("sam_degrees").is_none());
}

#[test]
fn train_infer_and_solve_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", &cfg, "--out-dir", s(&data)]);
    let tr = dir.path().join("train");
    ok(&["train", "--config", &cfg, "--manifest", s(&data.join("train.jsonl")), "--out-dir", s(&tr)]);
    let history = fs::read_to_string(tr.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,mean_loss,lr\n"));

    let rasters = data.join("rasters");
    let inf = dir.path().join("infer");
    ok(&[
        "infer",
        "--config",
        &cfg,
        "--checkpoint",
        s(&tr.join("checkpoint.ppn")),
        "--pan",
        s(&rasters.join("s00000_pan.mbt")),
        "--ms",
        s(&rasters.join("s00000_ms.mbt")),
        "--out-dir",
        s(&inf),
    ]);
    assert_eq!(read_raster(inf.join("fused.mbt")).unwrap().dims(), (16, 16, 4));
    assert!(inf.join("preview.ppm").exists());

    let sol = dir.path().join("solve");
    ok(&[
        "solve",
        "--config",
        &cfg,
        "--generator",
        s(&data.join("generator.json")),
        "--pan",
        s(&rasters.join("s00000_pan.mbt")),
        "--ms-up",
        s(&rasters.join("s00000_ms_up.mbt")),
        "--precision",
        "f64",
        "--out-dir",
        s(&sol),
    ]);
    assert_eq!(read_raster(sol.join("fused.mbt")).unwrap().dims(), (16, 16, 4));
    let trace = fs::read_to_string(sol.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 101);
}

#[test]
fn gradcheck_passes_on_toy_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.toml");
    fs::write(
        &cfg,
        "[network]\nfeatures = 2\nbands = 2\nprox_channels = 2\n[gradcheck]\nsamples = 50\nheight = 6\nwidth = 6\n",
    )
    .unwrap();
    let out = ok(&["gradcheck", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert!(out.starts_with("PASS"), "{out}");
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlr = 1\n").unwrap();
    assert_eq!(code(&["synth", "--config", s(&bad), "--out-dir", s(&out)]), 2);
    assert_eq!(code(&["synth", "--config", s(&dir.path().join("missing.toml")), "--out-dir", s(&out)]), 2);

    let a = dir.path().join("a.mbt");
    let b = dir.path().join("b.mbt");
    write_raster(&MultibandImage::<f32>::filled(8, 8, 2, 1.0), &a).unwrap();
    write_raster(&MultibandImage::<f32>::filled(4, 4, 2, 1.0), &b).unwrap();
    assert_eq!(code(&["eval", "--fused", s(&a), "--reference", s(&b), "--out-dir", s(&out)]), 3);

    let missing = dir.path().join("nope.mbt");
    assert_eq!(code(&["eval", "--fused", s(&missing), "--reference", s(&a), "--out-dir", s(&out)]), 5);

    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", &cfg, "--out-dir", s(&data)]);
    let huge = dir.path().join("huge.toml");
    fs::write(
        &huge,
        format!("{SMALL}\n[solver]\nsteps = \"explicit\"\neta_u = 1e6\neta_v = 1e6\neta_c = 1e6\nlambda_u = 0.0\nlambda_v = 0.0\nlambda_c = 0.0\nmax_sweeps = 200\n"),
    )
    .unwrap();
    let rasters = data.join("rasters");
    assert_eq!(
        code(&[
            "solve",
            "--config",
            s(&huge),
            "--generator",
            s(&data.join("generator.json")),
            "--pan",
            s(&rasters.join("s00000_pan.mbt")),
            "--ms-up",
            s(&rasters.join("s00000_ms_up.mbt")),
            "--out-dir",
            s(&out),
        ]),
        4
    );
}

#[test]
fn end_to_end_beats_exp_on_ergas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e2e.toml");
    fs::write(
        &cfg,
        r#"
seed = 5
[synth]
count = 48
height = 32
width = 32
bands = 4
features = 4
[split]
fraction = 0.75
[network]
features = 4
bands = 4
prox_channels = 4
[train]
epochs = 12
batch_size = 4
learning_rate = 1e-2
"#,
    )
    .unwrap();
    let cfg = s(&cfg);
    let data = dir.path().join("data");
    ok(&["synth", "--config", cfg, "--out-dir", s(&data)]);
    let tr = dir.path().join("train");
    ok(&["train", "--config", cfg, "--manifest", s(&data.join("train.jsonl")), "--out-dir", s(&tr)]);
    let ev = dir.path().join("eval");
    ok(&[
        "eval",
        "--config",
        cfg,
        "--manifest",
        s(&data.join("test.jsonl")),
        "--checkpoint",
        s(&tr.join("checkpoint.ppn")),
        "--out-dir",
        s(&ev),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    let net = summary["net"]["ergas"]["mean"].as_f64().unwrap();
    let exp = summary["exp"]["ergas"]["mean"].as_f64().unwrap();
    println!("end-to-end ERGAS: network {net:.4}, EXP {exp:.4}");
    assert!(net < exp, "network {net} vs EXP {exp}");
}

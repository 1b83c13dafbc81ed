use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pixeldit::data::{read_image, ToyDataset, ToyDatasetSpec};

const TOY: &str = r#"
[model]
patch_depth = 1
pixel_depth = 1
hidden = 16
pixel_hidden = 4
patch_size = 2
heads = 2
num_classes = 3
resolution = [8, 8]
channels = 3

[train]
batch_size = 4
total_steps = 6
lr = 0.001
seed = 5
checkpoint_every = 3

[sampler]
steps = 4
cfg_scale = 2.0

[dataset]
num_classes = 3
resolution = [8, 8]
samples_per_class = 4
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pixeldit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn metric(out: &str, key: &str) -> u64 {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key},")))
        .unwrap_or_else(|| panic!("{key} missing in\n{out}"))
        .parse()
        .unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, TOY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_for_presets_are_near_the_published_sizes() {
    for (preset, want) in [("B", 184e6), ("L", 569e6), ("XL", 797e6)] {
        let o = run(&["params", "--preset", preset]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        let total = metric(&out, "params_total") as f64;
        assert!((total - want).abs() / want <= 0.10, "{preset}: {total}");
        let parts: u64 = out
            .lines()
            .filter(|l| l.starts_with("params."))
            .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
            .sum();
        assert_eq!(parts as f64, total);
    }
}

#[test]
fn flops_for_xl_and_overrides() {
    let o = run(&["flops", "--preset", "XL"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let g = metric(&out, "flops_forward") as f64 / 1e9;
    assert!((g - 311.0).abs() / 311.0 <= 0.15, "{g}");
    assert_eq!(metric(&out, "attention_token_count"), 256);

    let o = run(&["flops", "--preset", "XL", "--set", "model.variant=no_pixel_attention"]);
    assert!(metric(&stdout(&o), "flops_forward") < metric(&out, "flops_forward"));
    let o = run(&["flops", "--preset", "XL", "--resolution", "512x512"]);
    assert_eq!(metric(&stdout(&o), "attention_token_count"), 1024);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    for args in [
        &["params", "--bogus"][..],
        &["frobnicate"][..],
        &["sample", "--class", "0"][..],
        &["params"][..],
        &["params", "--preset", "B", "--config", "x.toml"][..],
    ] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}: {}", stderr(&o));
    }
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "));
    let o = run(&["params", "--preset", "Q"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, format!("{TOY}\n[paths]\ncheckpoint_dri = \"x\"\n")).unwrap();
    let o = run(&["train", "--config", s(&p)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint_dri"), "{}", stderr(&o));

    let cfg = write_config(dir.path());
    let o = run(&["train", "--config", s(&cfg), "--set", "train.learning_rate=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn make_data_materializes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = run(&[
        "make-data", "--classes", "2", "--per-class", "3", "--resolution", "4x6", "--noise", "0.1", "--seed", "9",
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = fs::read_to_string(out.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 7);
    assert_eq!(labels.lines().nth(2).unwrap(), "00001.ppm,1");

    let spec = ToyDatasetSpec {
        num_classes: 2,
        samples_per_class: 3,
        resolution: [4, 6],
        noise_std: 0.1,
        seed: 9,
        ..ToyDatasetSpec::default()
    };
    let data = ToyDataset::generate(&spec).unwrap();
    for i in 0..6 {
        let img = read_image(out.join(format!("{i:05}.ppm"))).unwrap();
        let (want, _) = data.batch(&[i]).unwrap();
        for (a, b) in img.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }
    let o = run(&["make-data", "--channels", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

fn train_into(dir: &Path, extra: &[&str]) -> (String, PathBuf) {
    let cfg = write_config(dir);
    let ck = dir.join("ck");
    let metrics = dir.join("metrics.csv");
    let mut args = vec!["train", "--config", s(&cfg), "--checkpoint-dir", s(&ck), "--metrics", s(&metrics)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    (fs::read_to_string(&metrics).unwrap(), ck)
}

#[test]
fn training_is_reproducible_and_resumable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (m1, ck1) = train_into(a.path(), &[]);
    let (m2, ck2) = train_into(b.path(), &[]);
    assert_eq!(m1, m2);
    assert!(m1.starts_with("step,loss,loss_diff,loss_repa,grad_norm,lr\n"));
    assert_eq!(m1.lines().count(), 7);
    for step in ["step_00000003.ckpt", "step_00000006.ckpt"] {
        assert_eq!(fs::read(ck1.join(step)).unwrap(), fs::read(ck2.join(step)).unwrap());
    }

    // Resume from step 3 into a metrics file holding the first three rows.
    let c = tempfile::tempdir().unwrap();
    let cfg = write_config(c.path());
    let metrics = c.path().join("metrics.csv");
    let head: String = m1.lines().take(4).map(|l| format!("{l}\n")).collect();
    fs::write(&metrics, head).unwrap();
    let ck3 = c.path().join("ck");
    let o = run(&[
        "train", "--config", s(&cfg), "--resume", s(&ck1.join("step_00000003.ckpt")), "--metrics", s(&metrics),
        "--checkpoint-dir", s(&ck3),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&metrics).unwrap(), m1);
    assert_eq!(fs::read(ck3.join("step_00000006.ckpt")).unwrap(), fs::read(ck1.join("step_00000006.ckpt")).unwrap());
}

#[test]
fn flags_override_config_keys() {
    let d = tempfile::tempdir().unwrap();
    let (m, ck) = train_into(d.path(), &["--steps", "2", "--lr", "0.5"]);
    assert_eq!(m.lines().count(), 3);
    assert!(m.lines().nth(1).unwrap().ends_with(",0.5"));
    let saved = fs::read_to_string(ck.join("config.toml")).unwrap();
    assert!(saved.contains("total_steps = 2"), "{saved}");
}

#[test]
fn sampling_is_byte_reproducible_with_a_manifest() {
    let d = tempfile::tempdir().unwrap();
    let (_, ck) = train_into(d.path(), &[]);
    let ckpt = ck.join("step_00000006.ckpt");
    let sample_to = |out: &Path, seed: &str, ema: bool| {
        let mut args = vec![
            "sample", "--checkpoint", s(&ckpt), "--class", "0,2", "--count", "2", "--steps", "3", "--cfg", "2",
            "--interval", "0.1,0.9", "--shift", "2", "--solver", "heun", "--seed", seed, "--out", s(out),
        ];
        if ema {
            args.push("--ema");
        }
        let o = run(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let (o1, o2, o3) = (d.path().join("s1"), d.path().join("s2"), d.path().join("s3"));
    sample_to(&o1, "7", false);
    sample_to(&o2, "7", false);
    sample_to(&o3, "8", false);
    let files = ["class000_0000.ppm", "class000_0001.ppm", "class002_0000.ppm", "class002_0001.ppm"];
    for f in files {
        assert_eq!(fs::read(o1.join(f)).unwrap(), fs::read(o2.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(o1.join(files[0])).unwrap(), fs::read(o3.join(files[0])).unwrap());

    let manifest: toml::Table = fs::read_to_string(o1.join("manifest.toml")).unwrap().parse().unwrap();
    let sampler = manifest["sampler"].as_table().unwrap();
    assert_eq!(sampler["solver"].as_str(), Some("heun"));
    assert_eq!(sampler["steps"].as_integer(), Some(3));
    assert_eq!(sampler["seed"].as_integer(), Some(7));
    assert_eq!(sampler["shift_alpha"].as_float(), Some(2.0));
    let hash = manifest["checkpoint_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(manifest["files"].as_array().unwrap().len(), 4);

    sample_to(&d.path().join("ema"), "7", true);
    let o = run(&["sample", "--checkpoint", s(&ckpt), "--class", "3", "--out", s(&d.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_passes_on_the_toy_model() {
    let o = run(&["grad-check"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("PASS end_to_end")));
    assert!(!out.contains("FAIL"));
}

#[test]
fn ablate_writes_csv_and_chart() {
    let d = tempfile::tempdir().unwrap();
    let base: String = TOY
        .replace("[model]", "[base.model]")
        .replace("[train]", "[base.train]")
        .replace("[sampler]", "[base.sampler]")
        .replace("[dataset]", "[base.dataset]");
    let spec = format!(
        "samples_per_class = 2\n{base}\n[[run]]\nname = \"A\"\nset = {{ \"model.variant\" = \"a_global\" }}\n\n[[run]]\nname = \"C\"\n\n[[run]]\nname = \"broken\"\nset = {{ \"model.heads\" = 3 }}\n"
    );
    let sp = d.path().join("sweep.toml");
    fs::write(&sp, spec).unwrap();
    let (csv, svg) = (d.path().join("out.csv"), d.path().join("loss.svg"));
    let o = run(&["ablate", "--sweep", s(&sp), "--out", s(&csv), "--chart", s(&svg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("A,a_global,") && lines[1].ends_with(",ok"));
    assert!(lines[2].starts_with("C,c_pixelwise,") && lines[2].ends_with(",ok"));
    assert!(lines[3].contains("failed"));
    let chart = fs::read_to_string(&svg).unwrap();
    assert_eq!(chart.matches("class=\"series\"").count(), 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let toy = pixeldit::config::RunConfig::load(&dir.join("toy.toml"), &[]).unwrap();
    assert_eq!(toy.model.pixel_attention_tokens(), 16);
    let spec = pixeldit::analysis::AblationSpec::parse(&fs::read_to_string(dir.join("ablation.toml")).unwrap()).unwrap();
    assert_eq!(spec.entries.len(), 5);
    for e in &spec.entries {
        let e = e.as_ref().unwrap();
        assert_eq!(e.config.train.total_steps, 500, "{}", e.name);
    }
}

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use pixeldit::analysis::{
    count_params, estimate_flops, final_loss, loss_chart_svg, run_ablation_sweep, sweep_csv, AblationSpec, CostReport, Series,
};
use pixeldit::config::{parse_assignment, parse_value, set_dotted, RunConfig};
use pixeldit::data::{write_image, NetpbmFormat, ToyDataset, ToyDatasetSpec};
use pixeldit::model::{Checkpoint, ModelConfig, PixelDit, PARAM_PREFIX};
use pixeldit::sampler::{sample_model, SamplerConfig, Solver};
use pixeldit::train::{run, RunOutputs, Trainer, EMA_PREFIX};
use pixeldit::verify::grad_check_suite;
use pixeldit::{Error, Result};
use sha2::{Digest, Sha256};

use crate::args::{AblateArgs, CostArgs, MakeDataArgs, SampleArgs, TrainArgs};

fn assignments(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter().map(|s| parse_assignment(s)).collect()
}

/// `HxW` → TOML array literal.
fn resolution_literal(s: &str) -> Result<String> {
    let parsed = s
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse::<usize>().ok()?, w.trim().parse::<usize>().ok()?)));
    match parsed {
        Some((h, w)) => Ok(format!("[{h}, {w}]")),
        None => Err(Error::Config(format!("resolution must look like 256x256, got {s:?}"))),
    }
}

fn push<T: ToString>(out: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.to_string()));
    }
}

fn quoted(s: &Option<String>) -> Option<String> {
    s.as_ref().map(|v| format!("{v:?}"))
}

fn path_str(p: &Option<std::path::PathBuf>) -> Option<String> {
    p.as_ref().map(|v| format!("{:?}", v.display().to_string()))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut ov = assignments(&a.set)?;
    push(&mut ov, "train.total_steps", &a.steps);
    push(&mut ov, "train.seed", &a.seed);
    push(&mut ov, "train.lr", &a.lr);
    push(&mut ov, "train.batch_size", &a.batch_size);
    push(&mut ov, "model.variant", &quoted(&a.variant));
    push(&mut ov, "paths.checkpoint_dir", &path_str(&a.checkpoint_dir));
    push(&mut ov, "paths.metrics", &path_str(&a.metrics));
    let cfg = RunConfig::load(&a.config, &ov)?;
    let data = ToyDataset::generate(&cfg.dataset)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model_config()? != cfg.model {
                return Err(Error::Config(format!(
                    "{} was written for a different [model] section",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(&ck, cfg.train.clone())?
        }
        None => Trainer::new(PixelDit::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };
    let start = trainer.state.step;

    let mut metrics: Box<dyn Write> = match &cfg.paths.metrics {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let file = if a.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(p)?
            } else {
                File::create(p)?
            };
            Box::new(BufWriter::new(file))
        }
        None => Box::new(io::sink()),
    };
    if let Some(dir) = &cfg.paths.checkpoint_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    let outputs = RunOutputs {
        checkpoint_dir: cfg.paths.checkpoint_dir.clone(),
    };
    let rows = run(&mut trainer, &data, &mut metrics, &outputs)?;
    let last = final_loss(&rows).map_or("n/a".to_string(), |l| format!("{l:.6}"));
    println!(
        "trained steps {start}..{} of {} ({} params); mean loss over the last 100 steps: {last}",
        trainer.state.step,
        cfg.train.total_steps,
        trainer.model.num_params()
    );
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let bytes = fs::read(&a.checkpoint)?;
    let digest = hex(&Sha256::digest(&bytes));
    let ck = Checkpoint::from_bytes(&bytes)?;
    let model = PixelDit::from_checkpoint(&ck, if a.ema { EMA_PREFIX } else { PARAM_PREFIX })?;
    let mc = &model.config;

    let mut sampler = match &a.config {
        Some(p) => RunConfig::load(p, &[])?.sampler,
        None => SamplerConfig::default(),
    };
    if let Some(v) = a.steps {
        sampler.steps = v;
    }
    if let Some(v) = a.cfg {
        sampler.cfg_scale = v;
    }
    if let Some(v) = &a.interval {
        sampler.cfg_interval = *v;
    }
    if let Some(v) = a.shift {
        sampler.shift_alpha = v;
    }
    if let Some(v) = &a.solver {
        sampler.solver = Solver::parse(v)?;
    }
    if let Some(v) = a.seed {
        sampler.seed = v;
    }
    sampler.validate()?;
    if let Some(&k) = a.classes.iter().find(|&&k| k >= mc.num_classes) {
        return Err(Error::Input(format!("class {k} outside 0..{}", mc.num_classes)));
    }
    let format = NetpbmFormat::for_channels(mc.channels)?;
    let labels: Vec<usize> = a.classes.iter().flat_map(|&k| std::iter::repeat_n(k, a.count)).collect();
    let images = sample_model(&model, &sampler, &labels)?;

    fs::create_dir_all(&a.out)?;
    let per = images.numel() / labels.len().max(1);
    let shape = [mc.channels, mc.height(), mc.width()];
    let mut files = Vec::new();
    for (i, &k) in labels.iter().enumerate() {
        let name = format!("class{k:03}_{:04}.{}", i % a.count, format.extension());
        let img = pixeldit::Tensor::new(&shape, images.data()[i * per..(i + 1) * per].to_vec())?;
        write_image(a.out.join(&name), &img)?;
        files.push(name);
    }

    let mut manifest = toml::Table::new();
    let sampler_table = toml::Table::try_from(&sampler).map_err(|e| Error::Config(e.to_string()))?;
    manifest.insert("sampler".into(), toml::Value::Table(sampler_table));
    manifest.insert("checkpoint".into(), a.checkpoint.display().to_string().into());
    manifest.insert("checkpoint_sha256".into(), digest.into());
    manifest.insert("ema".into(), a.ema.into());
    manifest.insert("classes".into(), a.classes.iter().map(|&k| k as i64).collect::<Vec<_>>().into());
    manifest.insert("count_per_class".into(), (a.count as i64).into());
    manifest.insert("files".into(), files.clone().into());
    fs::write(a.out.join("manifest.toml"), toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?)?;
    println!("wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn grad_check() -> Result<()> {
    let cases = grad_check_suite()?;
    let mut failed = 0;
    for c in &cases {
        let tag = if c.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{tag} {:<32} max_rel_error={:.3e} coords={}", c.name, c.max_rel_error, c.checked);
    }
    println!("{} of {} checks passed", cases.len() - failed, cases.len());
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}

fn model_for_cost(a: &CostArgs) -> Result<ModelConfig> {
    let mut table = match (&a.preset, &a.config) {
        (Some(p), _) => toml::Table::try_from(ModelConfig::from_preset(p)?).map_err(|e| Error::Config(e.to_string()))?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            match root.remove("model") {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(Error::Config(format!("{} has no [model] section", path.display()))),
            }
        }
        (None, None) => return Err(Error::Config("give --preset or --config".into())),
    };
    for (k, v) in assignments(&a.set)? {
        set_dotted(&mut table, k.strip_prefix("model.").unwrap_or(&k), parse_value(&v))?;
    }
    if let Some(r) = &a.resolution {
        table.insert("resolution".into(), parse_value(&resolution_literal(r)?));
    }
    let cfg: ModelConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_rows(rows: &[(String, u64)]) {
    println!("metric,value");
    for (k, v) in rows {
        println!("{k},{v}");
    }
}

pub fn params(a: &CostArgs) -> Result<()> {
    let r = count_params(&model_for_cost(a)?)?;
    let mut rows = vec![("params_total".to_string(), r.params_total)];
    rows.extend(r.params_by_module.iter().map(|(m, v)| (format!("params.{m}"), *v)));
    print_rows(&rows);
    println!("# {:.1}M parameters", r.params_total as f64 / 1e6);
    Ok(())
}

pub fn flops(a: &CostArgs) -> Result<()> {
    let cfg = model_for_cost(a)?;
    let r: CostReport = estimate_flops(&cfg, cfg.resolution)?;
    let [h, w] = cfg.resolution;
    print_rows(&r.rows());
    println!("# {:.1} GFLOPs per {h}x{w} image (multiply-add = 2)", r.flops_forward as f64 / 1e9);
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let sweep = AblationSpec::parse(&fs::read_to_string(&a.sweep)?)?;
    let outcome = run_ablation_sweep(&sweep.entries);
    let csv = sweep_csv(&outcome.rows);
    match &a.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.chart {
        let series: Vec<Series> = outcome
            .curves
            .iter()
            .map(|(name, losses)| Series {
                label: name.clone(),
                points: losses.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect(),
            })
            .collect();
        fs::write(p, loss_chart_svg("training loss", "step", "loss", &series))?;
    }
    let failed = outcome.rows.iter().filter(|r| r.failure.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; see the status column", outcome.rows.len());
    }
    Ok(())
}

pub fn make_data(a: &MakeDataArgs) -> Result<()> {
    let mut table = match &a.config {
        Some(path) => {
            let mut root: toml::Table = fs::read_to_string(path)?
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            match root.remove("dataset") {
                Some(toml::Value::Table(t)) => t,
                _ => toml::Table::new(),
            }
        }
        None => toml::Table::new(),
    };
    let mut ov = assignments(&a.set)?;
    push(&mut ov, "kind", &quoted(&a.kind));
    push(&mut ov, "num_classes", &a.classes);
    push(&mut ov, "samples_per_class", &a.per_class);
    push(&mut ov, "channels", &a.channels);
    push(&mut ov, "noise_std", &a.noise);
    push(&mut ov, "seed", &a.seed);
    if let Some(r) = &a.resolution {
        ov.push(("resolution".into(), resolution_literal(r)?));
    }
    for (k, v) in ov {
        set_dotted(&mut table, k.strip_prefix("dataset.").unwrap_or(&k), parse_value(&v))?;
    }
    let spec: ToyDatasetSpec = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let data = ToyDataset::generate(&spec)?;
    write_dataset(&data, &a.out)?;
    println!("wrote {} images to {}", data.len(), a.out.display());
    Ok(())
}

fn write_dataset(data: &ToyDataset, out: &Path) -> Result<()> {
    let spec = &data.spec;
    let format = NetpbmFormat::for_channels(spec.channels)?;
    fs::create_dir_all(out)?;
    let mut labels = String::from("file,class\n");
    let [h, w] = spec.resolution;
    for (i, &k) in data.labels.iter().enumerate() {
        let (img, _) = data.batch(&[i])?;
        let name = format!("{i:05}.{}", format.extension());
        write_image(out.join(&name), &img.reshape(&[spec.channels, h, w])?)?;
        labels.push_str(&format!("{name},{k}\n"));
    }
    fs::write(out.join("labels.csv"), labels)?;
    fs::write(
        out.join("dataset.toml"),
        toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(())
}

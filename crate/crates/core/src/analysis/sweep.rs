use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::Deserialize;

use super::estimate_flops;
use crate::config::{set_dotted, RunConfig};
use crate::data::{ToyDataset, ToyDatasetSpec};
use crate::error::{Error, Result};
use crate::model::PixelDit;
use crate::sampler::{sample_model, SamplerConfig};
use crate::train::{train, MetricRow};

pub const SWEEP_HEADER: &str =
    "name,variant,patch_depth,pixel_depth,ptc_rate,params,gflops,final_loss,class_mean_err,status";

/// Images drawn per sampler call when estimating class means.
const SAMPLE_CHUNK: usize = 64;

/// Steps averaged for the reported final loss.
const FINAL_WINDOW: usize = 100;

/// One row of a sweep: a full run configuration under a display name.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub name: String,
    pub config: RunConfig,
    /// Samples per class used for the class-mean metric; 0 skips sampling.
    pub samples_per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub variant: String,
    pub patch_depth: usize,
    pub pixel_depth: usize,
    pub ptc_rate: usize,
    pub params: u64,
    pub gflops: f64,
    pub final_loss: Option<f64>,
    /// Largest per-class, per-channel gap between sample means and the
    /// dataset template means.
    pub class_mean_err: Option<f64>,
    /// `None` on success, the failure message otherwise.
    pub failure: Option<String>,
}

impl SweepRow {
    fn failed(name: &str, msg: String) -> Self {
        Self {
            name: name.to_string(),
            variant: String::new(),
            patch_depth: 0,
            pixel_depth: 0,
            ptc_rate: 0,
            params: 0,
            gflops: 0.0,
            final_loss: None,
            class_mean_err: None,
            failure: Some(msg),
        }
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let status = match &self.failure {
            None => "ok".to_string(),
            Some(m) => format!("failed: {}", m.replace([',', '\n', '\r'], " ")),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.name.replace(',', " "),
            self.variant,
            self.patch_depth,
            self.pixel_depth,
            self.ptc_rate,
            self.params,
            self.gflops,
            opt(self.final_loss),
            opt(self.class_mean_err),
            status
        )
    }
}

/// Rows plus the loss curve of every successful run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// `(name, losses)` for rows that trained.
    pub curves: Vec<(String, Vec<f64>)>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Mean loss over the last (up to) 100 finite steps.
pub fn final_loss(rows: &[MetricRow]) -> Option<f64> {
    let finite: Vec<f64> = rows.iter().map(|r| r.loss).filter(|l| l.is_finite()).collect();
    let tail = &finite[finite.len().saturating_sub(FINAL_WINDOW)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Per-class, per-channel means of `per_class` samples of each class.
///
/// Sampling runs in chunks of 64 images; chunk `i` uses seed
/// `sampler.seed + i`, so results depend only on the configs.
pub fn class_sample_means(model: &PixelDit, sampler: &SamplerConfig, per_class: usize) -> Result<Vec<Vec<f64>>> {
    let c = &model.config;
    let (ch, pix) = (c.channels, c.height() * c.width());
    let mut sums = vec![vec![0.0; ch]; c.num_classes];
    let labels: Vec<usize> = (0..c.num_classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect();
    for (i, chunk) in labels.chunks(SAMPLE_CHUNK).enumerate() {
        let cfg = SamplerConfig {
            seed: sampler.seed.wrapping_add(i as u64),
            ..sampler.clone()
        };
        let imgs = sample_model(model, &cfg, chunk)?;
        for (n, &k) in chunk.iter().enumerate() {
            for (j, sum) in sums[k].iter_mut().enumerate() {
                let start = (n * ch + j) * pix;
                *sum += imgs.data()[start..start + pix].iter().sum::<f64>();
            }
        }
    }
    let denom = (per_class * pix) as f64;
    Ok(sums.into_iter().map(|s| s.into_iter().map(|v| v / denom).collect()).collect())
}

fn template_means(spec: &ToyDatasetSpec) -> Result<Vec<Vec<f64>>> {
    let pix = spec.resolution[0] * spec.resolution[1];
    (0..spec.num_classes)
        .map(|k| {
            let t = spec.template(k)?;
            Ok(t.data().chunks(pix).map(|c| c.iter().sum::<f64>() / pix as f64).collect())
        })
        .collect()
}

fn run_entry(entry: &SweepEntry) -> Result<(SweepRow, Vec<f64>)> {
    let cfg = &entry.config;
    cfg.validate()?;
    let m = &cfg.model;
    let cost = estimate_flops(m, m.resolution)?;
    let data = ToyDataset::generate(&cfg.dataset)?;
    let model = PixelDit::new(m.clone(), cfg.train.seed)?;
    let (trainer, metrics) = train(model, &data, cfg.train.clone())?;
    let class_mean_err = if entry.samples_per_class > 0 {
        let got = class_sample_means(&trainer.model, &cfg.sampler, entry.samples_per_class)?;
        let want = template_means(&cfg.dataset)?;
        let gap = got
            .iter()
            .flatten()
            .zip(want.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Some(gap)
    } else {
        None
    };
    let row = SweepRow {
        name: entry.name.clone(),
        variant: m.variant.name().to_string(),
        patch_depth: m.patch_depth,
        pixel_depth: m.pixel_depth,
        ptc_rate: m.ptc_rate,
        params: cost.params_total,
        gflops: cost.flops_forward as f64 / 1e9,
        final_loss: final_loss(&metrics),
        class_mean_err,
        failure: None,
    };
    Ok((row, metrics.iter().map(|r| r.loss).collect()))
}

/// Train (and optionally sample) every entry in order. A failing or
/// panicking entry yields a row marked failed and leaves the others intact.
/// Each model is initialized from its `train.seed`.
pub fn run_ablation_sweep(entries: &[Result<SweepEntry>]) -> SweepOutcome {
    let mut out = SweepOutcome::default();
    for (i, entry) in entries.iter().enumerate() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                out.rows.push(SweepRow::failed(&format!("entry{i}"), e.to_string()));
                continue;
            }
        };
        match catch_unwind(AssertUnwindSafe(|| run_entry(entry))) {
            Ok(Ok((row, curve))) => {
                out.curves.push((entry.name.clone(), curve));
                out.rows.push(row);
            }
            Ok(Err(e)) => out.rows.push(SweepRow::failed(&entry.name, e.to_string())),
            Err(_) => out.rows.push(SweepRow::failed(&entry.name, "run panicked".into())),
        }
    }
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    name: String,
    #[serde(default)]
    set: BTreeMap<String, toml::Value>,
    samples_per_class: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    base: toml::Table,
    #[serde(default)]
    samples_per_class: usize,
    run: Vec<RawRun>,
}

/// A sweep file: a shared `[base]` run config and `[[run]]` entries that
/// override dotted keys of it.
///
/// ```toml
/// samples_per_class = 16
/// [base.model]
/// # ...
/// [[run]]
/// name = "global"
/// set = { "model.variant" = "a_global" }
/// ```
#[derive(Debug)]
pub struct AblationSpec {
    /// One entry per `[[run]]`; invalid overrides are kept as errors so only
    /// their own row fails.
    pub entries: Vec<Result<SweepEntry>>,
}

impl AblationSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let entries = raw
            .run
            .into_iter()
            .map(|r| {
                let mut table = raw.base.clone();
                for (k, v) in r.set {
                    set_dotted(&mut table, &k, v)?;
                }
                let config = RunConfig::from_table(table).map_err(|e| Error::Config(format!("{}: {e}", r.name)))?;
                Ok(SweepEntry {
                    name: r.name,
                    config,
                    samples_per_class: r.samples_per_class.unwrap_or(raw.samples_per_class),
                })
            })
            .collect();
        Ok(Self { entries })
    }
}

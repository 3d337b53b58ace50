//! Controlled comparisons between model variants.
//!
//! A plan is TOML with a shared `[model]` / `[train]` base and either a
//! `[sweep]` over one key or an explicit list of `[[variant]]` tables:
//!
//! ```toml
//! [model]
//! width = 16
//! [train]
//! max_epochs = 20
//! [sweep]
//! m = [0, 3, 5, 7]
//! ```
//!
//! A variant with `graft = true` trains its configuration with the
//! prebuilder disabled, then attaches a fresh prebuilder (from the variant's
//! own prebuilder settings) and fine-tunes for `finetune_epochs`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::ClipRecord;
use crate::error::{Error, Result};
use crate::metrics::MetricSettings;
use crate::model::Iprrn;
use crate::trainer::{evaluate, TrainConfig, Trainer};

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Overrides on top of the plan's `[model]` table.
    #[serde(default)]
    pub model: toml::Table,
    /// Overrides on top of the plan's `[train]` table.
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub graft: bool,
    #[serde(default)]
    pub finetune_epochs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub train: toml::Table,
    /// At most one key with a list of values.
    #[serde(default)]
    pub sweep: toml::Table,
    #[serde(default)]
    pub variant: Vec<Variant>,
    #[serde(default)]
    pub metrics: MetricSettings,
}

/// A variant after merging overrides into the base configs.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedVariant {
    pub name: String,
    /// Value of the swept key, for sorting and the table's first column.
    pub sweep_value: Option<toml::Value>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub graft: bool,
    pub finetune_epochs: usize,
}

fn merge<T: serde::de::DeserializeOwned + Serialize>(base: &T, overrides: &toml::Table, what: &str) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(format!("{what}: {e}")))?;
    for (k, v) in overrides {
        table.insert(k.clone(), v.clone());
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{what}: {}", e.message())))
}

impl AblationPlan {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("ablation plan: {e}")))
    }

    /// Expands the plan into concrete, validated variants.
    pub fn resolve(&self) -> Result<Vec<ResolvedVariant>> {
        let model: ModelConfig = merge(&ModelConfig::default(), &self.model, "[model]")?;
        let train: TrainConfig = merge(&TrainConfig::default(), &self.train, "[train]")?;
        let mut out = Vec::new();
        if self.sweep.len() > 1 {
            return Err(Error::Config("[sweep] may name only one key".into()));
        }
        if let Some((key, values)) = self.sweep.iter().next() {
            let values = values
                .as_array()
                .ok_or_else(|| Error::Config(format!("[sweep] {key} must be a list")))?;
            for v in values {
                let mut ov = toml::Table::new();
                ov.insert(key.clone(), v.clone());
                let (m, t) = if TrainConfig::KEYS.contains(&key.as_str()) {
                    (model.clone(), merge(&train, &ov, "[sweep]")?)
                } else {
                    (merge(&model, &ov, "[sweep]")?, train.clone())
                };
                out.push(ResolvedVariant {
                    name: format!("{key}={v}"),
                    sweep_value: Some(v.clone()),
                    model: m,
                    train: t,
                    graft: false,
                    finetune_epochs: 0,
                });
            }
        }
        for v in &self.variant {
            out.push(ResolvedVariant {
                name: v.name.clone(),
                sweep_value: None,
                model: merge(&model, &v.model, &format!("variant `{}` model", v.name))?,
                train: merge(&train, &v.train, &format!("variant `{}` train", v.name))?,
                graft: v.graft,
                finetune_epochs: v.finetune_epochs,
            });
        }
        if out.is_empty() {
            return Err(Error::Config("ablation plan has no [sweep] and no [[variant]]".into()));
        }
        for v in &out {
            v.model.validate()?;
            v.train.validate()?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub sweep_value: Option<String>,
    pub params: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean over clips of the first reconstructed frame's PSNR.
    pub first_frame_psnr: f64,
    /// Mean over clips of the per-sequence PSNR gap.
    pub mean_gap: f64,
    pub final_loss: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub sweep_key: Option<String>,
    pub rows: Vec<AblationRow>,
}

fn run_variant(v: &ResolvedVariant, train: &[ClipRecord], eval: &[ClipRecord], settings: MetricSettings) -> Result<AblationRow> {
    let started = Instant::now();
    let (model, final_loss) = if v.graft {
        let base_cfg = ModelConfig {
            ipnet: false,
            ..v.model.clone()
        };
        let mut trainer = Trainer::new(Iprrn::new(&base_cfg)?, v.train.clone())?;
        trainer.fit(train, None)?;
        let mut model = trainer.model().clone();
        model.attach_ipnet(&v.model)?;
        let mut tuner = Trainer::new(model, v.train.clone())?;
        tuner.fit_epochs(train, v.finetune_epochs, None)?;
        let loss = tuner.log().last().or(trainer.log().last()).map_or(f64::NAN, |l| l.loss);
        (tuner.model().clone(), loss)
    } else {
        let mut trainer = Trainer::new(Iprrn::new(&v.model)?, v.train.clone())?;
        trainer.fit(train, None)?;
        if v.finetune_epochs > 0 {
            trainer.fit_epochs(train, v.finetune_epochs, None)?;
        }
        let loss = trainer.log().last().map_or(f64::NAN, |l| l.loss);
        (trainer.model().clone(), loss)
    };
    let train_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let results = evaluate(&model, eval, settings)?;
    let eval_seconds = started.elapsed().as_secs_f64();
    let n = results.len().max(1) as f64;
    let mean = |f: &dyn Fn(&crate::metrics::MetricsReport) -> f64| results.iter().map(|(_, r, _)| f(r)).sum::<f64>() / n;
    Ok(AblationRow {
        name: v.name.clone(),
        sweep_value: v.sweep_value.as_ref().map(|x| x.to_string()),
        params: model.config().count_params(),
        mean_psnr: mean(&|r| r.mean_psnr),
        mean_ssim: mean(&|r| r.mean_ssim),
        first_frame_psnr: mean(&|r| r.per_frame_psnr[0]),
        mean_gap: mean(&|r| r.gap_psnr),
        final_loss,
        train_seconds,
        eval_seconds,
        error: None,
    })
}

fn sort_key(v: &Option<toml::Value>) -> (u8, f64, String) {
    match v {
        None => (2, 0.0, String::new()),
        Some(toml::Value::Integer(i)) => (0, *i as f64, String::new()),
        Some(toml::Value::Float(f)) => (0, *f, String::new()),
        Some(toml::Value::Boolean(b)) => (0, *b as u8 as f64, String::new()),
        Some(other) => (1, 0.0, other.to_string()),
    }
}

/// Trains and evaluates every variant. A failing variant yields a row with
/// `error` set and the remaining variants still run. Swept rows are sorted
/// by the swept value; explicit variants follow in plan order.
pub fn ablate(plan: &AblationPlan, train: &[ClipRecord], eval: &[ClipRecord]) -> Result<AblationReport> {
    let mut variants = plan.resolve()?;
    variants.sort_by(|a, b| {
        let (ka, kb) = (sort_key(&a.sweep_value), sort_key(&b.sweep_value));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.cmp(&kb.2))
    });
    let rows = variants
        .iter()
        .map(|v| {
            run_variant(v, train, eval, plan.metrics).unwrap_or_else(|e| AblationRow {
                name: v.name.clone(),
                sweep_value: v.sweep_value.as_ref().map(|x| x.to_string()),
                params: v.model.count_params(),
                mean_psnr: f64::NAN,
                mean_ssim: f64::NAN,
                first_frame_psnr: f64::NAN,
                mean_gap: f64::NAN,
                final_loss: f64::NAN,
                train_seconds: 0.0,
                eval_seconds: 0.0,
                error: Some(e.to_string()),
            })
        })
        .collect();
    Ok(AblationReport {
        sweep_key: plan.sweep.keys().next().cloned(),
        rows,
    })
}

impl AblationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Markdown table, one row per variant.
    pub fn to_markdown(&self) -> String {
        let first = self.sweep_key.as_deref().unwrap_or("variant");
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| {first} | Params(M) | PSNR (dB) | SSIM | First-frame PSNR (dB) | Gap PSNR (dB) | Train (s) | Eval (s) |"
        );
        s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let label = if self.sweep_key.is_some() {
                r.sweep_value.clone().unwrap_or_else(|| r.name.clone())
            } else {
                r.name.clone()
            };
            match &r.error {
                Some(e) => {
                    let _ = writeln!(s, "| {label} | {:.2} | failed: {} | | | | | |", r.params as f64 / 1e6, e.replace('|', "/"));
                }
                None => {
                    let _ = writeln!(
                        s,
                        "| {label} | {:.2} | {:.2} | {:.4} | {:.2} | {:.2} | {:.1} | {:.1} |",
                        r.params as f64 / 1e6,
                        r.mean_psnr,
                        r.mean_ssim,
                        r.first_frame_psnr,
                        r.mean_gap,
                        r.train_seconds,
                        r.eval_seconds
                    );
                }
            }
        }
        s
    }
}

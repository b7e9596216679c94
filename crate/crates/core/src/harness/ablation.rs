use std::collections::HashMap;
use std::fmt::Write as _;

use crate::config::KeyValues;
use crate::data::{generate_longrange_splits, Dataset, LongRangeTaskConfig};
use crate::error::{Error, Result};
use crate::layers::{NormConfig, NormMode};
use crate::models::{Arch, ModelConfig, Network};
use crate::renet::CellKind;

use super::init::{init_params_with, CONV_STD};
use super::metrics::{evaluate, EvalReport};
use super::train::{train, SgdConfig, TrainReport};

/// Width fractions of the three training crops, largest last; the ratios
/// of 320:400:500.
pub const CROP_FRACTIONS: [f64; 3] = [0.64, 0.8, 1.0];

/// One synthetic-task run: data, model, optimizer and initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: LongRangeTaskConfig,
    pub train_samples: usize,
    pub test_samples: usize,
    pub model: ModelConfig,
    pub sgd: SgdConfig,
    pub init_seed: u64,
    pub conv_std: f64,
}

impl ExperimentConfig {
    /// Reads the model, optimizer and task keys plus `train_n`, `test_n`,
    /// `init_seed` and `conv_std`. `L` sets both the task and model label
    /// counts.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let task = LongRangeTaskConfig::from_kv(kv)?;
        let model = model_from_kv(kv, task.classes)?;
        Ok(ExperimentConfig {
            task,
            train_samples: kv.parse_or("train_n", 200)?,
            test_samples: kv.parse_or("test_n", 40)?,
            model,
            sgd: SgdConfig::from_kv(kv)?,
            init_seed: kv.parse_or("init_seed", 1)?,
            conv_std: kv.parse_or("conv_std", CONV_STD)?,
        })
    }

    /// Train and test splits of the configured task.
    pub fn dataset(&self) -> Result<Dataset> {
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::config("train_n and test_n must be positive"));
        }
        generate_longrange_splits(self.train_samples, self.test_samples, &self.task)
    }
}

/// Model options from `model`, `scale`, `norm`, `lambda`, `mlfb`, `cell`,
/// `min_size` and `frozen` (comma-separated layer names).
pub fn model_from_kv(kv: &KeyValues, labels: usize) -> Result<ModelConfig> {
    let arch = Arch::parse(kv.get("model").unwrap_or("hrenet"))?;
    let mut m = ModelConfig::new(arch, kv.parse_or("scale", crate::models::DESK_SCALE)?, labels);
    m.min_size = kv.size_or("min_size", m.min_size)?;
    m.mlfb = kv.parse_or("mlfb", false)?;
    m.norm = NormConfig::new(NormMode::parse(kv.get("norm").unwrap_or("none"))?);
    if let Some(l) = kv.get("lambda") {
        m.norm.lambda = Some(l.parse().map_err(|_| Error::config(format!("invalid lambda {l:?}")))?);
    }
    m.cell = CellKind::parse(kv.get("cell").unwrap_or("lstm"))?;
    m.frozen = kv
        .get("frozen")
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub variant: String,
    pub params: usize,
    pub report: EvalReport,
    pub train: TrainReport,
}

/// Builds, initializes and trains `model` on the `train` split, then scores
/// the `test` split.
pub fn run_experiment(
    variant: &str,
    model: &ModelConfig,
    sgd: &SgdConfig,
    init_seed: u64,
    conv_std: f64,
    data: &Dataset,
) -> Result<(ExperimentResult, Network<f32>)> {
    let spec = model.build()?;
    let params = spec.param_count()?;
    let mut net = Network::<f32>::new(spec)?;
    init_params_with(&mut net, init_seed, conv_std)?;
    let train_report = train(&mut net, &data.split("train")?, sgd)?;
    let report = evaluate(&mut net, &data.split("test")?)?;
    log::info!(
        "{variant}: pixel accuracy {:.4}, mIoU {:.4} after {:.1}s",
        report.pixel_accuracy,
        report.mean_iou,
        train_report.seconds
    );
    Ok((
        ExperimentResult {
            variant: variant.to_string(),
            params,
            report,
            train: train_report,
        },
        net,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    LstmVsIrnn,
    CropSize,
    Mlfb,
    Norm,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::LstmVsIrnn,
        AblationKind::CropSize,
        AblationKind::Mlfb,
        AblationKind::Norm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::LstmVsIrnn => "lstm_vs_irnn",
            AblationKind::CropSize => "crop_size",
            AblationKind::Mlfb => "mlfb",
            AblationKind::Norm => "norm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation '{s}' (expected lstm_vs_irnn, crop_size, mlfb or norm)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<ExperimentResult>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,params,pixel_accuracy,class_accuracy,mean_iou,final_loss,train_seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.1}",
                r.variant,
                r.params,
                r.report.pixel_accuracy,
                r.report.class_accuracy,
                r.report.mean_iou,
                r.train.losses.last().copied().unwrap_or(f64::NAN),
                r.train.seconds
            );
        }
        s
    }
}

/// The variants of one ablation as `(name, model, sgd)`.
pub fn ablation_variants(kind: AblationKind, base: &ExperimentConfig) -> Vec<(String, ModelConfig, SgdConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut m = base.model.clone();
        m.arch = Arch::HReNet;
        f(&mut m);
        m
    };
    match kind {
        AblationKind::LstmVsIrnn => [CellKind::Lstm, CellKind::Irnn]
            .into_iter()
            .map(|c| (c.name().to_string(), with(&|m| m.cell = c), base.sgd.clone()))
            .collect(),
        AblationKind::CropSize => CROP_FRACTIONS
            .iter()
            .map(|&f| {
                let crop = (
                    ((base.task.height as f64 * f).round() as usize).max(1),
                    ((base.task.width as f64 * f).round() as usize).max(1),
                );
                let sgd = SgdConfig {
                    crop: Some(crop),
                    ..base.sgd.clone()
                };
                (format!("{}x{}", crop.0, crop.1), with(&|_| {}), sgd)
            })
            .collect(),
        AblationKind::Mlfb => [
            ("no_norm", NormMode::None, false),
            ("bn", NormMode::Batch, false),
            ("bn_mlfb", NormMode::Batch, true),
        ]
        .into_iter()
        .map(|(name, mode, mlfb)| {
            let m = with(&|m| {
                m.norm = NormConfig::new(mode);
                m.mlfb = mlfb;
            });
            (name.to_string(), m, base.sgd.clone())
        })
        .collect(),
        AblationKind::Norm => [NormMode::None, NormMode::Batch, NormMode::L2]
            .into_iter()
            .map(|mode| {
                let m = with(&|m| {
                    m.norm = NormConfig::new(mode);
                    m.mlfb = true;
                });
                (format!("mlfb_{}", mode.name()), m, base.sgd.clone())
            })
            .collect(),
    }
}

/// Finished runs keyed by everything that determines them, so variants that
/// coincide across tables are trained once.
#[derive(Clone, Debug, Default)]
pub struct RunCache {
    runs: HashMap<String, ExperimentResult>,
}

impl RunCache {
    fn key(base: &ExperimentConfig, model: &ModelConfig, sgd: &SgdConfig) -> String {
        format!(
            "{:?}|{}|{}|{}|{}|{model:?}|{sgd:?}",
            base.task, base.train_samples, base.test_samples, base.init_seed, base.conv_std
        )
    }

    /// Records a run made outside an ablation (same data and seeds as `base`).
    pub fn insert(&mut self, base: &ExperimentConfig, model: &ModelConfig, sgd: &SgdConfig, result: ExperimentResult) {
        self.runs.insert(Self::key(base, model, sgd), result);
    }

    pub fn get(&self, base: &ExperimentConfig, model: &ModelConfig, sgd: &SgdConfig) -> Option<&ExperimentResult> {
        self.runs.get(&Self::key(base, model, sgd))
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Trains every variant of `kind` with the same data, seeds and budget.
pub fn run_ablation(kind: AblationKind, base: &ExperimentConfig) -> Result<AblationTable> {
    run_ablation_cached(kind, base, &base.dataset()?, &mut RunCache::default())
}

/// [`run_ablation`] reusing (and filling) `cache`. `data` must be
/// `base.dataset()`.
pub fn run_ablation_cached(
    kind: AblationKind,
    base: &ExperimentConfig,
    data: &Dataset,
    cache: &mut RunCache,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, model, sgd) in ablation_variants(kind, base) {
        let row = match cache.get(base, &model, &sgd) {
            Some(done) => done.clone(),
            None => {
                let (row, _) = run_experiment(&name, &model, &sgd, base.init_seed, base.conv_std, data)?;
                cache.insert(base, &model, &sgd, row.clone());
                row
            }
        };
        rows.push(ExperimentResult { variant: name, ..row });
    }
    Ok(AblationTable { kind, rows })
}

//! End-to-end steps shared by the command-line tool and the experiments:
//! configuration, sample preparation, training arms, baselines, prediction
//! and sweeps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{BaselineError, BaselineSpec};
use crate::ingest::{
    forecast_inputs, make_samples, parse_logs_with_header_names, training_windows, IngestError,
    Level, LogTable, NormStats, Sample, SampleSpec,
};
use crate::model::{forward, Activation, Architecture, Mode, ModelError, ModelFile};
use crate::synth::SynthConfig;
use crate::train::{
    evaluate, transfer_train, Evaluation, ProgressEvent, RegionModelSet, Schedule, TrainConfig,
    TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("prediction for {item}/{region} has no y_true")]
    MissingTruth { item: String, region: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// True for problems with the configuration or flags rather than the data.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::Model(ModelError::InvalidArchitecture(_))
                | PipelineError::Train(TrainError::Config(_))
        )
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Network shape apart from the input dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub filter_sizes: Vec<usize>,
    pub pool_sizes: Vec<usize>,
    pub maps: Vec<usize>,
    pub dense_dim: usize,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            filter_sizes: vec![7, 4, 3],
            pool_sizes: vec![7, 4, 3],
            maps: vec![8, 8, 8],
            dense_dim: 64,
            dropout: 0.2,
        }
    }
}

impl ArchConfig {
    /// 128 maps per order and a 1024-unit dense layer.
    pub fn full_scale() -> Self {
        Self {
            maps: vec![128, 128, 128],
            dense_dim: 1024,
            ..Self::default()
        }
    }

    pub fn build(&self, num_slots: usize, rows: usize, window: usize) -> Architecture {
        Architecture {
            num_slots,
            rows,
            window,
            filter_sizes: self.filter_sizes.clone(),
            pool_sizes: self.pool_sizes.clone(),
            maps: self.maps.clone(),
            dense_dim: self.dense_dim,
            dropout: self.dropout,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub logs: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
}

/// One run's complete settings, as read from a JSON config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SampleSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    /// Forecast origin: the last day of input history. Defaults to the
    /// latest day that leaves a full horizon of data after it.
    pub forecast_start: Option<NaiveDate>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Checks everything that does not depend on the data, including that
    /// the architecture's shape chain stays positive for the window.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.window == 0 || d.horizon == 0 || d.stride == 0 {
            return Err(PipelineError::Config(
                "window, horizon and stride must be >= 1".into(),
            ));
        }
        self.train.validate()?;
        self.architecture(1).validate()?;
        Ok(())
    }

    pub fn architecture(&self, rows: usize) -> Architecture {
        self.arch
            .build(self.data.num_slots(), rows, self.data.window)
    }
}

pub fn load_table(logs: &Path, items: &Path) -> Result<LogTable> {
    let open = |p: &Path| {
        File::open(p)
            .map(BufReader::new)
            .map_err(|source| PipelineError::Io {
                path: p.to_path_buf(),
                source,
            })
    };
    Ok(parse_logs_with_header_names(open(logs)?, open(items)?)?)
}

/// Latest forecast origin whose whole horizon lies inside the table.
pub fn default_forecast_start(table: &LogTable, horizon: usize) -> Result<usize> {
    table.num_days().checked_sub(horizon + 1).ok_or_else(|| {
        PipelineError::Ingest(IngestError::InsufficientHistory(format!(
            "{} logged days leave no room for a {horizon}-day horizon",
            table.num_days()
        )))
    })
}

/// Day index of `date`, or the default origin when `None`.
pub fn resolve_forecast_start(
    table: &LogTable,
    date: Option<NaiveDate>,
    horizon: usize,
) -> Result<usize> {
    match date {
        None => default_forecast_start(table, horizon),
        Some(date) => match table.day_of(date) {
            Some(day) if day >= 0 && (day as usize) < table.num_days() => Ok(day as usize),
            _ => Err(PipelineError::Ingest(IngestError::InsufficientHistory(
                format!("forecast start {date} is outside the logged dates"),
            ))),
        },
    }
}

/// Normalized training and test samples for one forecast origin.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SampleSpec,
    pub forecast_start: usize,
    pub stats: NormStats,
    pub train: BTreeMap<String, Vec<Sample>>,
    /// One sample per (item, region) whose target window is in the data.
    pub test: BTreeMap<String, Vec<Sample>>,
}

/// Fits normalization on every training window, then builds the weighted
/// training samples and the test samples ending at `forecast_start`.
pub fn prepare(
    table: &LogTable,
    spec: &SampleSpec,
    forecast_start: usize,
    beta: f64,
) -> Result<Dataset> {
    let windows = training_windows(table, spec, forecast_start)?;
    let stats = crate::ingest::fit_norm_on_windows(table, spec, &windows)?;
    let train = make_samples(table, spec, forecast_start, beta, &stats)?;
    let mut test: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for input in forecast_inputs(table, spec, forecast_start, &stats)? {
        if let Some(sample) = input.to_sample() {
            test.entry(sample.frame.region_id.clone())
                .or_default()
                .push(sample);
        }
    }
    Ok(Dataset {
        spec: *spec,
        forecast_start,
        stats,
        train,
        test,
    })
}

/// Trains with `config` and evaluates on the dataset's test samples.
pub fn train_and_evaluate(
    table: &LogTable,
    data: &Dataset,
    arch_config: &ArchConfig,
    config: &TrainConfig,
    log: &mut dyn FnMut(ProgressEvent),
) -> Result<(RegionModelSet, Evaluation)> {
    let arch = arch_config.build(
        data.spec.num_slots(),
        table.num_indicators(),
        data.spec.window,
    );
    let models = transfer_train(&data.train, &arch, config, log)?;
    let test: BTreeMap<String, Vec<Sample>> = data
        .test
        .iter()
        .filter(|(r, _)| models.models.contains_key(*r))
        .map(|(r, s)| (r.clone(), s.clone()))
        .collect();
    let eval = evaluate(&models, &test)?;
    Ok((models, eval))
}

/// Evaluates a baseline on the same test cases as the network.
pub fn evaluate_baseline(
    table: &LogTable,
    data: &Dataset,
    spec: BaselineSpec,
) -> Result<Evaluation> {
    let mut pairs: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (region, samples) in &data.test {
        let list = pairs.entry(region.clone()).or_default();
        for s in samples {
            let series = table.sales_series(s.item_id(), region)?;
            let pred = spec.forecast(&series[..=data.forecast_start], data.spec.horizon)?;
            list.push((pred, s.target));
        }
    }
    Ok(Evaluation::from_pairs(&pairs)?)
}

/// Training settings of the named experiment arms.
pub fn arm_config(base: &TrainConfig, arm: Arm) -> TrainConfig {
    let mut c = base.clone();
    match arm {
        Arm::CnnWdTl => c.schedule = Schedule::Transfer,
        Arm::CnnWd => c.schedule = Schedule::RegionOnly,
        Arm::Cnn => {
            c.schedule = Schedule::RegionOnly;
            c.beta = 0.0;
        }
    }
    c
}

/// Network variants compared in the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Weight decay and pretraining on all regions.
    CnnWdTl,
    /// Weight decay, each region trained alone.
    CnnWd,
    /// No weight decay, each region trained alone.
    Cnn,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::CnnWdTl => "cnn_wd_tl",
            Arm::CnnWd => "cnn_wd",
            Arm::Cnn => "cnn",
        }
    }
}

/// `{methods: {name: {regions: {id: mse}, average}}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub methods: BTreeMap<String, Evaluation>,
}

/// One forecast as written to `predictions.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub item_id: String,
    pub region_id: String,
    pub forecast_start: NaiveDate,
    pub horizon: usize,
    pub y_pred: f64,
    pub y_true: Option<f64>,
}

/// Checks that a saved model can read frames built from `table`.
pub fn check_compatible(model: &ModelFile, table: &LogTable) -> Result<()> {
    if model.indicator_names != table.indicator_names() {
        return Err(PipelineError::Config(format!(
            "model expects indicators {:?}, data has {:?}",
            model.indicator_names,
            table.indicator_names()
        )));
    }
    let expected = Level::frame_slots(model.slot_order.contains(&Level::Supplier));
    if model.slot_order != expected {
        return Err(PipelineError::Config(format!(
            "unsupported slot order {:?}",
            model.slot_order
        )));
    }
    Ok(())
}

/// Forecasts every (item, region) at `forecast_start`, using the model
/// returned by `model_for` for each region.
pub fn predict_rows<'a>(
    table: &LogTable,
    forecast_start: usize,
    mut model_for: impl FnMut(&str) -> Result<&'a ModelFile>,
) -> Result<Vec<PredictionRow>> {
    let date = table.date_of(forecast_start).ok_or_else(|| {
        PipelineError::Config(format!("day {forecast_start} is outside the table"))
    })?;
    let mut rows = Vec::new();
    for region in table.regions() {
        let model = model_for(&region)?;
        check_compatible(model, table)?;
        let spec = SampleSpec {
            window: model.arch().window,
            horizon: model.horizon,
            stride: 1,
            include_supplier: model.slot_order.contains(&Level::Supplier),
        };
        let inputs = forecast_inputs(table, &spec, forecast_start, &model.norm)?;
        for input in inputs.iter().filter(|i| i.frame.region_id == region) {
            let (y_pred, _) = forward(&input.frame, &model.params, Mode::Eval)?;
            rows.push(PredictionRow {
                item_id: input.frame.item_id.clone(),
                region_id: region.clone(),
                forecast_start: date,
                horizon: spec.horizon,
                y_pred,
                y_true: input.target,
            });
        }
    }
    Ok(rows)
}

/// Baseline forecasts for every (item, region) with a full history of
/// `window` days at `forecast_start`.
pub fn baseline_rows(
    table: &LogTable,
    forecast_start: usize,
    horizon: usize,
    spec: BaselineSpec,
) -> Result<Vec<PredictionRow>> {
    let date = table.date_of(forecast_start).ok_or_else(|| {
        PipelineError::Config(format!("day {forecast_start} is outside the table"))
    })?;
    let mut rows = Vec::new();
    for region in table.regions() {
        for item in table.items_in_region(&region) {
            let series = table.sales_series(&item, &region)?;
            let y_pred = spec.forecast(&series[..=forecast_start], horizon)?;
            let y_true = series
                .get(forecast_start + 1..=forecast_start + horizon)
                .map(|w| w.iter().sum());
            rows.push(PredictionRow {
                item_id: item,
                region_id: region.clone(),
                forecast_start: date,
                horizon,
                y_pred,
                y_true,
            });
        }
    }
    Ok(rows)
}

/// Per-region MSE of prediction rows that carry a realized target.
pub fn evaluate_rows(rows: &[PredictionRow]) -> Result<Evaluation> {
    let mut pairs: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows {
        let y = row.y_true.ok_or_else(|| PipelineError::MissingTruth {
            item: row.item_id.clone(),
            region: row.region_id.clone(),
        })?;
        pairs
            .entry(row.region_id.clone())
            .or_default()
            .push((row.y_pred, y));
    }
    Ok(Evaluation::from_pairs(&pairs)?)
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Horizon,
    Window,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Horizon => "horizon",
            SweepParam::Window => "T",
            SweepParam::Beta => "beta",
        }
    }
}

/// One `param,value,region,mse` line; `mse` is `None` for a skipped point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub region: String,
    pub mse: Option<f64>,
}

/// Trains and evaluates `config` at every grid value. Horizon sweeps share
/// one forecast origin (room for the longest horizon) and report the MSE
/// of average daily sales, `MSE / horizon²`. Infeasible points produce a
/// single row with region `skipped`.
pub fn sweep(
    table: &LogTable,
    config: &RunConfig,
    param: SweepParam,
    grid: &[f64],
    log: &mut dyn FnMut(ProgressEvent),
) -> Result<Vec<SweepRow>> {
    let max_horizon = match param {
        SweepParam::Horizon => {
            grid.iter()
                .fold(config.data.horizon as f64, |a, &b| a.max(b)) as usize
        }
        _ => config.data.horizon,
    };
    let origin = match config.forecast_start {
        Some(date) => resolve_forecast_start(table, Some(date), max_horizon)?,
        None => default_forecast_start(table, max_horizon)?,
    };
    let mut rows = Vec::new();
    for &value in grid {
        let mut point = config.clone();
        let as_count = || -> Option<usize> {
            (value >= 1.0 && value.fract() == 0.0).then_some(value as usize)
        };
        let valid = match param {
            SweepParam::Horizon => as_count().map(|h| point.data.horizon = h).is_some(),
            SweepParam::Window => as_count().map(|t| point.data.window = t).is_some(),
            SweepParam::Beta => {
                point.train.beta = value;
                value >= 0.0 && value.is_finite()
            }
        };
        let outcome = if valid && point.validate().is_ok() {
            run_point(table, &point, origin, log)
        } else {
            Err(PipelineError::Config(format!(
                "{} = {value} is not a valid setting",
                param.name()
            )))
        };
        match outcome {
            Ok(eval) => {
                let scale = match param {
                    SweepParam::Horizon => (point.data.horizon * point.data.horizon) as f64,
                    _ => 1.0,
                };
                for (region, mse) in eval.regions {
                    rows.push(SweepRow {
                        param,
                        value,
                        region,
                        mse: Some(mse / scale),
                    });
                }
            }
            Err(e) if !matches!(e, PipelineError::Io { .. }) => rows.push(SweepRow {
                param,
                value,
                region: "skipped".into(),
                mse: None,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

fn run_point(
    table: &LogTable,
    config: &RunConfig,
    origin: usize,
    log: &mut dyn FnMut(ProgressEvent),
) -> Result<Evaluation> {
    let data = prepare(table, &config.data, origin, config.train.beta)?;
    let (_, eval) = train_and_evaluate(table, &data, &config.arch, &config.train, log)?;
    Ok(eval)
}

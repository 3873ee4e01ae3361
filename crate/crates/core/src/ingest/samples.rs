use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::frame::frame_from_dense;
use super::norm::normalize_in_place;
use super::{fit_norm, DataFrame, DenseIndex, IngestError, Level, LogTable, NormStats, Result};

/// Window geometry shared by training and forecasting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    /// Data Frame length `T` in days.
    pub window: usize,
    /// Days summed into the target.
    pub horizon: usize,
    /// Days between consecutive training end points.
    pub stride: usize,
    pub include_supplier: bool,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            window: 84,
            horizon: 7,
            stride: 1,
            include_supplier: false,
        }
    }
}

impl SampleSpec {
    pub fn num_slots(&self) -> usize {
        Level::frame_slots(self.include_supplier).len()
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(IngestError::Invalid(format!(
                "window ({}), horizon ({}) and stride ({}) must all be >= 1",
                self.window, self.horizon, self.stride
            )));
        }
        Ok(())
    }
}

/// Normalized Data Frame with its regression target and decay weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame: DataFrame,
    /// Raw sales summed over `(end_point, end_point + horizon]`.
    pub target: f64,
    pub weight: f64,
}

impl Sample {
    pub fn end_point(&self) -> usize {
        self.frame.end_point
    }

    pub fn item_id(&self) -> &str {
        &self.frame.item_id
    }

    pub fn region_id(&self) -> &str {
        &self.frame.region_id
    }
}

/// Identifies one training window before its frame is materialized.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct WindowKey {
    pub region_id: String,
    pub item_id: String,
    pub end_point: usize,
}

/// `exp(beta * (end_point + horizon - forecast_start))`. The target window
/// `(end_point, end_point + horizon]` must end no later than
/// `forecast_start`, the origin of the forecast interval.
pub fn sample_weight(
    end_point: i64,
    horizon: usize,
    forecast_start: i64,
    beta: f64,
) -> Result<f64> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(IngestError::Invalid(format!(
            "decay beta must be finite and >= 0, got {beta}"
        )));
    }
    let offset = end_point + horizon as i64 - forecast_start;
    if offset > 0 {
        return Err(IngestError::Invalid(format!(
            "end point {end_point} with horizon {horizon} overlaps the forecast interval starting after day {forecast_start}"
        )));
    }
    Ok((beta * offset as f64).exp())
}

fn target_sum(
    dense: &DenseIndex,
    region: usize,
    item: usize,
    end_point: usize,
    horizon: usize,
) -> f64 {
    dense.series(region, Level::Item, item, 0)[end_point + 1..=end_point + horizon]
        .iter()
        .sum()
}

/// Admissible training windows grouped by region. End points descend from
/// `forecast_start - horizon` by `stride` while both the full history and the
/// full target window lie inside the table.
pub fn training_windows(
    table: &LogTable,
    spec: &SampleSpec,
    forecast_start: usize,
) -> Result<BTreeMap<String, Vec<WindowKey>>> {
    spec.validate()?;
    let dense = table.dense();
    let days = dense.num_days();
    let mut out = BTreeMap::new();
    let mut total = 0;
    for (ri, region) in dense.regions.iter().enumerate() {
        let mut keys = Vec::new();
        for (ii, item) in dense.items.iter().enumerate() {
            if !dense.present[ri][ii] {
                continue;
            }
            let Some(mut ep) = forecast_start.checked_sub(spec.horizon) else {
                continue;
            };
            loop {
                if ep + 1 < spec.window {
                    break;
                }
                if ep + spec.horizon < days {
                    keys.push(WindowKey {
                        region_id: region.clone(),
                        item_id: item.clone(),
                        end_point: ep,
                    });
                }
                match ep.checked_sub(spec.stride) {
                    Some(next) => ep = next,
                    None => break,
                }
            }
        }
        total += keys.len();
        out.insert(region.clone(), keys);
    }
    if total == 0 {
        return Err(IngestError::NoSamples);
    }
    Ok(out)
}

fn raw_frame(dense: &DenseIndex, key: &WindowKey, spec: &SampleSpec) -> DataFrame {
    let ri = dense
        .region_index(&key.region_id)
        .expect("window from this table");
    let ii = dense
        .item_index(&key.item_id)
        .expect("window from this table");
    frame_from_dense(
        dense,
        ri,
        ii,
        key.end_point,
        spec.window,
        spec.include_supplier,
    )
}

/// Fits z-score statistics on the raw frames of all `windows`, pooled over
/// regions.
pub fn fit_norm_on_windows(
    table: &LogTable,
    spec: &SampleSpec,
    windows: &BTreeMap<String, Vec<WindowKey>>,
) -> Result<NormStats> {
    let dense = table.dense();
    let frames = windows
        .values()
        .flatten()
        .map(|k| raw_frame(dense, k, spec));
    fit_norm(frames)
}

/// Builds normalized, weighted training samples grouped by region.
pub fn make_samples(
    table: &LogTable,
    spec: &SampleSpec,
    forecast_start: usize,
    beta: f64,
    stats: &NormStats,
) -> Result<BTreeMap<String, Vec<Sample>>> {
    let windows = training_windows(table, spec, forecast_start)?;
    samples_for_windows(table, spec, forecast_start, beta, stats, &windows)
}

pub(crate) fn samples_for_windows(
    table: &LogTable,
    spec: &SampleSpec,
    forecast_start: usize,
    beta: f64,
    stats: &NormStats,
    windows: &BTreeMap<String, Vec<WindowKey>>,
) -> Result<BTreeMap<String, Vec<Sample>>> {
    let dense = table.dense();
    let mut out = BTreeMap::new();
    for (region, keys) in windows {
        let mut samples = Vec::with_capacity(keys.len());
        for key in keys {
            let mut frame = raw_frame(dense, key, spec);
            normalize_in_place(&mut frame, stats)?;
            let ri = dense.region_index(&key.region_id).unwrap();
            let ii = dense.item_index(&key.item_id).unwrap();
            samples.push(Sample {
                frame,
                target: target_sum(dense, ri, ii, key.end_point, spec.horizon),
                weight: sample_weight(
                    key.end_point as i64,
                    spec.horizon,
                    forecast_start as i64,
                    beta,
                )?,
            });
        }
        out.insert(region.clone(), samples);
    }
    Ok(out)
}

/// Normalized frame ending at the forecast origin, with the realized target
/// when the data covers the whole forecast interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastInput {
    pub frame: DataFrame,
    pub target: Option<f64>,
}

impl ForecastInput {
    /// Evaluation sample (unit weight); `None` without a realized target.
    pub fn to_sample(&self) -> Option<Sample> {
        self.target.map(|target| Sample {
            frame: self.frame.clone(),
            target,
            weight: 1.0,
        })
    }
}

/// One input per logged (item, region), ordered by region then item. Frames
/// end at `forecast_start`; targets cover `(forecast_start, forecast_start + horizon]`.
pub fn forecast_inputs(
    table: &LogTable,
    spec: &SampleSpec,
    forecast_start: usize,
    stats: &NormStats,
) -> Result<Vec<ForecastInput>> {
    spec.validate()?;
    let dense = table.dense();
    let days = dense.num_days();
    if forecast_start + 1 < spec.window || forecast_start >= days {
        return Err(IngestError::InsufficientHistory(format!(
            "a {}-day window ending at day {forecast_start} does not fit in {days} logged days",
            spec.window
        )));
    }
    let mut out = Vec::new();
    for ri in 0..dense.regions.len() {
        for ii in 0..dense.items.len() {
            if !dense.present[ri][ii] {
                continue;
            }
            let mut frame = frame_from_dense(
                dense,
                ri,
                ii,
                forecast_start,
                spec.window,
                spec.include_supplier,
            );
            normalize_in_place(&mut frame, stats)?;
            let target = (forecast_start + spec.horizon < days)
                .then(|| target_sum(dense, ri, ii, forecast_start, spec.horizon));
            out.push(ForecastInput { frame, target });
        }
    }
    Ok(out)
}

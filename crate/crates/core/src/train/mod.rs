//! Weighted-MSE training with Adamax, the pretrain/fine-tune schedule, and
//! per-region evaluation.

mod adamax;
mod schedule;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Sample;
use crate::model::{forward, Mode, ModelError, ModelParams};

pub use adamax::{adamax_step, AdamaxConfig, AdamaxState};
pub use schedule::{
    train_epoch, transfer_train, Phase, ProgressEvent, RegionModel, RegionModelSet, TrainRngs,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite gradient in tensor `{tensor}` (flat index {index})")]
    NonFiniteGradient { tensor: String, index: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no samples: {0}")]
    Empty(String),
    #[error("no model for region `{0}`")]
    MissingModel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Pretrain on all regions, then fine-tune a copy per region; or train each
/// region from scratch with the same epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Transfer,
    RegionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Sample weight decay rate.
    pub beta: f64,
    pub optimizer: AdamaxConfig,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            pretrain_epochs: 10,
            finetune_epochs: 10,
            beta: 0.02,
            optimizer: AdamaxConfig::default(),
            seed: 0,
            schedule: Schedule::Transfer,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(TrainError::Config(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        self.optimizer.validate()
    }
}

/// `Σ wᵢ (yᵢ - ŷᵢ)²`.
pub fn weighted_mse(predictions: &[f64], targets: &[f64], weights: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() || targets.len() != weights.len() {
        return Err(TrainError::Length(format!(
            "{} predictions, {} targets, {} weights",
            predictions.len(),
            targets.len(),
            weights.len()
        )));
    }
    if predictions.is_empty() {
        return Err(TrainError::Empty(
            "weighted_mse needs at least one sample".into(),
        ));
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((p, y), w)| w * (y - p) * (y - p))
        .sum())
}

/// Eval-mode predictions, in sample order.
pub fn predict(params: &ModelParams, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| Ok(forward(&s.frame, params, Mode::Eval)?.0))
        .collect()
}

/// Per-region mean squared error and their unweighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub regions: BTreeMap<String, f64>,
    pub average: f64,
}

impl Evaluation {
    /// Builds from `(prediction, target)` pairs grouped by region.
    pub fn from_pairs(pairs: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(TrainError::Empty("no regions to evaluate".into()));
        }
        let mut regions = BTreeMap::new();
        for (region, list) in pairs {
            if list.is_empty() {
                return Err(TrainError::Empty(format!(
                    "region `{region}` has no test samples"
                )));
            }
            let sse: f64 = list.iter().map(|(p, y)| (y - p) * (y - p)).sum();
            regions.insert(region.clone(), sse / list.len() as f64);
        }
        let average = regions.values().sum::<f64>() / regions.len() as f64;
        Ok(Self { regions, average })
    }
}

/// Evaluates each region's model on that region's test samples.
pub fn evaluate(
    models: &RegionModelSet,
    test: &BTreeMap<String, Vec<Sample>>,
) -> Result<Evaluation> {
    let mut pairs = BTreeMap::new();
    for (region, samples) in test {
        let model = models
            .models
            .get(region)
            .ok_or_else(|| TrainError::MissingModel(region.clone()))?;
        let preds = predict(&model.params, samples)?;
        pairs.insert(
            region.clone(),
            preds
                .into_iter()
                .zip(samples.iter().map(|s| s.target))
                .collect(),
        );
    }
    Evaluation::from_pairs(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_mse_examples() {
        assert_eq!(
            weighted_mse(&[1.0, 2.0], &[1.0, 2.0], &[0.3, 0.9]).unwrap(),
            0.0
        );
        assert_eq!(weighted_mse(&[4.0], &[1.0], &[2.0]).unwrap(), 18.0);
        let (p, y) = ([0.5, 2.0, -1.0], [1.0, 0.0, 2.0]);
        let plain: f64 = p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_eq!(weighted_mse(&p, &y, &[1.0; 3]).unwrap(), plain);
        assert!(matches!(
            weighted_mse(&[1.0], &[1.0, 2.0], &[1.0]),
            Err(TrainError::Length(_))
        ));
    }

    #[test]
    fn evaluation_examples() {
        let mut pairs = BTreeMap::new();
        pairs.insert("r1".to_string(), vec![(1.0, 2.0), (0.0, 3.0)]);
        pairs.insert("r2".to_string(), vec![(4.0, 4.0)]);
        let e = Evaluation::from_pairs(&pairs).unwrap();
        assert_eq!(e.regions["r1"], 5.0);
        assert_eq!(e.regions["r2"], 0.0);
        assert_eq!(e.average, 2.5);
        pairs.insert("r3".to_string(), vec![]);
        assert!(matches!(
            Evaluation::from_pairs(&pairs),
            Err(TrainError::Empty(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            beta: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

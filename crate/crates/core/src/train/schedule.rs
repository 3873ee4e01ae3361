use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{adamax_step, AdamaxState, Result, Schedule, TrainConfig, TrainError};
use crate::ingest::Sample;
use crate::model::{backward_accumulate, forward, init_params, Architecture, Mode, ModelParams};

// Samples per gradient partial sum. Fixed so the reduction order does not
// depend on the thread count.
const GRAD_CHUNK: usize = 16;

/// Independent generator streams for shuffling and dropout masks.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        let shuffle = ChaCha8Rng::seed_from_u64(seed);
        let mut dropout = ChaCha8Rng::seed_from_u64(seed);
        dropout.set_stream(1);
        Self { shuffle, dropout }
    }
}

/// One pass over `samples` in shuffled mini-batches, one Adamax step per
/// batch. Returns `Σ wᵢ (ŷᵢ - yᵢ)²` over the epoch, using the predictions
/// made before each batch's update.
pub fn train_epoch(
    samples: &[&Sample],
    params: &mut ModelParams,
    state: &mut AdamaxState,
    batch_size: usize,
    rngs: &mut TrainRngs,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::Empty(
            "cannot train an epoch on zero samples".into(),
        ));
    }
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rngs.shuffle);
    let mut epoch_loss = 0.0;
    for batch in order.chunks(batch_size) {
        let seeds: Vec<u64> = batch.iter().map(|_| rngs.dropout.random()).collect();
        let current: &ModelParams = params;
        let partials = batch
            .par_chunks(GRAD_CHUNK)
            .zip(seeds.par_chunks(GRAD_CHUNK))
            .map(|(idx, seeds)| {
                let mut grads = current.zeros_like();
                let mut loss = 0.0;
                for (&i, &seed) in idx.iter().zip(seeds) {
                    let sample = samples[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let (pred, trace) = forward(&sample.frame, current, Mode::Train(&mut rng))?;
                    let residual = pred - sample.target;
                    loss += sample.weight * residual * residual;
                    let trace = trace.expect("train mode records a trace");
                    backward_accumulate(
                        &trace,
                        current,
                        2.0 * sample.weight * residual,
                        &mut grads,
                        None,
                    )?;
                }
                Ok((grads, loss))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut partials = partials.into_iter();
        let (mut grads, mut loss) = partials.next().expect("non-empty batch");
        for (g, l) in partials {
            for (a, b) in grads.values_mut().iter_mut().zip(g.values()) {
                *a += b;
            }
            loss += l;
        }
        epoch_loss += loss;
        adamax_step(params, &grads, state)?;
    }
    Ok(epoch_loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressEvent {
    pub phase: Phase,
    /// `None` for the pooled pretraining phase.
    pub region: Option<String>,
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
}

impl fmt::Display for ProgressEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let phase = match self.phase {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        };
        write!(
            f,
            "phase={phase} region={} epoch={} loss={}",
            self.region.as_deref().unwrap_or("all"),
            self.epoch,
            self.loss
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionModel {
    pub params: ModelParams,
    /// Epoch losses of the phases run for this model, in order.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionModelSet {
    pub arch: Architecture,
    /// The pooled model fine-tuning started from; absent for region-only runs.
    pub pretrained: Option<RegionModel>,
    pub models: BTreeMap<String, RegionModel>,
    /// Regions that produced no model, with the reason.
    pub failed: BTreeMap<String, String>,
}

fn run_phase(
    samples: &[&Sample],
    params: &mut ModelParams,
    epochs: usize,
    config: &TrainConfig,
    rng_seed: u64,
    phase: Phase,
    region: Option<&str>,
    log: &mut dyn FnMut(ProgressEvent),
) -> Result<Vec<f64>> {
    let mut state = AdamaxState::new(params, config.optimizer);
    let mut rngs = TrainRngs::new(rng_seed);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let loss = train_epoch(samples, params, &mut state, config.batch_size, &mut rngs)?;
        history.push(loss);
        log(ProgressEvent {
            phase,
            region: region.map(str::to_string),
            epoch,
            loss,
        });
    }
    Ok(history)
}

fn pretrain_seed(seed: u64) -> u64 {
    seed
}

fn finetune_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x5851_f42d_4c95_7f2d)
}

/// Trains one model per region.
///
/// With [`Schedule::Transfer`], a model initialized from `config.seed` is
/// trained on every region's samples pooled in region order, then copied
/// and fine-tuned on each region with a fresh optimizer state. With
/// [`Schedule::RegionOnly`] each region runs the same two phases on its own
/// samples only, starting from the same initialization.
///
/// Regions without samples, or whose training fails, are listed in
/// `failed`; the rest proceed. Progress events are delivered in a
/// deterministic order: pretraining, then regions in key order.
pub fn transfer_train(
    per_region: &BTreeMap<String, Vec<Sample>>,
    arch: &Architecture,
    config: &TrainConfig,
    log: &mut dyn FnMut(ProgressEvent),
) -> Result<RegionModelSet> {
    config.validate()?;
    arch.validate()?;
    let mut failed = BTreeMap::new();
    let mut trainable = Vec::new();
    for (region, samples) in per_region {
        if samples.is_empty() {
            failed.insert(region.clone(), "no training samples".to_string());
        } else {
            trainable.push((region.as_str(), samples.iter().collect::<Vec<&Sample>>()));
        }
    }
    if trainable.is_empty() {
        return Err(TrainError::Empty("no region has training samples".into()));
    }

    let mut init = init_params(arch, config.seed)?;
    let pretrained = match config.schedule {
        Schedule::Transfer => {
            let pooled: Vec<&Sample> = trainable
                .iter()
                .flat_map(|(_, s)| s.iter().copied())
                .collect();
            let history = run_phase(
                &pooled,
                &mut init,
                config.pretrain_epochs,
                config,
                pretrain_seed(config.seed),
                Phase::Pretrain,
                None,
                log,
            )?;
            Some(RegionModel {
                params: init.clone(),
                history,
            })
        }
        Schedule::RegionOnly => None,
    };

    let results: Vec<(String, Result<(RegionModel, Vec<ProgressEvent>)>)> = trainable
        .par_iter()
        .map(|(region, samples)| {
            let mut events = Vec::new();
            let mut sink = |e: ProgressEvent| events.push(e);
            let mut params = init.clone();
            let result = (|| {
                let mut history = Vec::new();
                if config.schedule == Schedule::RegionOnly {
                    history = run_phase(
                        samples,
                        &mut params,
                        config.pretrain_epochs,
                        config,
                        pretrain_seed(config.seed),
                        Phase::Pretrain,
                        Some(region),
                        &mut sink,
                    )?;
                }
                history.extend(run_phase(
                    samples,
                    &mut params,
                    config.finetune_epochs,
                    config,
                    finetune_seed(config.seed),
                    Phase::Finetune,
                    Some(region),
                    &mut sink,
                )?);
                Ok(history)
            })();
            let out = result.map(|history| (RegionModel { params, history }, events));
            (region.to_string(), out)
        })
        .collect();

    let mut models = BTreeMap::new();
    for (region, result) in results {
        match result {
            Ok((model, events)) => {
                events.into_iter().for_each(&mut *log);
                models.insert(region, model);
            }
            Err(e) => {
                failed.insert(region, e.to_string());
            }
        }
    }
    Ok(RegionModelSet {
        arch: arch.clone(),
        pretrained,
        models,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{DataFrame, IndicatorMatrix, Level};
    use crate::model::Activation;
    use crate::numops::Matrix;
    use crate::train::AdamaxConfig;

    fn arch() -> Architecture {
        Architecture {
            num_slots: 2,
            rows: 2,
            window: 10,
            filter_sizes: vec![3],
            pool_sizes: vec![2],
            maps: vec![2],
            dense_dim: 3,
            dropout: 0.2,
            activation: Activation::Relu,
        }
    }

    fn samples(n: usize, region: &str, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = arch();
        (0..n)
            .map(|i| {
                let slots: Vec<IndicatorMatrix> = (0..a.num_slots)
                    .map(|_| IndicatorMatrix {
                        values: Matrix::from_vec(
                            a.rows,
                            a.window,
                            (0..a.rows * a.window)
                                .map(|_| rng.random_range(-1.0..1.0))
                                .collect(),
                        )
                        .unwrap(),
                        level: Level::Item,
                        key: format!("i{i}"),
                    })
                    .collect();
                let target = slots[0].values.row(0).iter().map(|v| v + 1.0).sum::<f64>();
                Sample {
                    frame: DataFrame {
                        slots,
                        item_id: format!("i{i}"),
                        region_id: region.into(),
                        end_point: 9,
                    },
                    target,
                    weight: 1.0 - i as f64 / (2 * n) as f64,
                }
            })
            .collect()
    }

    fn epoch_losses(
        config: &TrainConfig,
        data: &[Sample],
        epochs: usize,
    ) -> (Vec<f64>, ModelParams) {
        let refs: Vec<&Sample> = data.iter().collect();
        let mut p = init_params(&arch(), config.seed).unwrap();
        let mut s = AdamaxState::new(&p, config.optimizer);
        let mut rngs = TrainRngs::new(config.seed);
        let losses = (0..epochs)
            .map(|_| train_epoch(&refs, &mut p, &mut s, config.batch_size, &mut rngs).unwrap())
            .collect();
        (losses, p)
    }

    #[test]
    fn frozen_optimizer_keeps_parameters() {
        let config = TrainConfig {
            optimizer: AdamaxConfig {
                alpha: 0.0,
                ..Default::default()
            },
            batch_size: 4,
            ..Default::default()
        };
        let data = samples(10, "r", 1);
        let (losses, p) = epoch_losses(&config, &data, 3);
        assert_eq!(p, init_params(&arch(), 0).unwrap());
        // A zero head predicts 0 regardless of dropout.
        let initial: f64 = data.iter().map(|s| s.weight * s.target * s.target).sum();
        assert!((losses[0] - initial).abs() < 1e-9 * initial);
        assert!(losses.iter().all(|&l| l == losses[0]));
    }

    #[test]
    fn singleton_overfits() {
        let config = TrainConfig {
            optimizer: AdamaxConfig {
                alpha: 0.05,
                ..Default::default()
            },
            ..Default::default()
        };
        let data = samples(1, "r", 2);
        let (losses, _) = epoch_losses(&config, &data, 50);
        assert!(losses[49] * 100.0 <= losses[0], "{losses:?}");
    }

    #[test]
    fn epochs_are_deterministic() {
        let config = TrainConfig {
            batch_size: 3,
            seed: 9,
            ..Default::default()
        };
        let data = samples(11, "r", 3);
        let (a, pa) = epoch_losses(&config, &data, 4);
        let (b, pb) = epoch_losses(&config, &data, 4);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(pa, pb);
    }

    fn two_regions(same: bool) -> BTreeMap<String, Vec<Sample>> {
        let mut map = BTreeMap::new();
        map.insert("r1".to_string(), samples(6, "r1", 4));
        map.insert("r2".to_string(), samples(6, "r2", if same { 4 } else { 5 }));
        map
    }

    #[test]
    fn zero_finetune_inherits_pretrained() {
        let config = TrainConfig {
            pretrain_epochs: 2,
            finetune_epochs: 0,
            batch_size: 4,
            ..Default::default()
        };
        let mut lines = Vec::new();
        let set = transfer_train(&two_regions(false), &arch(), &config, &mut |e| {
            lines.push(e.to_string())
        })
        .unwrap();
        let pre = &set.pretrained.as_ref().unwrap().params;
        assert!(set.models.values().all(|m| &m.params == pre));
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("phase=pretrain region=all epoch=1 loss="));
    }

    #[test]
    fn identical_regions_get_identical_models() {
        let config = TrainConfig {
            pretrain_epochs: 1,
            finetune_epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        for schedule in [Schedule::Transfer, Schedule::RegionOnly] {
            let config = TrainConfig {
                schedule,
                ..config.clone()
            };
            let set = transfer_train(&two_regions(true), &arch(), &config, &mut |_| {}).unwrap();
            assert_eq!(set.models["r1"], set.models["r2"]);
        }
    }

    #[test]
    fn empty_region_fails_alone() {
        let mut data = two_regions(false);
        data.insert("r3".to_string(), Vec::new());
        let config = TrainConfig {
            pretrain_epochs: 1,
            finetune_epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let mut lines = Vec::new();
        let set =
            transfer_train(&data, &arch(), &config, &mut |e| lines.push(e.to_string())).unwrap();
        assert_eq!(set.models.len(), 2);
        assert!(set.failed.contains_key("r3"));
        assert_eq!(
            lines
                .iter()
                .map(|l| l.split(" loss=").next().unwrap())
                .collect::<Vec<_>>(),
            [
                "phase=pretrain region=all epoch=1",
                "phase=finetune region=r1 epoch=1",
                "phase=finetune region=r2 epoch=1"
            ]
        );
    }

    #[test]
    fn region_only_logs_both_phases_per_region() {
        let config = TrainConfig {
            pretrain_epochs: 1,
            finetune_epochs: 1,
            batch_size: 4,
            schedule: Schedule::RegionOnly,
            ..Default::default()
        };
        let mut lines = Vec::new();
        let set = transfer_train(&two_regions(false), &arch(), &config, &mut |e| {
            lines.push(e.to_string())
        })
        .unwrap();
        assert!(set.pretrained.is_none());
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("phase=pretrain region=r1"));
        assert!(lines[1].starts_with("phase=finetune region=r1"));
        assert_eq!(set.models["r1"].history.len(), 2);
    }
}

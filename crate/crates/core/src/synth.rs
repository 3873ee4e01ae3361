//! Seeded synthetic commodity logs with weekly seasonality, trend,
//! promotions and coupled browsing indicators.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DATE_FORMAT;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("no series for item `{item}` in region `{region}`")]
    UnknownSeries { item: String, region: String },
    #[error("days {first}..{end} fall outside the generated {num_days} days")]
    OutOfRange {
        first: usize,
        end: usize,
        num_days: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Names of the built-in indicators, in column order.
pub const INDICATORS: [&str; 8] = ["sales", "pv", "spv", "uv", "suv", "pay", "gmv", "cart"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_regions: usize,
    pub num_items: usize,
    pub num_brands: usize,
    pub num_categories: usize,
    pub num_suppliers: usize,
    pub num_days: usize,
    pub num_indicators: usize,
    /// Relative standard deviation of daily sales noise.
    pub noise: f64,
    /// Probability that a given (item, region, day) is a promotion day.
    pub promo_rate: f64,
    /// Average daily sales of a typical item.
    pub base_level: f64,
    pub seed: u64,
    pub start_date: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_regions: 5,
            num_items: 60,
            num_brands: 12,
            num_categories: 6,
            num_suppliers: 8,
            num_days: 240,
            num_indicators: 8,
            noise: 0.15,
            promo_rate: 0.03,
            base_level: 6.0,
            seed: 0,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.num_regions == 0 || self.num_categories == 0 || self.num_suppliers == 0 {
            return bad("regions, categories and suppliers must be >= 1");
        }
        if self.num_brands == 0 || self.num_items < self.num_brands {
            return bad("need num_items >= num_brands >= 1");
        }
        if self.num_days == 0 || self.num_indicators == 0 {
            return bad("num_days and num_indicators must be >= 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.promo_rate) {
            return bad("promo_rate must lie in [0, 1]");
        }
        if !(self.base_level > 0.0 && self.base_level.is_finite()) {
            return bad("base_level must be positive");
        }
        if self
            .start_date
            .checked_add_days(Days::new(self.num_days as u64))
            .is_none()
        {
            return bad("date range overflows the calendar");
        }
        Ok(())
    }

    pub fn indicator_names(&self) -> Vec<String> {
        (0..self.num_indicators)
            .map(|i| {
                INDICATORS
                    .get(i)
                    .map_or_else(|| format!("ind{}", i + 1), |s| s.to_string())
            })
            .collect()
    }

    pub fn item_id(&self, i: usize) -> String {
        format!("item{:0w$}", i + 1, w = digits(self.num_items))
    }

    pub fn region_id(&self, r: usize) -> String {
        format!("r{}", r + 1)
    }
}

fn digits(n: usize) -> usize {
    n.to_string().len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Promotion {
    pub day: usize,
    pub lift: f64,
    pub discount: f64,
}

/// Generating parameters of one (item, region) sales series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesTruth {
    pub item_id: String,
    pub region_id: String,
    pub base: f64,
    /// Multipliers indexed by `day % 7`.
    pub season: [f64; 7],
    /// Relative change per day.
    pub trend: f64,
    pub unit_price: f64,
    pub promotions: Vec<Promotion>,
}

impl SeriesTruth {
    /// `base · season[day % 7] · (1 + trend·day) · lift`.
    pub fn expected_sales(&self, day: usize) -> f64 {
        let lift = self
            .promotions
            .iter()
            .find(|p| p.day == day)
            .map_or(1.0, |p| p.lift);
        self.base * self.season[day % 7] * (1.0 + self.trend * day as f64) * lift
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub start_date: NaiveDate,
    pub num_days: usize,
    pub series: Vec<SeriesTruth>,
}

impl GroundTruth {
    pub fn series(&self, item: &str, region: &str) -> Option<&SeriesTruth> {
        self.series
            .iter()
            .find(|s| s.item_id == item && s.region_id == region)
    }
}

/// Sum of noiseless expected sales over days `first .. first + horizon`.
pub fn oracle_forecast(
    truth: &GroundTruth,
    item: &str,
    region: &str,
    first: usize,
    horizon: usize,
) -> Result<f64> {
    let series = truth
        .series(item, region)
        .ok_or_else(|| SynthError::UnknownSeries {
            item: item.to_string(),
            region: region.to_string(),
        })?;
    let end = first + horizon;
    if end > truth.num_days {
        return Err(SynthError::OutOfRange {
            first,
            end,
            num_days: truth.num_days,
        });
    }
    Ok((first..end).map(|d| series.expected_sales(d)).sum())
}

/// Generated logs and attributes in the ingest CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub logs_csv: String,
    pub items_csv: String,
    pub truth: GroundTruth,
}

impl SynthOutput {
    pub fn num_rows(&self) -> usize {
        self.logs_csv.lines().count().saturating_sub(1)
    }

    /// Writes `logs.csv`, `items.csv` and `truth.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("logs.csv"), &self.logs_csv)?;
        fs::write(dir.join("items.csv"), &self.items_csv)?;
        fs::write(
            dir.join("truth.json"),
            serde_json::to_string_pretty(&self.truth)?,
        )?;
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Weekly profile `1 + amp·sin(2π(d + phase)/7)`, rescaled to mean 1.
fn weekly_profile(amp: f64, phase: f64, sharpness: f64) -> [f64; 7] {
    let mut s = [0.0; 7];
    for (d, v) in s.iter_mut().enumerate() {
        *v = (1.0 + amp * (TAU * (d as f64 + phase) / 7.0).sin()).powf(sharpness);
    }
    let mean = s.iter().sum::<f64>() / 7.0;
    s.iter_mut().for_each(|v| *v /= mean);
    s
}

struct Coupling {
    pv_per_sale: f64,
    browse: f64,
    search_share: f64,
    uv_ratio: f64,
    cart_ratio: f64,
}

/// Deterministic under `config.seed`. Items map to brand `i % brands`,
/// category `i % categories` and supplier `i % suppliers`.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let region_level: Vec<f64> = (0..config.num_regions)
        .map(|_| uniform(&mut rng, 0.6, 1.4))
        .collect();
    let region_shape: Vec<f64> = (0..config.num_regions)
        .map(|_| uniform(&mut rng, 0.7, 1.3))
        .collect();
    let region_trend: Vec<f64> = (0..config.num_regions)
        .map(|_| uniform(&mut rng, -0.2, 0.2))
        .collect();
    let brand_level: Vec<f64> = (0..config.num_brands)
        .map(|_| uniform(&mut rng, 0.7, 1.5))
        .collect();
    let brand_trend: Vec<f64> = (0..config.num_brands)
        .map(|_| uniform(&mut rng, -0.3, 0.6))
        .collect();
    let category: Vec<(f64, f64, f64)> = (0..config.num_categories)
        .map(|_| {
            (
                uniform(&mut rng, 0.8, 1.2),
                uniform(&mut rng, 0.1, 0.45),
                uniform(&mut rng, 0.0, 7.0),
            )
        })
        .collect();
    let items: Vec<(f64, f64, Coupling)> = (0..config.num_items)
        .map(|_| {
            (
                uniform(&mut rng, 0.5, 1.5),
                uniform(&mut rng, 5.0, 80.0),
                Coupling {
                    pv_per_sale: uniform(&mut rng, 8.0, 15.0),
                    browse: uniform(&mut rng, 5.0, 30.0),
                    search_share: uniform(&mut rng, 0.2, 0.5),
                    uv_ratio: uniform(&mut rng, 0.4, 0.7),
                    cart_ratio: uniform(&mut rng, 1.2, 2.0),
                },
            )
        })
        .collect();

    let days = config.num_days as f64;
    let mut series = Vec::with_capacity(config.num_items * config.num_regions);
    let mut couplings = Vec::with_capacity(series.capacity());
    for r in 0..config.num_regions {
        for (i, (item_level, price, coupling)) in items.iter().enumerate() {
            let (b, c) = (i % config.num_brands, i % config.num_categories);
            let (cat_level, amp, phase) = category[c];
            let mut srng = ChaCha8Rng::seed_from_u64(config.seed);
            srng.set_stream(1 + (r * config.num_items + i) as u64);
            let promotions = (0..config.num_days)
                .filter_map(|day| {
                    (config.promo_rate > 0.0 && srng.random_bool(config.promo_rate)).then(|| {
                        Promotion {
                            day,
                            lift: uniform(&mut srng, 2.0, 5.0),
                            discount: uniform(&mut srng, 0.1, 0.4),
                        }
                    })
                })
                .collect();
            series.push(SeriesTruth {
                item_id: config.item_id(i),
                region_id: config.region_id(r),
                base: config.base_level * region_level[r] * brand_level[b] * cat_level * item_level,
                season: weekly_profile(amp, phase, region_shape[r]),
                trend: (brand_trend[b] + region_trend[r]) / days,
                unit_price: (price * 100.0).round() / 100.0,
                promotions,
            });
            couplings.push((coupling, srng));
        }
    }

    let names = config.indicator_names();
    let mut logs = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["date".to_string(), "item_id".into(), "region_id".into()];
    header.extend(names.iter().cloned());
    logs.write_record(&header)?;
    let sigma = config.noise;
    let mut row = Vec::with_capacity(header.len());
    for day in 0..config.num_days {
        let date = config.start_date + Days::new(day as u64);
        let date = date.format(DATE_FORMAT).to_string();
        for (truth, (coupling, srng)) in series.iter().zip(couplings.iter_mut()) {
            let expected = truth.expected_sales(day);
            let sales = (expected * (1.0 + sigma * gauss(srng))).max(0.0).round();
            let discount = truth
                .promotions
                .iter()
                .find(|p| p.day == day)
                .map_or(0.0, |p| p.discount);
            let pay = (truth.unit_price * (1.0 - discount) * 100.0).round() / 100.0;
            let wobble =
                |rng: &mut ChaCha8Rng, scale: f64| scale * (1.0 + sigma * gauss(rng)).max(0.0);
            let pv = (coupling.pv_per_sale * (sales + (0.5 + 0.3 * expected.sqrt()) * gauss(srng))
                + coupling.browse * (1.0 + 0.3 * gauss(srng)))
            .max(0.0)
            .round();
            let spv = wobble(srng, pv * coupling.search_share).round();
            let uv = wobble(srng, pv * coupling.uv_ratio).round();
            let suv = wobble(srng, spv * coupling.uv_ratio).round();
            let gmv = sales * pay * (1.0 + sigma / 3.0 * gauss(srng)).max(0.0);
            let cart = wobble(srng, sales * coupling.cart_ratio + 1.0).round();
            let values = [sales, pv, spv, uv, suv, pay, gmv, cart];

            row.clear();
            row.push(date.clone());
            row.push(truth.item_id.clone());
            row.push(truth.region_id.clone());
            for k in 0..config.num_indicators {
                let v = match values.get(k) {
                    Some(&v) => v,
                    None => wobble(srng, sales * (0.5 + 0.1 * k as f64) + 1.0).round(),
                };
                row.push(v.to_string());
            }
            logs.write_record(&row)?;
        }
    }

    let mut items_csv = csv::Writer::from_writer(Vec::new());
    items_csv.write_record(["item_id", "brand_id", "category_id", "supplier_id"])?;
    for i in 0..config.num_items {
        items_csv.write_record([
            config.item_id(i),
            format!(
                "b{:0w$}",
                i % config.num_brands + 1,
                w = digits(config.num_brands)
            ),
            format!(
                "c{:0w$}",
                i % config.num_categories + 1,
                w = digits(config.num_categories)
            ),
            format!(
                "s{:0w$}",
                i % config.num_suppliers + 1,
                w = digits(config.num_suppliers)
            ),
        ])?;
    }

    let into_string = |w: csv::Writer<Vec<u8>>| -> Result<String> {
        let bytes = w.into_inner().map_err(|e| SynthError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("generated CSV is UTF-8"))
    };
    Ok(SynthOutput {
        logs_csv: into_string(logs)?,
        items_csv: into_string(items_csv)?,
        truth: GroundTruth {
            start_date: config.start_date,
            num_days: config.num_days,
            series,
        },
    })
}

//! Commodity log ingestion: CSV parsing, level aggregation, Data Frame
//! assembly, z-score normalization and weighted sample generation.

mod frame;
mod norm;
mod parse;
mod samples;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numops::Matrix;

pub use frame::{aggregate, build_frame};
pub use norm::{apply_norm, fit_norm, NormStats, STD_FLOOR};
pub use parse::{parse_items, parse_logs, parse_logs_with_header_names, DATE_FORMAT};
pub use samples::{
    fit_norm_on_windows, forecast_inputs, make_samples, sample_weight, training_windows,
    ForecastInput, Sample, SampleSpec, WindowKey,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: non-finite value {value:?} in column `{column}`")]
    NonFinite {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}: duplicate record for date {date}, item `{item}`, region `{region}`")]
    Duplicate {
        line: u64,
        date: NaiveDate,
        item: String,
        region: String,
    },
    #[error("item `{0}` appears in the logs but has no attribute row")]
    MissingAttributes(String),
    #[error("unexpected header: {0}")]
    Header(String),
    #[error("window [{start}, {end}] lies outside the table's day range [0, {last}]")]
    WindowOutOfRange { start: i64, end: i64, last: i64 },
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("unknown {kind} `{id}`")]
    UnknownKey { kind: &'static str, id: String },
    #[error("{0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no admissible end point for any item")]
    NoSamples,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// One logged day of one commodity in one region.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub date: NaiveDate,
    pub item_id: String,
    pub region_id: String,
    /// `d` indicator values in declared column order; index 0 is sales.
    pub indicators: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemAttributes {
    pub item_id: String,
    pub brand_id: String,
    pub category_id: String,
    pub supplier_id: String,
}

/// Aggregation level of an indicator matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Item,
    Brand,
    Category,
    Supplier,
    Region,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Item => "item",
            Level::Brand => "brand",
            Level::Category => "category",
            Level::Supplier => "supplier",
            Level::Region => "region",
        }
    }

    /// Slot order of a Data Frame.
    pub fn frame_slots(include_supplier: bool) -> Vec<Level> {
        if include_supplier {
            vec![
                Level::Item,
                Level::Brand,
                Level::Category,
                Level::Supplier,
                Level::Region,
            ]
        } else {
            vec![Level::Item, Level::Brand, Level::Category, Level::Region]
        }
    }
}

/// `d×T` block of one level's daily indicator vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMatrix {
    pub values: Matrix,
    pub level: Level,
    pub key: String,
}

/// Stacked indicator matrices for one (item, region, end point).
#[derive(Debug, Clone, PartialEq)]
pub struct DataFrame {
    pub slots: Vec<IndicatorMatrix>,
    pub item_id: String,
    pub region_id: String,
    /// Day index of the last column.
    pub end_point: usize,
}

impl DataFrame {
    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// `(d, T)` shared by every slot.
    pub fn slot_shape(&self) -> (usize, usize) {
        self.slots.first().map_or((0, 0), |s| s.values.shape())
    }

    pub fn slot_levels(&self) -> Vec<Level> {
        self.slots.iter().map(|s| s.level).collect()
    }
}

/// Parsed log universe. Records are sorted by (region, item, date); days are
/// integer offsets from the first logged date.
#[derive(Debug)]
pub struct LogTable {
    indicator_names: Vec<String>,
    records: Vec<LogRecord>,
    attributes: BTreeMap<String, ItemAttributes>,
    date_range: Option<(NaiveDate, NaiveDate)>,
    dense: OnceLock<DenseIndex>,
}

impl LogTable {
    /// Validates and sorts `records`. Duplicates and items without
    /// attributes are rejected.
    pub fn new(
        indicator_names: Vec<String>,
        mut records: Vec<LogRecord>,
        attributes: BTreeMap<String, ItemAttributes>,
    ) -> Result<Self> {
        if indicator_names.is_empty() {
            return Err(IngestError::Invalid(
                "at least one indicator is required".into(),
            ));
        }
        let d = indicator_names.len();
        for r in &records {
            if r.indicators.len() != d {
                return Err(IngestError::Shape(format!(
                    "record for item `{}` has {} indicators, expected {d}",
                    r.item_id,
                    r.indicators.len()
                )));
            }
            if !attributes.contains_key(&r.item_id) {
                return Err(IngestError::MissingAttributes(r.item_id.clone()));
            }
        }
        records.sort_by(|a, b| {
            (&a.region_id, &a.item_id, a.date).cmp(&(&b.region_id, &b.item_id, b.date))
        });
        if let Some(w) = records.windows(2).find(|w| {
            (&w[0].region_id, &w[0].item_id, w[0].date)
                == (&w[1].region_id, &w[1].item_id, w[1].date)
        }) {
            return Err(IngestError::Duplicate {
                line: 0,
                date: w[1].date,
                item: w[1].item_id.clone(),
                region: w[1].region_id.clone(),
            });
        }
        let date_range = records
            .iter()
            .map(|r| r.date)
            .min()
            .zip(records.iter().map(|r| r.date).max());
        Ok(Self {
            indicator_names,
            records,
            attributes,
            date_range,
            dense: OnceLock::new(),
        })
    }

    pub fn indicator_names(&self) -> &[String] {
        &self.indicator_names
    }

    pub fn num_indicators(&self) -> usize {
        self.indicator_names.len()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn attributes(&self) -> &BTreeMap<String, ItemAttributes> {
        &self.attributes
    }

    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        self.date_range
    }

    /// Number of days covered, first to last logged date inclusive.
    pub fn num_days(&self) -> usize {
        self.date_range
            .map_or(0, |(a, b)| (b - a).num_days() as usize + 1)
    }

    pub fn day_of(&self, date: NaiveDate) -> Option<i64> {
        self.date_range.map(|(a, _)| (date - a).num_days())
    }

    pub fn date_of(&self, day: usize) -> Option<NaiveDate> {
        self.date_range
            .and_then(|(a, _)| a.checked_add_days(chrono::Days::new(day as u64)))
    }

    /// Regions with at least one record, sorted.
    pub fn regions(&self) -> Vec<String> {
        self.dense().regions.clone()
    }

    /// Items logged at least once in `region_id`, sorted.
    pub fn items_in_region(&self, region_id: &str) -> Vec<String> {
        let dense = self.dense();
        let Some(ri) = dense.region_index(region_id) else {
            return Vec::new();
        };
        dense
            .items
            .iter()
            .enumerate()
            .filter(|(ii, _)| dense.present[ri][*ii])
            .map(|(_, id)| id.clone())
            .collect()
    }

    /// Raw daily sales (indicator 0) of one item in one region, all days.
    pub fn sales_series(&self, item_id: &str, region_id: &str) -> Result<Vec<f64>> {
        let dense = self.dense();
        let ri = dense
            .region_index(region_id)
            .ok_or_else(|| unknown("region", region_id))?;
        let key = dense.key_index(Level::Item, item_id)?;
        Ok(dense.series(ri, Level::Item, key, 0).to_vec())
    }

    pub(crate) fn dense(&self) -> &DenseIndex {
        self.dense.get_or_init(|| DenseIndex::build(self))
    }
}

fn unknown(kind: &'static str, id: &str) -> IngestError {
    IngestError::UnknownKey {
        kind,
        id: id.to_string(),
    }
}

/// Day-dense sums of every aggregation level, built once per table.
/// Layout per (region, level): `[key][row][day]`.
#[derive(Debug)]
pub(crate) struct DenseIndex {
    pub(crate) regions: Vec<String>,
    pub(crate) items: Vec<String>,
    keys: BTreeMap<Level, Vec<String>>,
    item_parent: Vec<[usize; 3]>,
    pub(crate) present: Vec<Vec<bool>>,
    d: usize,
    days: usize,
    levels: Vec<BTreeMap<Level, Vec<f64>>>,
}

impl DenseIndex {
    fn build(table: &LogTable) -> Self {
        let d = table.num_indicators();
        let days = table.num_days();
        let mut regions: Vec<String> = table.records.iter().map(|r| r.region_id.clone()).collect();
        regions.dedup();
        regions.sort();
        regions.dedup();
        let items: Vec<String> = table.attributes.keys().cloned().collect();
        let collect = |f: fn(&ItemAttributes) -> &String| {
            let mut v: Vec<String> = table.attributes.values().map(|a| f(a).clone()).collect();
            v.sort();
            v.dedup();
            v
        };
        let mut keys = BTreeMap::new();
        keys.insert(Level::Item, items.clone());
        keys.insert(Level::Brand, collect(|a| &a.brand_id));
        keys.insert(Level::Category, collect(|a| &a.category_id));
        keys.insert(Level::Supplier, collect(|a| &a.supplier_id));
        let pos = |level: Level, id: &String| keys[&level].binary_search(id).unwrap();
        let item_parent: Vec<[usize; 3]> = table
            .attributes
            .values()
            .map(|a| {
                [
                    pos(Level::Brand, &a.brand_id),
                    pos(Level::Category, &a.category_id),
                    pos(Level::Supplier, &a.supplier_id),
                ]
            })
            .collect();

        let mut present = vec![vec![false; items.len()]; regions.len()];
        let mut levels: Vec<BTreeMap<Level, Vec<f64>>> = (0..regions.len())
            .map(|_| {
                keys.iter()
                    .map(|(&l, k)| (l, vec![0.0; k.len() * d * days]))
                    .chain(std::iter::once((Level::Region, vec![0.0; d * days])))
                    .collect()
            })
            .collect();
        for rec in &table.records {
            let ri = regions.binary_search(&rec.region_id).unwrap();
            let ii = items.binary_search(&rec.item_id).unwrap();
            present[ri][ii] = true;
            let day = table.day_of(rec.date).unwrap() as usize;
            let [bi, ci, si] = item_parent[ii];
            for (level, key) in [
                (Level::Item, ii),
                (Level::Brand, bi),
                (Level::Category, ci),
                (Level::Supplier, si),
                (Level::Region, 0),
            ] {
                let buf = levels[ri].get_mut(&level).unwrap();
                for (row, &v) in rec.indicators.iter().enumerate() {
                    buf[(key * d + row) * days + day] += v;
                }
            }
        }
        Self {
            regions,
            items,
            keys,
            item_parent,
            present,
            d,
            days,
            levels,
        }
    }

    pub(crate) fn region_index(&self, region_id: &str) -> Option<usize> {
        self.regions
            .binary_search_by(|r| r.as_str().cmp(region_id))
            .ok()
    }

    pub(crate) fn item_index(&self, item_id: &str) -> Option<usize> {
        self.items
            .binary_search_by(|r| r.as_str().cmp(item_id))
            .ok()
    }

    /// Index of `id` within `level`; region level has the single key 0.
    pub(crate) fn key_index(&self, level: Level, id: &str) -> Result<usize> {
        if level == Level::Region {
            return Ok(0);
        }
        self.keys[&level]
            .binary_search_by(|k| k.as_str().cmp(id))
            .map_err(|_| unknown(level.as_str(), id))
    }

    pub(crate) fn parent_key(&self, item: usize, level: Level) -> usize {
        match level {
            Level::Item => item,
            Level::Brand => self.item_parent[item][0],
            Level::Category => self.item_parent[item][1],
            Level::Supplier => self.item_parent[item][2],
            Level::Region => 0,
        }
    }

    pub(crate) fn key_name(&self, level: Level, key: usize, region: usize) -> String {
        match level {
            Level::Region => self.regions[region].clone(),
            l => self.keys[&l][key].clone(),
        }
    }

    pub(crate) fn series(&self, region: usize, level: Level, key: usize, row: usize) -> &[f64] {
        let start = (key * self.d + row) * self.days;
        &self.levels[region][&level][start..start + self.days]
    }

    pub(crate) fn num_rows(&self) -> usize {
        self.d
    }

    pub(crate) fn num_days(&self) -> usize {
        self.days
    }
}

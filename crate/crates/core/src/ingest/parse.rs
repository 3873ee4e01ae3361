use std::collections::BTreeMap;
use std::io::Read;

use chrono::NaiveDate;

use super::{IngestError, ItemAttributes, LogRecord, LogTable, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

const LOG_KEY_COLUMNS: [&str; 3] = ["date", "item_id", "region_id"];
const ITEM_COLUMNS: [&str; 4] = ["item_id", "brand_id", "category_id", "supplier_id"];

fn reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source)
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn csv_error(err: csv::Error) -> IngestError {
    let line = err.position().map_or(0, |p| p.line());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => IngestError::Io(e),
        csv::ErrorKind::Utf8 { err, .. } => IngestError::Malformed {
            line,
            message: format!("invalid UTF-8: {err}"),
        },
        other => IngestError::Malformed {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn check_identifier(value: &str, column: &str, line: u64) -> Result<String> {
    if value.is_empty() || !value.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(IngestError::Malformed {
            line,
            message: format!("column `{column}` holds invalid identifier {value:?}"),
        });
    }
    Ok(value.to_string())
}

fn read_header<R: Read>(rdr: &mut csv::Reader<R>) -> Result<Vec<String>> {
    let mut header = csv::StringRecord::new();
    if !rdr.read_record(&mut header).map_err(csv_error)? {
        return Err(IngestError::Header(
            "empty input, header row missing".into(),
        ));
    }
    Ok(header.iter().map(str::to_string).collect())
}

/// Reads `items.csv`: `item_id,brand_id,category_id,supplier_id`.
pub fn parse_items<R: Read>(source: R) -> Result<BTreeMap<String, ItemAttributes>> {
    let mut rdr = reader(source);
    let header = read_header(&mut rdr)?;
    if header != ITEM_COLUMNS {
        return Err(IngestError::Header(format!(
            "items header must be `{}`, got `{}`",
            ITEM_COLUMNS.join(","),
            header.join(",")
        )));
    }
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = line_of(&row);
        if row.len() != ITEM_COLUMNS.len() {
            return Err(IngestError::Malformed {
                line,
                message: format!(
                    "expected {} fields, found {}",
                    ITEM_COLUMNS.len(),
                    row.len()
                ),
            });
        }
        let ids = ITEM_COLUMNS
            .iter()
            .zip(row.iter())
            .map(|(col, v)| check_identifier(v, col, line))
            .collect::<Result<Vec<_>>>()?;
        let attrs = ItemAttributes {
            item_id: ids[0].clone(),
            brand_id: ids[1].clone(),
            category_id: ids[2].clone(),
            supplier_id: ids[3].clone(),
        };
        if out.insert(attrs.item_id.clone(), attrs).is_some() {
            return Err(IngestError::Malformed {
                line,
                message: format!("item `{}` has more than one attribute row", ids[0]),
            });
        }
    }
    Ok(out)
}

/// Parses `logs.csv` and `items.csv`. The log header must be
/// `date,item_id,region_id` followed by exactly `indicator_names`.
pub fn parse_logs<L: Read, A: Read>(
    logs: L,
    attributes: A,
    indicator_names: &[String],
) -> Result<LogTable> {
    parse_logs_inner(logs, attributes, Some(indicator_names))
}

/// Like [`parse_logs`], taking the indicator names from the log header.
pub fn parse_logs_with_header_names<L: Read, A: Read>(logs: L, attributes: A) -> Result<LogTable> {
    parse_logs_inner(logs, attributes, None)
}

fn parse_logs_inner<L: Read, A: Read>(
    logs: L,
    attributes: A,
    expected_names: Option<&[String]>,
) -> Result<LogTable> {
    let attributes = parse_items(attributes)?;
    let mut rdr = reader(logs);
    let header = read_header(&mut rdr)?;
    if header.len() < 4 || header[..3] != LOG_KEY_COLUMNS {
        return Err(IngestError::Header(format!(
            "logs header must start with `date,item_id,region_id` and name at least one indicator, got `{}`",
            header.join(",")
        )));
    }
    let names: Vec<String> = header[3..].to_vec();
    if let Some(expected) = expected_names {
        if names != expected {
            return Err(IngestError::Header(format!(
                "indicator columns `{}` do not match the declared `{}`",
                names.join(","),
                expected.join(",")
            )));
        }
    }
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() || names[..i].contains(n) {
            return Err(IngestError::Header(format!(
                "bad indicator column name {n:?}"
            )));
        }
    }

    let mut records = Vec::new();
    let mut lines = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = line_of(&row);
        if row.len() != header.len() {
            return Err(IngestError::Malformed {
                line,
                message: format!("expected {} fields, found {}", header.len(), row.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&row[0], DATE_FORMAT).map_err(|e| {
            IngestError::Malformed {
                line,
                message: format!("bad date {:?}: {e}", &row[0]),
            }
        })?;
        let item_id = check_identifier(&row[1], "item_id", line)?;
        let region_id = check_identifier(&row[2], "region_id", line)?;
        let mut indicators = Vec::with_capacity(names.len());
        for (name, raw) in names.iter().zip(row.iter().skip(3)) {
            let value: f64 = raw.trim().parse().map_err(|_| IngestError::Malformed {
                line,
                message: format!("column `{name}` holds non-numeric value {raw:?}"),
            })?;
            if !value.is_finite() {
                return Err(IngestError::NonFinite {
                    line,
                    column: name.clone(),
                    value: raw.to_string(),
                });
            }
            indicators.push(value);
        }
        if !attributes.contains_key(&item_id) {
            return Err(IngestError::MissingAttributes(item_id));
        }
        lines.push(line);
        records.push(LogRecord {
            date,
            item_id,
            region_id,
            indicators,
        });
    }

    // Duplicate check with line numbers before the table re-sorts.
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        (&ra.region_id, &ra.item_id, ra.date, lines[a]).cmp(&(
            &rb.region_id,
            &rb.item_id,
            rb.date,
            lines[b],
        ))
    });
    for w in order.windows(2) {
        let (a, b) = (&records[w[0]], &records[w[1]]);
        if (&a.region_id, &a.item_id, a.date) == (&b.region_id, &b.item_id, b.date) {
            return Err(IngestError::Duplicate {
                line: lines[w[1]],
                date: b.date,
                item: b.item_id.clone(),
                region: b.region_id.clone(),
            });
        }
    }
    LogTable::new(names, records, attributes)
}

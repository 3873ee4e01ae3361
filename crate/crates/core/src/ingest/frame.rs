use super::{DataFrame, DenseIndex, IndicatorMatrix, IngestError, Level, LogTable, Result};
use crate::numops::Matrix;

fn check_window(table: &LogTable, start: i64, end: i64) -> Result<()> {
    let last = table.num_days() as i64 - 1;
    if start < 0 || end > last || start > end {
        return Err(IngestError::WindowOutOfRange { start, end, last });
    }
    Ok(())
}

fn slice_matrix(
    dense: &DenseIndex,
    region: usize,
    level: Level,
    key: usize,
    start: usize,
    len: usize,
) -> Matrix {
    let d = dense.num_rows();
    let mut data = Vec::with_capacity(d * len);
    for row in 0..d {
        data.extend_from_slice(&dense.series(region, level, key, row)[start..start + len]);
    }
    Matrix::from_vec(d, len, data).expect("dense slice has d*len entries")
}

/// Sum of the item vectors matching `key` at `level` in `region_id`, one
/// column per day of the inclusive day-index window. For
/// [`Level::Region`] every item of the region is summed and `key` must be
/// the region id. Unlogged days contribute zero.
pub fn aggregate(
    table: &LogTable,
    level: Level,
    region_id: &str,
    key: &str,
    window: (i64, i64),
) -> Result<IndicatorMatrix> {
    let (start, end) = window;
    check_window(table, start, end)?;
    let dense = table.dense();
    let region = dense
        .region_index(region_id)
        .ok_or_else(|| IngestError::UnknownKey {
            kind: "region",
            id: region_id.to_string(),
        })?;
    if level == Level::Region && key != region_id {
        return Err(IngestError::Invalid(format!(
            "region aggregate key `{key}` differs from region `{region_id}`"
        )));
    }
    let k = dense.key_index(level, key)?;
    Ok(IndicatorMatrix {
        values: slice_matrix(
            dense,
            region,
            level,
            k,
            start as usize,
            (end - start + 1) as usize,
        ),
        level,
        key: key.to_string(),
    })
}

/// Data Frame of `item_id` in `region_id` over the `window_len` days ending
/// at day index `end_point`. Slot order is item, brand, category,
/// (supplier,) region.
pub fn build_frame(
    table: &LogTable,
    item_id: &str,
    region_id: &str,
    end_point: usize,
    window_len: usize,
    include_supplier: bool,
) -> Result<DataFrame> {
    if window_len == 0 {
        return Err(IngestError::Invalid(
            "window length must be at least 1".into(),
        ));
    }
    if end_point + 1 < window_len || end_point >= table.num_days() {
        return Err(IngestError::InsufficientHistory(format!(
            "window of {window_len} days ending at day {end_point} needs days [{}, {end_point}], table has {} days",
            end_point as i64 + 1 - window_len as i64,
            table.num_days()
        )));
    }
    let dense = table.dense();
    let region = dense
        .region_index(region_id)
        .ok_or_else(|| IngestError::UnknownKey {
            kind: "region",
            id: region_id.to_string(),
        })?;
    let item = dense
        .item_index(item_id)
        .ok_or_else(|| IngestError::UnknownKey {
            kind: "item",
            id: item_id.to_string(),
        })?;
    Ok(frame_from_dense(
        dense,
        region,
        item,
        end_point,
        window_len,
        include_supplier,
    ))
}

pub(crate) fn frame_from_dense(
    dense: &DenseIndex,
    region: usize,
    item: usize,
    end_point: usize,
    window_len: usize,
    include_supplier: bool,
) -> DataFrame {
    let start = end_point + 1 - window_len;
    let slots = Level::frame_slots(include_supplier)
        .into_iter()
        .map(|level| {
            let key = dense.parent_key(item, level);
            IndicatorMatrix {
                values: slice_matrix(dense, region, level, key, start, window_len),
                level,
                key: dense.key_name(level, key, region),
            }
        })
        .collect();
    DataFrame {
        slots,
        item_id: dense.items[item].clone(),
        region_id: dense.regions[region].clone(),
        end_point,
    }
}

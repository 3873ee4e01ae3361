use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use super::{DataFrame, IngestError, Result};

/// Rows whose standard deviation falls below this map to zero.
pub const STD_FLOOR: f64 = 1e-8;

/// Per (slot, indicator row) z-score statistics, indexed `slot * rows + row`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub num_slots: usize,
    pub rows: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn mean_of(&self, slot: usize, row: usize) -> f64 {
        self.mean[slot * self.rows + row]
    }

    pub fn std_of(&self, slot: usize, row: usize) -> f64 {
        self.std[slot * self.rows + row]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_slots * self.rows;
        if self.mean.len() != n || self.std.len() != n {
            return Err(IngestError::Shape(format!(
                "norm stats for {}x{} need {n} entries, have {} means and {} stds",
                self.num_slots,
                self.rows,
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.mean.iter().chain(&self.std).any(|v| !v.is_finite())
            || self.std.iter().any(|&s| s < 0.0)
        {
            return Err(IngestError::Invalid(
                "norm stats must be finite with std >= 0".into(),
            ));
        }
        Ok(())
    }

    fn check_frame(&self, frame: &DataFrame) -> Result<()> {
        if frame.num_slots() != self.num_slots || frame.slot_shape().0 != self.rows {
            return Err(IngestError::Shape(format!(
                "frame has {} slots of {} rows, stats expect {} slots of {} rows",
                frame.num_slots(),
                frame.slot_shape().0,
                self.num_slots,
                self.rows
            )));
        }
        Ok(())
    }
}

/// Population mean and standard deviation of every (slot, row) over all
/// entries of all frames. Two passes over `frames`.
pub fn fit_norm<I>(frames: I) -> Result<NormStats>
where
    I: IntoIterator + Clone,
    I::Item: Borrow<DataFrame>,
{
    let mut iter = frames.clone().into_iter();
    let first = iter.next().ok_or_else(|| {
        IngestError::Invalid("cannot fit normalization on an empty frame collection".into())
    })?;
    let first = first.borrow();
    let (num_slots, (rows, _)) = (first.num_slots(), first.slot_shape());
    let n = num_slots * rows;
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for frame in frames.clone() {
        let frame = frame.borrow();
        if frame.num_slots() != num_slots || frame.slot_shape().0 != rows {
            return Err(IngestError::Shape(format!(
                "frame for item `{}` has {} slots of {} rows, expected {num_slots} of {rows}",
                frame.item_id,
                frame.num_slots(),
                frame.slot_shape().0
            )));
        }
        for (s, slot) in frame.slots.iter().enumerate() {
            for r in 0..rows {
                let row = slot.values.row(r);
                sum[s * rows + r] += row.iter().sum::<f64>();
                count[s * rows + r] += row.len();
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let mut sq = vec![0.0; n];
    for frame in frames {
        let frame = frame.borrow();
        for (s, slot) in frame.slots.iter().enumerate() {
            for r in 0..rows {
                let mu = mean[s * rows + r];
                sq[s * rows + r] += slot
                    .values
                    .row(r)
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
        }
    }
    let std = sq
        .iter()
        .zip(&count)
        .map(|(q, &c)| (q / c as f64).sqrt())
        .collect();
    Ok(NormStats {
        num_slots,
        rows,
        mean,
        std,
    })
}

/// `(x - mean) / std`, or 0 where `std < STD_FLOOR`.
pub fn apply_norm(frame: &DataFrame, stats: &NormStats) -> Result<DataFrame> {
    let mut out = frame.clone();
    normalize_in_place(&mut out, stats)?;
    Ok(out)
}

pub(crate) fn normalize_in_place(frame: &mut DataFrame, stats: &NormStats) -> Result<()> {
    stats.check_frame(frame)?;
    for (s, slot) in frame.slots.iter_mut().enumerate() {
        for r in 0..stats.rows {
            let (mu, sd) = (stats.mean_of(s, r), stats.std_of(s, r));
            for v in slot.values.row_mut(r) {
                *v = if sd < STD_FLOOR { 0.0 } else { (*v - mu) / sd };
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{IndicatorMatrix, Level};
    use crate::numops::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(slots: Vec<Matrix>) -> DataFrame {
        DataFrame {
            slots: slots
                .into_iter()
                .map(|values| IndicatorMatrix {
                    values,
                    level: Level::Item,
                    key: "i".into(),
                })
                .collect(),
            item_id: "i".into(),
            region_id: "r".into(),
            end_point: 0,
        }
    }

    fn random_frames(seed: u64, count: usize) -> Vec<DataFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                frame(
                    (0..3)
                        .map(|_| {
                            let data = (0..2 * 6).map(|_| rng.random_range(-50.0..150.0)).collect();
                            Matrix::from_vec(2, 6, data).unwrap()
                        })
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn constant_row_has_zero_std_and_maps_to_zero() {
        let f = frame(vec![
            Matrix::from_rows(&[[4.0, 4.0, 4.0], [0.0, 2.0, 1.0]]).unwrap()
        ]);
        let stats = fit_norm([&f]).unwrap();
        assert_eq!(stats.mean_of(0, 0), 4.0);
        assert_eq!(stats.std_of(0, 0), 0.0);
        let z = apply_norm(&f, &stats).unwrap();
        assert_eq!(z.slots[0].values.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_point_row() {
        let f = frame(vec![Matrix::from_rows(&[[0.0, 2.0]]).unwrap()]);
        let stats = fit_norm(std::slice::from_ref(&f)).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
        let z = apply_norm(&f, &stats).unwrap();
        assert_eq!(z.slots[0].values.row(0), &[-1.0, 1.0]);
    }

    #[test]
    fn mean_frame_normalizes_to_zero() {
        let frames = random_frames(1, 4);
        let stats = fit_norm(&frames).unwrap();
        let mean_frame = frame(
            (0..3)
                .map(|s| {
                    Matrix::from_rows(&[vec![stats.mean_of(s, 0); 6], vec![stats.mean_of(s, 1); 6]])
                        .unwrap()
                })
                .collect(),
        );
        let z = apply_norm(&mean_frame, &stats).unwrap();
        assert!(z
            .slots
            .iter()
            .all(|s| s.values.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn matches_two_pass_oracle() {
        let frames = random_frames(7, 10);
        let stats = fit_norm(&frames).unwrap();
        for s in 0..3 {
            for r in 0..2 {
                let vals: Vec<f64> = frames
                    .iter()
                    .flat_map(|f| f.slots[s].values.row(r).to_vec())
                    .collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                assert!((stats.mean_of(s, r) - mean).abs() < 1e-12);
                assert!((stats.std_of(s, r) - var.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_and_standardization() {
        let frames = random_frames(3, 10);
        let stats = fit_norm(&frames).unwrap();
        let normalized: Vec<DataFrame> = frames
            .iter()
            .map(|f| apply_norm(f, &stats).unwrap())
            .collect();
        for (f, z) in frames.iter().zip(&normalized) {
            for s in 0..3 {
                for r in 0..2 {
                    for (x, zv) in f.slots[s]
                        .values
                        .row(r)
                        .iter()
                        .zip(z.slots[s].values.row(r))
                    {
                        let back = zv * stats.std_of(s, r) + stats.mean_of(s, r);
                        assert!((back - x).abs() < 1e-12);
                    }
                }
            }
        }
        let refit = fit_norm(&normalized).unwrap();
        for (m, sd) in refit.mean.iter().zip(&refit.std) {
            assert!(m.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let empty: Vec<DataFrame> = Vec::new();
        assert!(fit_norm(&empty).is_err());
        let frames = random_frames(1, 2);
        let stats = fit_norm(&frames).unwrap();
        let other = frame(vec![Matrix::zeros(2, 6)]);
        assert!(matches!(
            apply_norm(&other, &stats),
            Err(IngestError::Shape(_))
        ));
        let mixed = vec![frames[0].clone(), other];
        assert!(fit_norm(&mixed).is_err());
    }
}

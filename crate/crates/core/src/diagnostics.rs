//! Adaptation equilibrium tracking and feature export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batch::CenterId;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::csv_err;
use crate::state::ModelState;
use crate::training::EpochLog;

/// Default number of trailing epochs summarized.
pub const EQUILIBRIUM_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    #[serde(rename = "MIL")]
    pub mil: f64,
    #[serde(rename = "MIU")]
    pub miu: f64,
}

/// Per-epoch mean discriminator scores on labeled and unlabeled inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptationHistory {
    rows: Vec<HistoryRow>,
}

fn mean_score(scores: &[f64], side: &str) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Data(format!("no {side} scores")));
    }
    if let Some(s) = scores.iter().find(|&&s| !(s > 0.0 && s < 1.0)) {
        return Err(Error::Domain(format!("{side} score {s} outside (0, 1)")));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

impl AdaptationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[HistoryRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends `(epoch, mean(scores_l), mean(scores_u))`.
    pub fn record(&mut self, epoch: usize, scores_l: &[f64], scores_u: &[f64]) -> Result<()> {
        let mil = mean_score(scores_l, "labeled")?;
        let miu = mean_score(scores_u, "unlabeled")?;
        self.push(HistoryRow { epoch, mil, miu })
    }

    pub fn push(&mut self, row: HistoryRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::Ordering(format!(
                    "epoch {} recorded after epoch {}",
                    row.epoch, last.epoch
                )));
            }
        }
        for (name, v) in [("MIL", row.mil), ("MIU", row.miu)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!("{name} {v} outside (0, 1)")));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// History from training logs; epochs without adaptation are skipped.
    pub fn from_logs(logs: &[EpochLog]) -> Result<Self> {
        let mut h = Self::new();
        for log in logs {
            if let (Some(mil), Some(miu)) = (log.mil, log.miu) {
                h.push(HistoryRow {
                    epoch: log.epoch,
                    mil,
                    miu,
                })?;
            }
        }
        Ok(h)
    }

    fn window(&self, window: usize) -> Result<&[HistoryRow]> {
        if window == 0 || window > self.rows.len() {
            return Err(Error::Data(format!(
                "window {window} invalid for a history of {} epochs",
                self.rows.len()
            )));
        }
        Ok(&self.rows[self.rows.len() - window..])
    }

    /// `(mean |MIL + MIU - 1|, mean |MIL - MIU|)` over the last `window` epochs.
    pub fn equilibrium_summary(&self, window: usize) -> Result<(f64, f64)> {
        let rows = self.window(window)?;
        let n = rows.len() as f64;
        let sum_dev = rows.iter().map(|r| (r.mil + r.miu - 1.0).abs()).sum::<f64>() / n;
        let diff_dev = rows.iter().map(|r| (r.mil - r.miu).abs()).sum::<f64>() / n;
        Ok((sum_dev, diff_dev))
    }

    /// Empirical 2.5/97.5 percentile intervals of `MIL - MIU` and
    /// `MIL + MIU` over the last `window` epochs.
    pub fn agreement_intervals(&self, window: usize) -> Result<AgreementIntervals> {
        let rows = self.window(window)?;
        let diff: Vec<f64> = rows.iter().map(|r| r.mil - r.miu).collect();
        let sum: Vec<f64> = rows.iter().map(|r| r.mil + r.miu).collect();
        Ok(AgreementIntervals {
            difference: (percentile(&diff, 2.5), percentile(&diff, 97.5)),
            sum: (percentile(&sum, 2.5), percentile(&sum, 97.5)),
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        if self.rows.is_empty() {
            wtr.write_record(["epoch", "MIL", "MIU"]).map_err(|e| csv_err(path, e))?;
        }
        for r in &self.rows {
            wtr.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut h = Self::new();
        for (i, row) in rdr.deserialize().enumerate() {
            let row: HistoryRow = row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("row {}: {e}", i + 1),
            })?;
            h.push(row)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgreementIntervals {
    pub difference: (f64, f64),
    pub sum: (f64, f64),
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Spatially average-pooled generator features, one row per case.
pub fn pooled_features(state: &ModelState, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    if ds.is_empty() {
        return Err(Error::Data("cannot pool features of an empty dataset".into()));
    }
    Ok(ds
        .cases
        .iter()
        .map(|c| {
            let f = state.model.features(c.image.clone());
            f.outer_iter()
                .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64)
                .collect()
        })
        .collect())
}

/// Writes `case_id, center_id, f0 .. f{C-1}` per case.
pub fn export_features(state: &ModelState, ds: &Dataset, out_path: impl AsRef<Path>) -> Result<()> {
    let path = out_path.as_ref();
    let feats = pooled_features(state, ds)?;
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["case_id".to_string(), "center_id".to_string()];
    header.extend((0..feats[0].len()).map(|i| format!("f{i}")));
    wtr.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (case, f) in ds.cases.iter().zip(&feats) {
        let mut rec = vec![case.case_id.clone(), case.center.to_string()];
        rec.extend(f.iter().map(|v| v.to_string()));
        wtr.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Mean pairwise Euclidean distance between per-center centroids.
pub fn centroid_distance(features: &[Vec<f64>], centers: &[CenterId]) -> Result<f64> {
    if features.len() != centers.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} center labels",
            features.len(),
            centers.len()
        )));
    }
    let mut groups: BTreeMap<CenterId, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, &c) in features.iter().zip(centers) {
        let entry = groups.entry(c).or_insert_with(|| (vec![0.0; f.len()], 0));
        if entry.0.len() != f.len() {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        entry.0.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        entry.1 += 1;
    }
    let centroids: Vec<Vec<f64>> = groups
        .into_values()
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    if centroids.len() < 2 {
        return Err(Error::Data("centroid distance needs at least two centers".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            total += centroids[i]
                .iter()
                .zip(&centroids[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Centroid distance of the pooled features of `ds` under `state`.
pub fn feature_centroid_distance(state: &ModelState, ds: &Dataset) -> Result<f64> {
    let feats = pooled_features(state, ds)?;
    let centers: Vec<CenterId> = ds.cases.iter().map(|c| c.center).collect();
    centroid_distance(&feats, &centers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v = [3.0, 1.0, 2.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert!((percentile(&v, 2.5) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_score_is_rejected() {
        let mut h = AdaptationHistory::new();
        assert!(matches!(h.record(1, &[1.0], &[0.5]), Err(Error::Domain(_))));
    }
}

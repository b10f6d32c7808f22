//! Region and surface metrics, and their per-case aggregation.
//!
//! Conventions: two empty masks have Dice and IoU of 1; surfaces use
//! 4-connectivity with out-of-bounds counted as background; MSD is undefined
//! (an error) when either surface is empty.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView, ArrayView2, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::batch::{MaskBatch, ProbabilityBatch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::networks::Model;
use crate::state::ModelState;

/// Thresholds probabilities: `p >= threshold` maps to 1.
pub fn binarize(probs: &ProbabilityBatch, threshold: f64) -> Result<MaskBatch> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("threshold {threshold} outside (0, 1)")));
    }
    let t = threshold as f32;
    MaskBatch::new(probs.data.mapv(|p| if p >= t { 1.0 } else { 0.0 }))
}

fn counts<D: Dimension>(p: &ArrayView<f32, D>, g: &ArrayView<f32, D>) -> Result<(f64, f64, f64)> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            p.shape(),
            g.shape()
        )));
    }
    let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
    Zip::from(p).and(g).for_each(|&a, &b| {
        let (a, b) = (a > 0.5, b > 0.5);
        inter += (a && b) as u64;
        np += a as u64;
        ng += b as u64;
    });
    Ok((inter as f64, np as f64, ng as f64))
}

/// `2|P ∩ G| / (|P| + |G|)`.
pub fn dice<D: Dimension>(p: ArrayView<f32, D>, g: ArrayView<f32, D>) -> Result<f64> {
    let (i, np, ng) = counts(&p, &g)?;
    if np + ng == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * i / (np + ng))
}

/// `|P ∩ G| / |P ∪ G|`.
pub fn iou<D: Dimension>(p: ArrayView<f32, D>, g: ArrayView<f32, D>) -> Result<f64> {
    let (i, np, ng) = counts(&p, &g)?;
    let union = np + ng - i;
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok(i / union)
}

/// Foreground pixels with at least one 4-neighbour in the background or
/// outside the image, in row-major order.
pub fn extract_surface(mask: ArrayView2<f32>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] > 0.5
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Squared distance transform of a 1D sampled function with grid spacing
/// `s`: `d(p) = min_q f(q) + (s (p - q))^2`, lower-envelope algorithm.
fn edt_1d(f: &[f64], s: f64) -> Vec<f64> {
    let n = f.len();
    let s2 = s * s;
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let meet = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
    };
    for &q in &sites {
        loop {
            match v.last() {
                Some(&p) => {
                    let x = meet(q, p);
                    if x <= *z.last().expect("boundary per site") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
            }
        }
    }
    let mut d = vec![0.0; n];
    let mut k = 0;
    for (p, out) in d.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let dq = p as f64 - v[k] as f64;
        *out = s2 * dq * dq + f[v[k]];
    }
    d
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
fn squared_distance_map(sites: &[(usize, usize)], h: usize, w: usize, spacing: (f64, f64)) -> Array2<f64> {
    let mut f = Array2::from_elem((h, w), f64::INFINITY);
    for &(y, x) in sites {
        f[[y, x]] = 0.0;
    }
    for mut col in f.axis_iter_mut(Axis(1)) {
        let v: Vec<f64> = col.to_vec();
        col.assign(&ndarray::Array1::from(edt_1d(&v, spacing.0)));
    }
    for mut row in f.axis_iter_mut(Axis(0)) {
        let v: Vec<f64> = row.to_vec();
        row.assign(&ndarray::Array1::from(edt_1d(&v, spacing.1)));
    }
    f
}

fn mean_directed(from: &[(usize, usize)], to_map: &Array2<f64>) -> f64 {
    from.iter().map(|&(y, x)| to_map[[y, x]].sqrt()).sum::<f64>() / from.len() as f64
}

/// Symmetric mean surface distance `½[d̄(S, S') + d̄(S', S)]`.
pub fn msd(p: ArrayView2<f32>, g: ArrayView2<f32>, spacing: (f64, f64)) -> Result<f64> {
    if p.dim() != g.dim() {
        return Err(Error::Shape(format!("mask shapes differ: {:?} vs {:?}", p.dim(), g.dim())));
    }
    let sp = extract_surface(p);
    let sg = extract_surface(g);
    if sp.is_empty() || sg.is_empty() {
        return Err(Error::UndefinedMetric("surface distance with an empty surface".into()));
    }
    let (h, w) = p.dim();
    let to_g = squared_distance_map(&sg, h, w, spacing);
    let to_p = squared_distance_map(&sp, h, w, spacing);
    Ok(0.5 * (mean_directed(&sp, &to_g) + mean_directed(&sg, &to_p)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub iou: f64,
    /// Absent when either surface is empty.
    pub msd: Option<f64>,
}

impl CaseMetrics {
    pub fn compute(case_id: &str, pred: ArrayView2<f32>, truth: ArrayView2<f32>, spacing: (f64, f64)) -> Result<Self> {
        let msd = match msd(pred, truth, spacing) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => {
                log::warn!("case `{case_id}`: MSD undefined (empty surface), excluded from aggregates");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            case_id: case_id.to_string(),
            dice: dice(pred, truth)?,
            iou: iou(pred, truth)?,
            msd,
        })
    }
}

/// Mean, sample standard deviation (n - 1 denominator; 0 when n = 1) and count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_cases: usize,
    pub dice: Summary,
    pub iou: Summary,
    /// Absent when no case has a defined MSD.
    pub msd: Option<Summary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub summary: ReportSummary,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Data("no cases to aggregate".into()));
        }
        let dices: Vec<f64> = cases.iter().map(|c| c.dice).collect();
        let ious: Vec<f64> = cases.iter().map(|c| c.iou).collect();
        let msds: Vec<f64> = cases.iter().filter_map(|c| c.msd).collect();
        if msds.len() < cases.len() {
            log::warn!(
                "{} of {} cases have undefined MSD and are excluded from the MSD aggregate",
                cases.len() - msds.len(),
                cases.len()
            );
        }
        let summary = ReportSummary {
            n_cases: cases.len(),
            dice: Summary::of(&dices).expect("non-empty"),
            iou: Summary::of(&ious).expect("non-empty"),
            msd: Summary::of(&msds),
        };
        Ok(Self { cases, summary })
    }

    pub fn write_case_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        wtr.write_record(["case_id", "dice", "iou", "msd"])
            .map_err(|e| csv_err(path, e))?;
        for c in &self.cases {
            let msd = c.msd.map(|v| v.to_string()).unwrap_or_default();
            wtr.write_record([c.case_id.clone(), c.dice.to_string(), c.iou.to_string(), msd])
                .map_err(|e| csv_err(path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_case_csv(path: impl AsRef<Path>) -> Result<Vec<CaseMetrics>> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut out = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let field = |k: usize| -> Result<f64> {
                rec.get(k).unwrap_or("").parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    reason: format!("row {}: column {k}: {e}", i + 1),
                })
            };
            let msd = match rec.get(3) {
                Some("") | None => None,
                Some(_) => Some(field(3)?),
            };
            out.push(CaseMetrics {
                case_id: rec.get(0).unwrap_or("").to_string(),
                dice: field(1)?,
                iou: field(2)?,
                msd,
            });
        }
        Ok(out)
    }

    pub fn write_summary_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let text = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        writeln!(f, "{text}").map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }
}

/// Binary prediction for one `[1, H, W]` image.
pub fn predict_mask(model: &Model<f32>, image: &ndarray::Array3<f32>, threshold: f32) -> Array2<f32> {
    let probs = model.predict(image.clone());
    probs
        .index_axis(Axis(0), 0)
        .mapv(|p| if p >= threshold { 1.0 } else { 0.0 })
}

/// Mean Dice of thresholded predictions over a labeled dataset.
pub fn mean_dice(model: &Model<f32>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for case in &ds.cases {
        let truth = case
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("case `{}` has no mask", case.case_id)))?;
        let pred = predict_mask(model, &case.image, 0.5);
        total += dice(pred.view(), truth.index_axis(Axis(0), 0))?;
    }
    Ok(total / ds.len() as f64)
}

/// Per-case metrics of FG -> SM -> threshold(0.5) predictions.
pub fn evaluate_model(state: &ModelState, test: &Dataset) -> Result<MetricsReport> {
    evaluate_with(test, |image| Ok(predict_mask(&state.model, image, 0.5)))
}

/// Per-case metrics for an arbitrary predictor.
pub fn evaluate_with<F>(test: &Dataset, mut predict: F) -> Result<MetricsReport>
where
    F: FnMut(&ndarray::Array3<f32>) -> Result<Array2<f32>>,
{
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let mut cases = Vec::with_capacity(test.len());
    for case in &test.cases {
        let truth = case
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("test case `{}` has no mask", case.case_id)))?;
        let pred = predict(&case.image)?;
        cases.push(CaseMetrics::compute(
            &case.case_id,
            pred.view(),
            truth.index_axis(Axis(0), 0),
            (1.0, 1.0),
        )?);
    }
    MetricsReport::from_cases(cases)
}

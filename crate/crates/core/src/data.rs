//! Synthetic two-center datasets, manifest I/O and split protocol.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma};
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{CenterId, ImageBatch, MaskBatch};
use crate::error::{Error, Result};

/// Foreground occupancy bounds enforced on generated cases.
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// An ellipse body with two to four protruding circular lobes.
    EllipseWithLobes,
}

/// Acquisition model of one synthetic center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterSpec {
    pub center_id: CenterId,
    pub n_cases: usize,
    /// `[H, W]`, both multiples of 8.
    pub image_size: (usize, usize),
    pub fg_intensity_range: (f64, f64),
    pub bg_intensity_range: (f64, f64),
    pub noise_sigma: f64,
    pub bias_field_amplitude: f64,
    #[serde(default = "default_shape_family")]
    pub shape_family: ShapeFamily,
    pub seed: u64,
}

fn default_shape_family() -> ShapeFamily {
    ShapeFamily::EllipseWithLobes
}

impl CenterSpec {
    /// Reference center: bright foreground, mild noise and bias.
    pub fn default_c1(n_cases: usize, seed: u64) -> Self {
        Self {
            center_id: CenterId::C1,
            n_cases,
            image_size: (64, 64),
            fg_intensity_range: (0.65, 0.85),
            bg_intensity_range: (0.15, 0.35),
            noise_sigma: 0.06,
            bias_field_amplitude: 0.15,
            shape_family: ShapeFamily::EllipseWithLobes,
            seed,
        }
    }

    /// Shifted center: darker foreground, lower contrast, stronger noise and bias.
    pub fn default_c2(n_cases: usize, seed: u64) -> Self {
        Self {
            center_id: CenterId::C2,
            n_cases,
            image_size: (64, 64),
            fg_intensity_range: (0.45, 0.65),
            bg_intensity_range: (0.2, 0.35),
            noise_sigma: 0.08,
            bias_field_amplitude: 0.25,
            shape_family: ShapeFamily::EllipseWithLobes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::config(
                "image_size",
                format!("{h}x{w} must be positive multiples of 8"),
            ));
        }
        for (name, (lo, hi)) in [
            ("fg_intensity_range", self.fg_intensity_range),
            ("bg_intensity_range", self.bg_intensity_range),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::config(
                    name,
                    format!("({lo}, {hi}) must be an ordered sub-range of [0, 1]"),
                ));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        if !(self.bias_field_amplitude >= 0.0 && self.bias_field_amplitude < 1.0) {
            return Err(Error::config("bias_field_amplitude", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Several centers generated together (the `generate-data` input file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiCenterSpec {
    pub centers: Vec<CenterSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[1, H, W]` binary; absent for unlabeled cases.
    pub mask: Option<Array3<f32>>,
    pub center: CenterId,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn new(cases: Vec<Case>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::Data(format!("duplicate case id `{}`", c.case_id)));
            }
            if c.image.dim().0 != 1 {
                return Err(Error::Shape(format!("case `{}` image must have one channel", c.case_id)));
            }
            if let Some(m) = &c.mask {
                if m.dim() != c.image.dim() {
                    return Err(Error::Shape(format!("case `{}` mask shape differs from image", c.case_id)));
                }
                if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Data(format!("case `{}` mask is not binary", c.case_id)));
                }
            }
        }
        Ok(Self { cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn has_all_masks(&self) -> bool {
        self.cases.iter().all(|c| c.mask.is_some())
    }

    /// Drops every mask.
    pub fn strip_masks(mut self) -> Self {
        for c in &mut self.cases {
            c.mask = None;
        }
        self
    }

    pub fn concat(mut self, other: Dataset) -> Result<Self> {
        self.cases.extend(other.cases);
        Dataset::new(self.cases)
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            cases: idx.iter().map(|&i| self.cases[i].clone()).collect(),
        }
    }

    pub fn images(&self, idx: &[usize]) -> Result<ImageBatch> {
        let first = idx
            .first()
            .map(|&i| &self.cases[i])
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let (_, h, w) = first.image.dim();
        let mut data = Array4::zeros((idx.len(), 1, h, w));
        for (k, &i) in idx.iter().enumerate() {
            let img = &self.cases[i].image;
            if img.dim() != (1, h, w) {
                return Err(Error::Shape(format!(
                    "case `{}` has size {:?}, batch expects {:?}",
                    self.cases[i].case_id,
                    img.dim(),
                    (1, h, w)
                )));
            }
            data.index_axis_mut(Axis(0), k).assign(img);
        }
        ImageBatch::new(
            data,
            idx.iter().map(|&i| self.cases[i].case_id.clone()).collect(),
            idx.iter().map(|&i| self.cases[i].center).collect(),
        )
    }

    pub fn masks(&self, idx: &[usize]) -> Result<MaskBatch> {
        let images = self.images(idx)?;
        let mut data = Array4::zeros(images.data.raw_dim());
        for (k, &i) in idx.iter().enumerate() {
            let case = &self.cases[i];
            let m = case
                .mask
                .as_ref()
                .ok_or_else(|| Error::Data(format!("case `{}` has no mask", case.case_id)))?;
            data.index_axis_mut(Axis(0), k).assign(m);
        }
        MaskBatch::new(data)
    }
}

struct Lobe {
    cy: f64,
    cx: f64,
    r: f64,
}

struct Shape {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    lobes: Vec<Lobe>,
}

impl Shape {
    fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let s = h.min(w) as f64;
        let cy = rng.random_range(0.35..0.65) * h as f64;
        let cx = rng.random_range(0.35..0.65) * w as f64;
        let a = rng.random_range(0.12..0.22) * s;
        let b = rng.random_range(0.08..0.15) * s;
        let theta = rng.random_range(0.0..PI);
        let n_lobes = rng.random_range(2..=4);
        let (st, ct) = theta.sin_cos();
        let lobes = (0..n_lobes)
            .map(|_| {
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let r = rng.random_range(0.04..0.07) * s;
                // boundary point in the ellipse frame, pushed outward
                let (ex, ey) = (a * phi.cos(), b * phi.sin());
                let norm = (ex * ex + ey * ey).sqrt().max(1e-9);
                let push = 0.7 * r;
                let (lx, ly) = (ex + push * ex / norm, ey + push * ey / norm);
                Lobe {
                    cx: cx + lx * ct - ly * st,
                    cy: cy + lx * st + ly * ct,
                    r,
                }
            })
            .collect();
        Self {
            cy,
            cx,
            a,
            b,
            theta,
            lobes,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (st, ct) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * ct + dy * st;
        let v = -dx * st + dy * ct;
        if (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0 {
            return true;
        }
        self.lobes
            .iter()
            .any(|l| (y - l.cy).powi(2) + (x - l.cx).powi(2) <= l.r * l.r)
    }

    fn rasterize(&self, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((1, h, w), |(_, i, j)| {
            if self.contains(i as f64 + 0.5, j as f64 + 0.5) {
                1.0
            } else {
                0.0
            }
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Smooth multiplicative field `1 + amp * f(y, x)` with `f` in `[-1, 1]`.
fn bias_field(rng: &mut ChaCha8Rng, amp: f64, h: usize, w: usize) -> Array3<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    Array3::from_shape_fn((1, h, w), |(_, i, j)| {
        let (v, u) = (i as f64 / h as f64, j as f64 / w as f64);
        let f: f64 = comps
            .iter()
            .map(|&(ky, kx, ph)| (PI * (ky * v + kx * u) + ph).cos())
            .sum::<f64>()
            / comps.len() as f64;
        1.0 + amp * f
    })
}

fn generate_case(spec: &CenterSpec, index: usize) -> Case {
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let mask = loop {
        let shape = Shape::sample(&mut rng, h, w);
        let m = shape.rasterize(h, w);
        let frac = m.sum() as f64 / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break m;
        }
    };
    let fg = uniform(&mut rng, spec.fg_intensity_range);
    let bg = uniform(&mut rng, spec.bg_intensity_range);
    let bias = bias_field(&mut rng, spec.bias_field_amplitude, h, w);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let image = Array3::from_shape_fn((1, h, w), |idx| {
        let base = if mask[idx] > 0.5 { fg } else { bg };
        let n = if spec.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        (base * bias[idx] + n).clamp(0.0, 1.0) as f32
    });
    Case {
        case_id: format!("{}_{index:04}", spec.center_id),
        image,
        mask: Some(mask),
        center: spec.center_id,
    }
}

/// Generates every case of a center. Case `i` depends only on `(spec, i)`.
pub fn generate_center(spec: &CenterSpec) -> Result<Dataset> {
    spec.validate()?;
    Dataset::new((0..spec.n_cases).map(|i| generate_case(spec, i)).collect())
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image_path: String,
    pub mask_path: Option<String>,
    pub center_id: CenterId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub cases: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("line {}, column {}: {e}", e.line(), e.column()),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes images as 16-bit PNG, masks as 8-bit PNG and a `manifest.json`
/// with relative paths. Returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = Manifest::default();
    for case in &ds.cases {
        let (_, h, w) = case.image.dim();
        let image_rel = format!("images/{}.png", case.case_id);
        let px: Vec<u16> = case
            .image
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w as u32, h as u32, px).expect("buffer size");
        let p = dir.join(&image_rel);
        img.save(&p).map_err(|e| image_err(&p, e))?;

        let mask_rel = match &case.mask {
            Some(m) => {
                let rel = format!("masks/{}.png", case.case_id);
                let px: Vec<u8> = m.iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
                let img = GrayImage::from_raw(w as u32, h as u32, px).expect("buffer size");
                let p = dir.join(&rel);
                img.save(&p).map_err(|e| image_err(&p, e))?;
                Some(rel)
            }
            None => None,
        };
        manifest.cases.push(ManifestEntry {
            case_id: case.case_id.clone(),
            image_path: image_rel,
            mask_path: mask_rel,
            center_id: case.center,
        });
    }
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|e| image_err(path, e))
}

/// Min-max normalization to `[0, 1]`; constant images map to all zeros.
pub fn normalize_min_max(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// Loads a dataset from a JSON manifest. Images are min-max normalized per
/// case and masks are binarized at 0.5.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for entry in &manifest.cases {
        let ipath = root.join(&entry.image_path);
        let img = open_image(&ipath)?.to_luma16();
        let (w, h) = img.dimensions();
        let raw: Vec<f64> = img.pixels().map(|p| p[0] as f64).collect();
        let image = Array3::from_shape_vec((1, h as usize, w as usize), normalize_min_max(&raw))
            .expect("image size");

        let mask = match &entry.mask_path {
            Some(rel) => {
                let mpath = root.join(rel);
                let m = open_image(&mpath)?.to_luma32f();
                if m.dimensions() != (w, h) {
                    return Err(Error::Shape(format!(
                        "mask {} does not match image size",
                        mpath.display()
                    )));
                }
                let mut ambiguous: Vec<u32> = m
                    .pixels()
                    .map(|p| p[0])
                    .filter(|&v| v > 0.25 && v < 0.75)
                    .map(f32::to_bits)
                    .collect();
                ambiguous.sort_unstable();
                ambiguous.dedup();
                if ambiguous.len() > 2 {
                    log::warn!(
                        "mask {} has {} distinct values in (0.25, 0.75); thresholding at 0.5",
                        mpath.display(),
                        ambiguous.len()
                    );
                }
                let data: Vec<f32> = m.pixels().map(|p| if p[0] >= 0.5 { 1.0 } else { 0.0 }).collect();
                Some(Array3::from_shape_vec((1, h as usize, w as usize), data).expect("mask size"))
            }
            None => None,
        };
        cases.push(Case {
            case_id: entry.case_id.clone(),
            image,
            mask,
            center: entry.center_id,
        });
    }
    Dataset::new(cases)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Case-level random split into `(train, val, test)`; train takes the
/// remainder. Partitions keep the dataset's case order.
pub fn split_dataset(ds: &Dataset, n_val: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if n_val + n_test >= ds.len() {
        return Err(Error::Data(format!(
            "cannot hold out {n_val} validation and {n_test} test cases from {} (training set would be empty)",
            ds.len()
        )));
    }
    let idx = shuffled(ds.len(), seed);
    let val = sorted(idx[..n_val].to_vec());
    let test = sorted(idx[n_val..n_val + n_test].to_vec());
    let train = sorted(idx[n_val + n_test..].to_vec());
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

/// Number of labeled cases for ratio `r`, rounding half up.
pub fn labeled_count(n: usize, r: f64) -> usize {
    ((r * n as f64) + 0.5 + 1e-9).floor() as usize
}

/// Splits training cases into a labeled fraction `r` and an unlabeled
/// remainder whose masks are removed.
pub fn make_semi_split(train: &Dataset, r: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config("labeled_ratio", format!("{r} is outside (0, 1]")));
    }
    let n_l = labeled_count(train.len(), r).min(train.len());
    let idx = shuffled(train.len(), seed);
    let labeled = train.subset(&sorted(idx[..n_l].to_vec()));
    let unlabeled = train.subset(&sorted(idx[n_l..].to_vec())).strip_masks();
    Ok((labeled, unlabeled))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_images_are_in_unit_range_with_valid_occupancy() {
        let ds = generate_center(&CenterSpec::default_c2(12, 4)).unwrap();
        for c in &ds.cases {
            assert!(c.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let frac = c.mask.as_ref().unwrap().sum() as f64 / 4096.0;
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn case_depends_only_on_its_index() {
        let a = generate_center(&CenterSpec::default_c1(3, 1)).unwrap();
        let b = generate_center(&CenterSpec::default_c1(6, 1)).unwrap();
        assert_eq!(a.cases[..], b.cases[..3]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = CenterSpec::default_c1(1, 0);
        s.image_size = (60, 64);
        assert!(matches!(generate_center(&s), Err(Error::Config { .. })));
        let mut s = CenterSpec::default_c1(1, 0);
        s.fg_intensity_range = (0.9, 0.1);
        assert!(generate_center(&s).unwrap_err().to_string().contains("fg_intensity_range"));
    }

    #[test]
    fn round_half_up() {
        assert_eq!(labeled_count(7, 0.5), 4);
        assert_eq!(labeled_count(140, 0.25), 35);
        assert_eq!(labeled_count(100, 0.29), 29);
        assert_eq!(labeled_count(3, 1.0), 3);
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        assert_eq!(normalize_min_max(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        assert_eq!(normalize_min_max(&[1.0, 3.0]), vec![0.0, 1.0]);
    }
}

//! Batched arrays exchanged between the networks, losses and metrics.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acquisition site of a case.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CenterId {
    C1,
    C2,
}

impl fmt::Display for CenterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CenterId::C1 => f.write_str("C1"),
            CenterId::C2 => f.write_str("C2"),
        }
    }
}

impl FromStr for CenterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C1" => Ok(CenterId::C1),
            "C2" => Ok(CenterId::C2),
            other => Err(Error::config("center_id", format!("unknown center `{other}`"))),
        }
    }
}

/// Input images `[B, 1, H, W]` with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub data: Array4<f32>,
    pub case_ids: Vec<String>,
    pub centers: Vec<CenterId>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>, case_ids: Vec<String>, centers: Vec<CenterId>) -> Result<Self> {
        let (b, c, _, _) = data.dim();
        if c != 1 {
            return Err(Error::Shape(format!("images must have one channel, got {c}")));
        }
        if case_ids.len() != b || centers.len() != b {
            return Err(Error::Shape(format!(
                "batch of {b} images with {} ids and {} centers",
                case_ids.len(),
                centers.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Domain(format!("image intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            data,
            case_ids,
            centers,
        })
    }

    /// Wraps raw data with generated ids, for tests and ad hoc use.
    pub fn from_data(data: Array4<f32>) -> Result<Self> {
        let b = data.dim().0;
        Self::new(
            data,
            (0..b).map(|i| format!("case{i}")).collect(),
            vec![CenterId::C1; b],
        )
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dim();
        (h, w)
    }

    pub fn sample(&self, i: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }
}

/// Binary ground-truth masks `[B, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBatch {
    pub data: Array4<f32>,
}

impl MaskBatch {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Domain(format!("mask value {v} is not binary")));
        }
        Ok(Self { data })
    }

    pub fn sample(&self, i: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }
}

/// Generator features `[B, C_f, H / 2^d, W / 2^d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub data: Array4<f32>,
}

/// Per-pixel foreground probabilities `[B, 1, H, W]`, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityBatch {
    pub data: Array4<f32>,
}

impl ProbabilityBatch {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain(format!("probability {v} outside (0, 1)")));
        }
        Ok(Self { data })
    }
}

/// Discriminator output: the feature tap and a realness score per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscOutput {
    pub features: Array4<f32>,
    pub score: Array1<f32>,
}

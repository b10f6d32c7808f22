//! Training objectives.
//!
//! Squared L2 norms are per-element means, so loss magnitudes do not depend
//! on image or feature size. Each loss comes with the gradient the training
//! engine needs; values are accumulated in `f64` regardless of element type.

use ndarray::{Array, Array3, Array4, ArrayView, ArrayView3, ArrayView4, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::batch::{MaskBatch, ProbabilityBatch};
use crate::error::{Error, Result};
use crate::nn::Real;

/// Score clamp used by binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

/// Relative weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Feature matching between generator features and the discriminator tap.
    pub lambda_fm: f64,
    /// Image reconstruction terms.
    pub lambda_rec: f64,
    /// Supervised soft Dice term.
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fm: 1.0,
            lambda_rec: 1.0,
            lambda_dice: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_fm", self.lambda_fm),
            ("lambda_rec", self.lambda_rec),
            ("lambda_dice", self.lambda_dice),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(
                    format!("weights.{name}"),
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

fn check_target(target: f64) -> Result<()> {
    if target == 0.0 || target == 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("BCE target must be 0 or 1, got {target}")))
    }
}

/// Binary cross-entropy of one score against a `{0, 1}` target.
pub fn bce(score: f64, target: f64) -> Result<f64> {
    check_target(target)?;
    if score.is_nan() {
        return Err(Error::Domain("BCE score is NaN".into()));
    }
    let s = score.clamp(BCE_EPS, 1.0 - BCE_EPS);
    Ok(-(target * s.ln() + (1.0 - target) * (1.0 - s).ln()))
}

/// Mean binary cross-entropy over a batch of scores.
pub fn bce_mean<T: Real>(scores: &[T], target: f64) -> Result<f64> {
    check_target(target)?;
    if scores.is_empty() {
        return Err(Error::Data("BCE over an empty batch".into()));
    }
    let mut sum = 0.0;
    for &s in scores {
        sum += bce(s.f64(), target)?;
    }
    Ok(sum / scores.len() as f64)
}

/// Gradient of [`bce_mean`] with respect to the pre-sigmoid logit of each
/// score. Exact wherever the clamp is inactive.
pub(crate) fn bce_mean_logit_grad<T: Real>(score: T, target: f64, n: usize) -> T {
    (score - T::of(target)) / T::of(n as f64)
}

/// Discriminator objective: labeled scores toward 1, unlabeled toward 0.
pub fn discriminator_loss<T: Real>(score_l: &[T], score_u: &[T]) -> Result<f64> {
    Ok(bce_mean(score_l, 1.0)? + bce_mean(score_u, 0.0)?)
}

/// Generator objective: the label-swapped mirror of [`discriminator_loss`].
pub fn adversarial_loss<T: Real>(score_l: &[T], score_u: &[T]) -> Result<f64> {
    Ok(bce_mean(score_l, 0.0)? + bce_mean(score_u, 1.0)?)
}

fn same_shape<T, D: Dimension>(a: &ArrayView<T, D>, b: &ArrayView<T, D>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Per-element mean of squared differences.
pub fn reconstruction_loss<T: Real, D: Dimension>(x: ArrayView<T, D>, x_rec: ArrayView<T, D>) -> Result<f64> {
    same_shape(&x, &x_rec, "reconstruction")?;
    if x.is_empty() {
        return Err(Error::Data("reconstruction loss over an empty array".into()));
    }
    let sum: f64 = Zip::from(&x)
        .and(&x_rec)
        .fold(0.0, |acc, &a, &b| acc + (a.f64() - b.f64()).powi(2));
    Ok(sum / x.len() as f64)
}

/// Gradient of [`reconstruction_loss`] with respect to `x_rec`, for a
/// loss normalized by `n` elements in total.
pub(crate) fn mse_grad<T: Real>(x: ArrayView3<T>, x_rec: ArrayView3<T>, n: usize) -> Array3<T> {
    let scale = T::of(2.0 / n as f64);
    let mut g = x_rec.to_owned();
    g.zip_mut_with(&x, |r, &t| *r = (*r - t) * scale);
    g
}

/// `mean((F_l - F'_l)^2) + mean((F_u - F'_u)^2)`.
pub fn feature_match_loss<T: Real, D: Dimension>(
    f_l: ArrayView<T, D>,
    fp_l: ArrayView<T, D>,
    f_u: ArrayView<T, D>,
    fp_u: ArrayView<T, D>,
) -> Result<f64> {
    Ok(reconstruction_loss(f_l, fp_l)? + reconstruction_loss(f_u, fp_u)?)
}

/// Soft Dice loss per sample, averaged over the batch.
pub fn soft_dice<T: Real>(probs: ArrayView4<T>, target: ArrayView4<T>) -> Result<f64> {
    Ok(soft_dice_with_grad(probs, target)?.0)
}

/// [`soft_dice`] and its gradient with respect to `probs`.
pub fn soft_dice_with_grad<T: Real>(probs: ArrayView4<T>, target: ArrayView4<T>) -> Result<(f64, Array4<T>)> {
    same_shape(&probs, &target, "soft dice")?;
    let b = probs.dim().0;
    if b == 0 {
        return Err(Error::Data("soft dice over an empty batch".into()));
    }
    let mut grad = Array4::zeros(probs.raw_dim());
    let mut total = 0.0;
    for i in 0..b {
        let (loss, g) = dice_sample(probs.index_axis(Axis(0), i), target.index_axis(Axis(0), i), b);
        total += loss;
        grad.index_axis_mut(Axis(0), i).assign(&g);
    }
    Ok((total / b as f64, grad))
}

/// Dice loss of one sample and the gradient of `loss / batch` w.r.t. `p`.
pub(crate) fn dice_sample<T: Real>(p: ArrayView3<T>, g: ArrayView3<T>, batch: usize) -> (f64, Array3<T>) {
    let (mut inter, mut sum) = (0.0, 0.0);
    Zip::from(&p).and(&g).for_each(|&a, &b| {
        inter += a.f64() * b.f64();
        sum += a.f64() + b.f64();
    });
    let num = 2.0 * inter + DICE_EPS;
    let den = sum + DICE_EPS;
    let loss = 1.0 - num / den;
    let scale = 1.0 / (batch as f64 * den * den);
    let mut grad = Array3::zeros(p.raw_dim());
    Zip::from(&mut grad).and(&g).for_each(|d, &gv| {
        *d = T::of(-(2.0 * gv.f64() * den - num) * scale);
    });
    (loss, grad)
}

/// Soft Dice loss between a probability map and a binary mask.
pub fn soft_dice_loss(probs: &ProbabilityBatch, target: &MaskBatch) -> Result<f64> {
    soft_dice(probs.data.view(), target.data.view())
}

/// Values of the segmentation objective and its components (unweighted).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegObjective {
    pub total: f64,
    pub rec_labeled: f64,
    pub rec_unlabeled: f64,
    pub dice: f64,
}

/// `lambda_rec * [rec(L_x, L'_x) + rec(U_x, U'_x)] + lambda_dice * DL(LP, L_y)`.
/// The unlabeled pair may be omitted (fully supervised runs).
pub fn segmentation_objective<T: Real>(
    l_x: ArrayView4<T>,
    l_y: ArrayView4<T>,
    l_x_rec: ArrayView4<T>,
    lp: ArrayView4<T>,
    unlabeled: Option<(ArrayView4<T>, ArrayView4<T>)>,
    w: &LossWeights,
) -> Result<SegObjective> {
    w.validate()?;
    let rec_labeled = reconstruction_loss(l_x, l_x_rec)?;
    let rec_unlabeled = match unlabeled {
        Some((u_x, u_x_rec)) => reconstruction_loss(u_x, u_x_rec)?,
        None => 0.0,
    };
    let dice = soft_dice(lp, l_y)?;
    Ok(SegObjective {
        total: w.lambda_rec * (rec_labeled + rec_unlabeled) + w.lambda_dice * dice,
        rec_labeled,
        rec_unlabeled,
        dice,
    })
}

/// Mean over the batch axis, used by the direct (feature-level) ablation.
pub(crate) fn batch_mean<T: Real>(items: &[Array3<T>]) -> Array3<T> {
    let mut acc = Array::zeros(items[0].raw_dim());
    for it in items {
        acc += it;
    }
    acc.mapv(|v: T| v / T::of(items.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array4};

    #[test]
    fn bce_rejects_non_binary_target() {
        assert!(matches!(bce(0.3, 0.5), Err(Error::Domain(_))));
        assert!(bce_mean(&[0.3f64], 2.0).is_err());
    }

    #[test]
    fn bce_reference_values() {
        assert_abs_diff_eq!(bce(0.5, 1.0).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(bce(0.5, 0.0).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(bce(1.0, 1.0).unwrap(), -(1.0f64 - 1e-7).ln(), epsilon = 1e-18);
    }

    #[test]
    fn feature_match_shape_mismatch() {
        let a = arr1(&[1.0f64, 2.0]);
        let b = arr1(&[1.0f64]);
        assert!(matches!(
            feature_match_loss(a.view(), b.view(), a.view(), a.view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let p = Array4::from_shape_fn((2, 1, 3, 3), |(b, _, i, j)| 0.1 + 0.08 * ((b * 9 + i * 3 + j) % 10) as f64);
        let g = Array4::from_shape_fn((2, 1, 3, 3), |(_, _, i, j)| ((i + j) % 2) as f64);
        let (_, grad) = soft_dice_with_grad(p.view(), g.view()).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 0, 2, 1), (0, 0, 1, 2)] {
            let mut up = p.clone();
            up[idx] += h;
            let mut dn = p.clone();
            dn[idx] -= h;
            let fd = (soft_dice(up.view(), g.view()).unwrap() - soft_dice(dn.view(), g.view()).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(fd, grad[idx], epsilon = 1e-8);
        }
    }

    #[test]
    fn negative_weight_is_a_config_error() {
        let w = LossWeights {
            lambda_rec: -1.0,
            ..Default::default()
        };
        let err = w.validate().unwrap_err();
        assert!(err.to_string().contains("lambda_rec"));
    }
}

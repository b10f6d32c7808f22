//! Alternating adversarial adaptation and segmentation training.
//!
//! An epoch runs every adaptation step first, then every segmentation step.
//! Adaptation updates the discriminator (with the generator frozen) and then
//! the generator (through the frozen discriminator and segmentation module).
//! Segmentation updates the segmentation and reconstruction modules.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array3, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, MaskBatch};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    batch_mean, bce_mean, bce_mean_logit_grad, dice_sample, discriminator_loss, mse_grad, LossWeights,
};
use crate::metrics::{csv_err, mean_dice};
use crate::networks::{ArchConfig, Model, Net};
use crate::nn::{sigmoid, Grads, ParamSet, Trace};
use crate::optim::AdamConfig;
use crate::state::{init_model, ModelState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AblationMode {
    /// Full method: double-sided adversarial loss with feature matching.
    #[default]
    Dcdg,
    /// Single-sided adversarial loss (unlabeled term only).
    Sda,
    /// No adaptation phase.
    Wda,
    /// No feature matching.
    Wfm,
    /// Discriminator reads generator features directly.
    Ddda,
    /// Fully supervised on the labeled subset only.
    Fss,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Dcdg,
        AblationMode::Sda,
        AblationMode::Wda,
        AblationMode::Wfm,
        AblationMode::Ddda,
        AblationMode::Fss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Dcdg => "DCDG",
            AblationMode::Sda => "SDA",
            AblationMode::Wda => "WDA",
            AblationMode::Wfm => "WFM",
            AblationMode::Ddda => "DDDA",
            AblationMode::Fss => "FSS",
        }
    }

    /// Architecture actually trained in this mode.
    pub fn arch(self, base: &ArchConfig) -> ArchConfig {
        ArchConfig {
            direct_discriminator: self == AblationMode::Ddda,
            ..base.clone()
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(
                    "ablation_mode",
                    format!("unknown mode `{s}` (expected one of DCDG, SDA, WDA, WFM, DDDA, FSS)"),
                )
            })
    }
}

/// What the training steps do; derived from an [`AblationMode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepBehavior {
    pub adaptation: bool,
    /// The generator objective includes the labeled term `bce(s_l, 0)`.
    pub labeled_adversarial_term: bool,
    pub feature_matching: bool,
    pub direct: bool,
    pub unlabeled_reconstruction: bool,
    pub use_unlabeled: bool,
}

impl Default for StepBehavior {
    fn default() -> Self {
        Self {
            adaptation: true,
            labeled_adversarial_term: true,
            feature_matching: true,
            direct: false,
            unlabeled_reconstruction: true,
            use_unlabeled: true,
        }
    }
}

pub fn apply_ablation(mode: AblationMode, base: StepBehavior) -> StepBehavior {
    match mode {
        AblationMode::Dcdg => base,
        AblationMode::Sda => StepBehavior {
            labeled_adversarial_term: false,
            ..base
        },
        AblationMode::Wda => StepBehavior {
            adaptation: false,
            ..base
        },
        AblationMode::Wfm => StepBehavior {
            feature_matching: false,
            ..base
        },
        AblationMode::Ddda => StepBehavior { direct: true, ..base },
        AblationMode::Fss => StepBehavior {
            adaptation: false,
            unlabeled_reconstruction: false,
            use_unlabeled: false,
            ..base
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub arch: ArchConfig,
    pub labeled_ratio: f64,
    pub ablation_mode: AblationMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_d: f32,
    pub lr_fg: f32,
    pub lr_smrm: f32,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Also update the generator from the segmentation objective.
    pub fg_seg_grad: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            labeled_ratio: 0.5,
            ablation_mode: AblationMode::Dcdg,
            epochs: 50,
            batch_size: 8,
            lr_d: 2e-4,
            lr_fg: 2e-4,
            lr_smrm: 2e-4,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            early_stop_patience: 10,
            seed: 0,
            fg_seg_grad: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("arch.{field}"), reason),
            e => e,
        })?;
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(Error::config(
                "labeled_ratio",
                format!("must lie in (0, 1], got {}", self.labeled_ratio),
            ));
        }
        for (name, v) in [("epochs", self.epochs), ("batch_size", self.batch_size)] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config("early_stop_patience", "must be at least 1"));
        }
        for (name, v) in [("lr_d", self.lr_d), ("lr_fg", self.lr_fg), ("lr_smrm", self.lr_smrm)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be finite and positive, got {v}")));
            }
        }
        for (name, v) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.adam.eps.is_finite() && self.adam.eps > 0.0) {
            return Err(Error::config("adam.eps", "must be finite and positive"));
        }
        self.weights.validate()
    }

    pub fn behavior(&self) -> StepBehavior {
        apply_ablation(self.ablation_mode, StepBehavior::default())
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Quantities logged by one adaptation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptationStats {
    pub l_d: f64,
    pub l_adv: f64,
    /// Weighted feature-matching contribution.
    pub l_fm: f64,
    /// Mean discriminator score on labeled inputs, before the update.
    pub mil: f64,
    /// Mean discriminator score on unlabeled inputs, before the update.
    pub miu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegStats {
    pub l_seg: f64,
    pub rec_labeled: f64,
    pub rec_unlabeled: f64,
    pub dice: f64,
}

/// One row of the per-epoch training log. Adaptation fields are empty when
/// the mode has no adaptation phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_d")]
    pub l_d: Option<f64>,
    #[serde(rename = "L_adv")]
    pub l_adv: Option<f64>,
    #[serde(rename = "L_fm")]
    pub l_fm: Option<f64>,
    #[serde(rename = "L_seg")]
    pub l_seg: f64,
    #[serde(rename = "MIL")]
    pub mil: Option<f64>,
    #[serde(rename = "MIU")]
    pub miu: Option<f64>,
    pub val_dice: Option<f64>,
}

pub fn write_epoch_csv(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for log in logs {
        wtr.serialize(log).map_err(|e| csv_err(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epoch_csv(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let log: EpochLog = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("row {}: {e}", i + 1),
        })?;
        out.push(log);
    }
    Ok(out)
}

struct GenPass {
    f: Array3<f32>,
    fg: Trace<f32>,
    sm: Option<(Array3<f32>, Trace<f32>)>,
}

impl GenPass {
    fn new(model: &Model<f32>, x: Array3<f32>, direct: bool) -> Self {
        let (f, fg) = model.nets.fg.forward(&model.fg, x);
        let sm = (!direct).then(|| model.nets.sm.forward(&model.sm, f.clone()));
        Self { f, fg, sm }
    }

    fn disc_input(&self) -> Array3<f32> {
        match &self.sm {
            Some((p, _)) => p.clone(),
            None => self.f.clone(),
        }
    }
}

struct DiscPass {
    tap: Array3<f32>,
    trunk: Trace<f32>,
    head: Trace<f32>,
    score: f32,
}

impl DiscPass {
    fn new(model: &Model<f32>, input: Array3<f32>) -> Self {
        let (tap, trunk) = model.nets.d_trunk.forward(&model.d, input);
        let (z, head) = model.nets.d_head.forward(&model.d, tap.clone());
        Self {
            tap,
            trunk,
            head,
            score: sigmoid(z[[0, 0, 0]]),
        }
    }

    fn backward(
        &self,
        model: &Model<f32>,
        dlogit: f32,
        tap_grad: Option<Array3<f32>>,
        mut grads: Option<&mut Grads<f32>>,
        need_input: bool,
    ) -> Option<Array3<f32>> {
        let dz = Array3::from_elem((1, 1, 1), dlogit);
        let mut g = model
            .nets
            .d_head
            .backward(&model.d, &self.head, dz, grads.as_deref_mut(), true)
            .expect("input gradient requested");
        if let Some(extra) = tap_grad {
            g += &extra;
        }
        model.nets.d_trunk.backward(&model.d, &self.trunk, g, grads, need_input)
    }
}

fn check_frozen(before: &ParamSet<f32>, after: &ParamSet<f32>, net: Net, phase: &str) -> Result<()> {
    if before.bits_eq(after) {
        Ok(())
    } else {
        Err(Error::Contract(format!("`{}` changed during the {phase}", net.prefix())))
    }
}

fn finite(v: f64, term: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            epoch,
        })
    }
}

fn finite_grads(g: &Grads<f32>, term: &str, epoch: usize) -> Result<()> {
    finite(if g.is_finite() { 0.0 } else { f64::NAN }, term, epoch).map(|_| ())
}

fn finite_scores(scores: &[f32], term: &str, epoch: usize) -> Result<()> {
    match scores.iter().find(|s| !s.is_finite()) {
        Some(&s) => finite(s as f64, term, epoch).map(|_| ()),
        None => Ok(()),
    }
}

fn sq_mean(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x as f64 - y as f64).powi(2))
        / a.len() as f64
}

fn samples(batch: &ImageBatch) -> impl Iterator<Item = Array3<f32>> + '_ {
    (0..batch.len()).map(|i| batch.sample(i).to_owned())
}

/// Discriminator pass over one side of the batch, accumulating parameter
/// gradients of `bce_mean(scores, target) + lambda_fm * mean((F - F')^2)`.
fn discriminator_side(
    model: &Model<f32>,
    passes: &[GenPass],
    target: f64,
    lambda_fm: f64,
    grads: &mut Grads<f32>,
) -> (Vec<f32>, f64) {
    let n = passes.len();
    let mut scores = Vec::with_capacity(n);
    let mut fm = 0.0;
    for p in passes {
        let dp = DiscPass::new(model, p.disc_input());
        let tap_grad = if p.sm.is_some() {
            fm += sq_mean(&p.f, &dp.tap);
            (lambda_fm > 0.0).then(|| mse_grad(p.f.view(), dp.tap.view(), p.f.len() * n) * lambda_fm as f32)
        } else {
            None
        };
        let dz = bce_mean_logit_grad(dp.score, target, n);
        dp.backward(model, dz, tap_grad, Some(grads), false);
        scores.push(dp.score);
    }
    (scores, fm / n as f64)
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

fn check_adaptation(state: &ModelState, batch_l: &ImageBatch, batch_u: &ImageBatch, cfg: &TrainingConfig) -> Result<StepBehavior> {
    let b = cfg.behavior();
    if !b.adaptation {
        return Err(Error::config(
            "ablation_mode",
            format!("{} has no adaptation phase", cfg.ablation_mode),
        ));
    }
    if batch_l.is_empty() || batch_u.is_empty() {
        return Err(Error::Data("adaptation needs labeled and unlabeled samples".into()));
    }
    if batch_l.spatial() != batch_u.spatial() {
        return Err(Error::Shape(format!(
            "labeled batch is {:?}, unlabeled batch is {:?}",
            batch_l.spatial(),
            batch_u.spatial()
        )));
    }
    if b.direct != state.model.arch.direct_discriminator {
        return Err(Error::config(
            "ablation_mode",
            "model architecture does not match the discriminator wiring of the mode",
        ));
    }
    Ok(b)
}

fn gen_passes(model: &Model<f32>, batch: &ImageBatch, direct: bool) -> Vec<GenPass> {
    samples(batch).map(|x| GenPass::new(model, x, direct)).collect()
}

fn effective_lambda_fm(b: &StepBehavior, cfg: &TrainingConfig) -> f64 {
    if b.feature_matching {
        cfg.weights.lambda_fm
    } else {
        0.0
    }
}

/// Sub-step (a): updates the discriminator on `L_d + lambda_fm L_fm` with
/// generator features as constant targets. Returns `(L_d + lambda_fm L_fm,
/// lambda_fm L_fm, MIL, MIU)` evaluated before the update.
fn d_update(
    state: &mut ModelState,
    gl: &[GenPass],
    gu: &[GenPass],
    b: &StepBehavior,
    cfg: &TrainingConfig,
) -> Result<(f64, f64, f64, f64)> {
    let epoch = state.epoch;
    let lambda_fm = effective_lambda_fm(b, cfg);
    let model = &state.model;
    let frozen = [model.fg.clone(), model.sm.clone(), model.rm.clone()];
    let mut gd = model.d.zeros_like();
    let (sl, fm_l) = discriminator_side(model, gl, 1.0, lambda_fm, &mut gd);
    let (su, fm_u) = discriminator_side(model, gu, 0.0, lambda_fm, &mut gd);
    finite_scores(&sl, "L_d", epoch)?;
    finite_scores(&su, "L_d", epoch)?;
    let l_fm = lambda_fm * (fm_l + fm_u);
    let l_d = finite(discriminator_loss(&sl, &su)? + l_fm, "L_d", epoch)?;
    finite_grads(&gd, "L_d", epoch)?;
    {
        let (params, opt) = state.optim_mut(Net::D);
        opt.update(params, &gd, cfg.lr_d, &cfg.adam);
    }
    for (before, net) in frozen.iter().zip([Net::Fg, Net::Sm, Net::Rm]) {
        check_frozen(before, state.model.params(net), net, "discriminator update")?;
    }
    Ok((l_d, l_fm, mean(&sl), mean(&su)))
}

/// Sub-step (b): updates the generator on the adversarial objective through
/// the frozen discriminator and segmentation module. Returns `(L_adv,
/// lambda_fm L_fm)`; the second term is nonzero only in direct mode.
fn fg_update(
    state: &mut ModelState,
    gl: &[GenPass],
    gu: &[GenPass],
    b: &StepBehavior,
    cfg: &TrainingConfig,
) -> Result<(f64, f64)> {
    let epoch = state.epoch;
    let lambda_fm = effective_lambda_fm(b, cfg);
    let (nl, nu) = (gl.len(), gu.len());
    let model = &state.model;
    let frozen = [model.d.clone(), model.sm.clone(), model.rm.clone()];
    let mut gfg = model.fg.zeros_like();

    // Direct mode matches batch-mean features across the two sides.
    let mut l_fm = 0.0;
    let mut fm_grads: Option<(Array3<f32>, Array3<f32>)> = None;
    if b.direct {
        let ml = batch_mean(&gl.iter().map(|p| p.f.clone()).collect::<Vec<_>>());
        let mu = batch_mean(&gu.iter().map(|p| p.f.clone()).collect::<Vec<_>>());
        l_fm = lambda_fm * sq_mean(&ml, &mu);
        if lambda_fm > 0.0 {
            let diff = &ml - &mu;
            let k = (2.0 * lambda_fm / diff.len() as f64) as f32;
            fm_grads = Some((&diff * (k / nl as f32), &diff * (-k / nu as f32)));
        }
    }

    let mut adv = 0.0;
    for (passes, target, side_grad, active) in [
        (gl, 0.0, fm_grads.as_ref().map(|g| &g.0), b.labeled_adversarial_term),
        (gu, 1.0, fm_grads.as_ref().map(|g| &g.1), true),
    ] {
        if !active && side_grad.is_none() {
            continue;
        }
        let n = passes.len();
        let mut scores = Vec::with_capacity(n);
        for p in passes {
            let mut gf = if active {
                let dp = DiscPass::new(model, p.disc_input());
                scores.push(dp.score);
                let dz = bce_mean_logit_grad(dp.score, target, n);
                let g_in = dp.backward(model, dz, None, None, true).expect("input gradient");
                match &p.sm {
                    Some((_, sm_trace)) => model
                        .nets
                        .sm
                        .backward(&model.sm, sm_trace, g_in, None, true)
                        .expect("input gradient"),
                    None => g_in,
                }
            } else {
                Array3::zeros(p.f.raw_dim())
            };
            if let Some(g) = side_grad {
                gf += g;
            }
            model.nets.fg.backward(&model.fg, &p.fg, gf, Some(&mut gfg), false);
        }
        if active {
            finite_scores(&scores, "L_adv", epoch)?;
            adv += bce_mean(&scores, target)?;
        }
    }
    let l_adv = finite(adv, "L_adv", epoch)?;
    finite(l_fm, "L_fm", epoch)?;
    finite_grads(&gfg, "L_adv", epoch)?;
    {
        let (params, opt) = state.optim_mut(Net::Fg);
        opt.update(params, &gfg, cfg.lr_fg, &cfg.adam);
    }
    for (before, net) in frozen.iter().zip([Net::D, Net::Sm, Net::Rm]) {
        check_frozen(before, state.model.params(net), net, "generator update")?;
    }
    Ok((l_adv, l_fm))
}

/// One adversarial adaptation step: a discriminator update followed by a
/// generator update. The segmentation and reconstruction modules are frozen
/// throughout; violations are reported as [`Error::Contract`].
pub fn adaptation_step(
    state: &mut ModelState,
    batch_l: &ImageBatch,
    batch_u: &ImageBatch,
    cfg: &TrainingConfig,
) -> Result<AdaptationStats> {
    let b = check_adaptation(state, batch_l, batch_u, cfg)?;
    let gl = gen_passes(&state.model, batch_l, b.direct);
    let gu = gen_passes(&state.model, batch_u, b.direct);
    let (l_d, fm_d, mil, miu) = d_update(state, &gl, &gu, &b, cfg)?;
    // The generator is unchanged by the discriminator update, so its
    // forward passes are reused.
    let (l_adv, fm_g) = fg_update(state, &gl, &gu, &b, cfg)?;
    Ok(AdaptationStats {
        l_d,
        l_adv,
        l_fm: fm_d + fm_g,
        mil,
        miu,
    })
}

/// Sub-step (a) of [`adaptation_step`] on its own. Returns the objective
/// value before the update.
pub fn discriminator_update(
    state: &mut ModelState,
    batch_l: &ImageBatch,
    batch_u: &ImageBatch,
    cfg: &TrainingConfig,
) -> Result<f64> {
    let b = check_adaptation(state, batch_l, batch_u, cfg)?;
    let gl = gen_passes(&state.model, batch_l, b.direct);
    let gu = gen_passes(&state.model, batch_u, b.direct);
    Ok(d_update(state, &gl, &gu, &b, cfg)?.0)
}

/// Sub-step (b) of [`adaptation_step`] on its own. Returns the objective
/// value before the update.
pub fn generator_update(
    state: &mut ModelState,
    batch_l: &ImageBatch,
    batch_u: &ImageBatch,
    cfg: &TrainingConfig,
) -> Result<f64> {
    let b = check_adaptation(state, batch_l, batch_u, cfg)?;
    let gl = gen_passes(&state.model, batch_l, b.direct);
    let gu = gen_passes(&state.model, batch_u, b.direct);
    let (adv, fm) = fg_update(state, &gl, &gu, &b, cfg)?;
    Ok(adv + fm)
}

/// One segmentation step. Updates the segmentation and reconstruction
/// modules (and the generator when `fg_seg_grad` is set); the discriminator
/// is frozen.
pub fn segmentation_step(
    state: &mut ModelState,
    batch_l: &ImageBatch,
    masks: &MaskBatch,
    batch_u: Option<&ImageBatch>,
    cfg: &TrainingConfig,
) -> Result<SegStats> {
    let b = cfg.behavior();
    if batch_l.is_empty() {
        return Err(Error::Data("segmentation step needs labeled samples".into()));
    }
    if masks.data.dim() != batch_l.data.dim() {
        return Err(Error::Shape(format!(
            "masks {:?} do not match images {:?}",
            masks.data.dim(),
            batch_l.data.dim()
        )));
    }
    let epoch = state.epoch;
    let w = cfg.weights;
    let batch_u = batch_u.filter(|u| b.unlabeled_reconstruction && !u.is_empty());
    let train_fg = cfg.fg_seg_grad;

    let model = &state.model;
    let frozen_d = model.d.clone();
    let frozen_fg = model.fg.clone();
    let mut g_sm = model.sm.zeros_like();
    let mut g_rm = model.rm.zeros_like();
    let mut g_fg = model.fg.zeros_like();

    let mut one = |x: Array3<f32>, mask: Option<Array3<f32>>, n_rec: usize, n_batch: usize| -> (f64, f64) {
        let (f, fg_trace) = model.nets.fg.forward(&model.fg, x.clone());
        let (p, sm_trace) = model.nets.sm.forward(&model.sm, f.clone());
        let trunk = (!b.direct).then(|| model.nets.d_trunk.forward(&model.d, p.clone()));
        let rm_in = match &trunk {
            Some((tap, _)) => tap.clone(),
            None => f.clone(),
        };
        let (x_rec, rm_trace) = model.nets.rm.forward(&model.rm, rm_in);
        let rec = sq_mean(&x, &x_rec) * x.len() as f64;
        let g_rec = mse_grad(x.view(), x_rec.view(), n_rec) * w.lambda_rec as f32;
        let need_rm_input = !b.direct || train_fg;
        let g_rm_in = model
            .nets
            .rm
            .backward(&model.rm, &rm_trace, g_rec, Some(&mut g_rm), need_rm_input);
        let mut g_p = Array3::zeros(p.raw_dim());
        let mut g_f_direct = None;
        match (&trunk, g_rm_in) {
            (Some((_, tr)), Some(g_tap)) => {
                g_p = model
                    .nets
                    .d_trunk
                    .backward(&model.d, tr, g_tap, None, true)
                    .expect("input gradient");
            }
            (None, g) => g_f_direct = g,
            _ => {}
        }
        let mut dice = 0.0;
        if let Some(m) = mask {
            let (loss, g) = dice_sample(p.view(), m.view(), n_batch);
            dice = loss;
            g_p.scaled_add(w.lambda_dice as f32, &g);
        }
        let g_f = model.nets.sm.backward(&model.sm, &sm_trace, g_p, Some(&mut g_sm), train_fg);
        if let Some(mut g_f) = g_f {
            if let Some(extra) = g_f_direct {
                g_f += &extra;
            }
            model.nets.fg.backward(&model.fg, &fg_trace, g_f, Some(&mut g_fg), false);
        }
        (rec, dice)
    };

    let nl = batch_l.len();
    let n_rec_l = batch_l.data.len();
    let (mut rec_l, mut dice) = (0.0, 0.0);
    for i in 0..nl {
        let (r, d) = one(batch_l.sample(i).to_owned(), Some(masks.sample(i).to_owned()), n_rec_l, nl);
        rec_l += r;
        dice += d;
    }
    let rec_l = rec_l / n_rec_l as f64;
    let dice = dice / nl as f64;
    let mut rec_u = 0.0;
    if let Some(u) = batch_u {
        let n_rec_u = u.data.len();
        for x in samples(u) {
            rec_u += one(x, None, n_rec_u, u.len()).0;
        }
        rec_u /= n_rec_u as f64;
    }
    let l_seg = finite(w.lambda_rec * (rec_l + rec_u) + w.lambda_dice * dice, "L_seg", epoch)?;
    for g in [&g_sm, &g_rm, &g_fg] {
        finite_grads(g, "L_seg", epoch)?;
    }
    for (net, g, lr) in [(Net::Sm, &g_sm, cfg.lr_smrm), (Net::Rm, &g_rm, cfg.lr_smrm)] {
        let (params, opt) = state.optim_mut(net);
        opt.update(params, g, lr, &cfg.adam);
    }
    if train_fg {
        let (params, opt) = state.optim_mut(Net::Fg);
        opt.update(params, &g_fg, cfg.lr_fg, &cfg.adam);
    } else {
        check_frozen(&frozen_fg, &state.model.fg, Net::Fg, "segmentation step")?;
    }
    check_frozen(&frozen_d, &state.model.d, Net::D, "segmentation step")?;
    Ok(SegStats {
        l_seg,
        rec_labeled: rec_l,
        rec_unlabeled: rec_u,
        dice,
    })
}

/// Step pairing for one epoch: the shorter side cycles so that every batch
/// of the longer side is visited once.
pub fn pair_batches(n_labeled: usize, n_unlabeled: usize) -> Vec<(usize, Option<usize>)> {
    if n_labeled == 0 {
        return Vec::new();
    }
    if n_unlabeled == 0 {
        return (0..n_labeled).map(|i| (i, None)).collect();
    }
    (0..n_labeled.max(n_unlabeled))
        .map(|i| (i % n_labeled, Some(i % n_unlabeled)))
        .collect()
}

/// Shuffled, paired index batches for one epoch.
pub fn plan_epoch(
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<(Vec<usize>, Option<Vec<usize>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut chunks = |n: usize| -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    };
    let lb = chunks(n_labeled);
    let ub = chunks(n_unlabeled);
    pair_batches(lb.len(), ub.len())
        .into_iter()
        .map(|(i, j)| (lb[i].clone(), j.map(|j| ub[j].clone())))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    Adaptation(usize),
    Segmentation(usize),
}

pub fn train_epoch(
    state: &mut ModelState,
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &TrainingConfig,
) -> Result<EpochLog> {
    train_epoch_observed(state, labeled, unlabeled, cfg, |_| {})
}

/// [`train_epoch`] with a callback invoked after every step.
pub fn train_epoch_observed(
    state: &mut ModelState,
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &TrainingConfig,
    mut observe: impl FnMut(StepEvent),
) -> Result<EpochLog> {
    let b = cfg.behavior();
    if labeled.is_empty() || !labeled.has_all_masks() {
        return Err(Error::Data("labeled set must be non-empty with masks".into()));
    }
    let n_u = if b.use_unlabeled { unlabeled.len() } else { 0 };
    if b.adaptation && n_u == 0 {
        return Err(Error::Data(format!("{} needs unlabeled samples", cfg.ablation_mode)));
    }
    let plan = plan_epoch(labeled.len(), n_u, cfg.batch_size, cfg.seed, state.epoch);

    let mut adapt = Vec::new();
    if b.adaptation {
        for (k, (li, ui)) in plan.iter().enumerate() {
            let ui = ui.as_ref().expect("unlabeled batches are paired");
            let s = adaptation_step(state, &labeled.images(li)?, &unlabeled.images(ui)?, cfg)?;
            adapt.push(s);
            observe(StepEvent::Adaptation(k));
        }
    }
    let mut seg = Vec::new();
    for (k, (li, ui)) in plan.iter().enumerate() {
        let u = ui.as_ref().map(|ui| unlabeled.images(ui)).transpose()?;
        let s = segmentation_step(state, &labeled.images(li)?, &labeled.masks(li)?, u.as_ref(), cfg)?;
        seg.push(s.l_seg);
        observe(StepEvent::Segmentation(k));
    }

    let avg = |f: fn(&AdaptationStats) -> f64| {
        (!adapt.is_empty()).then(|| adapt.iter().map(f).sum::<f64>() / adapt.len() as f64)
    };
    Ok(EpochLog {
        epoch: state.epoch,
        l_d: avg(|s| s.l_d),
        l_adv: avg(|s| s.l_adv),
        l_fm: avg(|s| s.l_fm),
        l_seg: seg.iter().sum::<f64>() / seg.len() as f64,
        mil: avg(|s| s.mil),
        miu: avg(|s| s.miu),
        val_dice: None,
    })
}

/// Patience-based early stopping on a score that should increase.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records the score of `epoch`. Returns `(improved, stop)`; only strict
    /// improvements count.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| score > b);
        if improved {
            self.best = Some((epoch, score));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    /// State at the epoch with the best validation Dice.
    pub best: ModelState,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
    pub stopped_early: bool,
}

pub fn run_training(
    cfg: &TrainingConfig,
    labeled: &Dataset,
    unlabeled: &Dataset,
    val: &Dataset,
) -> Result<TrainingOutcome> {
    run_training_observed(cfg, labeled, unlabeled, val, |_| {})
}

/// [`run_training`] with a callback invoked after every epoch.
pub fn run_training_observed(
    cfg: &TrainingConfig,
    labeled: &Dataset,
    unlabeled: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if val.is_empty() || !val.has_all_masks() {
        return Err(Error::Data("validation set must be non-empty with masks".into()));
    }
    let arch = cfg.ablation_mode.arch(&cfg.arch);
    let mut state = init_model(&arch, cfg.seed)?;
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = state.clone();
    let mut logs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let mut log = train_epoch(&mut state, labeled, unlabeled, cfg)?;
        let v = finite(mean_dice(&state.model, val)?, "val_dice", epoch)?;
        log.val_dice = Some(v);
        log::info!(
            "epoch {epoch} [{}]: L_seg={:.4} val_dice={v:.4}",
            cfg.ablation_mode,
            log.l_seg
        );
        on_epoch(&log);
        logs.push(log);
        let (improved, stop) = stopper.observe(epoch, v);
        if improved {
            best = state.clone();
        }
        if stop && epoch < cfg.epochs {
            stopped_early = true;
            break;
        }
    }
    let best_epoch = stopper.best.map(|(e, _)| e).unwrap_or(0);
    Ok(TrainingOutcome {
        best,
        best_epoch,
        logs,
        stopped_early,
    })
}

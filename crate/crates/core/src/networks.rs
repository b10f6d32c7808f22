//! The four networks: feature generator, segmentation model, discriminator
//! with feature tap, and reverse mapper.
//!
//! ```text
//! image ──FG──▶ F ──SM──▶ P ──D trunk──▶ F' ──D head──▶ score
//!                                        └──RM──▶ reconstruction
//! ```
//!
//! `F` and `F'` have the same shape `[C_f, H / 2^d, W / 2^d]`, which is what
//! allows the feature matching loss to compare them element by element.

use ndarray::{Array1, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{DiscOutput, FeatureBatch, ImageBatch, ProbabilityBatch};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Op, Param, ParamSet, Real, Seq};
use crate::state::ModelState;

/// Network widths and discriminator wiring.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Encoder output channels, one entry per downsampling stage. The last
    /// entry is the feature width `C_f`.
    pub channels: Vec<usize>,
    /// When set, the discriminator consumes generator features directly
    /// instead of segmentation probabilities (the DDDA ablation).
    pub direct_discriminator: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            direct_discriminator: false,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config(
                "channels",
                "at least one downsampling stage is required",
            ));
        }
        if let Some(i) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::config(
                format!("channels[{i}]"),
                "channel count must be at least 1",
            ));
        }
        Ok(())
    }

    /// Number of downsampling stages `d`.
    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated config")
    }

    /// Feature map shape for an input of the given spatial size.
    pub fn feature_shape(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let f = 1usize << self.depth();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} is not a positive multiple of {f}"
            )));
        }
        Ok((self.feature_channels(), h / f, w / f))
    }
}

/// Identifies one of the four parameter collections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Net {
    Fg,
    Sm,
    D,
    Rm,
}

impl Net {
    pub const ALL: [Net; 4] = [Net::Fg, Net::Sm, Net::D, Net::Rm];

    pub fn prefix(self) -> &'static str {
        match self {
            Net::Fg => "fg",
            Net::Sm => "sm",
            Net::D => "d",
            Net::Rm => "rm",
        }
    }

    fn index(self) -> usize {
        match self {
            Net::Fg => 0,
            Net::Sm => 1,
            Net::D => 2,
            Net::Rm => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Builder {
    prefix: String,
    specs: Vec<Spec>,
}

impl Builder {
    fn new(prefix: &str) -> Self {
        Self {
            prefix: prefix.to_string(),
            specs: Vec::new(),
        }
    }

    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec {
            name: format!("{}.{name}", self.prefix),
            shape,
            init,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Op {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = self.add(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel],
            Init::Normal {
                std: (2.0 / fan_in).sqrt(),
            },
        );
        let bias = self.add(format!("{name}.bias"), vec![cout], Init::Zeros);
        Op::Conv {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Op {
        let gamma = self.add(format!("{name}.gamma"), vec![c], Init::Ones);
        let beta = self.add(format!("{name}.beta"), vec![c], Init::Zeros);
        Op::InstanceNorm { gamma, beta }
    }

    fn gap_linear(&mut self, name: &str, c: usize) -> Op {
        let weight = self.add(
            format!("{name}.weight"),
            vec![1, c],
            Init::Normal {
                std: (1.0 / c as f64).sqrt(),
            },
        );
        let bias = self.add(format!("{name}.bias"), vec![1], Init::Zeros);
        Op::GapLinear { weight, bias }
    }

    // upsample -> conv3x3 -> norm -> relu per stage, then 1x1 conv + sigmoid
    fn decoder(&mut self, arch: &ArchConfig) -> Seq {
        let d = arch.depth();
        let mut ops = Vec::new();
        let mut cin = arch.feature_channels();
        for i in 0..d {
            let cout = if i + 1 < d {
                arch.channels[d - 2 - i]
            } else {
                arch.channels[0]
            };
            let block = format!("block{i}");
            ops.push(Op::Upsample2);
            ops.push(self.conv(&format!("{block}.conv"), cin, cout, 3, 1));
            ops.push(self.norm(&format!("{block}.norm"), cout));
            ops.push(Op::Relu);
            cin = cout;
        }
        ops.push(self.conv("head", cin, 1, 1, 1));
        ops.push(Op::Sigmoid);
        Seq::new(ops)
    }
}

/// Op sequences for one architecture. Parameters live in [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub fg: Seq,
    pub sm: Seq,
    /// Discriminator up to and including the feature tap `F'`.
    pub d_trunk: Seq,
    /// Pooling + linear head producing the realness logit.
    pub d_head: Seq,
    pub rm: Seq,
    specs: [Vec<Spec>; 4],
}

impl Networks {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;

        let mut fg = Builder::new(Net::Fg.prefix());
        let mut ops = Vec::new();
        let mut cin = 1;
        for (i, &c) in arch.channels.iter().enumerate() {
            let block = format!("block{i}");
            ops.push(fg.conv(&format!("{block}.conv"), cin, c, 3, 1));
            ops.push(fg.norm(&format!("{block}.norm"), c));
            ops.push(Op::Relu);
            ops.push(Op::AvgPool2);
            cin = c;
        }
        let fg_seq = Seq::new(ops);

        let mut sm = Builder::new(Net::Sm.prefix());
        let sm_seq = sm.decoder(arch);

        let mut d = Builder::new(Net::D.prefix());
        let cf = arch.feature_channels();
        let mut trunk = Vec::new();
        if arch.direct_discriminator {
            trunk.push(d.conv("block0.conv", cf, cf, 3, 1));
            trunk.push(d.norm("block0.norm", cf));
            trunk.push(Op::Relu);
        } else {
            let mut cin = 1;
            for (i, &c) in arch.channels.iter().enumerate() {
                let block = format!("block{i}");
                trunk.push(d.conv(&format!("{block}.conv"), cin, c, 3, 2));
                trunk.push(d.norm(&format!("{block}.norm"), c));
                trunk.push(Op::Relu);
                cin = c;
            }
        }
        let head = vec![d.gap_linear("score", cf)];

        let mut rm = Builder::new(Net::Rm.prefix());
        let rm_seq = rm.decoder(arch);

        Ok(Self {
            fg: fg_seq,
            sm: sm_seq,
            d_trunk: Seq::new(trunk),
            d_head: Seq::new(head),
            rm: rm_seq,
            specs: [fg.specs, sm.specs, d.specs, rm.specs],
        })
    }

    fn init_params(&self, net: Net, seed: u64) -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(net.index() as u64 + 1);
        let params = self.specs[net.index()]
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Normal { std } => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Param {
                    name: spec.name.clone(),
                    shape: spec.shape.clone(),
                    data,
                }
            })
            .collect();
        ParamSet::new(params)
    }
}

/// Architecture plus the four parameter collections.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: ArchConfig,
    pub nets: Networks,
    pub fg: ParamSet<T>,
    pub sm: ParamSet<T>,
    pub d: ParamSet<T>,
    pub rm: ParamSet<T>,
}

impl Model<f32> {
    /// Deterministic initialization: identical `(arch, seed)` yield
    /// bit-identical parameters. Each network draws from its own stream, so
    /// changing the discriminator wiring leaves the other three untouched.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let nets = Networks::new(arch)?;
        Ok(Self {
            arch: arch.clone(),
            fg: nets.init_params(Net::Fg, seed),
            sm: nets.init_params(Net::Sm, seed),
            d: nets.init_params(Net::D, seed),
            rm: nets.init_params(Net::Rm, seed),
            nets,
        })
    }

    /// Rebuilds a model from named parameter collections, checking that
    /// names and shapes match the architecture.
    pub fn from_params(arch: &ArchConfig, sets: [ParamSet<f32>; 4]) -> Result<Self> {
        let nets = Networks::new(arch)?;
        for (net, set) in Net::ALL.iter().zip(&sets) {
            let specs = &nets.specs[net.index()];
            let ok = specs.len() == set.len()
                && specs
                    .iter()
                    .zip(set.iter())
                    .all(|(s, p)| s.name == p.name && s.shape == p.shape && p.numel() == s.shape.iter().product::<usize>());
            if !ok {
                return Err(Error::Shape(format!(
                    "parameters for `{}` do not match the architecture",
                    net.prefix()
                )));
            }
        }
        let [fg, sm, d, rm] = sets;
        Ok(Self {
            arch: arch.clone(),
            nets,
            fg,
            sm,
            d,
            rm,
        })
    }
}

impl<T: Real> Model<T> {
    pub fn params(&self, net: Net) -> &ParamSet<T> {
        match net {
            Net::Fg => &self.fg,
            Net::Sm => &self.sm,
            Net::D => &self.d,
            Net::Rm => &self.rm,
        }
    }

    pub fn params_mut(&mut self, net: Net) -> &mut ParamSet<T> {
        match net {
            Net::Fg => &mut self.fg,
            Net::Sm => &mut self.sm,
            Net::D => &mut self.d,
            Net::Rm => &mut self.rm,
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            nets: self.nets.clone(),
            fg: self.fg.cast(),
            sm: self.sm.cast(),
            d: self.d.cast(),
            rm: self.rm.cast(),
        }
    }

    pub fn features(&self, x: Array3<T>) -> Array3<T> {
        self.nets.fg.infer(&self.fg, x)
    }

    pub fn segment(&self, f: Array3<T>) -> Array3<T> {
        self.nets.sm.infer(&self.sm, f)
    }

    /// Returns the feature tap and the realness logit.
    pub fn discriminate(&self, input: Array3<T>) -> (Array3<T>, T) {
        let tap = self.nets.d_trunk.infer(&self.d, input);
        let logit = self.nets.d_head.infer(&self.d, tap.clone())[[0, 0, 0]];
        (tap, logit)
    }

    pub fn reconstruct(&self, tap: Array3<T>) -> Array3<T> {
        self.nets.rm.infer(&self.rm, tap)
    }

    /// Foreground probabilities for one image `[1, H, W]`.
    pub fn predict(&self, x: Array3<T>) -> Array3<T> {
        self.segment(self.features(x))
    }
}

fn per_sample<F>(data: &Array4<f32>, out_dim: (usize, usize, usize), mut f: F) -> Array4<f32>
where
    F: FnMut(Array3<f32>) -> Array3<f32>,
{
    let b = data.dim().0;
    let mut out = Array4::zeros((b, out_dim.0, out_dim.1, out_dim.2));
    for (i, x) in data.axis_iter(Axis(0)).enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&f(x.to_owned()));
    }
    out
}

/// Maps images to generator features `F`.
pub fn fg_forward(state: &ModelState, x: &ImageBatch) -> Result<FeatureBatch> {
    let (h, w) = x.spatial();
    let shape = state.model.arch.feature_shape(h, w)?;
    let data = per_sample(&x.data, shape, |s| state.model.features(s));
    Ok(FeatureBatch { data })
}

/// Maps generator features to foreground probabilities at full resolution.
pub fn sm_forward(state: &ModelState, f: &FeatureBatch) -> Result<ProbabilityBatch> {
    let arch = &state.model.arch;
    let (_, c, h, w) = f.data.dim();
    if c != arch.feature_channels() {
        return Err(Error::Shape(format!(
            "expected {} feature channels, got {c}",
            arch.feature_channels()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty feature map".into()));
    }
    let s = 1 << arch.depth();
    let data = per_sample(&f.data, (1, h * s, w * s), |x| state.model.segment(x));
    Ok(ProbabilityBatch { data })
}

/// Runs the discriminator on probability maps (or on features when the
/// architecture uses a direct discriminator).
pub fn d_forward(state: &ModelState, p: &ProbabilityBatch) -> Result<DiscOutput> {
    let arch = &state.model.arch;
    let (b, c, h, w) = p.data.dim();
    let tap_shape = if arch.direct_discriminator {
        if c != arch.feature_channels() {
            return Err(Error::Shape(format!(
                "direct discriminator expects {} channels, got {c}",
                arch.feature_channels()
            )));
        }
        (c, h, w)
    } else {
        if c != 1 {
            return Err(Error::Shape(format!(
                "discriminator expects one probability channel, got {c}"
            )));
        }
        arch.feature_shape(h, w)?
    };
    let mut score = Array1::zeros(b);
    let features = per_sample(&p.data, tap_shape, |x| {
        let (tap, _) = state.model.discriminate(x);
        tap
    });
    for (i, x) in p.data.axis_iter(Axis(0)).enumerate() {
        let (_, logit) = state.model.discriminate(x.to_owned());
        score[i] = sigmoid(logit);
    }
    Ok(DiscOutput { features, score })
}

/// Maps a feature tap back to image space. `image_size` is the spatial size
/// of the images the tap was derived from; the tap must have exactly the
/// generator feature shape for that size.
pub fn rm_forward(
    state: &ModelState,
    f_prime: &Array4<f32>,
    image_size: (usize, usize),
) -> Result<Array4<f32>> {
    let expected = state.model.arch.feature_shape(image_size.0, image_size.1)?;
    let (_, c, h, w) = f_prime.dim();
    if (c, h, w) != expected {
        return Err(Error::Shape(format!(
            "feature tap {:?} does not match expected {:?}",
            (c, h, w),
            expected
        )));
    }
    Ok(per_sample(f_prime, (1, image_size.0, image_size.1), |x| {
        state.model.reconstruct(x)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_are_disjoint_across_networks() {
        let model = Model::init(&ArchConfig::default(), 1).unwrap();
        let mut names: Vec<&str> = Net::ALL
            .iter()
            .flat_map(|&n| model.params(n).iter().map(|p| p.name.as_str()))
            .collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
    }

    #[test]
    fn invalid_widths_name_the_field() {
        let err = ArchConfig {
            channels: vec![8, 0],
            ..Default::default()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("channels[1]"), "{err}");
    }

    #[test]
    fn direct_discriminator_keeps_other_networks() {
        let a = Model::init(&ArchConfig::default(), 5).unwrap();
        let b = Model::init(
            &ArchConfig {
                direct_discriminator: true,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        assert_eq!(a.fg, b.fg);
        assert_eq!(a.sm, b.sm);
        assert_eq!(a.rm, b.rm);
        assert_ne!(a.d.numel(), b.d.numel());
    }
}

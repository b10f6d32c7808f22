use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Axis};

use super::{Grads, ParamSet, Real};

const NORM_EPS: f64 = 1e-5;

/// Logistic function clamped to `[eps, 1 - eps]` so outputs stay strictly
/// inside the unit interval even when the float type saturates.
pub fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    let s = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let eps = T::epsilon();
    if s.is_nan() {
        return s;
    }
    s.max(eps).min(one - eps)
}

/// A single layer. Indices refer to entries of the owning [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Square convolution with zero padding `kernel / 2`.
    Conv {
        weight: usize,
        bias: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    },
    /// Per-sample, per-channel normalization with affine scale and shift.
    InstanceNorm { gamma: usize, beta: usize },
    Relu,
    AvgPool2,
    Upsample2,
    Sigmoid,
    /// Global average pooling followed by a linear map to a single logit.
    /// Output shape is `[1, 1, 1]`.
    GapLinear { weight: usize, bias: usize },
}

enum Cache<T> {
    Conv { cols: Array2<T>, in_dim: (usize, usize, usize) },
    Norm { xhat: Array3<T>, inv_std: Vec<T> },
    Relu { out: Array3<T> },
    AvgPool,
    Upsample,
    Sigmoid { out: Array3<T> },
    GapLinear { means: Vec<T>, in_dim: (usize, usize, usize) },
}

/// Cached activations of one [`Seq::forward`] call.
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
}

/// A sequential stack of ops.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Seq {
    ops: Vec<Op>,
}

impl Seq {
    pub fn new(ops: Vec<Op>) -> Self {
        Self { ops }
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    /// Forward pass without caching.
    pub fn infer<T: Real>(&self, params: &ParamSet<T>, x: Array3<T>) -> Array3<T> {
        self.ops
            .iter()
            .fold(x, |x, op| apply(op, params, x, false).0)
    }

    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: Array3<T>) -> (Array3<T>, Trace<T>) {
        let mut caches = Vec::with_capacity(self.ops.len());
        let mut x = x;
        for op in &self.ops {
            let (y, cache) = apply(op, params, x, true);
            caches.push(cache.expect("cache requested"));
            x = y;
        }
        (x, Trace { caches })
    }

    /// Backpropagates `grad` (gradient w.r.t. the output). Parameter gradients
    /// are accumulated into `grads` when given; the input gradient is returned
    /// only when `need_input` is set.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        trace: &Trace<T>,
        grad: Array3<T>,
        mut grads: Option<&mut Grads<T>>,
        need_input: bool,
    ) -> Option<Array3<T>> {
        let mut g = grad;
        for (i, (op, cache)) in self.ops.iter().zip(&trace.caches).enumerate().rev() {
            let want_input = i > 0 || need_input;
            match backprop(op, params, cache, g, grads.as_deref_mut(), want_input) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }
}

fn apply<T: Real>(
    op: &Op,
    params: &ParamSet<T>,
    x: Array3<T>,
    keep: bool,
) -> (Array3<T>, Option<Cache<T>>) {
    match *op {
        Op::Conv {
            weight,
            bias,
            cout,
            kernel,
            stride,
            ..
        } => {
            let in_dim = x.dim();
            let (cols, ho, wo) = im2col(&x, kernel, stride);
            let w = params.get(weight).as_matrix();
            let mut out = Array2::zeros((cout, ho * wo));
            general_mat_mul(T::one(), &w, &cols, T::zero(), &mut out);
            let b = &params.get(bias).data;
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(b) {
                row.mapv_inplace(|v| v + bv);
            }
            let out = out
                .into_shape_with_order((cout, ho, wo))
                .expect("conv output shape");
            let cache = keep.then_some(Cache::Conv { cols, in_dim });
            (out, cache)
        }
        Op::InstanceNorm { gamma, beta } => {
            let (c, h, w) = x.dim();
            let n = T::of((h * w) as f64);
            let g = &params.get(gamma).data;
            let b = &params.get(beta).data;
            let mut xhat = x;
            let mut inv_std = Vec::with_capacity(c);
            for mut plane in xhat.axis_iter_mut(Axis(0)) {
                let mean = plane.iter().copied().sum::<T>() / n;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let inv = T::one() / (var + T::of(NORM_EPS)).sqrt();
                plane.mapv_inplace(|v| (v - mean) * inv);
                inv_std.push(inv);
            }
            let mut y = xhat.clone();
            for (ch, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
                let (gv, bv) = (g[ch], b[ch]);
                plane.mapv_inplace(|v| gv * v + bv);
            }
            let cache = keep.then_some(Cache::Norm { xhat, inv_std });
            (y, cache)
        }
        Op::Relu => {
            let mut y = x;
            y.mapv_inplace(|v| if v < T::zero() { T::zero() } else { v });
            let cache = keep.then(|| Cache::Relu { out: y.clone() });
            (y, cache)
        }
        Op::AvgPool2 => {
            let (c, h, w) = x.dim();
            let quarter = T::of(0.25);
            let y = Array3::from_shape_fn((c, h / 2, w / 2), |(k, i, j)| {
                (x[[k, 2 * i, 2 * j]]
                    + x[[k, 2 * i, 2 * j + 1]]
                    + x[[k, 2 * i + 1, 2 * j]]
                    + x[[k, 2 * i + 1, 2 * j + 1]])
                    * quarter
            });
            (y, keep.then_some(Cache::AvgPool))
        }
        Op::Upsample2 => {
            let (c, h, w) = x.dim();
            let y = Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, i, j)| x[[k, i / 2, j / 2]]);
            (y, keep.then_some(Cache::Upsample))
        }
        Op::Sigmoid => {
            let mut y = x;
            y.mapv_inplace(sigmoid);
            let cache = keep.then(|| Cache::Sigmoid { out: y.clone() });
            (y, cache)
        }
        Op::GapLinear { weight, bias } => {
            let in_dim = x.dim();
            let n = T::of((in_dim.1 * in_dim.2) as f64);
            let means: Vec<T> = x
                .axis_iter(Axis(0))
                .map(|plane| plane.iter().copied().sum::<T>() / n)
                .collect();
            let w = &params.get(weight).data;
            let z = params.get(bias).data[0]
                + means.iter().zip(w).map(|(&m, &wv)| m * wv).sum::<T>();
            let y = Array3::from_elem((1, 1, 1), z);
            (y, keep.then_some(Cache::GapLinear { means, in_dim }))
        }
    }
}

fn backprop<T: Real>(
    op: &Op,
    params: &ParamSet<T>,
    cache: &Cache<T>,
    grad: Array3<T>,
    grads: Option<&mut Grads<T>>,
    need_input: bool,
) -> Option<Array3<T>> {
    match (op, cache) {
        (
            &Op::Conv {
                weight,
                bias,
                cout,
                kernel,
                stride,
                ..
            },
            Cache::Conv { cols, in_dim },
        ) => {
            let p = grad.len() / cout;
            let g2 = grad
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((cout, p))
                .expect("conv grad shape");
            if let Some(gr) = grads {
                general_mat_mul(
                    T::one(),
                    &g2,
                    &cols.t(),
                    T::one(),
                    &mut gr.matrix_mut(weight, cout),
                );
                for (acc, row) in gr.0[bias].iter_mut().zip(g2.axis_iter(Axis(0))) {
                    *acc += row.sum();
                }
            }
            if !need_input {
                return None;
            }
            let w = params.get(weight).as_matrix();
            let mut dcols = Array2::zeros((cols.nrows(), p));
            general_mat_mul(T::one(), &w.t(), &g2, T::zero(), &mut dcols);
            Some(col2im(&dcols, *in_dim, kernel, stride))
        }
        (&Op::InstanceNorm { gamma, beta }, Cache::Norm { xhat, inv_std }) => {
            let (_, h, w) = xhat.dim();
            let n = T::of((h * w) as f64);
            let gam = &params.get(gamma).data;
            if let Some(gr) = grads {
                for (ch, (gp, xp)) in grad.axis_iter(Axis(0)).zip(xhat.axis_iter(Axis(0))).enumerate() {
                    let dg: T = gp.iter().zip(xp.iter()).map(|(&a, &b)| a * b).sum();
                    let db: T = gp.iter().copied().sum();
                    gr.0[gamma][ch] += dg;
                    gr.0[beta][ch] += db;
                }
            }
            if !need_input {
                return None;
            }
            let mut dx = grad;
            for (ch, (mut gp, xp)) in dx.axis_iter_mut(Axis(0)).zip(xhat.axis_iter(Axis(0))).enumerate() {
                let gv = gam[ch];
                let sum_d: T = gp.iter().map(|&a| a * gv).sum();
                let sum_dx: T = gp.iter().zip(xp.iter()).map(|(&a, &b)| a * gv * b).sum();
                let scale = inv_std[ch] / n;
                for (d, &xh) in gp.iter_mut().zip(xp.iter()) {
                    *d = scale * (n * *d * gv - sum_d - xh * sum_dx);
                }
            }
            Some(dx)
        }
        (Op::Relu, Cache::Relu { out }) => {
            if !need_input {
                return None;
            }
            let mut dx = grad;
            dx.zip_mut_with(out, |d, &o| {
                if o <= T::zero() {
                    *d = T::zero();
                }
            });
            Some(dx)
        }
        (Op::AvgPool2, Cache::AvgPool) => {
            if !need_input {
                return None;
            }
            let (c, h, w) = grad.dim();
            let quarter = T::of(0.25);
            Some(Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, i, j)| {
                grad[[k, i / 2, j / 2]] * quarter
            }))
        }
        (Op::Upsample2, Cache::Upsample) => {
            if !need_input {
                return None;
            }
            let (c, h, w) = grad.dim();
            Some(Array3::from_shape_fn((c, h / 2, w / 2), |(k, i, j)| {
                grad[[k, 2 * i, 2 * j]]
                    + grad[[k, 2 * i, 2 * j + 1]]
                    + grad[[k, 2 * i + 1, 2 * j]]
                    + grad[[k, 2 * i + 1, 2 * j + 1]]
            }))
        }
        (Op::Sigmoid, Cache::Sigmoid { out }) => {
            if !need_input {
                return None;
            }
            let mut dx = grad;
            dx.zip_mut_with(out, |d, &s| *d = *d * s * (T::one() - s));
            Some(dx)
        }
        (&Op::GapLinear { weight, bias }, Cache::GapLinear { means, in_dim }) => {
            let gz = grad[[0, 0, 0]];
            if let Some(gr) = grads {
                for (acc, &m) in gr.0[weight].iter_mut().zip(means) {
                    *acc += gz * m;
                }
                gr.0[bias][0] += gz;
            }
            if !need_input {
                return None;
            }
            let n = T::of((in_dim.1 * in_dim.2) as f64);
            let w = &params.get(weight).data;
            Some(Array3::from_shape_fn(*in_dim, |(k, _, _)| gz * w[k] / n))
        }
        _ => unreachable!("trace does not match op sequence"),
    }
}

fn out_len(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

/// Unfolds `[C, H, W]` into `[C * k * k, Ho * Wo]` patch columns.
fn im2col<T: Real>(x: &Array3<T>, kernel: usize, stride: usize) -> (Array2<T>, usize, usize) {
    let (c, h, w) = x.dim();
    let (ho, wo) = (out_len(h, kernel, stride), out_len(w, kernel, stride));
    let pad = kernel / 2;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * kernel * kernel, ho * wo));
    let cs = cols.as_slice_mut().expect("standard layout");
    let plen = ho * wo;
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut cs[row * plen..(row + 1) * plen];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let lo = pad.saturating_sub(kx);
                        let hi = wo.min(w + pad - kx);
                        if lo < hi {
                            out[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
fn col2im<T: Real>(
    cols: &Array2<T>,
    in_dim: (usize, usize, usize),
    kernel: usize,
    stride: usize,
) -> Array3<T> {
    let (c, h, w) = in_dim;
    let (ho, wo) = (out_len(h, kernel, stride), out_len(w, kernel, stride));
    let pad = kernel / 2;
    let plen = ho * wo;
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array3::<T>::zeros(in_dim);
    let xs = x.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &cs[row * plen..(row + 1) * plen];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let sr = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in sr.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    fn conv_params(cin: usize, cout: usize, k: usize) -> ParamSet<f64> {
        let n = cout * cin * k * k;
        ParamSet::new(vec![
            Param {
                name: "w".into(),
                shape: vec![cout, cin, k, k],
                data: (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect(),
            },
            Param {
                name: "b".into(),
                shape: vec![cout],
                data: (0..cout).map(|i| i as f64 * 0.1).collect(),
            },
        ])
    }

    // direct convolution, independent of im2col
    fn naive_conv(x: &Array3<f64>, p: &ParamSet<f64>, cout: usize, k: usize, stride: usize) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let pad = k as isize / 2;
        let (ho, wo) = (out_len(h, k, stride), out_len(w, k, stride));
        let wt = &p.get(0).data;
        Array3::from_shape_fn((cout, ho, wo), |(co, oy, ox)| {
            let mut acc = p.get(1).data[co];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad;
                        let ix = (ox * stride + kx) as isize - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[((co * c + ci) * k + ky) * k + kx] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_convolution() {
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let x = Array3::from_shape_fn((2, 6, 8), |(c, i, j)| ((c * 31 + i * 5 + j * 3) % 13) as f64 / 13.0);
            let p = conv_params(2, 3, k);
            let seq = Seq::new(vec![Op::Conv { weight: 0, bias: 1, cin: 2, cout: 3, kernel: k, stride }]);
            let got = seq.infer(&p, x.clone());
            let want = naive_conv(&x, &p, 3, k, stride);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        for &stride in &[1, 2] {
            let x = Array3::from_shape_fn((2, 6, 6), |(c, i, j)| (c + 2 * i + 3 * j) as f64 * 0.1);
            let (cols, _, _) = im2col(&x, 3, stride);
            let y = Array2::from_shape_fn(cols.dim(), |(r, q)| ((r * 3 + q) % 7) as f64 - 3.0);
            let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            let back = col2im(&y, x.dim(), 3, stride);
            let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        for &v in &[-1e4f32, -100.0, -20.0, 0.0, 20.0, 100.0, 1e4] {
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0, "{v} -> {s}");
        }
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(f32::NAN).is_nan());
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = Array3::from_shape_fn((1, 4, 6), |(_, i, j)| (i * 6 + j) as f64);
        let p = ParamSet::<f64>::default();
        let pooled = Seq::new(vec![Op::AvgPool2]).infer(&p, x.clone());
        assert_eq!(pooled.dim(), (1, 2, 3));
        assert_eq!(pooled[[0, 0, 0]], (0.0 + 1.0 + 6.0 + 7.0) / 4.0);
        let up = Seq::new(vec![Op::Upsample2]).infer(&p, pooled);
        assert_eq!(up.dim(), (1, 4, 6));
        assert_eq!(up[[0, 1, 1]], up[[0, 0, 0]]);
    }
}

use ndarray::{ArrayView2, ArrayViewMut2, Ix2};

use super::Real;

/// A named, flat parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Views the parameter as a matrix with the leading dimension as rows.
    pub(crate) fn as_matrix(&self) -> ArrayView2<'_, T> {
        let rows = self.shape.first().copied().unwrap_or(1);
        let cols = self.data.len() / rows.max(1);
        ArrayView2::from_shape(Ix2(rows, cols), &self.data).expect("param layout")
    }
}

/// An ordered collection of parameters belonging to one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(params: Vec<Param<T>>) -> Self {
        Self { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads(self.params.iter().map(|p| vec![T::zero(); p.numel()]).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }
}

impl ParamSet<f32> {
    /// Bitwise equality of every parameter value.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.len() == b.data.len()
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradient buffers laid out like the [`ParamSet`] they were created from.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Vec<T>>);

impl<T: Real> Grads<T> {
    pub(crate) fn matrix_mut(&mut self, idx: usize, rows: usize) -> ArrayViewMut2<'_, T> {
        let buf = &mut self.0[idx];
        let cols = buf.len() / rows;
        ArrayViewMut2::from_shape(Ix2(rows, cols), buf).expect("grad layout")
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

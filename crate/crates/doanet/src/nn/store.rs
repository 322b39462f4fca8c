//! Flat parameter storage shared by all layers of one model.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Owns every parameter value and its gradient as one contiguous vector.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: &str, rows: usize, cols: usize, mut init: impl FnMut() -> f64) -> ParamId {
        let offset = self.data.len();
        let len = rows * cols;
        self.data.extend(std::iter::repeat_with(&mut init).take(len));
        self.grad.extend(std::iter::repeat(0.0).take(len));
        self.entries.push(ParamEntry { name: name.to_string(), offset, rows, cols });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
    pub fn alloc_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.alloc(name, rows, cols, || rng.gen_range(-bound..bound))
    }

    pub fn alloc_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.alloc(name, rows, cols, || 0.0)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn view(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let e = &self.entries[id.0];
        ArrayView2::from_shape((e.rows, e.cols), &self.data[e.offset..e.offset + e.len()]).unwrap()
    }

    pub fn view_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let e = self.entries[id.0].clone();
        ArrayViewMut2::from_shape((e.rows, e.cols), &mut self.data[e.offset..e.offset + e.len()]).unwrap()
    }

    pub fn grad_view(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let e = &self.entries[id.0];
        ArrayView2::from_shape((e.rows, e.cols), &self.grad[e.offset..e.offset + e.len()]).unwrap()
    }

    pub fn grad_view_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let e = self.entries[id.0].clone();
        ArrayViewMut2::from_shape((e.rows, e.cols), &mut self.grad[e.offset..e.offset + e.len()]).unwrap()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

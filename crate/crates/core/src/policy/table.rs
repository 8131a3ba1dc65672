use serde::{Deserialize, Serialize};

/// Shape of a logit (or gradient) table.
///
/// Rows are addressed by `(block, position, prev)` where `block` is a context
/// class or the shared block, and `prev` ranges over the vocabulary plus a
/// begin-of-sequence marker at index `vocab_size`. Each row holds one value
/// per token. Storage is row-major in exactly that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableShape {
    pub blocks: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TableShape {
    pub fn prev_slots(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn rows(&self) -> usize {
        self.blocks * self.max_len * self.prev_slots()
    }

    pub fn len(&self) -> usize {
        self.rows() * self.vocab_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, block: usize, pos: usize, prev: usize) -> usize {
        debug_assert!(block < self.blocks && pos < self.max_len && prev < self.prev_slots());
        (block * self.max_len + pos) * self.prev_slots() + prev
    }

    /// Inverse of [`TableShape::row`].
    pub fn row_coords(&self, row: usize) -> (usize, usize, usize) {
        let prev = row % self.prev_slots();
        let rest = row / self.prev_slots();
        (rest / self.max_len, rest % self.max_len, prev)
    }
}

/// Dense real-valued table; used both for parameters and for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    shape: TableShape,
    data: Vec<f64>,
}

impl ParamTable {
    pub fn zeros(shape: TableShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: TableShape, data: Vec<f64>) -> Option<Self> {
        (data.len() == shape.len()).then_some(Self { shape, data })
    }

    pub fn shape(&self) -> TableShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let v = self.shape.vocab_size;
        &self.data[row * v..(row + 1) * v]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let v = self.shape.vocab_size;
        &mut self.data[row * v..(row + 1) * v]
    }

    pub fn get(&self, block: usize, pos: usize, prev: usize, tok: usize) -> f64 {
        self.row(self.shape.row(block, pos, prev))[tok]
    }

    pub fn set(&mut self, block: usize, pos: usize, prev: usize, tok: usize, value: f64) {
        let r = self.shape.row(block, pos, prev);
        self.row_mut(r)[tok] = value;
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamTable, scale: f64) {
        assert_eq!(self.shape, other.shape, "table shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn dot(&self, other: &ParamTable) -> f64 {
        assert_eq!(self.shape, other.shape, "table shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamTable) -> f64 {
        assert_eq!(self.shape, other.shape, "table shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows holding at least one non-zero entry.
    pub fn nonzero_rows(&self) -> Vec<usize> {
        (0..self.shape.rows())
            .filter(|&r| self.row(r).iter().any(|&x| x != 0.0))
            .collect()
    }
}

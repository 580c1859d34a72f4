use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major `f64` array. Rank 0..=2; rank-0 and rank-1 tensors are
/// viewed as 1×1 and 1×k matrices by the matrix accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::shape("tensor", format!("rank {} unsupported", shape.len())));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Ok(Tensor { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    /// Glorot-style uniform(−s, s) with s = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// `a (r×k) · b (k×c)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = a.row(i);
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![r, c], data: out }
}

/// `a (r×k) · bᵀ` with `b (c×k)`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let arow = a.row(i);
        for j in 0..c {
            out.push(arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum());
        }
    }
    Tensor { shape: vec![r, c], data: out }
}

/// `aᵀ (k×r) · b (r×c)` with `a (r×k)`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let brow = b.row(i);
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * c..(p + 1) * c].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![k, c], data: out }
}

/// Named trainable tensors. Iteration order is the name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    slots: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.slots.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.slots.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.slots.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn zeros_like(&self) -> ParameterStore {
        ParameterStore {
            slots: self.slots.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    /// `self += scale · other`, slot by slot.
    pub fn axpy(&mut self, scale: f64, other: &ParameterStore) -> Result<()> {
        for (name, t) in &mut self.slots {
            let o = other
                .get(name)
                .ok_or_else(|| Error::shape("axpy", format!("missing slot {name}")))?;
            if o.shape() != t.shape() {
                return Err(Error::shape("axpy", format!("slot {name}")));
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParameterStore) -> f64 {
        self.slots
            .iter()
            .filter_map(|(k, v)| other.get(k).map(|o| (v, o)))
            .flat_map(|(v, o)| v.data().iter().zip(o.data()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let bt = Tensor::matrix(2, 3, vec![7., 9., 11., 8., 10., 12.]).unwrap();
        assert_eq!(matmul_nt(&a, &bt).data(), c.data());
        let at = Tensor::matrix(3, 2, vec![1., 4., 2., 5., 3., 6.]).unwrap();
        assert_eq!(matmul_tn(&at, &b).data(), c.data());
    }
}

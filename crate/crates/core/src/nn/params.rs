use std::io::{Read, Write};
use std::ops::{Add, Mul, Sub};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PARAM_LAYOUT_VERSION: u64 = 1;

/// Dimensions of the two-layer GCN: input features, hidden units, classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnShape {
    pub d: usize,
    pub h: usize,
    pub c: usize,
}

impl GcnShape {
    pub fn new(d: usize, h: usize, c: usize) -> Self {
        Self { d, h, c }
    }

    pub fn num_params(&self) -> usize {
        self.d * self.h + self.h + self.h * self.c + self.c
    }
}

/// Weights of `logits = Â · drop(ReLU(Â X W1 + b1)) · W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl GcnParams {
    pub fn zeros(shape: GcnShape) -> Self {
        Self {
            w1: Array2::zeros((shape.d, shape.h)),
            b1: Array1::zeros(shape.h),
            w2: Array2::zeros((shape.h, shape.c)),
            b2: Array1::zeros(shape.c),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(shape: GcnShape, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        let fill = |m: &mut Array2<f64>, rng: &mut dyn rand::RngCore| {
            let limit = (6.0 / (m.nrows() + m.ncols()) as f64).sqrt();
            m.mapv_inplace(|_| rng.random_range(-limit..=limit));
        };
        fill(&mut p.w1, rng);
        fill(&mut p.w2, rng);
        p
    }

    pub fn shape(&self) -> GcnShape {
        GcnShape::new(self.w1.nrows(), self.w1.ncols(), self.w2.ncols())
    }

    /// Canonical layout: W1 row-major, b1, W2 row-major, b2.
    pub fn flatten(&self) -> ParamVector {
        let mut v = Vec::with_capacity(self.shape().num_params());
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        ParamVector(v)
    }

    pub fn unflatten(shape: GcnShape, flat: &ParamVector) -> Result<Self> {
        if flat.len() != shape.num_params() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, shape {:?} needs {}",
                flat.len(),
                shape,
                shape.num_params()
            )));
        }
        let v = flat.as_slice();
        let (w1, rest) = v.split_at(shape.d * shape.h);
        let (b1, rest) = rest.split_at(shape.h);
        let (w2, b2) = rest.split_at(shape.h * shape.c);
        Ok(Self {
            w1: Array2::from_shape_vec((shape.d, shape.h), w1.to_vec()).expect("sized"),
            b1: Array1::from(b1.to_vec()),
            w2: Array2::from_shape_vec((shape.h, shape.c), w2.to_vec()).expect("sized"),
            b2: Array1::from(b2.to_vec()),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }
}

/// Flat parameter vector; the unit of aggregation, correction and projection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot of mismatched vectors");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        assert_eq!(self.len(), x.len(), "axpy of mismatched vectors");
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * alpha).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        (self - other).norm()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Add for &ParamVector {
    type Output = ParamVector;
    fn add(self, rhs: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), rhs.len(), "add of mismatched vectors");
        ParamVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &ParamVector {
    type Output = ParamVector;
    fn sub(self, rhs: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), rhs.len(), "sub of mismatched vectors");
        ParamVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Mul<f64> for &ParamVector {
    type Output = ParamVector;
    fn mul(self, alpha: f64) -> ParamVector {
        self.scaled(alpha)
    }
}

/// Binary checkpoint: four little-endian `u64` header words `(d, h, C,
/// layout version)` followed by the parameters as little-endian `f64`.
pub fn write_params(w: &mut impl Write, shape: GcnShape, params: &ParamVector) -> Result<()> {
    if params.len() != shape.num_params() {
        return Err(Error::Shape(format!(
            "cannot write {} parameters under shape {:?}",
            params.len(),
            shape
        )));
    }
    for word in [shape.d as u64, shape.h as u64, shape.c as u64, PARAM_LAYOUT_VERSION] {
        w.write_all(&word.to_le_bytes())?;
    }
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<(GcnShape, ParamVector)> {
    let mut word = [0u8; 8];
    let mut header = [0u64; 4];
    for h in header.iter_mut() {
        r.read_exact(&mut word)?;
        *h = u64::from_le_bytes(word);
    }
    if header[3] != PARAM_LAYOUT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported parameter layout version {}",
            header[3]
        )));
    }
    let shape = GcnShape::new(header[0] as usize, header[1] as usize, header[2] as usize);
    let mut values = Vec::with_capacity(shape.num_params());
    for _ in 0..shape.num_params() {
        r.read_exact(&mut word)?;
        values.push(f64::from_le_bytes(word));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Validation("trailing bytes after parameter payload".into()));
    }
    Ok((shape, ParamVector(values)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #[test]
        fn flatten_roundtrip_bit_exact(d in 1usize..6, h in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            let shape = GcnShape::new(d, h, c);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut p = GcnParams::glorot(shape, &mut rng);
            p.b1.mapv_inplace(|_| rng.random::<f64>() - 0.5);
            p.b2.mapv_inplace(|_| rng.random::<f64>() * 1e-300);
            let flat = p.flatten();
            prop_assert_eq!(flat.len(), shape.num_params());
            let back = GcnParams::unflatten(shape, &flat).unwrap();
            prop_assert!(back.flatten().as_slice().iter().zip(flat.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));

            let mut buf = Vec::new();
            write_params(&mut buf, shape, &flat).unwrap();
            let (s2, v2) = read_params(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(s2, shape);
            prop_assert_eq!(v2, flat);
        }
    }

    #[test]
    fn vector_arithmetic_matches_matrices() {
        let shape = GcnShape::new(3, 2, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = GcnParams::glorot(shape, &mut rng);
        let b = GcnParams::glorot(shape, &mut rng);
        let sum = GcnParams::unflatten(shape, &(&a.flatten() + &b.flatten())).unwrap();
        assert_eq!(sum.w1, &a.w1 + &b.w1);
        assert_eq!(sum.w2, &a.w2 + &b.w2);
        let dot = a.flatten().dot(&b.flatten());
        let by_parts = (&a.w1 * &b.w1).sum() + (&a.w2 * &b.w2).sum() + a.b1.dot(&b.b1) + a.b2.dot(&b.b2);
        assert!((dot - by_parts).abs() < 1e-14);
        let scaled = GcnParams::unflatten(shape, &(&a.flatten() * 2.5)).unwrap();
        assert_eq!(scaled.w1, &a.w1 * 2.5);
    }

    #[test]
    fn rejects_wrong_length() {
        let shape = GcnShape::new(2, 2, 2);
        assert!(GcnParams::unflatten(shape, &ParamVector::zeros(3)).is_err());
        let mut buf = Vec::new();
        write_params(&mut buf, shape, &ParamVector::zeros(shape.num_params())).unwrap();
        buf.push(0);
        assert!(read_params(&mut buf.as_slice()).is_err());
    }
}

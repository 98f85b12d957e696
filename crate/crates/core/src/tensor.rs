//! Dense f32 vectors and row-major matrices, the reference matvec, stable
//! softmax and the seeded random streams every other module draws from.
//!
//! The reference matvec accumulates each output entry strictly left to right
//! over the column index. Faster paths in this crate tile over *rows* instead
//! of reassociating within a row, so they stay bit-identical to it.

use std::ops::Index;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::IndexList;

/// Row tile used by the matvec-style loops.
pub(crate) const ROW_TILE: usize = 8;

/// A non-empty vector of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::precondition("vector must be non-empty"));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::precondition(format!(
                "vector entry {pos} is not finite ({})",
                data[pos]
            )));
        }
        Ok(Vector(data))
    }

    /// Wraps data produced inside the crate from finite inputs.
    pub(crate) fn from_raw(data: Vec<f32>) -> Self {
        debug_assert!(!data.is_empty());
        debug_assert!(data.iter().all(|x| x.is_finite()), "non-finite entry");
        Vector(data)
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Vector::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl Index<usize> for Vector {
    type Output = f32;

    fn index(&self, i: usize) -> &f32 {
        &self.0[i]
    }
}

/// Lowest index holding the maximum value. Panics on an empty slice.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-major `rows x cols` matrix. Row `i` occupies
/// `data[i * cols .. (i + 1) * cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::precondition(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    pub fn uniform(rows: usize, cols: usize, bound: f32, rng: &mut RngStream) -> Self {
        Matrix::from_fn(rows, cols, |_, _| rng.symmetric(bound))
    }

    /// Glorot/Xavier uniform init: `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(rows: usize, cols: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt() as f32;
        Matrix::uniform(rows, cols, bound, rng)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Size of the weights in bytes.
    pub fn byte_len(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<f32>()) as u64
    }
}

/// Dot products of `T` rows against the same vector. Each row accumulates
/// left to right from `0.0`, so every lane is bit-identical to a scalar loop.
#[inline(always)]
pub(crate) fn dot_tile<const T: usize>(rows: [&[f32]; T], x: &[f32]) -> [f32; T] {
    let n = x.len();
    let rows = rows.map(|r| &r[..n]);
    let mut acc = [0.0f32; T];
    for j in 0..n {
        let xj = x[j];
        for t in 0..T {
            acc[t] += rows[t][j] * xj;
        }
    }
    acc
}

/// Left-to-right dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out[i] = dot(m.row(i), x)` for every row. No allocation.
pub(crate) fn matvec_into(m: &Matrix, x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(m.cols, x.len());
    debug_assert_eq!(m.rows, out.len());
    let full = m.rows / ROW_TILE * ROW_TILE;
    for base in (0..full).step_by(ROW_TILE) {
        let rows: [&[f32]; ROW_TILE] = std::array::from_fn(|t| m.row(base + t));
        out[base..base + ROW_TILE].copy_from_slice(&dot_tile(rows, x));
    }
    for i in full..m.rows {
        out[i] = dot(m.row(i), x);
    }
}

/// `m * v` with the fixed left-to-right summation order per row.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::precondition(format!(
            "matvec: matrix has {} cols but vector has {} entries",
            m.cols,
            v.len()
        )));
    }
    let mut out = vec![0.0; m.rows];
    matvec_into(m, v.as_slice(), &mut out);
    Ok(Vector::from_raw(out))
}

/// Probability distribution, optionally over a subset of the vocabulary.
///
/// When `domain` is present, `probs[j]` is the probability of token
/// `domain[j]` and every token outside the domain has probability zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Vector,
    domain: Option<IndexList>,
}

impl ProbDist {
    pub fn new(probs: Vector, domain: Option<IndexList>) -> Result<Self> {
        if probs.as_slice().iter().any(|&p| p < 0.0) {
            return Err(Error::precondition("negative probability"));
        }
        let sum: f64 = probs.as_slice().iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::precondition(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        if let Some(d) = &domain {
            if d.len() != probs.len() {
                return Err(Error::precondition(format!(
                    "domain has {} indices but distribution has {} entries",
                    d.len(),
                    probs.len()
                )));
            }
        }
        Ok(ProbDist { probs, domain })
    }

    pub(crate) fn from_parts(probs: Vector, domain: Option<IndexList>) -> Self {
        debug_assert!(domain.as_ref().map_or(true, |d| d.len() == probs.len()));
        ProbDist { probs, domain }
    }

    pub fn probs(&self) -> &Vector {
        &self.probs
    }

    pub fn domain(&self) -> Option<&IndexList> {
        self.domain.as_ref()
    }

    /// Attaches a vocabulary domain to a distribution over `domain.len()`
    /// outcomes.
    pub fn with_domain(self, domain: IndexList) -> Result<Self> {
        ProbDist::new(self.probs, Some(domain))
    }

    /// Vocabulary token at position `j` of `probs`.
    #[inline]
    pub fn token_at(&self, j: usize) -> usize {
        match &self.domain {
            Some(d) => d.as_slice()[j],
            None => j,
        }
    }

    /// Probability assigned to a vocabulary token (zero outside the domain).
    pub fn prob_of(&self, token: usize) -> f32 {
        match &self.domain {
            None => self.probs.as_slice().get(token).copied().unwrap_or(0.0),
            Some(d) => d
                .as_slice()
                .iter()
                .position(|&t| t == token)
                .map_or(0.0, |j| self.probs[j]),
        }
    }

    /// Expands to a dense distribution over `vocab` tokens.
    pub fn to_dense(&self, vocab: usize) -> Vec<f32> {
        let mut dense = vec![0.0; vocab];
        for (j, &p) in self.probs.as_slice().iter().enumerate() {
            dense[self.token_at(j)] = p;
        }
        dense
    }

    /// Most likely vocabulary token; ties go to the lowest token id.
    pub fn argmax_token(&self) -> usize {
        let probs = self.probs.as_slice();
        let mut best = 0;
        for j in 1..probs.len() {
            let better = probs[j] > probs[best]
                || (probs[j] == probs[best] && self.token_at(j) < self.token_at(best));
            if better {
                best = j;
            }
        }
        self.token_at(best)
    }

    /// Draws a vocabulary token by inverse CDF.
    pub fn sample(&self, rng: &mut RngStream) -> usize {
        let j = sample_index(self.probs.as_slice(), rng);
        self.token_at(j)
    }
}

/// Inverse-CDF draw from unnormalized non-negative weights.
pub(crate) fn sample_index(weights: &[f32], rng: &mut RngStream) -> usize {
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let target = rng.next_f64() * total;
    let mut acc = 0.0f64;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w as f64;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Numerically stable softmax into `out`. Returns nothing; `z` must be
/// non-empty and finite.
pub(crate) fn softmax_into(z: &[f32], out: &mut [f32]) {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &x) in out.iter_mut().zip(z) {
        *o = (x - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn softmax(z: &Vector) -> Result<ProbDist> {
    let mut out = vec![0.0; z.len()];
    softmax_into(z.as_slice(), &mut out);
    Ok(ProbDist::from_parts(Vector::from_raw(out), None))
}

/// Softmax of `z / temperature`.
pub fn softmax_with_temperature(z: &Vector, temperature: f32) -> Result<ProbDist> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::precondition(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        return softmax(z);
    }
    let scaled: Vec<f32> = z.as_slice().iter().map(|x| x / temperature).collect();
    softmax(&Vector::new(scaled)?)
}

/// Deterministic random stream keyed by `(seed, stream)`.
///
/// Backed by ChaCha8, a counter-based generator: distinct stream ids give
/// independent sequences for the same seed, and a stream never depends on
/// how many other streams were consumed.
#[derive(Debug, Clone)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream(rng)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f32(&mut self) -> f32 {
        self.0.random::<f32>()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform in `[-bound, bound)`.
    pub fn symmetric(&mut self, bound: f32) -> f32 {
        (2.0 * self.next_f32() - 1.0) * bound
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Convenience for tests and benches: a seeded vector with entries in
/// `[-1, 1)`.
pub fn random_vector(len: usize, rng: &mut RngStream) -> Vector {
    Vector::from_raw((0..len).map(|_| rng.symmetric(1.0)).collect())
}

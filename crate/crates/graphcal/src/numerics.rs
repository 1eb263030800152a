//! Deterministic dense linear algebra, activations, softmax/cross-entropy,
//! dropout and seeded randomness shared by the rest of the crate.
//!
//! Everything here runs in f64 with a fixed accumulation order (row-major,
//! ascending column index), so repeated runs are bitwise identical.

use crate::error::{Error, Result};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "expected {} entries for {}x{}, got {}",
                rows * cols,
                rows,
                cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch("ragged row lengths".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(DenseMatrix { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "hadamard {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &DenseMatrix, scale: f64) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// Dense matrix product with fixed accumulation order: for each output
/// element the inner sum runs over k ascending.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "matmul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Sparse-dense product. For each output row the accumulation runs over the
/// stored entries in ascending column order, so the result is reproducible.
pub fn spmm(sparse: &crate::graphdata::CsrMatrix, dense: &DenseMatrix) -> Result<DenseMatrix> {
    if sparse.n != dense.rows {
        return Err(Error::DimensionMismatch(format!(
            "spmm {0}x{0} * {1}x{2}",
            sparse.n, dense.rows, dense.cols
        )));
    }
    let mut out = DenseMatrix::zeros(sparse.n, dense.cols);
    for i in 0..sparse.n {
        let start = sparse.row_ptr[i];
        let end = sparse.row_ptr[i + 1];
        let orow = &mut out.data[i * dense.cols..(i + 1) * dense.cols];
        for idx in start..end {
            let k = sparse.col_idx[idx];
            let v = sparse.values[idx];
            let drow = &dense.data[k * dense.cols..(k + 1) * dense.cols];
            for j in 0..dense.cols {
                orow[j] += v * drow[j];
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(i);
        let mut sum = 0.0;
        for (o, &z) in orow.iter_mut().zip(row) {
            *o = (z - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Probability floor used when taking logs of predicted probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of the true class over the masked nodes.
/// Probabilities below [`PROB_FLOOR`] are clamped; the number of clamps is
/// returned alongside the loss.
pub fn cross_entropy(
    probs: &DenseMatrix,
    labels: &[usize],
    mask: &[usize],
) -> Result<(f64, usize)> {
    if mask.is_empty() {
        return Err(Error::InvalidInput("cross_entropy over empty mask".into()));
    }
    if probs.rows != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "probs has {} rows but {} labels",
            probs.rows,
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for &v in mask {
        let p = probs.get(v, labels[v]);
        let p = if p < PROB_FLOOR {
            clamped += 1;
            PROB_FLOOR
        } else {
            p
        };
        total -= p.ln();
    }
    Ok((total / mask.len() as f64, clamped))
}

/// Deterministic seeded generator. ChaCha8 is counter based, so identical
/// seeds give identical streams on every platform; `derive` yields an
/// independent substream for a labelled purpose.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream for the given label, untouched by draws on self.
    pub fn derive(&self, label: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(label);
        SeededRng {
            inner: rng,
            seed: self.seed,
        }
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        self.inner.gen_range(low..high)
    }

    pub fn standard_normal(&mut self) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, else
/// 1/(1-rate). Deterministic per rng state.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut SeededRng) -> Result<DenseMatrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!(
            "dropout rate must be in [0,1), got {rate}"
        )));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = if rng.bernoulli(rate) { 0.0 } else { keep_scale };
    }
    Ok(m)
}

/// Glorot-uniform initialization for a fan_in x fan_out weight matrix.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> DenseMatrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut m = DenseMatrix::zeros(fan_in, fan_out);
    for v in m.data.iter_mut() {
        *v = rng.uniform(-limit, limit);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn matmul_identity() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = DenseMatrix::identity(2);
        assert_eq!(matmul(&a, &i).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data, vec![11.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = SeededRng::new(7);
        let rand_mat = |rng: &mut SeededRng| {
            let mut m = DenseMatrix::zeros(3, 3);
            for v in m.data.iter_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            m
        };
        let a = rand_mat(&mut rng);
        let b = rand_mat(&mut rng);
        let c = rand_mat(&mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (l, r) in left.data.iter().zip(&right.data) {
            assert!((l - r).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_equal_logits() {
        let z = DenseMatrix::from_rows(&[vec![3.0; 4]]).unwrap();
        let s = softmax_rows(&z);
        for &p in &s.data {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic() {
        let z = DenseMatrix::from_rows(&[vec![1.0f64.ln(), 3.0f64.ln()]]).unwrap();
        let s = softmax_rows(&z);
        assert!((s.data[0] - 0.25).abs() < 1e-12);
        assert!((s.data[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        // dyadic inputs and shift, so the shifted values are exact in f64
        let z = DenseMatrix::from_rows(&[vec![0.25, -1.5, 2.0]]).unwrap();
        let shifted = z.map(|x| x + 512.0);
        let a = softmax_rows(&z);
        let b = softmax_rows(&shifted);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_perfect() {
        let p = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (loss, clamped) = cross_entropy(&p, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn cross_entropy_uniform_seven_classes() {
        let p = DenseMatrix::from_rows(&[vec![1.0 / 7.0; 7]]).unwrap();
        let (loss, _) = cross_entropy(&p, &[3], &[0]).unwrap();
        assert!((loss - 7.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_half() {
        let p = DenseMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let (loss, _) = cross_entropy(&p, &[0], &[0]).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = DenseMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let (loss, clamped) = cross_entropy(&p, &[0], &[0]).unwrap();
        assert_eq!(clamped, 1);
        assert!((loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn dropout_zero_rate_is_all_ones() {
        let mut rng = SeededRng::new(1);
        let m = dropout_mask(3, 4, 0.0, &mut rng).unwrap();
        assert!(m.data.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn dropout_rate_one_rejected() {
        let mut rng = SeededRng::new(1);
        assert!(dropout_mask(2, 2, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_kept_fraction_near_half() {
        let mut rng = SeededRng::new(42);
        let m = dropout_mask(100, 100, 0.5, &mut rng).unwrap();
        let kept = m.data.iter().filter(|&&x| x != 0.0).count() as f64;
        let n = 10_000.0;
        // binomial: mean n/2, sd sqrt(n)/2; 4 sigma band
        assert!((kept - n / 2.0).abs() < 4.0 * n.sqrt() / 2.0);
    }

    #[test]
    fn dropout_deterministic_per_seed() {
        let mut a = SeededRng::new(9).derive(3);
        let mut b = SeededRng::new(9).derive(3);
        let ma = dropout_mask(8, 8, 0.4, &mut a).unwrap();
        let mb = dropout_mask(8, 8, 0.4, &mut b).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn derived_streams_are_independent() {
        let root = SeededRng::new(5);
        let mut a = root.derive(1);
        let mut b = root.derive(2);
        assert_ne!(a.next_u64(), b.next_u64());
        // deriving again replays the same stream
        let mut a2 = root.derive(1);
        let mut x = root.derive(1);
        assert_eq!(a2.next_u64(), x.next_u64());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            raw in proptest::collection::vec(-50.0f64..50.0, 1..40)
        ) {
            let cols = raw.len();
            let m = DenseMatrix::from_vec(1, cols, raw).unwrap();
            let s = softmax_rows(&m);
            let sum: f64 = s.data.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.data.iter().all(|&p| p >= 0.0));
        }
    }
}

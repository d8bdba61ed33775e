//! Small dense-array kernel used by every other module.
//!
//! Everything here works on row-major `f64` storage. The arrays in this
//! crate are tiny (embedding width ≤ 768, at most a few dozen classes and
//! anchors) so there is no blocking, SIMD or sparse support.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default floor applied before taking logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: matrix has {} columns, vector has {} entries",
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        matvec_into(&self.data, self.rows, self.cols, x, &mut out);
        Ok(out)
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::Shape(format!(
                "matvec_t: matrix has {} rows, vector has {} entries",
                self.rows,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        matvec_t_acc(&self.data, self.rows, self.cols, y, &mut out);
        Ok(out)
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let orow = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), orow);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `out = w · x` for a row-major `rows × cols` weight slice.
#[inline]
pub fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += wᵀ · y` for a row-major `rows × cols` weight slice.
#[inline]
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, &yr) in y.iter().enumerate().take(rows) {
        if yr != 0.0 {
            axpy(yr, &w[r * cols..(r + 1) * cols], out);
        }
    }
}

/// `grad += y ⊗ x` (outer product accumulated into a `rows × cols` slice).
#[inline]
pub fn outer_acc(y: &[f64], x: &[f64], grad: &mut [f64]) {
    let cols = x.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, x, &mut grad[r * cols..(r + 1) * cols]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean distance over the embedding dimension.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(squared_distance(a, b).sqrt())
}

/// Softmax of `logits / temperature`, computed with max-subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax input is not finite".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    Ok(out)
}

/// Unchecked softmax used on hot paths where inputs are already validated.
#[inline]
pub fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let inv_t = 1.0 / temperature;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = ((x - max) * inv_t).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Backward pass of a (unit temperature) softmax: given `p = softmax(z)` and
/// `dp`, returns `dz = p ⊙ (dp − ⟨p, dp⟩)`.
#[inline]
pub fn softmax_backward(p: &[f64], dp: &[f64], dz: &mut [f64]) {
    let inner = dot(p, dp);
    for ((g, &pi), &dpi) in dz.iter_mut().zip(p).zip(dp) {
        *g = pi * (dpi - inner);
    }
}

/// `log(max(p_i, floor))` element-wise.
pub fn stable_log(p: &[f64], floor: f64) -> Vec<f64> {
    p.iter().map(|&v| v.max(floor).ln()).collect()
}

/// Index of the largest entry, ties resolved towards the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64 generator.
///
/// The `n`-th output (0-based `position`) is
/// `mix64(seed + (n + 1) · 0x9E3779B97F4A7C15)` with the standard SplitMix64
/// finalizer, so the state is fully described by `(seed, position)`.
/// Independent streams are derived with [`RngState::split`].
///
/// Derived quantities:
/// * `uniform()`: top 53 bits of one output scaled to `[0, 1)`.
/// * `below(n)`: rejection sampling on the full 64-bit output (unbiased).
/// * `normal()`: Box–Muller on two uniforms, using the cosine branch only
///   (one standard normal per two outputs; no cached spare).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    seed: u64,
    position: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// A new generator whose stream is independent of this one and of any
    /// other `split` with a different `stream` id. Does not advance `self`.
    pub fn split(&self, stream: u64) -> RngState {
        let s = mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA)));
        RngState::new(mix64(s.wrapping_add(self.position.wrapping_mul(GOLDEN_GAMMA))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.position = self.position.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.position.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `0..n` (partial Fisher–Yates).
    pub fn sample_without_replacement(&mut self, n: usize, count: usize) -> Vec<usize> {
        let count = count.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(count);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);

        // e^-1000 / (1 + e^-1000) underflows to exactly 0 in f64; the
        // arbitrary-precision value is ~5.08e-435.
        let p = softmax(&[1000.0, 0.0], 1.0).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[f64::NAN, 0.0], 1.0), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax(&[f64::INFINITY], 1.0), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax(&[0.0], 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_temperature_flattens() {
        let sharp = softmax(&[1.0, 0.0], 0.5).unwrap();
        let flat = softmax(&[1.0, 0.0], 2.0).unwrap();
        assert!(sharp[0] > flat[0]);
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((sharp[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn stable_log_examples() {
        assert_eq!(stable_log(&[1.0], LOG_FLOOR), vec![0.0]);
        assert_eq!(stable_log(&[0.0], 1e-12), vec![1e-12f64.ln()]);
        let l = stable_log(&[0.5, 0.5], LOG_FLOOR);
        assert!((l[0] + 2f64.ln()).abs() < 1e-15 && (l[1] + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(matches!(euclidean_distance(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn distance_matches_scalar_loop() {
        let mut rng = RngState::new(11);
        let a: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let mut acc = 0.0;
        for i in 0..8 {
            let diff = a[i] - b[i];
            acc += diff * diff;
        }
        let oracle = acc.sqrt();
        assert!((euclidean_distance(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn matrix_products() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]).unwrap(), vec![5.0, 7.0, 9.0]);
        let mt = m.transpose();
        let prod = m.matmul(&mt).unwrap();
        assert_eq!(prod.as_slice(), &[14.0, 32.0, 32.0, 77.0]);
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(m.matvec(&[1.0]).is_err());
    }

    #[test]
    fn rng_reproducible_and_split() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        let xs: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        // Reference values of the counter construction (seed 0 matches the
        // first outputs of the classic SplitMix64 sequence).
        let mut z = RngState::new(0);
        assert_eq!(z.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(z.next_u64(), 0x6E78_9E6A_A1B9_65F4);

        let s1 = a.split(1).next_u64();
        let s2 = a.split(2).next_u64();
        assert_ne!(s1, s2);
    }

    #[test]
    fn rng_below_is_in_range_and_covers() {
        let mut rng = RngState::new(5);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[rng.below(7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800 && c < 1200), "{seen:?}");
    }

    #[test]
    fn normal_moments() {
        let mut rng = RngState::new(9);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(xs in prop::collection::vec(-1e3f64..1e3, 1..12)) {
            let p = softmax(&xs, 1.0).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] > xs[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-50f64..50.0, 1..10), c in -100f64..100.0) {
            let p = softmax(&xs, 1.0).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = softmax(&shifted, 1.0).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn distance_is_a_metric(seed in any::<u64>()) {
            let mut rng = RngState::new(seed);
            let v: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.normal() * 3.0).collect()).collect();
            let ab = euclidean_distance(&v[0], &v[1]).unwrap();
            let ba = euclidean_distance(&v[1], &v[0]).unwrap();
            let bc = euclidean_distance(&v[1], &v[2]).unwrap();
            let ac = euclidean_distance(&v[0], &v[2]).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }
}

//! Sketching operators: subsampled randomized Hadamard transforms (SRHT)
//! satisfying the coordinate-wise embedding properties, an exact identity
//! mode for deterministic tests, and the pre-drawn pool the solver consumes
//! one operator per query from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::DenseMatrix;
use crate::{Error, Result, Scalar};

/// In-place unnormalized fast Walsh-Hadamard transform; `v.len()` must be a
/// power of two. The transform matrix has +-1 entries and `H^T H = p I`.
pub fn fwht<F: Scalar>(v: &mut [F]) {
    let p = v.len();
    debug_assert!(p.is_power_of_two() || p == 0);
    let mut h = 1;
    while h < p {
        let mut i = 0;
        while i < p {
            for j in i..i + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
            i += 2 * h;
        }
        h *= 2;
    }
}

/// One sketching operator `R` with `sketch_rows` rows and `n` columns.
#[derive(Debug, Clone)]
pub enum SketchOp<F> {
    /// Exact mode: `R = I_n`, so `R^T R = I` and queries are deterministic.
    Identity { n: usize },
    /// `R = (1/sqrt(b)) S H D`: random sign flips `D`, unnormalized
    /// Hadamard `H` on the power-of-two padding, and `b` rows sampled
    /// without replacement. `E[R^T R] = I` and `R^T R = I` when `b` equals
    /// the padded dimension.
    Srht {
        n: usize,
        rows: usize,
        /// power-of-two padded dimension
        padded: usize,
        /// +-1 sign per original coordinate
        signs: Vec<F>,
        /// selected Hadamard rows, each in `[0, padded)`
        selected: Vec<usize>,
        scale: F,
    },
}

impl<F: Scalar> SketchOp<F> {
    pub fn identity(n: usize) -> Self {
        SketchOp::Identity { n }
    }

    pub fn rows(&self) -> usize {
        match self {
            SketchOp::Identity { n } => *n,
            SketchOp::Srht { rows, .. } => *rows,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            SketchOp::Identity { n } => *n,
            SketchOp::Srht { n, .. } => *n,
        }
    }

    /// `R v`.
    pub fn apply(&self, v: &[F]) -> Vec<F> {
        match self {
            SketchOp::Identity { n } => {
                assert_eq!(v.len(), *n);
                v.to_vec()
            }
            SketchOp::Srht { n, padded, signs, selected, scale, .. } => {
                assert_eq!(v.len(), *n);
                let mut buf = vec![F::zero(); *padded];
                for i in 0..*n {
                    buf[i] = signs[i] * v[i];
                }
                fwht(&mut buf);
                selected.iter().map(|&t| *scale * buf[t]).collect()
            }
        }
    }

    /// `R^T y`.
    pub fn apply_t(&self, y: &[F]) -> Vec<F> {
        match self {
            SketchOp::Identity { n } => {
                assert_eq!(y.len(), *n);
                y.to_vec()
            }
            SketchOp::Srht { n, rows, padded, signs, selected, scale, .. } => {
                assert_eq!(y.len(), *rows);
                let mut buf = vec![F::zero(); *padded];
                for (j, &t) in selected.iter().enumerate() {
                    buf[t] = *scale * y[j];
                }
                // H is symmetric, so H^T = H.
                fwht(&mut buf);
                (0..*n).map(|i| signs[i] * buf[i]).collect()
            }
        }
    }

    /// `R M` for a dense `n x k` matrix, applied column by column.
    pub fn apply_mat(&self, m: &DenseMatrix<F>) -> DenseMatrix<F> {
        assert_eq!(m.rows, self.cols());
        let mut out = DenseMatrix::zeros(self.rows(), m.cols);
        let mut col = vec![F::zero(); m.rows];
        for j in 0..m.cols {
            for i in 0..m.rows {
                col[i] = m.get(i, j);
            }
            let rc = self.apply(&col);
            for i in 0..out.rows {
                out.set(i, j, rc[i]);
            }
        }
        out
    }

    /// Dense `rows x n` materialization, for oracles and tests.
    pub fn to_dense(&self) -> DenseMatrix<F> {
        let mut m = DenseMatrix::zeros(self.rows(), self.cols());
        let mut e = vec![F::zero(); self.cols()];
        for j in 0..self.cols() {
            e[j] = F::one();
            let col = self.apply(&e);
            for i in 0..m.rows {
                m.set(i, j, col[i]);
            }
            e[j] = F::zero();
        }
        m
    }
}

/// Draw one fresh SRHT with `sketch_rows` rows over `n` coordinates.
pub fn srht_new<F: Scalar>(sketch_rows: usize, n: usize, seed: u64) -> SketchOp<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    srht_from_rng(sketch_rows, n, &mut rng)
}

fn srht_from_rng<F: Scalar>(
    sketch_rows: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> SketchOp<F> {
    assert!(n > 0 && sketch_rows > 0);
    let padded = n.next_power_of_two();
    let rows = sketch_rows.min(padded);
    let signs = (0..n)
        .map(|_| {
            if rng.gen::<bool>() {
                F::one()
            } else {
                -F::one()
            }
        })
        .collect();
    let mut selected = rand::seq::index::sample(rng, padded, rows).into_vec();
    selected.sort_unstable();
    SketchOp::Srht {
        n,
        rows,
        padded,
        signs,
        selected,
        scale: F::one() / F::from_f64_lossy(rows as f64).sqrt(),
    }
}

/// A pre-drawn pool of `L` sketching operators; each query consumes the
/// next one. The solver re-initializes with a fresh pool on exhaustion.
#[derive(Debug, Clone)]
pub struct SketchPool<F> {
    pub ops: Vec<SketchOp<F>>,
}

impl<F: Scalar> SketchPool<F> {
    pub fn srht(count: usize, sketch_rows: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            ops: (0..count).map(|_| srht_from_rng(sketch_rows, n, &mut rng)).collect(),
        }
    }

    pub fn identity(count: usize, n: usize) -> Self {
        Self {
            ops: (0..count).map(|_| SketchOp::identity(n)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Operator for cursor `l`, or `PoolExhausted` when the pool ran out.
    pub fn get(&self, l: usize) -> Result<&SketchOp<F>> {
        self.ops.get(l).ok_or(Error::PoolExhausted(self.ops.len()))
    }
}

/// Monte-Carlo estimates of the coordinate-wise embedding properties of the
/// SRHT at the given shape, measured on a fixed random unit vector.
#[derive(Debug, Clone)]
pub struct EmbeddingStats {
    /// `max_i |mean((R^T R h)_i) - h_i|`
    pub bias: f64,
    /// largest per-coordinate standard error of that mean
    pub bias_se: f64,
    /// estimated variance constant: `max_i (E[(R^T R h)_i^2] - h_i^2) * b / ||h||^2`
    pub variance: f64,
    /// standard error of the second moment behind `variance`, scaled the same way
    pub variance_se: f64,
    /// empirical rate of `|(R^T R h)_i - h_i| > ||h|| beta / sqrt(b)` with
    /// `beta = log(n / delta)`, `delta = 0.01`, pooled over coordinates
    pub tail_rate: f64,
    /// binomial standard error of `tail_rate`
    pub tail_se: f64,
    /// the tail-probability target `delta`
    pub delta: f64,
}

/// Run `trials` independent SRHT draws and report how well they match the
/// coordinate-wise embedding definition.
pub fn embedding_stats(
    trials: usize,
    sketch_rows: usize,
    n: usize,
    seed: u64,
) -> EmbeddingStats {
    assert!(trials > 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // fixed test vector: random gaussian-ish direction, normalized
    let mut h: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let nrm = crate::linalg::norm2(&h);
    for x in h.iter_mut() {
        *x /= nrm;
    }
    let hnorm = 1.0;
    let delta = 0.01;
    let beta = (n as f64 / delta).ln();
    let b = sketch_rows.min(n.next_power_of_two()) as f64;
    let thresh = hnorm * beta / b.sqrt();

    let mut sum = vec![0.0f64; n];
    let mut sum_sq = vec![0.0f64; n];
    let mut sum_4 = vec![0.0f64; n];
    let mut tail_hits = 0usize;
    for _ in 0..trials {
        let op: SketchOp<f64> = srht_from_rng(sketch_rows, n, &mut rng);
        let z = op.apply_t(&op.apply(&h));
        for i in 0..n {
            sum[i] += z[i];
            let s = z[i] * z[i];
            sum_sq[i] += s;
            sum_4[i] += s * s;
            if (z[i] - h[i]).abs() > thresh {
                tail_hits += 1;
            }
        }
    }
    let t = trials as f64;
    let mut bias = 0.0f64;
    let mut bias_se = 0.0f64;
    let mut variance = f64::NEG_INFINITY;
    let mut variance_se = 0.0f64;
    for i in 0..n {
        let mean = sum[i] / t;
        let m2 = sum_sq[i] / t;
        let var_of_z = (m2 - mean * mean).max(0.0);
        let se = (var_of_z / t).sqrt();
        if (mean - h[i]).abs() > bias {
            bias = (mean - h[i]).abs();
        }
        bias_se = bias_se.max(se);
        let alpha_i = (m2 - h[i] * h[i]) * b / (hnorm * hnorm);
        if alpha_i > variance {
            variance = alpha_i;
            let m4 = sum_4[i] / t;
            let var_of_sq = (m4 - m2 * m2).max(0.0);
            variance_se = (var_of_sq / t).sqrt() * b / (hnorm * hnorm);
        }
    }
    let pooled = t * n as f64;
    let tail_rate = tail_hits as f64 / pooled;
    let tail_se = (tail_rate * (1.0 - tail_rate) / pooled).sqrt();
    EmbeddingStats { bias, bias_se, variance, variance_se, tail_rate, tail_se, delta }
}

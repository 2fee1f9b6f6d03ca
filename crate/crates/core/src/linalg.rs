//! Minimal dense linear algebra and seeded random sampling.
//!
//! Everything downstream (projector, losses, prototypes, federation) builds
//! on the two types here. All arithmetic is `f64`; datasets are stored on
//! disk in single precision and upcast on load.
//!
//! The random generator is fixed so that runs are reproducible bit-for-bit
//! from a seed: a SplitMix64 state advanced per draw, Box-Muller for
//! gaussians, and Marsaglia-Tsang (with the standard alpha < 1 boost) for
//! the gamma draws behind the Dirichlet sampler. The family is recorded in
//! [`RNG_ALGORITHM`] and in every run manifest. Bit-identical streams across
//! *platforms* additionally require identical `ln`/`sin`/`cos` rounding in
//! the system math library.

use crate::error::{Error, Result};

/// Identifier of the pseudo-random generator family used by [`Rng`].
pub const RNG_ALGORITHM: &str = "splitmix64+box-muller+marsaglia-tsang/v1";

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data; the length must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} != {} x {}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the listed rows into a new matrix, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.rows {
                return Err(Error::Shape(format!("row index {} out of {}", i, self.rows)));
            }
            out.row_mut(k).copy_from_slice(self.row(i));
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product. Fails on an inner-dimension mismatch or a
/// non-finite result.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j order: streams over b's rows, accumulation order fixed.
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::Numerical("matmul produced non-finite entries".into()));
    }
    Ok(out)
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; also used to derive child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a master seed, a stream tag, and an
/// index. Used so that parallel work (one client, one round) owns its own
/// generator regardless of scheduling.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix64(master ^ mix64(stream.wrapping_mul(SPLITMIX_GAMMA) ^ mix64(index)))
}

/// Deterministic pseudo-random generator (single-owner; never share across
/// concurrent tasks — derive child seeds instead).
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    seed: u64,
    spare_gaussian: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            seed,
            spare_gaussian: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(SPLITMIX_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `(0, 1]`; safe to pass to `ln`.
    fn next_f64_open(&mut self) -> f64 {
        1.0 - self.next_f64()
    }

    /// Unbiased integer in `[0, n)` via the 128-bit multiply method.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// One standard-normal draw (Box-Muller, spare cached).
    pub fn standard_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Gamma(alpha, 1) via Marsaglia-Tsang; alpha < 1 uses the boost
    /// `Gamma(alpha + 1) * u^(1/alpha)`.
    pub fn gamma(&mut self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Param(format!("gamma alpha must be > 0, got {alpha}")));
        }
        if alpha < 1.0 {
            let g = self.gamma(alpha + 1.0)?;
            let u = self.next_f64_open();
            return Ok(g * u.powf(1.0 / alpha));
        }
        let d = alpha - 1.0 / 3.0;
        let c = 1.0 / (3.0 * d.sqrt());
        loop {
            let x = self.standard_gaussian();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.next_f64_open();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return Ok(d * v);
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return Ok(d * v);
            }
        }
    }
}

/// `n` independent draws from `N(mean, std^2)`.
pub fn gaussian_sample(rng: &mut Rng, mean: f64, std: f64, n: usize) -> Result<Vec<f64>> {
    if std < 0.0 || !std.is_finite() || !mean.is_finite() {
        return Err(Error::Param(format!(
            "gaussian requires finite mean and std >= 0, got mean={mean} std={std}"
        )));
    }
    Ok((0..n).map(|_| mean + std * rng.standard_gaussian()).collect())
}

/// One draw from the symmetric Dirichlet(alpha) over `k` categories,
/// realized as `k` Gamma(alpha, 1) draws normalized by their sum.
pub fn dirichlet_sample(rng: &mut Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Param(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    if k == 0 {
        return Err(Error::Param("dirichlet needs k >= 1".into()));
    }
    // Tiny alpha can underflow every gamma draw to zero; retry a few times
    // before giving up.
    for _ in 0..64 {
        let gs: Vec<f64> = (0..k).map(|_| rng.gamma(alpha)).collect::<Result<_>>()?;
        let sum: f64 = gs.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(gs.into_iter().map(|g| g / sum).collect());
        }
    }
    Err(Error::Numerical(format!(
        "dirichlet draw underflowed for alpha={alpha}, k={k}"
    )))
}

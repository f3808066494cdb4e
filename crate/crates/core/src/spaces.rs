//! Finite truncations of the state space `E`, the noise space `H`, and the
//! semigroup `exp(tA)`.
//!
//! Coordinates are coefficients on the first `n` (state) or `m` (noise)
//! basis vectors. The Banach norm of `E` is modelled by a weighted Euclidean
//! norm, the Hilbert norm of `H` likewise, and the γ-radonifying norm
//! `γ(H, E)` by the weighted Hilbert–Schmidt norm
//! `hs(M)^2 = Σ_k e_norm(M u_k)^2 / h_k^2`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::expm::expm;

/// Default bound on `max_k |t λ_k|` for `exp(-tA)`; `e^40 ≈ 2.4e17`.
pub const DEFAULT_OVERFLOW_CAP: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationConfig {
    e_weights: Vec<f64>,
    h_weights: Vec<f64>,
    embed_constant: f64,
}

impl TruncationConfig {
    pub fn new(e_weights: Vec<f64>, h_weights: Vec<f64>, embed_constant: f64) -> Result<Self> {
        if e_weights.is_empty() || h_weights.is_empty() {
            return Err(Error::InvalidConfig("n and m must be at least 1".into()));
        }
        let positive = |w: &f64| w.is_finite() && *w > 0.0;
        if !e_weights.iter().all(positive) || !h_weights.iter().all(positive) {
            return Err(Error::InvalidConfig("weights must be finite and > 0".into()));
        }
        if !positive(&embed_constant) {
            return Err(Error::InvalidConfig("embedding constant must be > 0".into()));
        }
        for (i, (e, h)) in e_weights.iter().zip(&h_weights).enumerate() {
            if *e > embed_constant * *h {
                return Err(Error::InvalidConfig(alloc::format!(
                    "coordinate {i}: e_weight {e} exceeds embed_constant * h_weight = {}",
                    embed_constant * h
                )));
            }
        }
        Ok(TruncationConfig {
            e_weights,
            h_weights,
            embed_constant,
        })
    }

    /// Unit weights and embedding constant 1.
    pub fn unit(n: usize, m: usize) -> Result<Self> {
        Self::new(vec![1.0; n], vec![1.0; m], 1.0)
    }

    pub fn n(&self) -> usize {
        self.e_weights.len()
    }

    pub fn m(&self) -> usize {
        self.h_weights.len()
    }

    pub fn e_weights(&self) -> &[f64] {
        &self.e_weights
    }

    pub fn h_weights(&self) -> &[f64] {
        &self.h_weights
    }

    pub fn embed_constant(&self) -> f64 {
        self.embed_constant
    }

    pub fn e_norm(&self, v: &DVector<f64>) -> Result<f64> {
        weighted_norm(&self.e_weights, v, "e_norm")
    }

    pub fn h_norm(&self, v: &DVector<f64>) -> Result<f64> {
        weighted_norm(&self.h_weights, v, "h_norm")
    }

    /// Weighted Hilbert–Schmidt norm of an `n x m` operator `H -> E`.
    pub fn hs_norm(&self, op: &DMatrix<f64>) -> Result<f64> {
        check_dim("hs_norm rows", self.n(), op.nrows())?;
        check_dim("hs_norm cols", self.m(), op.ncols())?;
        let mut acc = 0.0;
        for (k, col) in op.column_iter().enumerate() {
            let mut e2 = 0.0;
            for (w, c) in self.e_weights.iter().zip(col.iter()) {
                e2 += (w * c) * (w * c);
            }
            acc += e2 / (self.h_weights[k] * self.h_weights[k]);
        }
        Ok(Float::sqrt(acc))
    }

    /// Operator norm of `B: E -> E`, i.e. the spectral norm of `W B W^-1`
    /// with `W = diag(e_weights)`.
    pub fn op_norm(&self, op: &DMatrix<f64>) -> Result<f64> {
        let n = self.n();
        check_dim("op_norm rows", n, op.nrows())?;
        check_dim("op_norm cols", n, op.ncols())?;
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            self.e_weights[i] * op[(i, j)] / self.e_weights[j]
        });
        Ok(scaled
            .singular_values()
            .iter()
            .copied()
            .fold(0.0, f64::max))
    }
}

fn weighted_norm(w: &[f64], v: &DVector<f64>, ctx: &'static str) -> Result<f64> {
    check_dim(ctx, w.len(), v.len())?;
    let s: f64 = w.iter().zip(v.iter()).map(|(w, x)| (w * x) * (w * x)).sum();
    Ok(Float::sqrt(s))
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SemigroupKind {
    /// Generator `diag(λ_1..λ_n)` with `λ_k <= 0`.
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

/// The semigroup `exp(tA)` generated by a finite matrix `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Semigroup {
    kind: SemigroupKind,
    overflow_cap: f64,
}

impl Semigroup {
    pub fn diagonal(spectrum: Vec<f64>) -> Result<Self> {
        if spectrum.is_empty() {
            return Err(Error::InvalidConfig("empty spectrum".into()));
        }
        if spectrum.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("semigroup spectrum"));
        }
        if spectrum.iter().any(|l| *l > 0.0) {
            return Err(Error::InvalidConfig("diagonal spectrum must be <= 0".into()));
        }
        Ok(Semigroup {
            kind: SemigroupKind::Diagonal(spectrum),
            overflow_cap: DEFAULT_OVERFLOW_CAP,
        })
    }

    pub fn dense(generator: DMatrix<f64>) -> Result<Self> {
        if !generator.is_square() || generator.nrows() == 0 {
            return Err(Error::InvalidConfig("generator must be a non-empty square matrix".into()));
        }
        if generator.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("semigroup generator"));
        }
        Ok(Semigroup {
            kind: SemigroupKind::Dense(generator),
            overflow_cap: DEFAULT_OVERFLOW_CAP,
        })
    }

    /// `A = 0` in dimension `n`, stored as a diagonal generator.
    pub fn zero(n: usize) -> Result<Self> {
        Self::diagonal(vec![0.0; n])
    }

    pub fn with_overflow_cap(mut self, cap: f64) -> Self {
        self.overflow_cap = cap;
        self
    }

    pub fn overflow_cap(&self) -> f64 {
        self.overflow_cap
    }

    pub fn kind(&self) -> &SemigroupKind {
        &self.kind
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.kind, SemigroupKind::Diagonal(_))
    }

    pub fn spectrum(&self) -> Option<&[f64]> {
        match &self.kind {
            SemigroupKind::Diagonal(s) => Some(s),
            SemigroupKind::Dense(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            SemigroupKind::Diagonal(s) => s.len(),
            SemigroupKind::Dense(g) => g.nrows(),
        }
    }

    /// The generator `A` as a matrix.
    pub fn generator(&self) -> DMatrix<f64> {
        match &self.kind {
            SemigroupKind::Diagonal(s) => DMatrix::from_diagonal(&DVector::from_column_slice(s)),
            SemigroupKind::Dense(g) => g.clone(),
        }
    }

    /// `A v`.
    pub fn generator_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            SemigroupKind::Diagonal(s) => DVector::from_fn(s.len(), |i, _| s[i] * v[i]),
            SemigroupKind::Dense(g) => g * v,
        }
    }

    /// `exp(tA)` as a matrix. `t = 0` gives the identity exactly.
    pub fn exp_matrix(&self, t: f64) -> DMatrix<f64> {
        let n = self.dim();
        if t == 0.0 {
            return DMatrix::identity(n, n);
        }
        match &self.kind {
            SemigroupKind::Diagonal(s) => {
                DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| Float::exp(t * s[i])))
            }
            SemigroupKind::Dense(g) => expm(&(g * t)),
        }
    }

    /// `exp(tA) v`.
    pub fn apply(&self, t: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("apply_semigroup", self.dim(), v.len())?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Precondition("apply_semigroup: t must be finite and >= 0"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("apply_semigroup input"));
        }
        if t == 0.0 {
            return Ok(v.clone());
        }
        Ok(match &self.kind {
            SemigroupKind::Diagonal(s) => {
                DVector::from_fn(v.len(), |i, _| Float::exp(t * s[i]) * v[i])
            }
            SemigroupKind::Dense(_) => self.exp_matrix(t) * v,
        })
    }

    fn inverse_factors(&self, t: f64) -> Result<&[f64]> {
        let s = match &self.kind {
            SemigroupKind::Diagonal(s) => s,
            SemigroupKind::Dense(_) => return Err(Error::DenseInverse),
        };
        let exponent = s.iter().map(|l| (t * l).abs()).fold(0.0, f64::max);
        if exponent > self.overflow_cap {
            return Err(Error::OverflowCap {
                exponent,
                cap: self.overflow_cap,
            });
        }
        Ok(s)
    }

    /// `exp(-tA) v` for diagonal generators within the overflow cap.
    pub fn apply_inverse(&self, t: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("apply_inverse_semigroup", self.dim(), v.len())?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Precondition("apply_inverse_semigroup: t must be finite and >= 0"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("apply_inverse_semigroup input"));
        }
        let s = self.inverse_factors(t)?;
        if t == 0.0 {
            return Ok(v.clone());
        }
        Ok(DVector::from_fn(v.len(), |i, _| Float::exp(-t * s[i]) * v[i]))
    }

    /// `exp(-tA)` as a matrix; same preconditions as [`Semigroup::apply_inverse`].
    pub fn inverse_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        let s = self.inverse_factors(t)?;
        let n = s.len();
        if t == 0.0 {
            return Ok(DMatrix::identity(n, n));
        }
        Ok(DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| {
            Float::exp(-t * s[i])
        })))
    }

    /// `exp(-tA) M exp(tA)`, computed entrywise as `M_ij exp(t(λ_j - λ_i))`.
    pub fn conjugate(&self, t: f64, op: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let s = self.inverse_factors(t)?;
        if t == 0.0 {
            return Ok(op.clone());
        }
        Ok(DMatrix::from_fn(op.nrows(), op.ncols(), |i, j| {
            op[(i, j)] * Float::exp(t * (s[j] - s[i]))
        }))
    }

    /// `exp(-dt A)` for a single backward step. Dense generators use the
    /// matrix exponential of `-dt A` directly.
    pub fn step_inverse(&self, dt: f64) -> Result<DMatrix<f64>> {
        match &self.kind {
            SemigroupKind::Diagonal(_) => self.inverse_matrix(dt),
            SemigroupKind::Dense(g) => Ok(expm(&(g * -dt))),
        }
    }

    /// Precompute `exp(k dt A)` for `k = 0..=count`.
    pub fn cache(&self, dt: f64, count: usize) -> SemigroupCache {
        let data = match &self.kind {
            SemigroupKind::Diagonal(s) => CacheData::Diagonal(
                (0..=count)
                    .map(|k| {
                        let t = k as f64 * dt;
                        s.iter().map(|l| if k == 0 { 1.0 } else { Float::exp(t * l) }).collect()
                    })
                    .collect(),
            ),
            SemigroupKind::Dense(_) => CacheData::Dense(
                (0..=count).map(|k| self.exp_matrix(k as f64 * dt)).collect(),
            ),
        };
        SemigroupCache { dt, data }
    }
}

#[derive(Debug, Clone)]
enum CacheData {
    Diagonal(Vec<Vec<f64>>),
    Dense(Vec<DMatrix<f64>>),
}

/// `exp(k dt A)` for grid offsets `k`, computed once and then read-only.
#[derive(Debug, Clone)]
pub struct SemigroupCache {
    dt: f64,
    data: CacheData,
}

impl SemigroupCache {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        match &self.data {
            CacheData::Diagonal(d) => d.len(),
            CacheData::Dense(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `exp(k dt A) v`.
    pub fn apply(&self, k: usize, v: &DVector<f64>) -> DVector<f64> {
        match &self.data {
            CacheData::Diagonal(d) => {
                let f = &d[k];
                DVector::from_fn(v.len(), |i, _| f[i] * v[i])
            }
            CacheData::Dense(d) => &d[k] * v,
        }
    }

    /// `out += exp(k dt A) v`.
    pub fn apply_add(&self, k: usize, v: &DVector<f64>, out: &mut DVector<f64>) {
        match &self.data {
            CacheData::Diagonal(d) => {
                for ((o, f), x) in out.iter_mut().zip(&d[k]).zip(v.iter()) {
                    *o += f * x;
                }
            }
            CacheData::Dense(d) => out.gemv(1.0, &d[k], v, 1.0),
        }
    }

    /// `exp(k dt A) M`.
    pub fn apply_matrix(&self, k: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.data {
            CacheData::Diagonal(d) => {
                let f = &d[k];
                DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| f[i] * m[(i, j)])
            }
            CacheData::Dense(d) => &d[k] * m,
        }
    }

    pub fn matrix(&self, k: usize) -> DMatrix<f64> {
        match &self.data {
            CacheData::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(&d[k])),
            CacheData::Dense(d) => d[k].clone(),
        }
    }
}

/// Uniform grid `t_j = j T / N` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidConfig("horizon must be finite and > 0".into()));
        }
        if steps == 0 {
            return Err(Error::InvalidConfig("grid needs at least one step".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    /// Grid with step closest to `dt`.
    pub fn with_dt(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be finite and > 0".into()));
        }
        let steps = Float::round(horizon / dt).max(1.0) as usize;
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j == self.steps {
            self.horizon
        } else {
            j as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|j| self.node(j)).collect()
    }

    /// Grid with `factor` times fewer steps (`steps` must divide evenly).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::Precondition("coarsening factor must divide the step count"));
        }
        Self::new(self.horizon, self.steps / factor)
    }
}

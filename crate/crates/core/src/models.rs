//! Coefficient fields `α`, `σ_k` with analytic derivatives, the Stratonovich
//! drift `σ_0`, the Itô correction `Σ(x)`, and the model zoo.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::spaces::{check_dim, Semigroup, TruncationConfig};

/// A vector field `R^n -> R^n` with first and second derivatives.
pub trait VectorField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Second derivative applied to the pair `(u, v)`.
    fn hessian_action(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    /// Jacobian-vector product `V'(x) u`.
    fn jvp(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.jacobian(x) * u
    }

    /// Number of continuous derivatives; `u32::MAX` for smooth fields.
    fn differentiability_order(&self) -> u32 {
        u32::MAX
    }
}

/// One term `coeff * Π x_i^powers[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

impl Monomial {
    pub fn new(coeff: f64, powers: Vec<u32>) -> Self {
        Monomial { coeff, powers }
    }

    pub fn degree(&self) -> u32 {
        self.powers.iter().sum()
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        let mut acc = self.coeff;
        for (p, xi) in self.powers.iter().zip(x.iter()) {
            if *p > 0 {
                acc *= Float::powi(*xi, *p as i32);
            }
        }
        acc
    }

    /// Partial derivative in coordinate `i`, as a new monomial.
    fn partial(&self, i: usize) -> Option<Monomial> {
        let p = self.powers[i];
        if p == 0 || self.coeff == 0.0 {
            return None;
        }
        let mut powers = self.powers.clone();
        powers[i] -= 1;
        Some(Monomial {
            coeff: self.coeff * p as f64,
            powers,
        })
    }
}

/// Polynomial vector field given per component as a list of monomials.
/// Derivatives are formed symbolically.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialField {
    dim: usize,
    components: Vec<Vec<Monomial>>,
    // d components[i] / d x_j, stored row-major as [i * dim + j]
    first: Vec<Vec<Monomial>>,
}

impl PolynomialField {
    pub fn new(components: Vec<Vec<Monomial>>) -> Result<Self> {
        let dim = components.len();
        if dim == 0 {
            return Err(Error::InvalidConfig("polynomial field has no components".into()));
        }
        for comp in &components {
            for mono in comp {
                check_dim("monomial powers", dim, mono.powers.len())?;
                if !mono.coeff.is_finite() {
                    return Err(Error::NonFinite("monomial coefficient"));
                }
            }
        }
        let mut first = Vec::with_capacity(dim * dim);
        for comp in &components {
            for j in 0..dim {
                first.push(comp.iter().filter_map(|m| m.partial(j)).collect());
            }
        }
        Ok(PolynomialField {
            dim,
            components,
            first,
        })
    }

    pub fn constant(value: &[f64]) -> Self {
        let n = value.len();
        let comps = value
            .iter()
            .map(|c| {
                if *c == 0.0 {
                    vec![]
                } else {
                    vec![Monomial::new(*c, vec![0; n])]
                }
            })
            .collect();
        Self::new(comps).expect("constant field is well formed")
    }

    /// `x -> b + M x`.
    pub fn affine(matrix: &DMatrix<f64>, offset: &[f64]) -> Result<Self> {
        let n = matrix.nrows();
        if !matrix.is_square() {
            return Err(Error::InvalidConfig("affine field needs a square matrix".into()));
        }
        check_dim("affine offset", n, offset.len())?;
        let mut comps = Vec::with_capacity(n);
        for i in 0..n {
            let mut terms = Vec::new();
            if offset[i] != 0.0 {
                terms.push(Monomial::new(offset[i], vec![0; n]));
            }
            for j in 0..n {
                let c = matrix[(i, j)];
                if c != 0.0 {
                    let mut p = vec![0; n];
                    p[j] = 1;
                    terms.push(Monomial::new(c, p));
                }
            }
            comps.push(terms);
        }
        Self::new(comps)
    }

    pub fn linear(matrix: &DMatrix<f64>) -> Result<Self> {
        Self::affine(matrix, &vec![0.0; matrix.nrows()])
    }

    pub fn degree(&self) -> u32 {
        self.components
            .iter()
            .flatten()
            .map(Monomial::degree)
            .max()
            .unwrap_or(0)
    }

    pub fn components(&self) -> &[Vec<Monomial>] {
        &self.components
    }
}

fn sum_terms(terms: &[Monomial], x: &DVector<f64>) -> f64 {
    terms.iter().map(|m| m.eval(x)).sum()
}

impl VectorField for PolynomialField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.components.iter().map(|c| sum_terms(c, x)))
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim;
        DMatrix::from_fn(n, n, |i, j| sum_terms(&self.first[i * n + j], x))
    }

    fn hessian_action(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let n = self.dim;
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                if v[j] == 0.0 {
                    continue;
                }
                for mono in &self.first[i * n + j] {
                    for (l, ul) in u.iter().enumerate() {
                        if *ul == 0.0 {
                            continue;
                        }
                        if let Some(second) = mono.partial(l) {
                            acc += second.eval(x) * ul * v[j];
                        }
                    }
                }
            }
            out[i] = acc;
        }
        out
    }
}

fn sech2(x: f64) -> f64 {
    let c = Float::cosh(x);
    1.0 / (c * c)
}

/// `x -> scale * tanh(x)` applied coordinate-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct TanhDrift {
    pub dim: usize,
    pub scale: f64,
}

impl VectorField for TanhDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        x.map(|v| self.scale * Float::tanh(v))
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&x.map(|v| self.scale * sech2(v)))
    }

    fn hessian_action(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim, |i, _| {
            -2.0 * self.scale * Float::tanh(x[i]) * sech2(x[i]) * u[i] * v[i]
        })
    }
}

/// `x -> amplitude * (1 + slope * tanh(x_k)) * e_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TanhColumn {
    pub dim: usize,
    pub index: usize,
    pub amplitude: f64,
    pub slope: f64,
}

impl VectorField for TanhColumn {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        out[self.index] = self.amplitude * (1.0 + self.slope * Float::tanh(x[self.index]));
        out
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        let k = self.index;
        out[(k, k)] = self.amplitude * self.slope * sech2(x[k]);
        out
    }

    fn jvp(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        let k = self.index;
        out[k] = self.amplitude * self.slope * sech2(x[k]) * u[k];
        out
    }

    fn hessian_action(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        let k = self.index;
        let t = Float::tanh(x[k]);
        out[k] = -2.0 * self.amplitude * self.slope * t * sech2(x[k]) * u[k] * v[k];
        out
    }
}

/// The noise coefficients `σ_1..σ_m`; `σ(x)` has `σ_k(x)` as column `k`.
#[derive(Debug, Clone)]
pub struct DiffusionFamily {
    columns: Vec<Arc<dyn VectorField>>,
}

impl DiffusionFamily {
    pub fn new(columns: Vec<Arc<dyn VectorField>>) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(Error::InvalidConfig("diffusion needs at least one column".into()));
        };
        let n = first.dim();
        for c in &columns {
            check_dim("diffusion column", n, c.dim())?;
        }
        Ok(DiffusionFamily { columns })
    }

    /// Constant columns taken from the columns of `sigma`.
    pub fn constant(sigma: &DMatrix<f64>) -> Self {
        let cols = sigma
            .column_iter()
            .map(|c| {
                let v: Vec<f64> = c.iter().copied().collect();
                Arc::new(PolynomialField::constant(&v)) as Arc<dyn VectorField>
            })
            .collect();
        DiffusionFamily { columns: cols }
    }

    pub fn columns(&self) -> &[Arc<dyn VectorField>] {
        &self.columns
    }

    pub fn m(&self) -> usize {
        self.columns.len()
    }

    pub fn n(&self) -> usize {
        self.columns[0].dim()
    }

    /// The `n x m` matrix `σ(x)`.
    pub fn assemble(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n(), self.m());
        for (k, c) in self.columns.iter().enumerate() {
            out.set_column(k, &c.eval(x));
        }
        out
    }

    /// `σ'_k(x)` for every `k`.
    pub fn jacobians(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.columns.iter().map(|c| c.jacobian(x)).collect()
    }

    /// `σ(x) w = Σ_k σ_k(x) w_k`.
    pub fn apply(&self, x: &DVector<f64>, w: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for (c, wk) in self.columns.iter().zip(w) {
            if *wk != 0.0 {
                out.axpy(*wk, &c.eval(x), 1.0);
            }
        }
        out
    }
}

/// The full data `(A, α, σ, x)` of one stochastic evolution equation.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub cfg: TruncationConfig,
    pub sg: Semigroup,
    pub drift: Arc<dyn VectorField>,
    pub diffusion: DiffusionFamily,
    pub initial_x: DVector<f64>,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        cfg: TruncationConfig,
        sg: Semigroup,
        drift: Arc<dyn VectorField>,
        diffusion: DiffusionFamily,
        initial_x: DVector<f64>,
    ) -> Result<Self> {
        let n = cfg.n();
        check_dim("semigroup", n, sg.dim())?;
        check_dim("drift", n, drift.dim())?;
        check_dim("diffusion rows", n, diffusion.n())?;
        check_dim("diffusion columns", cfg.m(), diffusion.m())?;
        check_dim("initial_x", n, initial_x.len())?;
        if initial_x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial_x"));
        }
        Ok(ModelSpec {
            name: name.into(),
            cfg,
            sg,
            drift,
            diffusion,
            initial_x,
        })
    }

    pub fn n(&self) -> usize {
        self.cfg.n()
    }

    pub fn m(&self) -> usize {
        self.cfg.m()
    }

    /// Same model started from a different point.
    pub fn with_initial(&self, x: DVector<f64>) -> Result<Self> {
        let mut out = self.clone();
        check_dim("initial_x", self.n(), x.len())?;
        out.initial_x = x;
        Ok(out)
    }
}

/// Stratonovich drift `σ_0(x) = Ax + α(x) - ½ Σ_k σ'_k(x) σ_k(x)`.
pub fn sigma0(model: &ModelSpec, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("sigma0", model.n(), x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sigma0 argument"));
    }
    let mut out = model.sg.generator_apply(x) + model.drift.eval(x);
    for col in model.diffusion.columns() {
        let s = col.eval(x);
        out.axpy(-0.5, &col.jvp(x, &s), 1.0);
    }
    Ok(out)
}

/// `σ_0'(x) u = (A + α'(x)) u - ½ Σ_k (σ''_k(σ_k, u) + σ'_k σ'_k u)`.
pub fn sigma0_jvp(model: &ModelSpec, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut out = model.sg.generator_apply(u) + model.drift.jvp(x, u);
    for col in model.diffusion.columns() {
        let s = col.eval(x);
        let su = col.jvp(x, u);
        out.axpy(-0.5, &col.hessian_action(x, &s, u), 1.0);
        out.axpy(-0.5, &col.jvp(x, &su), 1.0);
    }
    out
}

/// Itô correction `Σ(x) = Σ_k σ'_k(x) σ'_k(x)` (composition of Jacobians).
pub fn big_sigma(model: &ModelSpec, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_dim("big_sigma", model.n(), x.len())?;
    Ok(big_sigma_from(&model.diffusion.jacobians(x), model.n()))
}

pub(crate) fn big_sigma_from(jacobians: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for j in jacobians {
        out.gemm(1.0, j, j, 1.0);
    }
    out
}

pub const ZOO: [&str; 4] = ["heat_mult", "hypo3", "degenerate2", "linear_gauss"];

/// Look up a model by name.
///
/// * `heat_mult`: 8 spectral modes, `λ_k = -0.05 (kπ)^2`, `α = 0.5 tanh`,
///   `σ_k = 0.3 (1 + 0.5 tanh x_k) e_k`; E-weights `1/k`.
/// * `hypo3`: Kolmogorov chain `dx1 = dW, dx2 = x1 dt, dx3 = x2 dt`.
/// * `degenerate2`: `dx1 = dW`, `x2` frozen.
/// * `linear_gauss`: diagonal `A`, `α = Bx`, constant `σ`; Gaussian law.
pub fn zoo(name: &str) -> Result<ModelSpec> {
    match name {
        "heat_mult" => heat_mult(),
        "hypo3" => hypo3(),
        "degenerate2" => degenerate2(),
        "linear_gauss" => linear_gauss(),
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

fn heat_mult() -> Result<ModelSpec> {
    let n = 8;
    let pi = core::f64::consts::PI;
    let spectrum = (1..=n).map(|k| -0.05 * (k as f64 * pi) * (k as f64 * pi)).collect();
    let e_weights = (1..=n).map(|k| 1.0 / k as f64).collect();
    let cfg = TruncationConfig::new(e_weights, vec![1.0; n], 1.0)?;
    let columns = (0..n)
        .map(|k| {
            Arc::new(TanhColumn {
                dim: n,
                index: k,
                amplitude: 0.3,
                slope: 0.5,
            }) as Arc<dyn VectorField>
        })
        .collect();
    let x0 = DVector::from_fn(n, |i, _| 1.0 / (i + 1) as f64);
    ModelSpec::new(
        "heat_mult",
        cfg,
        Semigroup::diagonal(spectrum)?,
        Arc::new(TanhDrift { dim: n, scale: 0.5 }),
        DiffusionFamily::new(columns)?,
        x0,
    )
}

fn hypo3() -> Result<ModelSpec> {
    let shift = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let sigma = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
    ModelSpec::new(
        "hypo3",
        TruncationConfig::unit(3, 1)?,
        Semigroup::zero(3)?,
        Arc::new(PolynomialField::linear(&shift)?),
        DiffusionFamily::constant(&sigma),
        DVector::zeros(3),
    )
}

fn degenerate2() -> Result<ModelSpec> {
    let sigma = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    ModelSpec::new(
        "degenerate2",
        TruncationConfig::unit(2, 1)?,
        Semigroup::zero(2)?,
        Arc::new(PolynomialField::constant(&[0.0, 0.0])),
        DiffusionFamily::constant(&sigma),
        DVector::from_vec(vec![0.0, 1.0]),
    )
}

/// Coupling matrix `B` of `linear_gauss`.
pub fn linear_gauss_coupling() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            -0.2, 0.3, 0.0, 0.1, //
            -0.3, -0.2, 0.2, 0.0, //
            0.0, -0.2, -0.1, 0.3, //
            -0.1, 0.0, -0.3, -0.2,
        ],
    )
}

/// Constant noise matrix of `linear_gauss`.
pub fn linear_gauss_noise() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            0.5, 0.0, 0.0, 0.0, //
            0.1, 0.4, 0.0, 0.0, //
            0.0, 0.1, 0.3, 0.0, //
            0.05, 0.0, 0.1, 0.2,
        ],
    )
}

fn linear_gauss() -> Result<ModelSpec> {
    ModelSpec::new(
        "linear_gauss",
        TruncationConfig::unit(4, 4)?,
        Semigroup::diagonal(vec![-0.5, -1.0, -1.5, -2.0])?,
        Arc::new(PolynomialField::linear(&linear_gauss_coupling())?),
        DiffusionFamily::constant(&linear_gauss_noise()),
        DVector::from_vec(vec![1.0, -0.5, 0.25, 0.8]),
    )
}

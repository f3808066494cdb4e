//! Malliavin derivative `D_r X_t`, covariance operator `C_t` and the
//! Malliavin matrix `γ_t` of `ξ_t = F X_t`.
//!
//! `D_r X_t` is computed two ways: by integrating its own linear SDE from
//! `D_r X_r = σ(X_r)`, and as the product `Y_t Z_r σ(X_r)`. The two agree up
//! to the discretization error of `Y_r Z_r = I`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::sde_solver::{BrownianPath, SolutionPath};
use crate::spaces::check_dim;
use crate::variation_flow::FlowBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Sde,
    Product,
}

/// `D_r X_t` for `t` on the grid; zero before `r`.
#[derive(Debug, Clone)]
pub struct MalliavinBundle {
    pub r_index: usize,
    /// `d[i]` is `D_r X_{t_{r + i}}`.
    pub d: Vec<DMatrix<f64>>,
    pub route: Route,
    n: usize,
    m: usize,
}

impl MalliavinBundle {
    /// `D_r X_{t_j}`; the zero matrix for `j < r`.
    pub fn at(&self, t_index: usize) -> DMatrix<f64> {
        if t_index < self.r_index {
            return DMatrix::zeros(self.n, self.m);
        }
        self.d[t_index - self.r_index].clone()
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.d.last().expect("bundle holds at least the node r")
    }
}

/// `D_{j+1} = exp(dt A)(D_j + α'(X_j) D_j dt + Σ_k σ'_k(X_j) D_j ΔW^k_j)`
/// started from `D_r = σ(X_r)`.
pub fn solve_malliavin_sde(
    model: &ModelSpec,
    x: &SolutionPath,
    path: &BrownianPath,
    r_index: usize,
) -> Result<MalliavinBundle> {
    let steps = path.grid.steps();
    if r_index > steps {
        return Err(Error::Precondition("r_index beyond the grid"));
    }
    check_dim("solution nodes", steps + 1, x.states.len())?;
    let n = model.n();
    let dt = path.grid.dt();
    let step = model.sg.cache(dt, 1);
    let mut d = model.diffusion.assemble(&x.states[r_index]);
    let mut out = Vec::with_capacity(steps - r_index + 1);
    out.push(d.clone());
    for j in r_index..steps {
        let xj = &x.states[j];
        let mut inner = &d + model.drift.jacobian(xj) * &d * dt;
        for (k, col) in model.diffusion.columns().iter().enumerate() {
            let dw = path.increments[(j, k)];
            if dw != 0.0 {
                inner += col.jacobian(xj) * &d * dw;
            }
        }
        d = step.apply_matrix(1, &inner);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { node: j + 1 });
        }
        out.push(d.clone());
    }
    Ok(MalliavinBundle {
        r_index,
        d: out,
        route: Route::Sde,
        n,
        m: model.m(),
    })
}

/// `Y_t Z_r σ(X_r)`; zero for `r > t`.
pub fn product_formula(
    model: &ModelSpec,
    flows: &FlowBundle,
    x: &SolutionPath,
    r_index: usize,
    t_index: usize,
) -> DMatrix<f64> {
    if r_index > t_index {
        return DMatrix::zeros(model.n(), model.m());
    }
    let sigma = model.diffusion.assemble(&x.states[r_index]);
    &flows.y[t_index] * (&flows.z[r_index] * sigma)
}

/// The product route as a bundle over `t >= r`.
pub fn product_bundle(
    model: &ModelSpec,
    flows: &FlowBundle,
    x: &SolutionPath,
    r_index: usize,
) -> MalliavinBundle {
    let steps = flows.grid.steps();
    let zs = &flows.z[r_index] * model.diffusion.assemble(&x.states[r_index]);
    let d = (r_index..=steps).map(|t| &flows.y[t] * &zs).collect();
    MalliavinBundle {
        r_index,
        d,
        route: Route::Product,
        n: model.n(),
        m: model.m(),
    }
}

/// `max_t ‖D_r(F X_t) - F D_r X_t‖_F` for a linear `F`.
///
/// `D_r(F X_t)` is assembled entry by entry as `Σ_i F_{ai} (D_r X_t)_{ik}`,
/// the chain rule with `F' = F`.
pub fn chain_rule_check(f: &DMatrix<f64>, bundle: &MalliavinBundle) -> Result<f64> {
    check_dim("chain rule F columns", bundle.n, f.ncols())?;
    let mut worst: f64 = 0.0;
    for d in &bundle.d {
        let product = f * d;
        let mut gap = 0.0;
        for a in 0..f.nrows() {
            for k in 0..bundle.m {
                let mut entry = 0.0;
                for i in 0..bundle.n {
                    entry += f[(a, i)] * d[(i, k)];
                }
                gap += (entry - product[(a, k)]) * (entry - product[(a, k)]);
            }
        }
        worst = worst.max(Float::sqrt(gap));
    }
    Ok(worst)
}

/// `Σ_r ‖D_r X_T‖_HS^2 dt`, the grid surrogate of the `𝔻^{1,2}` seminorm,
/// using the product route.
pub fn malliavin_energy(model: &ModelSpec, flows: &FlowBundle, x: &SolutionPath) -> Result<f64> {
    let steps = flows.grid.steps();
    let dt = flows.grid.dt();
    let mut acc = 0.0;
    for r in 0..steps {
        let d = product_formula(model, flows, x, r, steps);
        let h = model.cfg.hs_norm(&d)?;
        acc += h * h * dt;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrature {
    LeftEndpoint,
}

impl Quadrature {
    pub fn name(self) -> &'static str {
        "left_endpoint"
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub f: DMatrix<f64>,
    /// `C_t = ∫ Z_r σ(X_r) σ(X_r)^T Z_r^T dr`.
    pub c: DMatrix<f64>,
    /// `γ_t = (F Y_t) C_t (F Y_t)^T`.
    pub gamma: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub quadrature: Quadrature,
    pub t_index: usize,
}

/// Numerical rank of `f` from its singular values (relative tolerance).
pub fn numerical_rank(f: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = f.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s >= rel_tol * max).count()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Check that the `k x n` projection has rank `k`.
pub fn check_projection(f: &DMatrix<f64>, n: usize) -> Result<()> {
    check_dim("projection columns", n, f.ncols())?;
    let rank = numerical_rank(f, 1e-12);
    if f.nrows() == 0 || rank < f.nrows() {
        return Err(Error::RankDeficient {
            rows: f.nrows(),
            cols: f.ncols(),
            rank,
        });
    }
    Ok(())
}

/// `C_t` and `γ_t` at the terminal node.
pub fn covariance(
    model: &ModelSpec,
    flows: &FlowBundle,
    x: &SolutionPath,
    f: &DMatrix<f64>,
    quadrature: Quadrature,
) -> Result<CovarianceReport> {
    covariance_at(model, flows, x, f, quadrature, flows.grid.steps())
}

/// `C_{t_j}` and `γ_{t_j}` at an intermediate node `t_index`.
pub fn covariance_at(
    model: &ModelSpec,
    flows: &FlowBundle,
    x: &SolutionPath,
    f: &DMatrix<f64>,
    quadrature: Quadrature,
    t_index: usize,
) -> Result<CovarianceReport> {
    check_projection(f, model.n())?;
    if t_index > flows.grid.steps() {
        return Err(Error::Precondition("t_index beyond the grid"));
    }
    let n = model.n();
    let dt = flows.grid.dt();
    let mut c = DMatrix::zeros(n, n);
    match quadrature {
        Quadrature::LeftEndpoint => {
            for j in 0..t_index {
                let zs = &flows.z[j] * model.diffusion.assemble(&x.states[j]);
                c.gemm(dt, &zs, &zs.transpose(), 1.0);
            }
        }
    }
    let c = symmetrize(&c);
    let fy = f * &flows.y[t_index];
    let gamma = symmetrize(&(&fy * &c * fy.transpose()));
    let min_eigenvalue = min_eigenvalue(&gamma);
    Ok(CovarianceReport {
        f: f.clone(),
        c,
        gamma,
        min_eigenvalue,
        quadrature,
        t_index,
    })
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    sym.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// `Σ_j Σ_k ⟨Z_{t_j} σ_k(X_{t_j}), φ⟩^2 dt`, which equals `φ^T C φ`.
pub fn quadratic_form(
    model: &ModelSpec,
    flows: &FlowBundle,
    x: &SolutionPath,
    phi: &DVector<f64>,
) -> Result<f64> {
    check_dim("phi", model.n(), phi.len())?;
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("phi"));
    }
    let dt = flows.grid.dt();
    let mut acc = 0.0;
    for j in 0..flows.grid.steps() {
        let xj = &x.states[j];
        for col in model.diffusion.columns() {
            let pairing = (&flows.z[j] * col.eval(xj)).dot(phi);
            acc += pairing * pairing * dt;
        }
    }
    Ok(acc)
}

//! First-variation flow `Y_t` and its right inverse `Z_t`.
//!
//! All matrix SDEs use the exponential-Euler step of the state equation:
//!
//! * `Y_{j+1} = exp(dt A) (I + α'_j dt + Σ_k σ'_{k,j} ΔW^k_j) Y_j`
//! * `P_{j+1} = exp(-t_j A) (I + α'_j dt + Σ_k σ'_{k,j} ΔW^k_j) exp(t_j A) P_j`
//! * `R_{j+1} = R_j exp(-t_j A) (I + (Σ_j - α'_j) dt - Σ_k σ'_{k,j} ΔW^k_j) exp(t_j A)`
//!
//! and `Z_t = R_t exp(-tA)`. The direct formulation integrates `Z` without
//! ever forming `exp(-tA)` for large `t`:
//! `Z_{j+1} = Z_j (I + (Σ_j - α'_j) dt - Σ_k σ'_{k,j} ΔW^k_j) exp(-dt A)`,
//! which is the conjugated recursion with `exp(t_j A) exp(-t_{j+1} A)`
//! collapsed to a single step factor. Noise multiplies `Y` from the left and
//! `Z` from the right.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{big_sigma_from, ModelSpec};
use crate::sde_solver::{solve_mild, BrownianPath, SolutionPath};
use crate::spaces::{check_dim, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// Integrate `R_t` with `exp(±tA)` conjugation, then `Z = R exp(-tA)`.
    Conjugated,
    /// Integrate `Z_t` directly.
    Direct,
}

impl Formulation {
    pub fn name(self) -> &'static str {
        match self {
            Formulation::Conjugated => "conjugated",
            Formulation::Direct => "direct",
        }
    }
}

/// `Y, V, P, R, Z` on the grid. `p` is absent when `exp(-tA)` is not
/// available (dense generator or overflow cap exceeded).
#[derive(Debug, Clone)]
pub struct FlowBundle {
    pub grid: TimeGrid,
    pub y: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub p: Option<Vec<DMatrix<f64>>>,
    pub r: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub formulation: Formulation,
}

/// Coefficient derivatives along a solution, evaluated once per node.
struct Linearization {
    // I + α' dt + Σ_k σ'_k ΔW^k
    forward: Vec<DMatrix<f64>>,
    // I + (Σ - α') dt - Σ_k σ'_k ΔW^k
    backward: Vec<DMatrix<f64>>,
}

fn linearize(model: &ModelSpec, x: &SolutionPath, path: &BrownianPath) -> Result<Linearization> {
    let n = model.n();
    let steps = path.grid.steps();
    check_dim("solution nodes", steps + 1, x.states.len())?;
    check_dim("brownian path", model.m(), path.m())?;
    let dt = path.grid.dt();
    let id = DMatrix::<f64>::identity(n, n);
    let mut forward = Vec::with_capacity(steps);
    let mut backward = Vec::with_capacity(steps);
    for j in 0..steps {
        let xj = &x.states[j];
        let da = model.drift.jacobian(xj);
        let ds = model.diffusion.jacobians(xj);
        let mut noise = DMatrix::zeros(n, n);
        for (k, d) in ds.iter().enumerate() {
            let dw = path.increments[(j, k)];
            if dw != 0.0 {
                noise += d * dw;
            }
        }
        let ito = big_sigma_from(&ds, n);
        forward.push(&id + &da * dt + &noise);
        backward.push(&id + (ito - da) * dt - noise);
    }
    Ok(Linearization { forward, backward })
}

fn blow_up_check(m: &DMatrix<f64>, node: usize) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { node });
    }
    Ok(())
}

/// `Y_t` solving the linearized equation along `x`.
pub fn solve_first_variation(
    model: &ModelSpec,
    x: &SolutionPath,
    path: &BrownianPath,
) -> Result<Vec<DMatrix<f64>>> {
    let lin = linearize(model, x, path)?;
    Ok(first_variation_from(model, path.grid, &lin)?)
}

fn first_variation_from(
    model: &ModelSpec,
    grid: TimeGrid,
    lin: &Linearization,
) -> Result<Vec<DMatrix<f64>>> {
    let n = model.n();
    let step = model.sg.cache(grid.dt(), 1);
    let mut y = DMatrix::<f64>::identity(n, n);
    let mut out = Vec::with_capacity(grid.steps() + 1);
    out.push(y.clone());
    for (j, f) in lin.forward.iter().enumerate() {
        y = step.apply_matrix(1, &(f * &y));
        blow_up_check(&y, j + 1)?;
        out.push(y.clone());
    }
    Ok(out)
}

/// `P_t` from the conjugated first-variation equation; needs `exp(-tA)`.
fn conjugated_p(model: &ModelSpec, grid: TimeGrid, lin: &Linearization) -> Result<Vec<DMatrix<f64>>> {
    let n = model.n();
    let mut p = DMatrix::<f64>::identity(n, n);
    let mut out = Vec::with_capacity(grid.steps() + 1);
    out.push(p.clone());
    for (j, f) in lin.forward.iter().enumerate() {
        let c = model.sg.conjugate(grid.node(j), f)?;
        p = c * &p;
        blow_up_check(&p, j + 1)?;
        out.push(p.clone());
    }
    Ok(out)
}

/// `(P, R, Z)` of the right inverse.
#[derive(Debug, Clone)]
pub struct RightInverse {
    pub p: Option<Vec<DMatrix<f64>>>,
    pub r: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub formulation: Formulation,
}

/// Right inverse `Z_t` (with `R_t`, and `P_t` when available).
///
/// The conjugated formulation fails with [`Error::OverflowCap`] (or
/// [`Error::DenseInverse`]) when `exp(-TA)` is out of reach; callers then
/// retry with [`Formulation::Direct`].
pub fn solve_right_inverse(
    model: &ModelSpec,
    x: &SolutionPath,
    path: &BrownianPath,
    formulation: Formulation,
) -> Result<RightInverse> {
    let lin = linearize(model, x, path)?;
    right_inverse_from(model, path.grid, &lin, formulation)
}

fn right_inverse_from(
    model: &ModelSpec,
    grid: TimeGrid,
    lin: &Linearization,
    formulation: Formulation,
) -> Result<RightInverse> {
    let n = model.n();
    let steps = grid.steps();
    let id = DMatrix::<f64>::identity(n, n);
    match formulation {
        Formulation::Conjugated => {
            // fail before integrating if the horizon is out of reach
            model.sg.inverse_matrix(grid.horizon())?;
            let mut r = id.clone();
            let mut rs = Vec::with_capacity(steps + 1);
            let mut zs = Vec::with_capacity(steps + 1);
            rs.push(r.clone());
            zs.push(id.clone());
            for (j, b) in lin.backward.iter().enumerate() {
                r = &r * model.sg.conjugate(grid.node(j), b)?;
                blow_up_check(&r, j + 1)?;
                let z = &r * model.sg.inverse_matrix(grid.node(j + 1))?;
                rs.push(r.clone());
                zs.push(z);
            }
            let p = conjugated_p(model, grid, lin)?;
            Ok(RightInverse {
                p: Some(p),
                r: rs,
                z: zs,
                formulation,
            })
        }
        Formulation::Direct => {
            let back = model.sg.step_inverse(grid.dt())?;
            let fwd = model.sg.exp_matrix(grid.dt());
            let mut z = id.clone();
            let mut e = id.clone();
            let mut zs = Vec::with_capacity(steps + 1);
            let mut rs = Vec::with_capacity(steps + 1);
            zs.push(z.clone());
            rs.push(id.clone());
            for (j, b) in lin.backward.iter().enumerate() {
                z = &z * b * &back;
                blow_up_check(&z, j + 1)?;
                e = if model.sg.is_diagonal() {
                    model.sg.exp_matrix(grid.node(j + 1))
                } else {
                    &e * &fwd
                };
                rs.push(&z * &e);
                zs.push(z.clone());
            }
            let p = if model.sg.inverse_matrix(grid.horizon()).is_ok() {
                Some(conjugated_p(model, grid, lin)?)
            } else {
                None
            };
            Ok(RightInverse {
                p,
                r: rs,
                z: zs,
                formulation,
            })
        }
    }
}

/// `Y`, `V = Y - exp(tA)` and the right inverse in one pass.
pub fn solve_flows(
    model: &ModelSpec,
    x: &SolutionPath,
    path: &BrownianPath,
    formulation: Formulation,
) -> Result<FlowBundle> {
    let lin = linearize(model, x, path)?;
    let grid = path.grid;
    let y = first_variation_from(model, grid, &lin)?;
    let inv = right_inverse_from(model, grid, &lin, formulation)?;
    let v = y
        .iter()
        .enumerate()
        .map(|(j, yj)| yj - model.sg.exp_matrix(grid.node(j)))
        .collect();
    Ok(FlowBundle {
        grid,
        y,
        v,
        p: inv.p,
        r: inv.r,
        z: inv.z,
        formulation: inv.formulation,
    })
}

/// Conjugated formulation when `exp(-TA)` is within the cap, direct otherwise.
pub fn solve_flows_auto(
    model: &ModelSpec,
    x: &SolutionPath,
    path: &BrownianPath,
) -> Result<FlowBundle> {
    match solve_flows(model, x, path, Formulation::Conjugated) {
        Err(Error::OverflowCap { .. }) | Err(Error::DenseInverse) => {
            solve_flows(model, x, path, Formulation::Direct)
        }
        other => other,
    }
}

/// Per-node residual of `P_t R_t = I` in Frobenius norm. Without `P` the
/// residual is measured as `‖Y_t Z_t - I‖_F`.
pub fn residual_q(bundle: &FlowBundle) -> Vec<f64> {
    let n = bundle.y[0].nrows();
    let id = DMatrix::<f64>::identity(n, n);
    match &bundle.p {
        Some(p) => p
            .iter()
            .zip(&bundle.r)
            .map(|(p, r)| (p * r - &id).norm())
            .collect(),
        None => bundle
            .y
            .iter()
            .zip(&bundle.z)
            .map(|(y, z)| (y * z - &id).norm())
            .collect(),
    }
}

/// `max_j ‖Y_{t_j} Z_{t_j} exp(t_j A) v - exp(t_j A) v‖` for one vector `v`.
pub fn range_residual(model: &ModelSpec, bundle: &FlowBundle, v: &DVector<f64>) -> Result<f64> {
    check_dim("range_residual", model.n(), v.len())?;
    let mut worst: f64 = 0.0;
    for (j, (y, z)) in bundle.y.iter().zip(&bundle.z).enumerate() {
        let ev = model.sg.apply(bundle.grid.node(j), v)?;
        let back = y * (z * &ev);
        worst = worst.max((back - ev).norm());
    }
    Ok(worst)
}

/// Relative E-norm error between `Y_T h` and the forward difference
/// `(X_T(x + εh) - X_T(x)) / ε` on the same Brownian path.
pub fn finite_difference_flow_error(
    model: &ModelSpec,
    path: &BrownianPath,
    y_terminal: &DMatrix<f64>,
    direction: &DVector<f64>,
    eps: f64,
) -> Result<f64> {
    check_dim("direction", model.n(), direction.len())?;
    let base = solve_mild(model, path)?;
    let shifted = model.with_initial(&model.initial_x + direction * eps)?;
    let bumped = solve_mild(&shifted, path)?;
    let fd = (bumped.terminal() - base.terminal()) / eps;
    let exact = y_terminal * direction;
    let denom = model.cfg.e_norm(&exact)?;
    Ok(model.cfg.e_norm(&(fd - exact))? / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{zoo, DiffusionFamily, PolynomialField};
    use crate::sde_solver::sample_brownian;
    use crate::spaces::Semigroup;
    use alloc::sync::Arc;
    use alloc::vec;

    fn frob_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    fn run(model: &ModelSpec, steps: usize, seed: u64, f: Formulation) -> (SolutionPath, FlowBundle) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let path = sample_brownian(seed, 0, grid, model.m());
        let x = solve_mild(model, &path).unwrap();
        let flows = solve_flows(model, &x, &path, f).unwrap();
        (x, flows)
    }

    fn linear_drift_model(b: &DMatrix<f64>) -> ModelSpec {
        ModelSpec::new(
            "linear",
            crate::TruncationConfig::unit(2, 1).unwrap(),
            Semigroup::zero(2).unwrap(),
            Arc::new(PolynomialField::linear(b).unwrap()),
            DiffusionFamily::constant(&DMatrix::from_column_slice(2, 1, &[0.3, -0.2])),
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn initial_values_are_identity() {
        let (_, flows) = run(&zoo("heat_mult").unwrap(), 50, 1, Formulation::Conjugated);
        let id = DMatrix::<f64>::identity(8, 8);
        assert_eq!(flows.y[0], id);
        assert_eq!(flows.p.as_ref().unwrap()[0], id);
        assert_eq!(flows.r[0], id);
        assert_eq!(flows.z[0], id);
    }

    #[test]
    fn y_equals_semigroup_times_p() {
        let model = zoo("heat_mult").unwrap();
        let (_, flows) = run(&model, 200, 2, Formulation::Conjugated);
        let p = flows.p.as_ref().unwrap();
        for (j, (y, p)) in flows.y.iter().zip(p).enumerate() {
            let ep = model.sg.exp_matrix(flows.grid.node(j)) * p;
            assert!((y - &ep).norm() <= 1e-10 * y.norm().max(1.0), "node {j}");
        }
    }

    #[test]
    fn constant_coefficients_collapse() {
        // α' = 0, σ' = 0: Y = exp(tA), R = I, residual 0
        let model = ModelSpec::new(
            "const",
            crate::TruncationConfig::unit(3, 1).unwrap(),
            Semigroup::diagonal(vec![-0.5, -1.0, -3.0]).unwrap(),
            Arc::new(PolynomialField::constant(&[0.1, 0.0, -0.2])),
            DiffusionFamily::constant(&DMatrix::from_column_slice(3, 1, &[1.0, 0.5, 0.0])),
            DVector::from_vec(vec![1.0, 2.0, 3.0]),
        )
        .unwrap();
        let (_, flows) = run(&model, 100, 3, Formulation::Conjugated);
        for (j, y) in flows.y.iter().enumerate() {
            let e = model.sg.exp_matrix(flows.grid.node(j));
            assert!((y - &e).norm() < 1e-14);
            assert!(flows.v[j].norm() < 1e-14);
            assert!((&flows.r[j] - DMatrix::<f64>::identity(3, 3)).norm() == 0.0);
        }
        assert!(residual_q(&flows).iter().all(|r| *r < 1e-14));
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert!(range_residual(&model, &flows, &v).unwrap() < 1e-14);
    }

    #[test]
    fn linear_drift_gives_matrix_exponentials() {
        let b = DMatrix::from_row_slice(2, 2, &[-0.4, 1.0, -0.5, -0.1]);
        let model = linear_drift_model(&b);
        let (_, flows) = run(&model, 100_000, 4, Formulation::Direct);
        let yt = flows.y.last().unwrap();
        let zt = flows.z.last().unwrap();
        let want_y = crate::expm::expm(&b);
        let want_z = crate::expm::expm(&(-&b));
        // Euler flow of a linear ODE: O(dt) = 1e-5 agreement
        assert!(frob_rel(yt, &want_y) < 2e-5);
        assert!(frob_rel(zt, &want_z) < 2e-5);
    }

    #[test]
    fn formulations_agree_on_heat_mult() {
        let model = zoo("heat_mult").unwrap();
        let grid = TimeGrid::new(1.0, 2000).unwrap();
        let path = sample_brownian(5, 0, grid, 8);
        let x = solve_mild(&model, &path).unwrap();
        let a = solve_right_inverse(&model, &x, &path, Formulation::Conjugated).unwrap();
        let b = solve_right_inverse(&model, &x, &path, Formulation::Direct).unwrap();
        let za = a.z.last().unwrap();
        let zb = b.z.last().unwrap();
        assert!(frob_rel(za, zb) < 1e-10);
    }

    #[test]
    fn overflow_forces_direct() {
        let model = zoo("heat_mult").unwrap().clone();
        let model = ModelSpec {
            sg: model.sg.clone().with_overflow_cap(5.0),
            ..model
        };
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let path = sample_brownian(5, 0, grid, 8);
        let x = solve_mild(&model, &path).unwrap();
        let err = solve_right_inverse(&model, &x, &path, Formulation::Conjugated).unwrap_err();
        assert!(matches!(err, Error::OverflowCap { .. }));
        let flows = solve_flows_auto(&model, &x, &path).unwrap();
        assert_eq!(flows.formulation, Formulation::Direct);
        assert!(flows.p.is_none());
        assert!(residual_q(&flows).iter().all(|r| r.is_finite()));
    }

    #[test]
    fn dense_generator_uses_direct_route() {
        let model = ModelSpec::new(
            "dense",
            crate::TruncationConfig::unit(2, 1).unwrap(),
            Semigroup::dense(DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0])).unwrap(),
            Arc::new(PolynomialField::constant(&[0.0, 0.0])),
            DiffusionFamily::constant(&DMatrix::from_column_slice(2, 1, &[1.0, 1.0])),
            DVector::zeros(2),
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let path = sample_brownian(1, 0, grid, 1);
        let x = solve_mild(&model, &path).unwrap();
        let flows = solve_flows_auto(&model, &x, &path).unwrap();
        assert_eq!(flows.formulation, Formulation::Direct);
        let res = residual_q(&flows);
        assert!(res.iter().all(|r| *r < 1e-12), "{:?}", res.last());
    }

    #[test]
    fn hypo3_residual_refines() {
        let model = zoo("hypo3").unwrap();
        let mut last = f64::INFINITY;
        for steps in [2500, 5000, 10_000] {
            let (_, flows) = run(&model, steps, 6, Formulation::Conjugated);
            let r = residual_q(&flows).into_iter().fold(0.0, f64::max);
            assert!(r <= last / 1.9, "steps {steps}: {r} vs {last}");
            last = r;
        }
        assert!(last <= 1e-3);
    }

    #[test]
    fn first_variation_matches_finite_differences() {
        let model = zoo("heat_mult").unwrap();
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let path = sample_brownian(8, 0, grid, 8);
        let x = solve_mild(&model, &path).unwrap();
        let y = solve_first_variation(&model, &x, &path).unwrap();
        let h = DVector::from_fn(8, |i, _| 1.0 / (1.0 + i as f64));
        let err = finite_difference_flow_error(&model, &path, y.last().unwrap(), &h, 1e-5).unwrap();
        assert!(err <= 5e-3, "err = {err}");
    }

    #[test]
    fn y_is_injective_across_zoo() {
        for name in crate::models::ZOO {
            let model = zoo(name).unwrap();
            let (_, flows) = run(&model, 500, 9, Formulation::Direct);
            let sv = flows.y.last().unwrap().singular_values();
            let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(min > 1e-16, "{name}: {min}");
        }
    }
}

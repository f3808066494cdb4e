//! Brownian increments, the exponential-Euler mild solver, and the Picard
//! map whose iterates contract at the factorial rate `(KT)^n / n!`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::par::map_indices;
use crate::spaces::{check_dim, SemigroupCache, TimeGrid};

/// Increments of an `m`-dimensional Brownian motion on a grid.
///
/// Row `j` holds `W_{t_{j+1}} - W_{t_j}`. The stream is a ChaCha8 generator
/// seeded with `seed` and switched to stream `stream_id`, so every path can be
/// regenerated independently of the others.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub grid: TimeGrid,
    pub increments: DMatrix<f64>,
    pub seed: u64,
    pub stream_id: u64,
}

pub fn sample_brownian(seed: u64, stream_id: u64, grid: TimeGrid, m: usize) -> BrownianPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    let scale = Float::sqrt(grid.dt());
    let mut increments = DMatrix::zeros(grid.steps(), m);
    for j in 0..grid.steps() {
        for k in 0..m {
            let z: f64 = StandardNormal.sample(&mut rng);
            increments[(j, k)] = z * scale;
        }
    }
    BrownianPath {
        grid,
        increments,
        seed,
        stream_id,
    }
}

impl BrownianPath {
    pub fn m(&self) -> usize {
        self.increments.ncols()
    }

    /// `ΔW_j` as a slice-friendly vector.
    pub fn increment(&self, j: usize) -> Vec<f64> {
        self.increments.row(j).iter().copied().collect()
    }

    /// The same path on a grid `factor` times coarser: increments are summed
    /// over consecutive blocks.
    pub fn coarsen(&self, factor: usize) -> Result<BrownianPath> {
        let grid = self.grid.coarsen(factor)?;
        let m = self.m();
        let mut inc = DMatrix::zeros(grid.steps(), m);
        for j in 0..grid.steps() {
            for k in 0..m {
                let mut s = 0.0;
                for i in 0..factor {
                    s += self.increments[(j * factor + i, k)];
                }
                inc[(j, k)] = s;
            }
        }
        Ok(BrownianPath {
            grid,
            increments: inc,
            seed: self.seed,
            stream_id: self.stream_id,
        })
    }

    /// `W_{t_j}` for every node.
    pub fn values(&self) -> Vec<DVector<f64>> {
        let m = self.m();
        let mut w = DVector::zeros(m);
        let mut out = vec![w.clone()];
        for j in 0..self.grid.steps() {
            for k in 0..m {
                w[k] += self.increments[(j, k)];
            }
            out.push(w.clone());
        }
        out
    }
}

/// The mild solution `X_t` at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionPath {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
}

impl SolutionPath {
    /// `X ≡ x` on every node.
    pub fn constant(grid: TimeGrid, x: &DVector<f64>) -> Self {
        SolutionPath {
            grid,
            states: vec![x.clone(); grid.steps() + 1],
        }
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("at least one node")
    }
}

fn check_path(model: &ModelSpec, path: &BrownianPath) -> Result<()> {
    check_dim("brownian path", model.m(), path.m())?;
    check_dim("brownian steps", path.grid.steps(), path.increments.nrows())
}

/// Exponential Euler:
/// `X_{j+1} = exp(dt A) (X_j + α(X_j) dt + σ(X_j) ΔW_j)`.
pub fn solve_mild(model: &ModelSpec, path: &BrownianPath) -> Result<SolutionPath> {
    let cache = model.sg.cache(path.grid.dt(), 1);
    solve_mild_cached(model, path, &cache)
}

pub fn solve_mild_cached(
    model: &ModelSpec,
    path: &BrownianPath,
    cache: &SemigroupCache,
) -> Result<SolutionPath> {
    check_path(model, path)?;
    let dt = path.grid.dt();
    let steps = path.grid.steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = model.initial_x.clone();
    states.push(x.clone());
    for j in 0..steps {
        let dw = path.increment(j);
        let mut inner = x.clone();
        inner.axpy(dt, &model.drift.eval(&x), 1.0);
        inner += model.diffusion.apply(&x, &dw);
        x = cache.apply(1, &inner);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { node: j + 1 });
        }
        states.push(x.clone());
    }
    Ok(SolutionPath {
        grid: path.grid,
        states,
    })
}

/// One application of the discretized map
/// `Γ(X)_{t_j} = exp(t_j A) x + Σ_{i<j} exp((t_j - t_i) A)(α(X_i) dt + σ(X_i) ΔW_i)`.
pub fn picard_map(
    model: &ModelSpec,
    candidate: &SolutionPath,
    path: &BrownianPath,
) -> Result<SolutionPath> {
    let cache = model.sg.cache(path.grid.dt(), path.grid.steps());
    picard_map_cached(model, candidate, path, &cache)
}

/// As [`picard_map`] with `exp(k dt A)` precomputed for `k = 0..=N`.
pub fn picard_map_cached(
    model: &ModelSpec,
    candidate: &SolutionPath,
    path: &BrownianPath,
    cache: &SemigroupCache,
) -> Result<SolutionPath> {
    check_path(model, path)?;
    let steps = path.grid.steps();
    check_dim("picard candidate", steps + 1, candidate.states.len())?;
    if cache.len() < steps + 1 {
        return Err(Error::Precondition("semigroup cache shorter than the grid"));
    }
    let dt = path.grid.dt();
    let forcing: Vec<DVector<f64>> = (0..steps)
        .map(|i| {
            let xi = &candidate.states[i];
            let mut f = model.drift.eval(xi) * dt;
            f += model.diffusion.apply(xi, &path.increment(i));
            f
        })
        .collect();
    let mut states = Vec::with_capacity(steps + 1);
    for j in 0..=steps {
        let mut acc = cache.apply(j, &model.initial_x);
        for (i, f) in forcing.iter().enumerate().take(j) {
            cache.apply_add(j - i, f, &mut acc);
        }
        if acc.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { node: j });
        }
        states.push(acc);
    }
    Ok(SolutionPath {
        grid: path.grid,
        states,
    })
}

/// `δ_k = sup_j mean_paths ‖X^{(k+1)}_{t_j} - X^{(k)}_{t_j}‖_E^2` for
/// `k = 0..n_iter`, starting from `X^{(0)} ≡ x`. Every iterate of a path uses
/// the same Brownian increments.
pub fn picard_diagnostic(
    model: &ModelSpec,
    grid: TimeGrid,
    n_iter: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_iter < 2 {
        return Err(Error::Precondition("picard_diagnostic needs n_iter >= 2"));
    }
    if n_paths == 0 {
        return Err(Error::Precondition("picard_diagnostic needs at least one path"));
    }
    let cache = model.sg.cache(grid.dt(), grid.steps());
    let per_path: Vec<Result<Vec<Vec<f64>>>> = map_indices(n_paths, |p| {
        let path = sample_brownian(seed, p as u64, grid, model.m());
        let mut current = SolutionPath::constant(grid, &model.initial_x);
        let mut gaps = Vec::with_capacity(n_iter);
        for _ in 0..n_iter {
            let next = picard_map_cached(model, &current, &path, &cache)?;
            let row = next
                .states
                .iter()
                .zip(&current.states)
                .map(|(a, b)| {
                    let e = model.cfg.e_norm(&(a - b))?;
                    Ok(e * e)
                })
                .collect::<Result<Vec<f64>>>()?;
            gaps.push(row);
            current = next;
        }
        Ok(gaps)
    });
    let mut mean = vec![vec![0.0; grid.steps() + 1]; n_iter];
    for gaps in per_path {
        let gaps = gaps?;
        for (acc, row) in mean.iter_mut().zip(gaps) {
            for (a, g) in acc.iter_mut().zip(row) {
                *a += g;
            }
        }
    }
    Ok(mean
        .into_iter()
        .map(|row| row.into_iter().map(|s| s / n_paths as f64).fold(0.0, f64::max))
        .collect())
}

/// Root-mean-square terminal error of the solver against a fine
/// self-reference driven by the same increments.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongOrderStudy {
    pub dts: Vec<f64>,
    pub rms_errors: Vec<f64>,
    pub slope: f64,
}

/// Strong-error study: for each coarse step count in `steps`, the terminal
/// E-norm error against the reference solved with `max(steps) * ref_factor`
/// steps, averaged over `n_paths` paths.
pub fn strong_order_study(
    model: &ModelSpec,
    horizon: f64,
    steps: &[usize],
    ref_factor: usize,
    n_paths: usize,
    seed: u64,
) -> Result<StrongOrderStudy> {
    let finest = steps.iter().copied().max().ok_or(Error::Precondition("empty step list"))?;
    let ref_grid = TimeGrid::new(horizon, finest * ref_factor)?;
    for s in steps {
        if ref_grid.steps() % s != 0 {
            return Err(Error::Precondition("step counts must divide the reference grid"));
        }
    }
    let per_path: Vec<Result<Vec<f64>>> = map_indices(n_paths, |p| {
        let path = sample_brownian(seed, p as u64, ref_grid, model.m());
        let reference = solve_mild(model, &path)?;
        steps
            .iter()
            .map(|s| {
                let coarse = path.coarsen(ref_grid.steps() / s)?;
                let sol = solve_mild(model, &coarse)?;
                let e = model.cfg.e_norm(&(sol.terminal() - reference.terminal()))?;
                Ok(e * e)
            })
            .collect()
    });
    let mut sums = vec![0.0; steps.len()];
    for row in per_path {
        for (s, e) in sums.iter_mut().zip(row?) {
            *s += e;
        }
    }
    let rms: Vec<f64> = sums.iter().map(|s| Float::sqrt(s / n_paths as f64)).collect();
    let dts: Vec<f64> = steps.iter().map(|s| horizon / *s as f64).collect();
    let slope = loglog_slope(&dts, &rms);
    Ok(StrongOrderStudy {
        dts,
        rms_errors: rms,
        slope,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| Float::ln(*v)).collect();
    let ly: Vec<f64> = y.iter().map(|v| Float::ln(*v)).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in lx.iter().zip(&ly) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{zoo, DiffusionFamily, PolynomialField};
    use crate::spaces::{Semigroup, TruncationConfig};
    use alloc::sync::Arc;

    fn zero_noise_heat() -> ModelSpec {
        let heat = zoo("heat_mult").unwrap();
        ModelSpec::new(
            "heat_free",
            heat.cfg.clone(),
            heat.sg.clone(),
            Arc::new(PolynomialField::constant(&[0.0; 8])),
            DiffusionFamily::constant(&DMatrix::zeros(8, 8)),
            heat.initial_x.clone(),
        )
        .unwrap()
    }

    #[test]
    fn brownian_determinism_and_streams() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let a = sample_brownian(7, 3, grid, 2);
        let b = sample_brownian(7, 3, grid, 2);
        let c = sample_brownian(7, 4, grid, 2);
        assert_eq!(a, b);
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn brownian_moments() {
        // 10^5 pooled increments at dt = 1e-3; chi-square bound on the variance
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0.0;
        for s in 0..100 {
            let p = sample_brownian(11, s, grid, 1);
            for v in p.increments.iter() {
                sum += v;
                sq += v * v;
                count += 1.0;
            }
        }
        let mean = sum / count;
        let var = sq / count - mean * mean;
        let dt = grid.dt();
        assert!(mean.abs() <= 4.0 * (dt / count).sqrt());
        assert!(var >= 0.9 * dt && var <= 1.1 * dt, "var = {var}");
    }

    #[test]
    fn coarsen_preserves_endpoint() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let p = sample_brownian(1, 0, grid, 2);
        let c = p.coarsen(8).unwrap();
        let wf = p.values();
        let wc = c.values();
        assert!((wf[64].clone() - &wc[8]).norm() < 1e-14);
        assert!((wf[32].clone() - &wc[4]).norm() < 1e-14);
    }

    #[test]
    fn deterministic_linear_is_semigroup() {
        let model = zero_noise_heat();
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let path = sample_brownian(1, 0, grid, 8);
        let sol = solve_mild(&model, &path).unwrap();
        for (j, x) in sol.states.iter().enumerate() {
            let want = model.sg.apply(grid.node(j), &model.initial_x).unwrap();
            assert!((x - &want).norm() <= 1e-14 * want.norm().max(1.0), "node {j}");
        }
    }

    #[test]
    fn constant_noise_telescopes() {
        let model = zoo("degenerate2").unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let path = sample_brownian(3, 0, grid, 1);
        let sol = solve_mild(&model, &path).unwrap();
        let w = path.values();
        let xt = sol.terminal();
        assert!((xt[0] - (model.initial_x[0] + w[100][0])).abs() < 1e-13);
        assert_eq!(xt[1], model.initial_x[1]);
    }

    #[test]
    fn blow_up_reports_node() {
        // dx = x^3 dt from x = 1 explodes in finite time
        let cube = PolynomialField::new(alloc::vec![alloc::vec![crate::models::Monomial::new(
            1.0,
            alloc::vec![3]
        )]])
        .unwrap();
        let model = ModelSpec::new(
            "cube",
            TruncationConfig::unit(1, 1).unwrap(),
            Semigroup::zero(1).unwrap(),
            Arc::new(cube),
            DiffusionFamily::constant(&DMatrix::zeros(1, 1)),
            DVector::from_vec(alloc::vec![1.0]),
        )
        .unwrap();
        let grid = TimeGrid::new(10.0, 100).unwrap();
        let path = sample_brownian(0, 0, grid, 1);
        match solve_mild(&model, &path) {
            Err(Error::BlowUp { node }) => assert!(node > 0 && node <= 100),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn picard_fixed_point() {
        let model = zoo("heat_mult").unwrap();
        let grid = TimeGrid::new(0.5, 100).unwrap();
        let path = sample_brownian(5, 1, grid, 8);
        let sol = solve_mild(&model, &path).unwrap();
        let again = picard_map(&model, &sol, &path).unwrap();
        for (a, b) in again.states.iter().zip(&sol.states) {
            assert!((a - b).norm() <= 1e-12);
        }
    }

    #[test]
    fn picard_constant_candidate_without_coefficients() {
        let model = zero_noise_heat();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let path = sample_brownian(5, 1, grid, 8);
        let cand = SolutionPath::constant(grid, &model.initial_x);
        let out = picard_map(&model, &cand, &path).unwrap();
        for (j, x) in out.states.iter().enumerate() {
            let want = model.sg.apply(grid.node(j), &model.initial_x).unwrap();
            assert!((x - want).norm() < 1e-15);
        }
    }

    #[test]
    fn picard_matches_independent_loop_bitwise() {
        // oracle: the sum re-implemented with scalar loops in the same order
        let model = zoo("heat_mult").unwrap();
        let grid = TimeGrid::new(0.5, 60).unwrap();
        let path = sample_brownian(9, 2, grid, 8);
        let x = &model.initial_x;
        let cand = SolutionPath::constant(grid, x);
        let got = picard_map(&model, &cand, &path).unwrap();
        let lam = model.sg.spectrum().unwrap();
        let dt = grid.dt();
        let drift = model.drift.eval(x);
        let sig = model.diffusion.assemble(x);
        for j in 0..=grid.steps() {
            for c in 0..8 {
                let factor = |k: usize| {
                    if k == 0 {
                        1.0
                    } else {
                        num_traits::Float::exp(k as f64 * dt * lam[c])
                    }
                };
                let mut acc = factor(j) * x[c];
                for i in 0..j {
                    let mut f = drift[c] * dt;
                    for k in 0..8 {
                        let dw = path.increments[(i, k)];
                        if dw != 0.0 {
                            f += sig[(c, k)] * dw;
                        }
                    }
                    acc += factor(j - i) * f;
                }
                assert_eq!(got.states[j][c].to_bits(), acc.to_bits(), "node {j} coord {c}");
            }
        }
    }

    #[test]
    fn picard_diagnostic_vanishes_without_coefficients() {
        let model = zero_noise_heat();
        let grid = TimeGrid::new(0.5, 50).unwrap();
        let d = picard_diagnostic(&model, grid, 4, 3, 1).unwrap();
        assert!(d[0] > 0.0);
        assert!(d[1..].iter().all(|v| *v == 0.0));
        assert!(picard_diagnostic(&model, grid, 1, 3, 1).is_err());
    }

    #[test]
    fn linear_gauss_mean() {
        // oracle: E X_T = exp(T (A + B)) x
        let model = zoo("linear_gauss").unwrap();
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let paths = 10_000;
        let terminals: Vec<DVector<f64>> = map_indices(paths, |p| {
            let path = sample_brownian(21, p as u64, grid, 4);
            solve_mild(&model, &path).unwrap().terminal().clone()
        });
        let mean = terminals.iter().fold(DVector::zeros(4), |a, b| a + b) / paths as f64;
        let gen = model.sg.generator() + crate::models::linear_gauss_coupling();
        let want = crate::expm::expm(&gen) * &model.initial_x;
        for c in 0..4 {
            let var = terminals.iter().map(|t| (t[c] - mean[c]).powi(2)).sum::<f64>()
                / (paths - 1) as f64;
            let se = (var / paths as f64).sqrt();
            assert!((mean[c] - want[c]).abs() <= 3.0 * se, "coord {c}: {} vs {}", mean[c], want[c]);
        }
    }

    #[test]
    fn loglog_slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.5)).collect();
        assert!((loglog_slope(&x, &y) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn drift_field_is_used() {
        let model = zoo("heat_mult").unwrap();
        assert_eq!(model.drift.dim(), 8);
    }
}

//! Monte Carlo samples of `ξ_T = F X_T` and diagnostics for absolute
//! continuity of their law: Gaussian-kernel density stability across a
//! bandwidth ladder, and atom detection.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::lie::hormander_rank;
use crate::malliavin::{check_projection, covariance, Quadrature};
use crate::models::ModelSpec;
use crate::par::map_indices;
use crate::sde_solver::{sample_brownian, solve_mild};
use crate::spaces::TimeGrid;
use crate::variation_flow::solve_flows_auto;

/// Minimum sample count accepted by [`monte_carlo`].
pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone)]
pub struct SampleSet {
    /// `N x k`, one draw of `F X_T` per row.
    pub samples: DMatrix<f64>,
    pub master_seed: u64,
    pub model: String,
    pub f: DMatrix<f64>,
    /// Paths dropped after a blow-up.
    pub failed: usize,
}

impl SampleSet {
    pub fn from_samples(samples: DMatrix<f64>) -> Self {
        let k = samples.ncols();
        Self {
            samples,
            master_seed: 0,
            model: String::from("synthetic"),
            f: DMatrix::identity(k, k),
            failed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn k(&self) -> usize {
        self.samples.ncols()
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        self.samples.column(d).iter().copied().collect()
    }

    /// Rows of `F` rendered as `[[..],[..]]`.
    pub fn f_description(&self) -> String {
        let rows: Vec<String> = (0..self.f.nrows())
            .map(|i| {
                let cells: Vec<String> = self.f.row(i).iter().map(|v| format!("{v}")).collect();
                format!("[{}]", cells.join(","))
            })
            .collect();
        format!("[{}]", rows.join(","))
    }
}

/// `n_paths` independent draws of `F X_T`; path `i` uses stream `i` of
/// `master_seed`.
pub fn monte_carlo(
    model: &ModelSpec,
    f: &DMatrix<f64>,
    grid: TimeGrid,
    n_paths: usize,
    master_seed: u64,
) -> Result<SampleSet> {
    check_projection(f, model.n())?;
    if n_paths < MIN_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "monte carlo needs at least {MIN_SAMPLES} paths, got {n_paths}"
        )));
    }
    let cache = model.sg.cache(grid.dt(), 1);
    let draws = map_indices(n_paths, |i| {
        let path = sample_brownian(master_seed, i as u64, grid, model.m());
        match crate::sde_solver::solve_mild_cached(model, &path, &cache) {
            Ok(x) => Ok(Some(f * x.terminal())),
            Err(Error::BlowUp { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut rows = Vec::with_capacity(n_paths);
    for d in draws {
        if let Some(v) = d? {
            rows.push(v);
        }
    }
    let failed = n_paths - rows.len();
    if failed * 100 > n_paths {
        return Err(Error::TooManyBlowUps { failed, total: n_paths });
    }
    let k = f.nrows();
    let samples = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    Ok(SampleSet {
        samples,
        master_seed,
        model: model.name.clone(),
        f: f.clone(),
        failed,
    })
}

/// Minimum eigenvalue of `γ_T` on each of `n_paths` paths (stream `i` of
/// `master_seed`).
pub fn gamma_min_eigenvalues(
    model: &ModelSpec,
    f: &DMatrix<f64>,
    grid: TimeGrid,
    n_paths: usize,
    master_seed: u64,
) -> Result<Vec<f64>> {
    check_projection(f, model.n())?;
    map_indices(n_paths, |i| {
        let path = sample_brownian(master_seed, i as u64, grid, model.m());
        let x = solve_mild(model, &path)?;
        let flows = solve_flows_auto(model, &x, &path)?;
        Ok(covariance(model, &flows, &x, f, Quadrature::LeftEndpoint)?.min_eigenvalue)
    })
    .into_iter()
    .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mu = mean(v);
    Float::sqrt(v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() - 1) as f64)
}

/// Linear-interpolated quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = Float::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Floor for bandwidths of samples without spread.
fn bandwidth_floor(v: &[f64]) -> f64 {
    1e-3 * Float::abs(mean(v)).max(1.0)
}

/// Silverman's rule `0.9 min(sd, IQR / 1.34) N^{-1/5}` for one coordinate.
pub fn silverman(v: &[f64]) -> f64 {
    let s = sorted(v);
    let sd = std_dev(v);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * Float::powf(v.len() as f64, -0.2);
    if h > 0.0 {
        h
    } else {
        bandwidth_floor(v)
    }
}

/// Per-coordinate bandwidths: Silverman for `k = 1`, the normal-reference
/// rule `sd_d N^{-1/(k+4)}` otherwise.
pub fn bandwidths(set: &SampleSet) -> Vec<f64> {
    let k = set.k();
    if k == 1 {
        return vec![silverman(&set.column(0))];
    }
    let scale = Float::powf(set.len() as f64, -1.0 / (k as f64 + 4.0));
    (0..k)
        .map(|d| {
            let c = set.column(d);
            let h = std_dev(&c) * scale;
            if h > 0.0 {
                h
            } else {
                bandwidth_floor(&c)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum KdeGrid {
    OneD(Vec<f64>),
    /// Tensor grid; values are stored with the first axis outermost.
    TwoD(Vec<f64>, Vec<f64>),
}

impl KdeGrid {
    pub fn len(&self) -> usize {
        match self {
            KdeGrid::OneD(x) => x.len(),
            KdeGrid::TwoD(x, y) => x.len() * y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid covering the samples plus `pad` bandwidths on each side.
    pub fn covering(set: &SampleSet, h: &[f64], points: usize, pad: f64) -> Result<Self> {
        let axis = |d: usize| {
            let c = set.column(d);
            let lo = c.iter().copied().fold(f64::INFINITY, f64::min) - pad * h[d];
            let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max) + pad * h[d];
            linspace(lo, hi, points)
        };
        match set.k() {
            1 => Ok(KdeGrid::OneD(axis(0))),
            2 => Ok(KdeGrid::TwoD(axis(0), axis(1))),
            k => Err(Error::KdeDimension(k)),
        }
    }
}

pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Gaussian product-kernel estimate on `grid` with per-coordinate
/// bandwidths `h`.
pub fn kde(set: &SampleSet, h: &[f64], grid: &KdeGrid) -> Result<Vec<f64>> {
    let k = set.k();
    if k > 2 {
        return Err(Error::KdeDimension(k));
    }
    if h.len() != k || h.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
        return Err(Error::InvalidConfig(format!("bandwidths {h:?} must be {k} positive reals")));
    }
    if set.is_empty() {
        return Err(Error::Precondition("kernel density of an empty sample set"));
    }
    let n = set.len() as f64;
    match (grid, k) {
        (KdeGrid::OneD(xs), 1) => {
            let c = set.column(0);
            let norm = 1.0 / (n * h[0] * Float::sqrt(2.0 * PI));
            Ok(map_indices(xs.len(), |i| {
                let x = xs[i];
                c.iter()
                    .map(|s| {
                        let z = (x - s) / h[0];
                        Float::exp(-0.5 * z * z)
                    })
                    .sum::<f64>()
                    * norm
            }))
        }
        (KdeGrid::TwoD(xs, ys), 2) => {
            let (c0, c1) = (set.column(0), set.column(1));
            let norm = 1.0 / (n * h[0] * h[1] * 2.0 * PI);
            // The kernel factorises, so the grid values are a product of two
            // kernel matrices.
            let factor = |pts: &[f64], c: &[f64], h: f64| {
                DMatrix::from_fn(pts.len(), c.len(), |i, s| {
                    let z = (pts[i] - c[s]) / h;
                    Float::exp(-0.5 * z * z)
                })
            };
            let ex = factor(xs, &c0, h[0]);
            let ey = factor(ys, &c1, h[1]);
            let grid = ex * ey.transpose();
            let ny = ys.len();
            Ok((0..xs.len() * ny).map(|idx| grid[(idx / ny, idx % ny)] * norm).collect())
        }
        _ => Err(Error::DimensionMismatch {
            context: "kde grid",
            expected: k,
            found: if matches!(grid, KdeGrid::OneD(_)) { 1 } else { 2 },
        }),
    }
}

fn trapezoid_weights(xs: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; xs.len()];
    for i in 1..xs.len() {
        let half = 0.5 * (xs[i] - xs[i - 1]);
        w[i - 1] += half;
        w[i] += half;
    }
    w
}

/// Trapezoid integral of grid values.
pub fn integrate(values: &[f64], grid: &KdeGrid) -> f64 {
    match grid {
        KdeGrid::OneD(xs) => trapezoid_weights(xs).iter().zip(values).map(|(w, v)| w * v).sum(),
        KdeGrid::TwoD(xs, ys) => {
            let (wx, wy) = (trapezoid_weights(xs), trapezoid_weights(ys));
            let mut acc = 0.0;
            for (i, a) in wx.iter().enumerate() {
                for (j, b) in wy.iter().enumerate() {
                    acc += a * b * values[i * ys.len() + j];
                }
            }
            acc
        }
    }
}

/// Grid resolution used by the stability check.
pub fn default_points(k: usize) -> usize {
    if k == 1 {
        1024
    } else {
        128
    }
}

/// L¹ distance between the estimates at `h` and `h/2`, with the mass of
/// each estimate on the shared grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    pub l1: f64,
    pub mass_h: f64,
    pub mass_half: f64,
}

/// [`Stability`] for `k <= 2`; for larger `k` the worst one-dimensional
/// marginal is reported.
pub fn l1_discrepancy(set: &SampleSet, h: &[f64]) -> Result<Stability> {
    if set.k() > 2 {
        let mut worst = Stability { l1: 0.0, mass_h: 1.0, mass_half: 1.0 };
        for d in 0..set.k() {
            let marginal = SampleSet::from_samples(set.samples.columns(d, 1).into_owned());
            let h1 = vec![silverman(&marginal.column(0))];
            let s = l1_discrepancy(&marginal, &h1)?;
            if s.l1 > worst.l1 {
                worst.l1 = s.l1;
            }
            for m in [s.mass_h, s.mass_half] {
                if Float::abs(m - 1.0) > Float::abs(worst.mass_h - 1.0) {
                    worst.mass_h = m;
                }
            }
            worst.mass_half = worst.mass_h;
        }
        return Ok(worst);
    }
    let grid = KdeGrid::covering(set, h, default_points(set.k()), 8.0)?;
    let half: Vec<f64> = h.iter().map(|b| 0.5 * b).collect();
    let f_h = kde(set, h, &grid)?;
    let f_half = kde(set, &half, &grid)?;
    let diff: Vec<f64> = f_h.iter().zip(&f_half).map(|(a, b)| Float::abs(a - b)).collect();
    Ok(Stability {
        l1: integrate(&diff, &grid),
        mass_h: integrate(&f_h, &grid),
        mass_half: integrate(&f_half, &grid),
    })
}

/// Values attained by at least `fraction` of the samples, up to `tol`
/// times the sample spread in the sup norm.
pub fn atom_test_with(set: &SampleSet, tol: f64, fraction: f64) -> (bool, Vec<DVector<f64>>) {
    let n = set.len();
    if n == 0 {
        return (false, Vec::new());
    }
    let k = set.k();
    let spread = (0..k)
        .map(|d| {
            let c = set.column(d);
            c.iter().copied().fold(f64::NEG_INFINITY, f64::max) - c.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    let eps = tol.max(0.0) * spread;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| set.samples.row(i).iter().copied().collect()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| {
        rows[*a]
            .iter()
            .zip(&rows[*b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| Float::abs(x - y) <= eps);
    let needed = Float::ceil(fraction * n as f64).max(1.0) as usize;
    let mut locations = Vec::new();
    let mut start = 0;
    while start < n {
        let head = &rows[order[start]];
        let mut end = start + 1;
        while end < n && close(head, &rows[order[end]]) {
            end += 1;
        }
        if end - start >= needed {
            let mut centre = DVector::zeros(k);
            for &i in &order[start..end] {
                centre += DVector::from_column_slice(&rows[i]);
            }
            locations.push(centre / (end - start) as f64);
        }
        start = end;
    }
    (!locations.is_empty(), locations)
}

/// [`atom_test_with`] at the 5% mass threshold.
pub fn atom_test(set: &SampleSet, tol: f64) -> (bool, Vec<DVector<f64>>) {
    atom_test_with(set, tol, 0.05)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Median `γ_T` minimum eigenvalue above which the covariance counts as
    /// non-degenerate.
    pub gamma_min: f64,
    pub l1_max: f64,
    pub atom_tol: f64,
    pub atom_fraction: f64,
    pub rank_tol: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            gamma_min: 1e-6,
            l1_max: 0.1,
            atom_tol: 1e-9,
            atom_fraction: 0.05,
            rank_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GammaSummary {
    pub paths: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl GammaSummary {
    pub fn from_values(v: &[f64]) -> Self {
        let s = sorted(v);
        Self {
            paths: v.len(),
            min: quantile_sorted(&s, 0.0),
            q25: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q75: quantile_sorted(&s, 0.75),
            max: quantile_sorted(&s, 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DensityReport {
    pub model: String,
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub samples: usize,
    pub failed_paths: usize,
    pub bandwidths: Vec<Vec<f64>>,
    pub l1_discrepancy: f64,
    pub normalization: f64,
    pub atom_flag: bool,
    pub atom_locations: Vec<DVector<f64>>,
    pub gamma: GammaSummary,
    pub rank: usize,
    pub depth: usize,
    /// Rank full and median `γ_T` minimum eigenvalue above threshold.
    pub expect_density: bool,
    /// No atom and a bandwidth-stable estimate.
    pub observed_density: bool,
    pub thresholds: Thresholds,
}

impl DensityReport {
    pub fn statement(&self) -> &'static str {
        if self.observed_density {
            "consistent with an absolutely continuous law"
        } else {
            "inconsistent with an absolutely continuous law"
        }
    }

    pub fn implication(&self) -> String {
        format!(
            "rank full ({}) and gamma_T > 0 ({}) => expect density ({}); observed: no atom ({}), KDE stable ({})",
            self.rank == self.n,
            self.gamma.median > self.thresholds.gamma_min,
            self.expect_density,
            !self.atom_flag,
            self.l1_discrepancy <= self.thresholds.l1_max,
        )
    }

    /// Mechanism and observation agree.
    pub fn consistent(&self) -> bool {
        self.expect_density == self.observed_density
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerdictConfig {
    pub grid: TimeGrid,
    pub samples: usize,
    pub gamma_paths: usize,
    pub depth: usize,
    pub master_seed: u64,
    pub bracket_cap: usize,
    pub thresholds: Thresholds,
}

/// Rank at `initial_x`, `γ_T` spectrum, density stability and atoms for
/// `F X_T`, returned with the samples.
pub fn verdict(model: &ModelSpec, f: &DMatrix<f64>, cfg: &VerdictConfig) -> Result<(DensityReport, SampleSet)> {
    let th = cfg.thresholds;
    let span = hormander_rank(model, &model.initial_x, cfg.depth, th.rank_tol, cfg.bracket_cap)?;
    let set = monte_carlo(model, f, cfg.grid, cfg.samples, cfg.master_seed)?;
    let gammas = gamma_min_eigenvalues(model, f, cfg.grid, cfg.gamma_paths, cfg.master_seed)?;
    let gamma = GammaSummary::from_values(&gammas);
    let h = bandwidths(&set);
    let stab = l1_discrepancy(&set, &h)?;
    let (atom_flag, atom_locations) = atom_test_with(&set, th.atom_tol, th.atom_fraction);
    let ladder = [1.0, 0.5, 0.25]
        .iter()
        .map(|s| h.iter().map(|b| b * s).collect())
        .collect();
    let expect_density = span.rank == model.n() && gamma.median > th.gamma_min;
    let observed_density = !atom_flag && stab.l1 <= th.l1_max;
    let report = DensityReport {
        model: model.name.clone(),
        n: model.n(),
        m: model.m(),
        dt: cfg.grid.dt(),
        samples: set.len(),
        failed_paths: set.failed,
        bandwidths: ladder,
        l1_discrepancy: stab.l1,
        normalization: stab.mass_half,
        atom_flag,
        atom_locations,
        gamma,
        rank: span.rank,
        depth: cfg.depth,
        expect_density,
        observed_density,
        thresholds: th,
    };
    Ok((report, set))
}

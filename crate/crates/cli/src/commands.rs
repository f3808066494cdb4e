//! The experiment pipelines behind each subcommand.

use hypolab_core::density::{self, bandwidths, KdeGrid, Thresholds, VerdictConfig};
use hypolab_core::lie::{hormander_rank, semimartingale_trace, BracketExpr};
use hypolab_core::malliavin::{chain_rule_check, covariance, malliavin_energy, product_formula, quadratic_form, solve_malliavin_sde, Quadrature};
use hypolab_core::par::map_indices;
use hypolab_core::sde_solver::{picard_diagnostic, sample_brownian, solve_mild, BrownianPath, SolutionPath};
use hypolab_core::variation_flow::{finite_difference_flow_error, range_residual, residual_q, solve_flows, solve_flows_auto, FlowBundle, Formulation};
use hypolab_core::{Error, ModelSpec, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::{ExperimentConfig, FormulationChoice};
use crate::output::{indexed, int, num, CsvTable, CODE_VERSION};

pub const COMMANDS: [&str; 5] = ["simulate", "flow-check", "malliavin", "hormander", "density"];

/// Truncation parameters and run identity, repeated in every report.
#[derive(Debug, Clone, Serialize)]
pub struct Header {
    pub command: String,
    pub label: String,
    pub model: String,
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub horizon: f64,
    pub steps: usize,
    pub seed: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub comparison: &'static str,
    pub tolerance: f64,
    pub pass: bool,
}

impl Gate {
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            comparison: "<=",
            tolerance,
            pass: value <= tolerance,
        }
    }

    pub fn at_least(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            comparison: ">=",
            tolerance,
            pass: value >= tolerance,
        }
    }

    pub fn holds(name: &str, cond: bool) -> Self {
        Self {
            name: name.into(),
            value: if cond { 1.0 } else { 0.0 },
            comparison: "==",
            tolerance: 1.0,
            pass: cond,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub header: Header,
    pub pass: bool,
    pub gates: Vec<Gate>,
    pub results: T,
}

/// Everything a command produces before it is written out.
pub struct CommandOutput {
    pub header: Header,
    pub gates: Vec<Gate>,
    pub report: serde_json::Value,
    pub csvs: Vec<(String, CsvTable)>,
}

impl CommandOutput {
    pub fn pass(&self) -> bool {
        self.gates.iter().all(|g| g.pass)
    }

    pub fn failures(&self) -> Vec<&Gate> {
        self.gates.iter().filter(|g| !g.pass).collect()
    }
}

fn finish<T: Serialize>(header: Header, gates: Vec<Gate>, results: T, csvs: Vec<(String, CsvTable)>) -> CommandOutput {
    let report = Report {
        header: header.clone(),
        pass: gates.iter().all(|g| g.pass),
        gates: gates.clone(),
        results,
    };
    CommandOutput {
        header,
        gates,
        report: serde_json::to_value(&report).expect("reports serialize"),
        csvs,
    }
}

fn header(command: &str, cfg: &ExperimentConfig, model: &ModelSpec) -> Header {
    let grid = cfg.grid();
    Header {
        command: command.into(),
        label: cfg.label.clone(),
        model: model.name.clone(),
        n: model.n(),
        m: model.m(),
        dt: grid.dt(),
        horizon: grid.horizon(),
        steps: grid.steps(),
        seed: cfg.seeds.master,
        code_version: CODE_VERSION.into(),
    }
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn flows_for(cfg: &ExperimentConfig, model: &ModelSpec, x: &SolutionPath, path: &BrownianPath) -> Result<FlowBundle, Error> {
    match cfg.flows.formulation {
        FormulationChoice::Conjugated => solve_flows(model, x, path, Formulation::Conjugated),
        FormulationChoice::Direct => solve_flows(model, x, path, Formulation::Direct),
        FormulationChoice::Auto => solve_flows_auto(model, x, path),
    }
}

fn path_and_solution(cfg: &ExperimentConfig, model: &ModelSpec, stream: u64, grid: TimeGrid) -> Result<(BrownianPath, SolutionPath), Error> {
    let path = sample_brownian(cfg.seeds.master, stream, grid, model.m());
    let x = solve_mild(model, &path)?;
    Ok((path, x))
}

/// Order statistics of a per-path quantity.
#[derive(Debug, Clone, Serialize)]
pub struct Quantiles {
    pub paths: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl From<&density::GammaSummary> for Quantiles {
    fn from(g: &density::GammaSummary) -> Self {
        Self { paths: g.paths, min: g.min, q25: g.q25, median: g.median, q75: g.q75, max: g.max }
    }
}

fn summary(values: &[f64]) -> Quantiles {
    (&density::GammaSummary::from_values(values)).into()
}

/// Largest grid for which `simulate` runs the O(N²) Picard diagnostic.
pub const PICARD_MAX_STEPS: usize = 4000;

#[derive(Debug, Serialize)]
struct SimulateResults {
    paths: usize,
    terminal_mean: Vec<f64>,
    terminal_std: Vec<f64>,
    picard_deltas: Option<Vec<f64>>,
    picard_ratios: Option<Vec<f64>>,
    picard_note: Option<String>,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<CommandOutput, Error> {
    let model = cfg.build_model().map_err(|e| Error::InvalidConfig(e.0))?;
    let grid = cfg.grid();
    let n = model.n();
    let paths = cfg.monte_carlo.simulate_paths;
    let solved = map_indices(paths, |p| path_and_solution(cfg, &model, p as u64, grid).map(|(_, x)| x));
    let solved = solved.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut header_row = vec!["t".to_string()];
    header_row.extend(indexed("x", n));
    header_row.push("path_id".into());
    let mut table = CsvTable::new(header_row);
    let nodes = grid.nodes();
    for (p, x) in solved.iter().enumerate() {
        for (t, state) in nodes.iter().zip(&x.states) {
            let mut row = vec![num(*t)];
            row.extend(state.iter().map(|v| num(*v)));
            row.push(int(p));
            table.push(row);
        }
    }

    let mut mean = DVector::zeros(n);
    for x in &solved {
        mean += x.terminal();
    }
    mean /= paths as f64;
    let mut var = DVector::zeros(n);
    for x in &solved {
        let d = x.terminal() - &mean;
        var += d.component_mul(&d);
    }
    let std = if paths > 1 { (var / (paths - 1) as f64).map(f64::sqrt) } else { DVector::zeros(n) };

    let iters = cfg.monte_carlo.picard_iterations;
    let (deltas, ratios, note) = if iters < 2 {
        (None, None, Some("disabled (picard_iterations < 2)".to_string()))
    } else if grid.steps() > PICARD_MAX_STEPS {
        (None, None, Some(format!("skipped: {} steps exceed {PICARD_MAX_STEPS} for the quadratic-cost Picard map", grid.steps())))
    } else {
        let d = picard_diagnostic(&model, grid, iters, paths, cfg.seeds.master)?;
        let r: Vec<f64> = d.windows(2).map(|w| w[1] / w[0]).collect();
        (Some(d), Some(r), None)
    };

    let results = SimulateResults {
        paths,
        terminal_mean: vec_of(&mean),
        terminal_std: vec_of(&std),
        picard_deltas: deltas,
        picard_ratios: ratios,
        picard_note: note,
    };
    Ok(finish(header("simulate", cfg, &model), Vec::new(), results, vec![("paths.csv".into(), table)]))
}

#[derive(Debug, Serialize)]
struct RefinementRow {
    dt: f64,
    steps: usize,
    max_residual: f64,
}

#[derive(Debug, Serialize)]
struct FlowResults {
    formulation: &'static str,
    fd_eps: f64,
    fd_relative_errors: Vec<f64>,
    max_residual: f64,
    range_residual_e1: f64,
    refinement: Vec<RefinementRow>,
    formulation_gap: Option<f64>,
}

fn max_residual(cfg: &ExperimentConfig, model: &ModelSpec, path: &BrownianPath) -> Result<(f64, FlowBundle), Error> {
    let x = solve_mild(model, path)?;
    let flows = flows_for(cfg, model, &x, path)?;
    Ok((residual_q(&flows).into_iter().fold(0.0, f64::max), flows))
}

pub fn flow_check(cfg: &ExperimentConfig) -> Result<CommandOutput, Error> {
    let model = cfg.build_model().map_err(|e| Error::InvalidConfig(e.0))?;
    let grid = cfg.grid();
    let n = model.n();
    let (path, x) = path_and_solution(cfg, &model, 0, grid)?;
    let flows = flows_for(cfg, &model, &x, &path)?;
    let y_t = flows.y.last().expect("grid has nodes");
    let fd: Vec<f64> = (0..n.min(3))
        .map(|i| {
            let h = DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 });
            finite_difference_flow_error(&model, &path, y_t, &h, cfg.flows.fd_eps)
        })
        .collect::<Result<_, _>>()?;
    let residuals = residual_q(&flows);
    let mut curve = CsvTable::new(["t", "residual_q"]);
    for (t, r) in grid.nodes().iter().zip(&residuals) {
        curve.push(vec![num(*t), num(*r)]);
    }
    let max_res = residuals.iter().copied().fold(0.0, f64::max);
    let e1 = DVector::from_fn(n, |j, _| if j == 0 { 1.0 } else { 0.0 });
    let range = range_residual(&model, &flows, &e1)?;

    let mut refinement = Vec::new();
    for level in (0..=cfg.flows.refinements).rev() {
        let factor = 1usize << level;
        if grid.steps() % factor != 0 {
            continue;
        }
        let coarse = path.coarsen(factor)?;
        let (r, _) = if factor == 1 { (max_res, flows.clone()) } else { max_residual(cfg, &model, &coarse)? };
        refinement.push(RefinementRow { dt: coarse.grid.dt(), steps: coarse.grid.steps(), max_residual: r });
    }
    let mut table = CsvTable::new(["dt", "steps", "max_residual"]);
    for r in &refinement {
        table.push(vec![num(r.dt), int(r.steps), num(r.max_residual)]);
    }
    let monotone = refinement.windows(2).all(|w| w[1].max_residual <= w[0].max_residual + 1e-13);

    let formulation_gap = if flows.formulation == Formulation::Conjugated {
        let direct = solve_flows(&model, &x, &path, Formulation::Direct)?;
        Some(
            flows
                .z
                .iter()
                .zip(&direct.z)
                .map(|(a, b)| (a - b).norm() / b.norm().max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max),
        )
    } else {
        None
    };

    let tol = &cfg.tolerances;
    let mut gates: Vec<Gate> = fd
        .iter()
        .enumerate()
        .map(|(i, e)| Gate::at_most(&format!("fd_relative_e{}", i + 1), *e, tol.fd_relative))
        .collect();
    gates.push(Gate::at_most("right_inverse_residual", max_res, tol.right_inverse));
    gates.push(Gate::holds("refinement_non_increasing", monotone));

    let results = FlowResults {
        formulation: flows.formulation.name(),
        fd_eps: cfg.flows.fd_eps,
        fd_relative_errors: fd,
        max_residual: max_res,
        range_residual_e1: range,
        refinement,
        formulation_gap,
    };
    Ok(finish(
        header("flow-check", cfg, &model),
        gates,
        results,
        vec![("residual.csv".into(), curve), ("refinement.csv".into(), table)],
    ))
}

#[derive(Debug, Serialize)]
struct MalliavinResults {
    projection: Vec<Vec<f64>>,
    r_index: usize,
    paths: usize,
    route_gap: Quantiles,
    chain_rule_max: f64,
    quadratic_form_max: f64,
    gamma_min_eigenvalue: Quantiles,
    malliavin_energy_path0: f64,
    gamma_path0: Vec<Vec<f64>>,
}

struct PathMalliavin {
    gap: f64,
    chain: f64,
    qf: f64,
    min_eig: f64,
    gamma: DMatrix<f64>,
    sde: Vec<DMatrix<f64>>,
    energy: f64,
}

pub fn malliavin(cfg: &ExperimentConfig) -> Result<CommandOutput, Error> {
    let model = cfg.build_model().map_err(|e| Error::InvalidConfig(e.0))?;
    let grid = cfg.grid();
    let (n, m) = (model.n(), model.m());
    let f = cfg.projection(n);
    let r = grid.steps() / 2;
    let mut phis: Vec<DVector<f64>> = (0..n).map(|i| DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 })).collect();
    phis.push(DVector::from_element(n, 1.0));
    let per_path = map_indices(cfg.monte_carlo.gamma_paths, |p| -> Result<PathMalliavin, Error> {
        let (path, x) = path_and_solution(cfg, &model, p as u64, grid)?;
        let flows = flows_for(cfg, &model, &x, &path)?;
        let sde = solve_malliavin_sde(&model, &x, &path, r)?;
        let prod = product_formula(&model, &flows, &x, r, grid.steps());
        let diff = (sde.terminal() - &prod).norm();
        let scale = prod.norm();
        let gap = if diff == 0.0 { 0.0 } else { diff / scale.max(f64::MIN_POSITIVE) };
        let chain = chain_rule_check(&f, &sde)?;
        let cov = covariance(&model, &flows, &x, &f, Quadrature::LeftEndpoint)?;
        let mut qf: f64 = 0.0;
        for phi in &phis {
            let c = (phi.transpose() * &cov.c * phi)[(0, 0)];
            let q = quadratic_form(&model, &flows, &x, phi)?;
            qf = qf.max((c - q).abs() / (1.0 + c.abs()));
        }
        let (energy, keep) = if p == 0 {
            (malliavin_energy(&model, &flows, &x)?, (0..=grid.steps()).map(|t| sde.at(t)).collect())
        } else {
            (0.0, Vec::new())
        };
        Ok(PathMalliavin { gap, chain, qf, min_eig: cov.min_eigenvalue, gamma: cov.gamma, sde: keep, energy })
    });
    let per_path = per_path.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut gamma_table = CsvTable::new(["path_id", "gamma_min_eigenvalue", "route_gap", "chain_rule"]);
    for (p, s) in per_path.iter().enumerate() {
        gamma_table.push(vec![int(p), num(s.min_eig), num(s.gap), num(s.chain)]);
    }
    let mut dh = vec!["t".to_string()];
    for i in 1..=n {
        for k in 1..=m {
            dh.push(format!("d_{i}_{k}"));
        }
    }
    let mut d_table = CsvTable::new(dh);
    let first = &per_path[0];
    for (t, d) in grid.nodes().iter().zip(&first.sde) {
        let mut row = vec![num(*t)];
        for i in 0..n {
            for k in 0..m {
                row.push(num(d[(i, k)]));
            }
        }
        d_table.push(row);
    }

    let gaps: Vec<f64> = per_path.iter().map(|s| s.gap).collect();
    let eigs: Vec<f64> = per_path.iter().map(|s| s.min_eig).collect();
    let chain = per_path.iter().map(|s| s.chain).fold(0.0, f64::max);
    let qf = per_path.iter().map(|s| s.qf).fold(0.0, f64::max);
    let route = summary(&gaps);
    let tol = &cfg.tolerances;
    let gates = vec![
        Gate::at_most("route_gap_median", route.median, tol.route_relative),
        Gate::at_most("chain_rule_max", chain, tol.quadratic_form),
        Gate::at_most("quadratic_form_max", qf, tol.quadratic_form),
    ];
    let results = MalliavinResults {
        projection: rows_of(&f),
        r_index: r,
        paths: per_path.len(),
        route_gap: route,
        chain_rule_max: chain,
        quadratic_form_max: qf,
        gamma_min_eigenvalue: summary(&eigs),
        malliavin_energy_path0: first.energy,
        gamma_path0: rows_of(&first.gamma),
    };
    Ok(finish(
        header("malliavin", cfg, &model),
        gates,
        results,
        vec![("gamma.csv".into(), gamma_table), ("derivative.csv".into(), d_table)],
    ))
}

#[derive(Debug, Serialize)]
struct BracketVector {
    expr: String,
    depth: usize,
    vector: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct HormanderResults {
    x: Vec<f64>,
    depth: usize,
    tolerance: f64,
    expressions: usize,
    rank: usize,
    full_rank: bool,
    statement: String,
    singular_values: Vec<f64>,
    vectors: Vec<BracketVector>,
    semimartingale: Vec<SemimartingaleRow>,
}

#[derive(Debug, Serialize)]
struct SemimartingaleRow {
    field: String,
    max_residual: f64,
    scale: f64,
    relative: f64,
}

pub fn hormander(cfg: &ExperimentConfig) -> Result<CommandOutput, Error> {
    let model = cfg.build_model().map_err(|e| Error::InvalidConfig(e.0))?;
    let grid = cfg.grid();
    let n = model.n();
    let tol = &cfg.tolerances;
    let span = hormander_rank(&model, &model.initial_x, cfg.brackets.depth, tol.rank, cfg.brackets.cap)?;

    let mut head = vec!["expr".to_string(), "depth".to_string()];
    head.extend(indexed("v", n));
    let mut table = CsvTable::new(head);
    for (e, v) in &span.vectors {
        let mut row = vec![e.render(), int(e.depth())];
        row.extend(v.iter().map(|c| num(*c)));
        table.push(row);
    }

    let (path, x) = path_and_solution(cfg, &model, 0, grid)?;
    let flows = flows_for(cfg, &model, &x, &path)?;
    let mut semi = Vec::new();
    let mut semi_table = CsvTable::new(["t", "field", "residual", "lhs_norm"]);
    for k in 1..=model.m() {
        let v = BracketExpr::gen(k);
        let trace = semimartingale_trace(&model, &x, &flows, &path, &v)?;
        for (t, (r, l)) in grid.nodes().iter().zip(&trace) {
            semi_table.push(vec![num(*t), v.render(), num(*r), num(*l)]);
        }
        let max_residual = trace.iter().map(|t| t.0).fold(0.0, f64::max);
        let scale = trace.iter().map(|t| t.1).fold(1.0, f64::max);
        semi.push(SemimartingaleRow { field: v.render(), max_residual, scale, relative: max_residual / scale });
    }

    // Relative to max(1, max ‖Z V(X)‖_E); for unit-scale paths this is the
    // absolute residual.
    let mut gates: Vec<Gate> = semi
        .iter()
        .map(|r| Gate::at_most(&format!("semimartingale_{}", r.field), r.relative, tol.semimartingale))
        .collect();
    if let Some(expect) = tol.expect_full_rank {
        gates.push(Gate::holds("full_rank_matches_expectation", span.full_rank() == expect));
    }
    let results = HormanderResults {
        x: vec_of(&span.x),
        depth: span.depth,
        tolerance: span.tolerance,
        expressions: span.vectors.len(),
        rank: span.rank,
        full_rank: span.full_rank(),
        statement: span.statement(),
        singular_values: span.singular_values.clone(),
        vectors: span
            .vectors
            .iter()
            .map(|(e, v)| BracketVector { expr: e.render(), depth: e.depth(), vector: vec_of(v) })
            .collect(),
        semimartingale: semi,
    };
    Ok(finish(
        header("hormander", cfg, &model),
        gates,
        results,
        vec![("brackets.csv".into(), table), ("semimartingale.csv".into(), semi_table)],
    ))
}

#[derive(Debug, Serialize)]
struct DensityResults {
    projection: Vec<Vec<f64>>,
    samples: usize,
    failed_paths: usize,
    bandwidths: Vec<Vec<f64>>,
    l1_discrepancy: f64,
    normalization: f64,
    atom_flag: bool,
    atom_locations: Vec<Vec<f64>>,
    gamma_min_eigenvalue: Quantiles,
    rank: usize,
    depth: usize,
    expect_density: bool,
    observed_density: bool,
    implication: String,
    statement: String,
}

fn kde_table(set: &density::SampleSet) -> Result<CsvTable, Error> {
    let ladder = [1.0, 0.5, 0.25];
    let h = bandwidths(set);
    let values = |s: &density::SampleSet, h: &[f64], grid: &KdeGrid| -> Result<Vec<Vec<f64>>, Error> {
        ladder
            .iter()
            .map(|f| density::kde(s, &h.iter().map(|b| b * f).collect::<Vec<_>>(), grid))
            .collect()
    };
    match set.k() {
        1 => {
            let grid = KdeGrid::covering(set, &h, 512, 8.0)?;
            let v = values(set, &h, &grid)?;
            let KdeGrid::OneD(xs) = &grid else { unreachable!() };
            let mut t = CsvTable::new(["x", "f_h", "f_h2", "f_h4"]);
            for (i, x) in xs.iter().enumerate() {
                t.push(vec![num(*x), num(v[0][i]), num(v[1][i]), num(v[2][i])]);
            }
            Ok(t)
        }
        2 => {
            let grid = KdeGrid::covering(set, &h, 64, 8.0)?;
            let v = values(set, &h, &grid)?;
            let KdeGrid::TwoD(xs, ys) = &grid else { unreachable!() };
            let mut t = CsvTable::new(["x", "y", "f_h", "f_h2", "f_h4"]);
            for (i, x) in xs.iter().enumerate() {
                for (j, y) in ys.iter().enumerate() {
                    let idx = i * ys.len() + j;
                    t.push(vec![num(*x), num(*y), num(v[0][idx]), num(v[1][idx]), num(v[2][idx])]);
                }
            }
            Ok(t)
        }
        k => {
            let mut t = CsvTable::new(["dim", "x", "f_h", "f_h2", "f_h4"]);
            for d in 0..k {
                let marginal = density::SampleSet::from_samples(set.samples.columns(d, 1).into_owned());
                let h1 = vec![density::silverman(&marginal.column(0))];
                let grid = KdeGrid::covering(&marginal, &h1, 256, 8.0)?;
                let v = values(&marginal, &h1, &grid)?;
                let KdeGrid::OneD(xs) = &grid else { unreachable!() };
                for (i, x) in xs.iter().enumerate() {
                    t.push(vec![int(d + 1), num(*x), num(v[0][i]), num(v[1][i]), num(v[2][i])]);
                }
            }
            Ok(t)
        }
    }
}

pub fn density_cmd(cfg: &ExperimentConfig) -> Result<CommandOutput, Error> {
    let model = cfg.build_model().map_err(|e| Error::InvalidConfig(e.0))?;
    let f = cfg.projection(model.n());
    let tol = &cfg.tolerances;
    let vc = VerdictConfig {
        grid: cfg.grid(),
        samples: cfg.monte_carlo.samples,
        gamma_paths: cfg.monte_carlo.gamma_paths,
        depth: cfg.brackets.depth,
        master_seed: cfg.seeds.master,
        bracket_cap: cfg.brackets.cap,
        thresholds: Thresholds {
            gamma_min: tol.gamma_min,
            l1_max: tol.kde_l1,
            atom_tol: tol.atom,
            atom_fraction: 0.05,
            rank_tol: tol.rank,
        },
    };
    let (rep, set) = density::verdict(&model, &f, &vc)?;

    let mut head = vec!["sample_id".to_string()];
    head.extend(indexed("xi", set.k()));
    let mut samples = CsvTable::new(head);
    for i in 0..set.len() {
        let mut row = vec![int(i)];
        row.extend(set.samples.row(i).iter().map(|v| num(*v)));
        samples.push(row);
    }
    let kde = kde_table(&set)?;

    let mut gates = vec![
        Gate::at_most("kde_mass_error", (rep.normalization - 1.0).abs(), tol.kde_mass),
        Gate::holds("mechanism_matches_observation", rep.consistent()),
    ];
    if let Some(expect) = tol.expect_density {
        gates.push(Gate::holds("density_matches_expectation", rep.observed_density == expect));
    }
    let results = DensityResults {
        projection: rows_of(&f),
        samples: rep.samples,
        failed_paths: rep.failed_paths,
        bandwidths: rep.bandwidths.clone(),
        l1_discrepancy: rep.l1_discrepancy,
        normalization: rep.normalization,
        atom_flag: rep.atom_flag,
        atom_locations: rep.atom_locations.iter().map(vec_of).collect(),
        gamma_min_eigenvalue: (&rep.gamma).into(),
        rank: rep.rank,
        depth: rep.depth,
        expect_density: rep.expect_density,
        observed_density: rep.observed_density,
        implication: rep.implication(),
        statement: rep.statement().into(),
    };
    Ok(finish(
        header("density", cfg, &model),
        gates,
        results,
        vec![("samples.csv".into(), samples), ("kde.csv".into(), kde)],
    ))
}

pub fn run(command: &str, cfg: &ExperimentConfig) -> Result<CommandOutput, Error> {
    match command {
        "simulate" => simulate(cfg),
        "flow-check" => flow_check(cfg),
        "malliavin" => malliavin(cfg),
        "hormander" => hormander(cfg),
        "density" => density_cmd(cfg),
        other => Err(Error::InvalidConfig(format!("unknown command {other}"))),
    }
}

/// Stable machine-readable name of an error variant.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::NonFinite(_) => "non_finite",
        Error::InvalidConfig(_) => "invalid_config",
        Error::OverflowCap { .. } => "overflow_cap",
        Error::DenseInverse => "dense_inverse",
        Error::BlowUp { .. } => "blow_up",
        Error::UnknownModel(_) => "unknown_model",
        Error::RankDeficient { .. } => "rank_deficient",
        Error::DerivativeOrder(_) => "derivative_order",
        Error::BracketCap { .. } => "bracket_cap",
        Error::TooManyBlowUps { .. } => "too_many_blow_ups",
        Error::KdeDimension(_) => "kde_dimension",
        Error::Precondition(_) => "precondition",
    }
}

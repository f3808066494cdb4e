//! Acceptance suite: one line per criterion, nonzero exit on any failure.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use hypolab_core::density::{atom_test, bandwidths, kde, l1_discrepancy, monte_carlo, gamma_min_eigenvalues, KdeGrid, SampleSet};
use hypolab_core::lie::{corrected_bracket, corrected_bracket_literal, hormander_rank, semimartingale_check, BracketExpr, Evaluator};
use hypolab_core::malliavin::{covariance, product_formula, quadratic_form, solve_malliavin_sde, Quadrature};
use hypolab_core::models::ZOO;
use hypolab_core::sde_solver::{picard_diagnostic, sample_brownian, solve_mild, strong_order_study, BrownianPath};
use hypolab_core::variation_flow::{finite_difference_flow_error, residual_q, solve_flows, Formulation};
use hypolab_core::{expm::expm, zoo, ModelSpec, Semigroup, TimeGrid};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_points(n: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
        .collect()
}

fn c01_semigroup() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_law: f64 = 0.0;
    let mut worst_inv: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let spectrum: Vec<f64> = (0..n).map(|_| -rng.random_range(0.0..30.0)).collect();
        let sg = Semigroup::diagonal(spectrum).unwrap();
        let (s, t): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let law = &sg.exp_matrix(s + t) - sg.exp_matrix(s) * sg.exp_matrix(t);
        worst_law = worst_law.max(law.norm());
        let inv = sg.inverse_matrix(t).unwrap();
        let id = DMatrix::<f64>::identity(n, n);
        worst_inv = worst_inv
            .max((sg.exp_matrix(t) * &inv - &id).norm())
            .max((&inv * sg.exp_matrix(t) - &id).norm());
    }
    check(
        worst_law <= 1e-12 && worst_inv <= 1e-12,
        format!("law {worst_law:.2e}, inverse {worst_inv:.2e} (tol 1e-12)"),
    )
}

fn c02_picard() -> Outcome {
    let model = zoo("heat_mult").unwrap();
    let grid = TimeGrid::with_dt(0.5, 1e-3).unwrap();
    let d = picard_diagnostic(&model, grid, 7, 200, 2).unwrap();
    let ratios: Vec<f64> = (1..=5).map(|k| d[k + 1] / d[k]).collect();
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    let total = d[6] / d[1];
    check(
        decreasing && total <= 1e-4,
        format!("ratios {:?}, delta6/delta1 {total:.2e} (tol 1e-4)", ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()),
    )
}

fn c03_strong_order() -> Outcome {
    let model = zoo("heat_mult").unwrap();
    let study = strong_order_study(&model, 1.0, &[64, 128, 256, 512, 1024], 64, 200, 3).unwrap();
    check(
        (0.4..=0.8).contains(&study.slope),
        format!("slope {:.3} in [0.4, 0.8], rms {:?}", study.slope, study.rms_errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()),
    )
}

fn c04_first_variation() -> Outcome {
    let model = zoo("heat_mult").unwrap();
    let grid = TimeGrid::with_dt(1.0, 1e-4).unwrap();
    let path = sample_brownian(4, 0, grid, model.m());
    let x = solve_mild(&model, &path).unwrap();
    let flows = solve_flows(&model, &x, &path, Formulation::Direct).unwrap();
    let y_t = flows.y.last().unwrap();
    let directions = [
        DVector::from_fn(8, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        DVector::from_fn(8, |i, _| if i == 2 { 1.0 } else { 0.0 }),
        DVector::from_fn(8, |i, _| 1.0 / (i + 1) as f64),
    ];
    let errs: Vec<f64> = directions
        .iter()
        .map(|h| finite_difference_flow_error(&model, &path, y_t, h, 1e-5).unwrap())
        .collect();
    check(
        errs.iter().all(|e| *e <= 5e-3),
        format!("relative errors {:?} (tol 5e-3)", errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()),
    )
}

fn max_residual(model: &ModelSpec, path: &BrownianPath) -> f64 {
    let x = solve_mild(model, path).unwrap();
    let flows = solve_flows(model, &x, path, Formulation::Conjugated).unwrap();
    residual_q(&flows).into_iter().fold(0.0, f64::max)
}

fn c05_right_inverse() -> Outcome {
    let hypo = zoo("hypo3").unwrap();
    let fine = sample_brownian(5, 0, TimeGrid::with_dt(1.0, 5e-5).unwrap(), 1);
    let coarse = fine.coarsen(2).unwrap();
    let r_coarse = max_residual(&hypo, &coarse);
    let r_fine = max_residual(&hypo, &fine);
    let factor = r_coarse / r_fine;

    let heat = zoo("heat_mult").unwrap();
    let path = sample_brownian(5, 1, TimeGrid::with_dt(1.0, 1e-3).unwrap(), heat.m());
    let x = solve_mild(&heat, &path).unwrap();
    let conj = solve_flows(&heat, &x, &path, Formulation::Conjugated).unwrap();
    let direct = solve_flows(&heat, &x, &path, Formulation::Direct).unwrap();
    let gap = conj
        .z
        .iter()
        .zip(&direct.z)
        .map(|(a, b)| (a - b).norm() / b.norm())
        .fold(0.0, f64::max);
    check(
        r_coarse <= 1e-3 && factor >= 1.5 && gap <= 1e-6,
        format!("hypo3 max|PR-I| {r_coarse:.2e} at dt=1e-4, halving factor {factor:.2}; heat_mult formulations {gap:.2e}"),
    )
}

/// Mean relative gap between the two Malliavin routes at `r = T/2` over
/// `paths` paths, for each coarsening of the fine grid.
fn route_gaps(model: &ModelSpec, fine_steps: usize, factors: &[usize], paths: u64, seed: u64) -> Vec<f64> {
    let mut gaps = vec![0.0; factors.len()];
    for p in 0..paths {
        let fine = sample_brownian(seed, p, TimeGrid::new(1.0, fine_steps).unwrap(), model.m());
        for (g, f) in gaps.iter_mut().zip(factors) {
            let path = fine.coarsen(*f).unwrap();
            let steps = path.grid.steps();
            let x = solve_mild(model, &path).unwrap();
            let flows = solve_flows(model, &x, &path, Formulation::Direct).unwrap();
            let r = steps / 2;
            let sde = solve_malliavin_sde(model, &x, &path, r).unwrap();
            let prod = product_formula(model, &flows, &x, r, steps);
            *g += (sde.terminal() - &prod).norm() / prod.norm() / paths as f64;
        }
    }
    gaps
}

fn c06_malliavin_routes() -> Outcome {
    let factors = [8, 4, 2, 1];
    let mut lines = Vec::new();
    let mut ok = true;
    for name in ["heat_mult", "hypo3"] {
        let model = zoo(name).unwrap();
        let gaps = route_gaps(&model, 10_000, &factors, 8, 6);
        let fine = gaps[3];
        let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
        ok &= fine <= 1e-2 && decreasing;
        lines.push(format!("{name} {:?}", gaps.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>()));
    }
    let model = zoo("heat_mult").unwrap();
    let path = sample_brownian(6, 99, TimeGrid::new(1.0, 200).unwrap(), model.m());
    let x = solve_mild(&model, &path).unwrap();
    let flows = solve_flows(&model, &x, &path, Formulation::Direct).unwrap();
    let b = solve_malliavin_sde(&model, &x, &path, 120).unwrap();
    let zero = DMatrix::zeros(8, 8);
    let before = (0..120).all(|t| b.at(t) == zero && product_formula(&model, &flows, &x, 120, t) == zero);
    ok &= before;
    check(ok, format!("{}; zero for r > t: {before}", lines.join("; ")))
}

fn c07_quadratic_form() -> Outcome {
    let model = zoo("heat_mult").unwrap();
    let path = sample_brownian(7, 0, TimeGrid::new(1.0, 1000).unwrap(), model.m());
    let x = solve_mild(&model, &path).unwrap();
    let flows = solve_flows(&model, &x, &path, Formulation::Direct).unwrap();
    let rep = covariance(&model, &flows, &x, &DMatrix::identity(8, 8), Quadrature::LeftEndpoint).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let phi = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = (phi.transpose() * &rep.c * &phi)[(0, 0)];
        let q = quadratic_form(&model, &flows, &x, &phi).unwrap();
        worst = worst.max((c - q).abs() / (1.0 + c));
    }
    check(worst <= 1e-10, format!("max scaled gap {worst:.2e} over 100 phi (tol 1e-10)"))
}

fn c08_gaussian_oracle() -> Outcome {
    let model = zoo("linear_gauss").unwrap();
    let path = sample_brownian(8, 0, TimeGrid::with_dt(1.0, 1e-4).unwrap(), model.m());
    let x = solve_mild(&model, &path).unwrap();
    let flows = solve_flows(&model, &x, &path, Formulation::Direct).unwrap();
    let f = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, -1.0]);
    let got = covariance(&model, &flows, &x, &f, Quadrature::LeftEndpoint).unwrap().gamma;
    // Oracle: composite Simpson on a fine grid with the exact propagator.
    let m = model.sg.generator() + model.drift.jacobian(&x.states[0]);
    let sigma = model.diffusion.assemble(&x.states[0]);
    let ss = &sigma * sigma.transpose();
    let k = 2000;
    let h = 1.0 / k as f64;
    let mut want = DMatrix::zeros(2, 2);
    for i in 0..=k {
        let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let e = expm(&(&m * (1.0 - i as f64 * h)));
        want += (&f * &e * &ss * e.transpose() * f.transpose()) * (w * h / 3.0);
    }
    let rel = (&got - &want).norm() / want.norm();
    check(rel <= 1e-3, format!("relative Frobenius error {rel:.2e} (tol 1e-3)"))
}

fn c09_dichotomy() -> Outcome {
    let grid = TimeGrid::with_dt(1.0, 1e-3).unwrap();
    let hypo = zoo("hypo3").unwrap();
    let rank = hormander_rank(&hypo, &hypo.initial_x, 2, 1e-8, 500).unwrap().rank;
    let mut g = gamma_min_eigenvalues(&hypo, &DMatrix::identity(3, 3), grid, 100, 9).unwrap();
    g.sort_by(f64::total_cmp);
    let median = 0.5 * (g[49] + g[50]);

    let degen = zoo("degenerate2").unwrap();
    let drank = hormander_rank(&degen, &degen.initial_x, 2, 1e-8, 500).unwrap().rank;
    let f = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    let dg = gamma_min_eigenvalues(&degen, &f, grid, 100, 9).unwrap();
    let dmax = dg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    check(
        rank == 3 && median > 1e-6 && drank == 1 && dmax <= 1e-12,
        format!("hypo3 rank {rank}, median min-eig {median:.3e}; degenerate2 rank {drank}, max gamma {dmax:.1e}"),
    )
}

fn c10_density() -> Outcome {
    let grid = TimeGrid::with_dt(1.0, 1e-3).unwrap();
    let degen = zoo("degenerate2").unwrap();
    let set = monte_carlo(&degen, &DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), grid, 1000, 10).unwrap();
    let degen_flag = atom_test(&set, 1e-9).0;

    let hypo = zoo("hypo3").unwrap();
    let set = monte_carlo(&hypo, &DMatrix::identity(3, 3), grid, 10_000, 10).unwrap();
    let hypo_flag = atom_test(&set, 1e-9).0;
    let l1 = l1_discrepancy(&set, &bandwidths(&set)).unwrap().l1;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let normal = SampleSet::from_samples(DMatrix::from_fn(100_000, 1, |_, _| rng.sample::<f64, _>(StandardNormal)));
    let at0 = kde(&normal, &bandwidths(&normal), &KdeGrid::OneD(vec![0.0])).unwrap()[0];
    check(
        degen_flag && !hypo_flag && l1 <= 0.1 && (0.38..=0.42).contains(&at0),
        format!("degenerate2 atom {degen_flag}; hypo3 atom {hypo_flag}, L1 {l1:.3} (tol 0.1); normal KDE(0) {at0:.4}"),
    )
}

fn c11_brackets() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, name) in ZOO.iter().enumerate() {
        let model = zoo(name).unwrap();
        for x in random_points(model.n(), 10, 11 + i as u64) {
            for k in 1..=model.m() {
                let v = BracketExpr::gen(k);
                let a = corrected_bracket(&model, &v, &x).unwrap();
                let b = corrected_bracket_literal(&model, &v, &x).unwrap();
                worst = worst.max((a - b).norm());
            }
        }
    }
    let mut jacobi: f64 = 0.0;
    for name in ZOO {
        let model = zoo(name).unwrap();
        let ev = Evaluator::new(&model);
        let gens = [BracketExpr::gen(0), BracketExpr::gen(1), BracketExpr::corrected(BracketExpr::gen(1))];
        let nest = |a: &BracketExpr, b: &BracketExpr, c: &BracketExpr| {
            BracketExpr::bracket(a.clone(), BracketExpr::bracket(b.clone(), c.clone()))
        };
        for x in random_points(model.n(), 5, 111) {
            let [a, b, c] = &gens;
            let s = ev.eval(&nest(a, b, c), &x).unwrap() + ev.eval(&nest(b, c, a), &x).unwrap() + ev.eval(&nest(c, a, b), &x).unwrap();
            jacobi = jacobi.max(s.norm());
        }
    }
    check(
        worst <= 1e-8 && jacobi <= 1e-6,
        format!("closed vs literal {worst:.2e} (tol 1e-8); Jacobi {jacobi:.2e} (tol 1e-6)"),
    )
}

fn semimartingale_refinement(model: &ModelSpec, dt: f64, seed: u64) -> Vec<f64> {
    let fine = sample_brownian(seed, 0, TimeGrid::with_dt(1.0, dt).unwrap(), model.m());
    let v = BracketExpr::gen(1);
    [8, 4, 2, 1]
        .iter()
        .map(|f| {
            let path = fine.coarsen(*f).unwrap();
            let x = solve_mild(model, &path).unwrap();
            let flows = solve_flows(model, &x, &path, Formulation::Direct).unwrap();
            semimartingale_check(model, &x, &flows, &path, &v).unwrap()
        })
        .collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>().join(", ")
}

fn c12_semimartingale() -> Outcome {
    // On hypo3 the identity holds exactly at every dt (Z is deterministic
    // and V constant), so monotone is read as non-increasing. heat_mult is
    // reported as the non-trivial refinement.
    let hypo = semimartingale_refinement(&zoo("hypo3").unwrap(), 1e-4, 12);
    let heat = semimartingale_refinement(&zoo("heat_mult").unwrap(), 1.0 / 4096.0, 12);
    let monotone = hypo.windows(2).all(|w| w[1] <= w[0]);
    let heat_decreasing = heat.windows(2).all(|w| w[1] < w[0]);
    check(
        hypo[3] <= 5e-2 && monotone,
        format!(
            "hypo3 residuals [{}] (tol 5e-2, non-increasing); heat_mult [{}] strictly decreasing: {heat_decreasing}",
            fmt_list(&hypo),
            fmt_list(&heat)
        ),
    )
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hypolab")).args(args).output().expect("run hypolab")
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dir_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("run directory")
        .map(|e| {
            let e = e.expect("entry");
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("read"))
        })
        .collect();
    out.sort();
    out
}

// Every command on two configs, then again from each run's manifest into a
// fresh output root; all files must match byte for byte.
fn c13_determinism() -> Outcome {
    let cases: [(&str, &str, &[&str]); 2] = [
        ("degenerate2.toml", "degenerate2", &[]),
        ("hypo3.toml", "hypo3", &["--paths", "200", "--dt", "0.005"]),
    ];
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let commands = ["simulate", "flow-check", "malliavin", "hormander", "density"];
    let mut compared = 0;
    for (file, label, extra) in cases {
        let cfg = configs_dir().join(file);
        for cmd in commands {
            let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--outdir", first.path().to_str().unwrap()];
            args.extend_from_slice(extra);
            let out = run_cli(&args);
            if !matches!(out.status.code(), Some(0 | 1)) {
                return Err(format!("{cmd} {label}: exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
            }
            let run = first.path().join(cmd).join(label);
            let manifest = run.join("manifest.json");
            let again = run_cli(&[cmd, "--config", manifest.to_str().unwrap(), "--outdir", second.path().to_str().unwrap()]);
            if again.status.code() != out.status.code() {
                return Err(format!("{cmd} {label}: exit {:?} then {:?}", out.status.code(), again.status.code()));
            }
            let a = dir_files(&run);
            let b = dir_files(&second.path().join(cmd).join(label));
            if a.len() != b.len() {
                return Err(format!("{cmd} {label}: {} files then {}", a.len(), b.len()));
            }
            for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
                if na != nb || ba != bb {
                    return Err(format!("{cmd} {label}: {na} differs"));
                }
            }
            compared += a.len();
        }
    }
    check(compared > 0, format!("{compared} files byte-identical across 10 manifest re-runs"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("semigroup law and inverse", c01_semigroup),
        ("Picard contraction", c02_picard),
        ("strong-order slope", c03_strong_order),
        ("first variation vs finite differences", c04_first_variation),
        ("right inverse", c05_right_inverse),
        ("Malliavin route agreement", c06_malliavin_routes),
        ("quadratic-form identity", c07_quadratic_form),
        ("Gaussian oracle", c08_gaussian_oracle),
        ("bracket-rank dichotomy", c09_dichotomy),
        ("density verdicts", c10_density),
        ("corrected-bracket identity and Jacobi", c11_brackets),
        ("semimartingale residual", c12_semimartingale),
        ("determinism", c13_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{:02}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|s| s == &id) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {id} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

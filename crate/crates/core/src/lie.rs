//! Lie brackets of the coefficient fields, the generator sets, the bracket
//! rank test and the semimartingale identity for `Z_t V(X_t)`.
//!
//! Convention: `[V1, V2] = V2' V1 - V1' V2`. Generator `s0` is the
//! Stratonovich drift `σ_0(x) = Ax + α(x) - ½ Σ_k σ'_k σ_k` with `A` used as
//! a matrix; `s1..sm` are the noise columns.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fd::{try_directional, FD_STEP};
use crate::models::{sigma0, sigma0_jvp, ModelSpec, VectorField};
use crate::par::map_indices;
use crate::sde_solver::{BrownianPath, SolutionPath};
use crate::spaces::check_dim;
use crate::variation_flow::FlowBundle;

/// Default cap on the number of generated expressions.
pub const DEFAULT_BRACKET_CAP: usize = 500;
/// Default relative rank tolerance.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;
/// Default bracket depth.
pub const DEFAULT_DEPTH: usize = 3;
/// Finite-difference nesting allowed beyond the analytic derivatives;
/// each corrected node past the first costs two levels, so 4 covers depth 3.
pub const DEFAULT_FD_BUDGET: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum BracketExpr {
    /// `s0` (Stratonovich drift) or a noise column `s1..sm`.
    Gen(usize),
    Bracket(Box<BracketExpr>, Box<BracketExpr>),
    /// `[s0, V] + ½ Σ_k [s_k, [s_k, V]]`.
    Corrected(Box<BracketExpr>),
}

impl BracketExpr {
    pub fn gen(k: usize) -> Self {
        BracketExpr::Gen(k)
    }

    pub fn bracket(left: BracketExpr, right: BracketExpr) -> Self {
        BracketExpr::Bracket(Box::new(left), Box::new(right))
    }

    pub fn corrected(inner: BracketExpr) -> Self {
        BracketExpr::Corrected(Box::new(inner))
    }

    pub fn depth(&self) -> usize {
        match self {
            BracketExpr::Gen(_) => 0,
            BracketExpr::Bracket(l, r) => 1 + l.depth().max(r.depth()),
            BracketExpr::Corrected(v) => 1 + v.depth(),
        }
    }

    /// Largest generator index referenced.
    pub fn max_gen(&self) -> usize {
        match self {
            BracketExpr::Gen(k) => *k,
            BracketExpr::Bracket(l, r) => l.max_gen().max(r.max_gen()),
            BracketExpr::Corrected(v) => v.max_gen(),
        }
    }

    /// Bracket notation, e.g. `[s0,[s1,s2]]`; the corrected node renders as
    /// `K(V)`.
    pub fn render(&self) -> String {
        format!("{self}")
    }

    /// Parse the notation produced by [`BracketExpr::render`].
    pub fn parse(text: &str) -> Result<Self> {
        let bytes: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let mut pos = 0;
        let expr = parse_expr(&bytes, &mut pos)?;
        if pos != bytes.len() {
            return Err(Error::InvalidConfig(format!("trailing input in bracket expression {text:?}")));
        }
        Ok(expr)
    }
}

fn parse_expr(s: &[char], pos: &mut usize) -> Result<BracketExpr> {
    let bad = |what: &str| Error::InvalidConfig(format!("bracket expression: {what}"));
    match s.get(*pos) {
        Some('s') => {
            *pos += 1;
            let start = *pos;
            while s.get(*pos).is_some_and(|c| c.is_ascii_digit()) {
                *pos += 1;
            }
            let digits: String = s[start..*pos].iter().collect();
            let k = digits.parse().map_err(|_| bad("expected generator index"))?;
            Ok(BracketExpr::Gen(k))
        }
        Some('[') => {
            *pos += 1;
            let l = parse_expr(s, pos)?;
            if s.get(*pos) != Some(&',') {
                return Err(bad("expected ','"));
            }
            *pos += 1;
            let r = parse_expr(s, pos)?;
            if s.get(*pos) != Some(&']') {
                return Err(bad("expected ']'"));
            }
            *pos += 1;
            Ok(BracketExpr::bracket(l, r))
        }
        Some('K') => {
            *pos += 1;
            if s.get(*pos) != Some(&'(') {
                return Err(bad("expected '('"));
            }
            *pos += 1;
            let v = parse_expr(s, pos)?;
            if s.get(*pos) != Some(&')') {
                return Err(bad("expected ')'"));
            }
            *pos += 1;
            Ok(BracketExpr::corrected(v))
        }
        _ => Err(bad("expected 's', '[' or 'K'")),
    }
}

impl fmt::Display for BracketExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BracketExpr::Gen(k) => write!(f, "s{k}"),
            BracketExpr::Bracket(l, r) => write!(f, "[{l},{r}]"),
            BracketExpr::Corrected(v) => write!(f, "K({v})"),
        }
    }
}

/// `[V1, V2](x) = V2'(x) V1(x) - V1'(x) V2(x)` for plain fields.
pub fn lie_bracket_fields(v1: &dyn VectorField, v2: &dyn VectorField, x: &DVector<f64>) -> DVector<f64> {
    v2.jvp(x, &v1.eval(x)) - v1.jvp(x, &v2.eval(x))
}

/// Evaluates bracket expressions of one model together with their first
/// and second directional derivatives.
///
/// Leaves carry analytic derivatives to second order and the bracket node
/// has an analytic first derivative; everything else falls back to
/// Richardson central differences, at most `fd_budget` levels deep.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    model: &'a ModelSpec,
    fd_step: f64,
    fd_budget: u32,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a ModelSpec) -> Self {
        Self {
            model,
            fd_step: FD_STEP,
            fd_budget: DEFAULT_FD_BUDGET,
        }
    }

    pub fn with_fd(mut self, step: f64, budget: u32) -> Self {
        self.fd_step = step;
        self.fd_budget = budget;
        self
    }

    pub fn model(&self) -> &ModelSpec {
        self.model
    }

    fn check(&self, e: &BracketExpr, x: &DVector<f64>) -> Result<()> {
        check_dim("bracket point", self.model.n(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bracket point"));
        }
        if e.max_gen() > self.model.m() {
            return Err(Error::InvalidConfig(format!(
                "{e} references a generator beyond s{}",
                self.model.m()
            )));
        }
        Ok(())
    }

    pub fn eval(&self, e: &BracketExpr, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(e, x)?;
        self.eval_b(e, x, self.fd_budget)
    }

    pub fn jvp(&self, e: &BracketExpr, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(e, x)?;
        self.jvp_b(e, x, u, self.fd_budget)
    }

    /// Second derivative applied to the pair `(u, v)`.
    pub fn hvp(
        &self,
        e: &BracketExpr,
        x: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check(e, x)?;
        self.hvp_b(e, x, u, v, self.fd_budget)
    }

    fn column(&self, k: usize) -> &dyn VectorField {
        self.model.diffusion.columns()[k - 1].as_ref()
    }

    fn finite(v: DVector<f64>) -> Result<DVector<f64>> {
        if v.iter().all(|c| c.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFinite("bracket evaluation"))
        }
    }

    fn eval_b(&self, e: &BracketExpr, x: &DVector<f64>, budget: u32) -> Result<DVector<f64>> {
        match e {
            BracketExpr::Gen(0) => sigma0(self.model, x),
            BracketExpr::Gen(k) => Ok(self.column(*k).eval(x)),
            BracketExpr::Bracket(l, r) => {
                let lv = self.eval_b(l, x, budget)?;
                let rv = self.eval_b(r, x, budget)?;
                Self::finite(self.jvp_b(r, x, &lv, budget)? - self.jvp_b(l, x, &rv, budget)?)
            }
            BracketExpr::Corrected(v) => self.corrected_b(v, x, budget),
        }
    }

    fn jvp_b(&self, e: &BracketExpr, x: &DVector<f64>, u: &DVector<f64>, budget: u32) -> Result<DVector<f64>> {
        match e {
            BracketExpr::Gen(0) => Ok(sigma0_jvp(self.model, x, u)),
            BracketExpr::Gen(k) => Ok(self.column(*k).jvp(x, u)),
            BracketExpr::Bracket(l, r) => {
                // d/dx (R' L - L' R) u = R''(L, u) + R' L' u - L''(R, u) - L' R' u
                let lv = self.eval_b(l, x, budget)?;
                let rv = self.eval_b(r, x, budget)?;
                let lu = self.jvp_b(l, x, u, budget)?;
                let ru = self.jvp_b(r, x, u, budget)?;
                let out = self.hvp_b(r, x, &lv, u, budget)? + self.jvp_b(r, x, &lu, budget)?
                    - self.hvp_b(l, x, &rv, u, budget)?
                    - self.jvp_b(l, x, &ru, budget)?;
                Self::finite(out)
            }
            BracketExpr::Corrected(_) => {
                let inner = budget.checked_sub(1).ok_or(Error::DerivativeOrder(1))?;
                try_directional(|y| self.eval_b(e, y, inner), x, u, self.fd_step)
            }
        }
    }

    fn hvp_b(
        &self,
        e: &BracketExpr,
        x: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
        budget: u32,
    ) -> Result<DVector<f64>> {
        match e {
            BracketExpr::Gen(k) if *k > 0 => Ok(self.column(*k).hessian_action(x, u, v)),
            _ => {
                let inner = budget.checked_sub(1).ok_or(Error::DerivativeOrder(2))?;
                try_directional(|y| self.jvp_b(e, y, v, inner), x, u, self.fd_step)
            }
        }
    }

    /// `[Ax + α, V] + Σ_k (-σ'_k V' σ_k + ½ V''(σ_k, σ_k) + σ'_k σ'_k V)`.
    fn corrected_b(&self, v: &BracketExpr, x: &DVector<f64>, budget: u32) -> Result<DVector<f64>> {
        let model = self.model;
        let vx = self.eval_b(v, x, budget)?;
        let drift = model.sg.generator_apply(x) + model.drift.eval(x);
        let mut out = self.jvp_b(v, x, &drift, budget)?
            - model.sg.generator_apply(&vx)
            - model.drift.jvp(x, &vx);
        for col in model.diffusion.columns() {
            let s = col.eval(x);
            let vs = self.jvp_b(v, x, &s, budget)?;
            out -= col.jvp(x, &vs);
            out.axpy(0.5, &self.hvp_b(v, x, &s, &s, budget)?, 1.0);
            out += col.jvp(x, &col.jvp(x, &vx));
        }
        Self::finite(out)
    }
}

/// `[V1, V2](x)` for two expressions of `model`.
pub fn lie_bracket(model: &ModelSpec, v1: &BracketExpr, v2: &BracketExpr, x: &DVector<f64>) -> Result<DVector<f64>> {
    Evaluator::new(model).eval(&BracketExpr::bracket(v1.clone(), v2.clone()), x)
}

/// `[σ_0, V] + ½ Σ_k [σ_k, [σ_k, V]]` through the closed form.
pub fn corrected_bracket(model: &ModelSpec, v: &BracketExpr, x: &DVector<f64>) -> Result<DVector<f64>> {
    Evaluator::new(model).eval(&BracketExpr::corrected(v.clone()), x)
}

/// The same quantity by evaluating the nested brackets literally.
pub fn corrected_bracket_literal(model: &ModelSpec, v: &BracketExpr, x: &DVector<f64>) -> Result<DVector<f64>> {
    let ev = Evaluator::new(model);
    let mut out = ev.eval(&BracketExpr::bracket(BracketExpr::gen(0), v.clone()), x)?;
    for k in 1..=model.m() {
        let inner = BracketExpr::bracket(BracketExpr::gen(k), v.clone());
        let outer = BracketExpr::bracket(BracketExpr::gen(k), inner);
        out.axpy(0.5, &ev.eval(&outer, x)?, 1.0);
    }
    Ok(out)
}

/// Level sets `Σ'_0, …, Σ'_depth` with `Σ'_0 = {s1..sm}` and
/// `Σ'_n = {[s_k, V], K(V) : V ∈ Σ'_{n-1}}`.
///
/// Self-brackets are dropped and repeated trees kept once. Fails once the
/// total exceeds `cap`.
pub fn generate_levels(m: usize, depth: usize, cap: usize) -> Result<Vec<Vec<BracketExpr>>> {
    let mut seen = BTreeSet::new();
    let mut levels: Vec<Vec<BracketExpr>> = Vec::with_capacity(depth + 1);
    let mut total = 0usize;
    let mut push = |e: BracketExpr, level: &mut Vec<BracketExpr>, total: &mut usize| -> Result<()> {
        if seen.insert(e.clone()) {
            *total += 1;
            if *total > cap {
                return Err(Error::BracketCap { count: *total, cap });
            }
            level.push(e);
        }
        Ok(())
    };
    let mut base = Vec::new();
    for k in 1..=m {
        push(BracketExpr::gen(k), &mut base, &mut total)?;
    }
    levels.push(base);
    for n in 1..=depth {
        let mut next = Vec::new();
        for v in levels[n - 1].clone() {
            for k in 1..=m {
                if v == BracketExpr::Gen(k) {
                    continue;
                }
                push(BracketExpr::bracket(BracketExpr::gen(k), v.clone()), &mut next, &mut total)?;
            }
            push(BracketExpr::corrected(v), &mut next, &mut total)?;
        }
        levels.push(next);
    }
    Ok(levels)
}

/// Flattened union of [`generate_levels`].
pub fn generate_sets(m: usize, depth: usize, cap: usize) -> Result<Vec<BracketExpr>> {
    Ok(generate_levels(m, depth, cap)?.into_iter().flatten().collect())
}

#[derive(Debug, Clone)]
pub struct SpanReport {
    pub x: DVector<f64>,
    pub vectors: Vec<(BracketExpr, DVector<f64>)>,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub tolerance: f64,
    pub depth: usize,
}

impl SpanReport {
    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn full_rank(&self) -> bool {
        self.rank == self.n()
    }

    pub fn statement(&self) -> String {
        if self.full_rank() {
            format!("full rank at truncation n = {}", self.n())
        } else {
            format!("rank {} < n = {} at truncation", self.rank, self.n())
        }
    }
}

/// Descending singular values of the rows `vectors` and the rank at the
/// relative tolerance `tol`.
pub fn span_rank(vectors: &[DVector<f64>], n: usize, tol: f64) -> (Vec<f64>, usize) {
    if vectors.is_empty() {
        return (Vec::new(), 0);
    }
    let rows = DMatrix::from_fn(vectors.len(), n, |i, j| vectors[i][j]);
    let mut sv: Vec<f64> = rows.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let max = sv.first().copied().unwrap_or(0.0);
    let rank = if max > 0.0 {
        sv.iter().filter(|s| **s >= tol * max).count()
    } else {
        0
    };
    (sv, rank)
}

/// Rank of `Σ'_0 ∪ … ∪ Σ'_depth` evaluated at `x`.
pub fn hormander_rank(model: &ModelSpec, x: &DVector<f64>, depth: usize, tol: f64, cap: usize) -> Result<SpanReport> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidConfig(format!("rank tolerance {tol} outside (0, 1)")));
    }
    check_dim("hormander point", model.n(), x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hormander point"));
    }
    let exprs = generate_sets(model.m(), depth, cap)?;
    let ev = Evaluator::new(model);
    let values = map_indices(exprs.len(), |i| ev.eval(&exprs[i], x));
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    let (singular_values, rank) = span_rank(&values, model.n(), tol);
    Ok(SpanReport {
        x: x.clone(),
        vectors: exprs.into_iter().zip(values).collect(),
        singular_values,
        rank,
        tolerance: tol,
        depth,
    })
}

/// `max_j ‖Z_{t_j} V(X_{t_j}) - RHS_j‖_E` where
/// `RHS_j = V(x) + Σ_{i<j} Z_{t_i}([s_k, V] ΔW^k_i + K(V) dt)(X_{t_i})`.
pub fn semimartingale_check(
    model: &ModelSpec,
    x: &SolutionPath,
    flows: &FlowBundle,
    path: &BrownianPath,
    v: &BracketExpr,
) -> Result<f64> {
    Ok(semimartingale_residuals(model, x, flows, path, v)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Node-wise residuals behind [`semimartingale_check`].
pub fn semimartingale_residuals(
    model: &ModelSpec,
    x: &SolutionPath,
    flows: &FlowBundle,
    path: &BrownianPath,
    v: &BracketExpr,
) -> Result<Vec<f64>> {
    Ok(semimartingale_trace(model, x, flows, path, v)?.into_iter().map(|(r, _)| r).collect())
}

/// [`semimartingale_check`] divided by `max(1, max_j ‖Z_{t_j} V(X_{t_j})‖_E)`.
/// `Z` grows like `e^{|λ| t}` along stiff modes, so the absolute residual
/// carries that scale.
pub fn semimartingale_relative(
    model: &ModelSpec,
    x: &SolutionPath,
    flows: &FlowBundle,
    path: &BrownianPath,
    v: &BracketExpr,
) -> Result<f64> {
    let trace = semimartingale_trace(model, x, flows, path, v)?;
    let res = trace.iter().map(|t| t.0).fold(0.0, f64::max);
    let scale = trace.iter().map(|t| t.1).fold(1.0, f64::max);
    Ok(res / scale)
}

/// `(residual, ‖Z V(X)‖_E)` at every node.
pub fn semimartingale_trace(
    model: &ModelSpec,
    x: &SolutionPath,
    flows: &FlowBundle,
    path: &BrownianPath,
    v: &BracketExpr,
) -> Result<Vec<(f64, f64)>> {
    let steps = path.grid.steps();
    check_dim("solution nodes", steps + 1, x.states.len())?;
    check_dim("flow nodes", steps + 1, flows.z.len())?;
    let ev = Evaluator::new(model);
    let dt = path.grid.dt();
    let brackets: Vec<BracketExpr> = (1..=model.m())
        .map(|k| BracketExpr::bracket(BracketExpr::gen(k), v.clone()))
        .collect();
    let corrected = BracketExpr::corrected(v.clone());
    let mut rhs = ev.eval(v, &x.states[0])?;
    let mut out = Vec::with_capacity(steps + 1);
    for j in 0..=steps {
        let xj = &x.states[j];
        let lhs = &flows.z[j] * ev.eval(v, xj)?;
        out.push((model.cfg.e_norm(&(&lhs - &rhs))?, model.cfg.e_norm(&lhs)?));
        if j == steps {
            break;
        }
        let mut incr = ev.eval(&corrected, xj)? * dt;
        for (k, b) in brackets.iter().enumerate() {
            let dw = path.increments[(j, k)];
            if dw != 0.0 {
                incr.axpy(dw, &ev.eval(b, xj)?, 1.0);
            }
        }
        rhs += &flows.z[j] * incr;
        if rhs.iter().any(|c| !c.is_finite()) {
            return Err(Error::BlowUp { node: j + 1 });
        }
    }
    Ok(out)
}

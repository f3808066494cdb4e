//! Experiment configuration: TOML or JSON, unknown keys rejected, every
//! field defaulted.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use hypolab_core::models::{DiffusionFamily, Monomial, PolynomialField};
use hypolab_core::{zoo, ModelSpec, Semigroup, TimeGrid, TruncationConfig, VectorField};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Key identifying a run manifest; its `config` entry is a full config.
pub const MANIFEST_KEY: &str = "manifest_version";

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output subdirectory name under `<outdir>/<command>/`.
    #[serde(default = "default_label")]
    pub label: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
    /// Rows of `F`; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub brackets: BracketConfig,
    #[serde(default)]
    pub flows: FlowConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

fn default_label() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// One of the built-in models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoo: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineModel>,
    /// Replaces the starting point of a built-in model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_x: Option<Vec<f64>>,
}

/// A model with polynomial coefficients. Each field is a list of
/// components, each component a list of monomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineModel {
    pub name: String,
    /// Diagonal generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Vec<f64>>,
    /// Dense generator, row by row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_weights: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub embed_constant: f64,
    pub drift: Vec<Vec<MonomialConfig>>,
    pub diffusion: Vec<Vec<Vec<MonomialConfig>>>,
    pub initial_x: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonomialConfig {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    1000
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, steps: default_steps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    #[serde(default = "default_seed")]
    pub master: u64,
}

fn default_seed() -> u64 {
    42
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { master: default_seed() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    /// Paths written by `simulate`.
    #[serde(default = "default_simulate_paths")]
    pub simulate_paths: usize,
    /// Samples of `F X_T` drawn by `density`.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Paths used for `γ_T` statistics.
    #[serde(default = "default_gamma_paths")]
    pub gamma_paths: usize,
    /// Picard iterations reported by `simulate`.
    #[serde(default = "default_picard")]
    pub picard_iterations: usize,
}

fn default_simulate_paths() -> usize {
    10
}
fn default_samples() -> usize {
    10_000
}
fn default_gamma_paths() -> usize {
    100
}
fn default_picard() -> usize {
    7
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            simulate_paths: default_simulate_paths(),
            samples: default_samples(),
            gamma_paths: default_gamma_paths(),
            picard_iterations: default_picard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BracketConfig {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

fn default_depth() -> usize {
    2
}
fn default_cap() -> usize {
    hypolab_core::lie::DEFAULT_BRACKET_CAP
}

impl Default for BracketConfig {
    fn default() -> Self {
        Self { depth: default_depth(), cap: default_cap() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormulationChoice {
    Conjugated,
    Direct,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(default = "default_formulation")]
    pub formulation: FormulationChoice,
    /// Bump size for the finite-difference check of `Y_T`.
    #[serde(default = "default_fd_eps")]
    pub fd_eps: f64,
    /// Number of halvings in the dt-refinement tables.
    #[serde(default = "default_refinements")]
    pub refinements: usize,
}

fn default_formulation() -> FormulationChoice {
    FormulationChoice::Conjugated
}
fn default_fd_eps() -> f64 {
    1e-5
}
fn default_refinements() -> usize {
    3
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            formulation: default_formulation(),
            fd_eps: default_fd_eps(),
            refinements: default_refinements(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "d_fd")]
    pub fd_relative: f64,
    #[serde(default = "d_residual")]
    pub right_inverse: f64,
    #[serde(default = "d_route")]
    pub route_relative: f64,
    #[serde(default = "d_qf")]
    pub quadratic_form: f64,
    #[serde(default = "d_rank")]
    pub rank: f64,
    #[serde(default = "d_gamma")]
    pub gamma_min: f64,
    #[serde(default = "d_l1")]
    pub kde_l1: f64,
    #[serde(default = "d_atom")]
    pub atom: f64,
    #[serde(default = "d_norm")]
    pub kde_mass: f64,
    #[serde(default = "d_semi")]
    pub semimartingale: f64,
    /// When set, `hormander` fails unless full rank matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_full_rank: Option<bool>,
    /// When set, `density` fails unless the observed verdict matches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_density: Option<bool>,
}

fn d_fd() -> f64 {
    5e-3
}
fn d_residual() -> f64 {
    1e-3
}
fn d_route() -> f64 {
    1e-2
}
fn d_qf() -> f64 {
    1e-10
}
fn d_rank() -> f64 {
    1e-8
}
fn d_gamma() -> f64 {
    1e-6
}
fn d_l1() -> f64 {
    0.1
}
fn d_atom() -> f64 {
    1e-9
}
fn d_norm() -> f64 {
    1e-3
}
fn d_semi() -> f64 {
    5e-2
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fd_relative: d_fd(),
            right_inverse: d_residual(),
            route_relative: d_route(),
            quadratic_form: d_qf(),
            rank: d_rank(),
            gamma_min: d_gamma(),
            kde_l1: d_l1(),
            atom: d_atom(),
            kde_mass: d_norm(),
            semimartingale: d_semi(),
            expect_full_rank: None,
            expect_density: None,
        }
    }
}

/// Command-line overrides applied after loading.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    pub depth: Option<usize>,
    pub outdir: Option<String>,
}

impl ExperimentConfig {
    /// Parse TOML, JSON, or a run manifest (JSON holding the config under
    /// `config`). The format is picked by extension, `.json` or otherwise
    /// TOML.
    pub fn parse(text: &str, json: bool) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = if json {
            let value: serde_json::Value =
                serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid JSON: {e}")))?;
            let schema = |e: serde_json::Error| ConfigError(format!("config schema: {e}"));
            match value.get(MANIFEST_KEY) {
                Some(_) => {
                    let inner = value
                        .get("config")
                        .cloned()
                        .ok_or_else(|| ConfigError("manifest has no config entry".into()))?;
                    serde_json::from_value(inner).map_err(schema)?
                }
                // Straight from the text so errors keep their line.
                None => serde_json::from_str(text).map_err(schema)?,
            }
        } else {
            toml::from_str(text).map_err(|e| ConfigError(format!("config schema: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, json).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    /// Config for a built-in model with every other field defaulted.
    pub fn for_zoo(name: &str) -> Self {
        Self {
            label: default_label(),
            model: ModelConfig { zoo: Some(name.into()), inline: None, initial_x: None },
            grid: GridConfig::default(),
            seeds: SeedConfig::default(),
            projection: None,
            monte_carlo: MonteCarloConfig::default(),
            brackets: BracketConfig::default(),
            flows: FlowConfig::default(),
            tolerances: Tolerances::default(),
            output_dir: None,
        }
    }

    pub fn apply(&mut self, o: &Overrides, command: &str) -> Result<(), ConfigError> {
        if let Some(s) = o.seed {
            self.seeds.master = s;
        }
        if let Some(dt) = o.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return err(format!("--dt must be a positive number, got {dt}"));
            }
            self.grid.steps = ((self.grid.horizon / dt).round() as usize).max(1);
        }
        if let Some(d) = o.depth {
            self.brackets.depth = d;
        }
        if let Some(p) = o.paths {
            match command {
                "simulate" => self.monte_carlo.simulate_paths = p,
                "malliavin" => self.monte_carlo.gamma_paths = p,
                "density" => self.monte_carlo.samples = p,
                _ => {
                    self.monte_carlo.simulate_paths = p;
                    self.monte_carlo.gamma_paths = p;
                    self.monte_carlo.samples = p;
                }
            }
        }
        if let Some(dir) = &o.outdir {
            self.output_dir = Some(dir.clone());
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.label.is_empty() || self.label.contains(['/', '\\']) || self.label.starts_with('.') {
            return err(format!("label {:?} must be a plain directory name", self.label));
        }
        match (&self.model.zoo, &self.model.inline) {
            (Some(_), Some(_)) => return err("model: give either zoo or inline, not both"),
            (None, None) => return err("model: one of zoo or inline is required"),
            _ => {}
        }
        if !(self.grid.horizon.is_finite() && self.grid.horizon > 0.0) {
            return err("grid.horizon must be finite and > 0");
        }
        if self.grid.steps == 0 {
            return err("grid.steps must be >= 1");
        }
        if self.monte_carlo.samples < hypolab_core::density::MIN_SAMPLES {
            return err(format!(
                "monte_carlo.samples must be >= {}",
                hypolab_core::density::MIN_SAMPLES
            ));
        }
        if self.monte_carlo.simulate_paths == 0 || self.monte_carlo.gamma_paths == 0 {
            return err("monte_carlo path counts must be >= 1");
        }
        if !(self.flows.fd_eps > 0.0 && self.flows.fd_eps.is_finite()) {
            return err("flows.fd_eps must be > 0");
        }
        if self.flows.refinements > 6 {
            return err("flows.refinements must be <= 6");
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("fd_relative", t.fd_relative),
            ("right_inverse", t.right_inverse),
            ("route_relative", t.route_relative),
            ("quadratic_form", t.quadratic_form),
            ("gamma_min", t.gamma_min),
            ("kde_l1", t.kde_l1),
            ("kde_mass", t.kde_mass),
            ("semimartingale", t.semimartingale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("tolerances.{name} must be finite and > 0"));
            }
        }
        if !(t.rank > 0.0 && t.rank < 1.0) {
            return err("tolerances.rank must lie in (0, 1)");
        }
        if !(t.atom >= 0.0 && t.atom.is_finite()) {
            return err("tolerances.atom must be >= 0");
        }
        // Dimensions are checked against the model itself.
        let model = self.build_model()?;
        if let Some(rows) = &self.projection {
            if rows.is_empty() || rows.iter().any(|r| r.len() != model.n()) {
                return err(format!("projection rows must each have {} entries", model.n()));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.grid.horizon, self.grid.steps).expect("validated grid")
    }

    pub fn projection(&self, n: usize) -> DMatrix<f64> {
        match &self.projection {
            Some(rows) => DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]),
            None => DMatrix::identity(n, n),
        }
    }

    pub fn build_model(&self) -> Result<ModelSpec, ConfigError> {
        let model = match (&self.model.zoo, &self.model.inline) {
            (Some(name), None) => zoo(name).map_err(|e| ConfigError(format!("model.zoo: {e}")))?,
            (None, Some(inline)) => inline.build()?,
            _ => return err("model: one of zoo or inline is required"),
        };
        match &self.model.initial_x {
            Some(x) => model
                .with_initial(DVector::from_vec(x.clone()))
                .map_err(|e| ConfigError(format!("model.initial_x: {e}"))),
            None => Ok(model),
        }
    }
}

fn polynomial(components: &[Vec<MonomialConfig>], n: usize, what: &str) -> Result<PolynomialField, ConfigError> {
    if components.len() != n {
        return err(format!("{what}: expected {n} components, found {}", components.len()));
    }
    let comps = components
        .iter()
        .map(|c| {
            c.iter()
                .map(|m| {
                    if m.powers.len() != n {
                        return err(format!("{what}: monomial powers must have {n} entries"));
                    }
                    if !m.coeff.is_finite() {
                        return err(format!("{what}: coefficients must be finite"));
                    }
                    Ok(Monomial::new(m.coeff, m.powers.clone()))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    PolynomialField::new(comps).map_err(|e| ConfigError(format!("{what}: {e}")))
}

impl InlineModel {
    pub fn build(&self) -> Result<ModelSpec, ConfigError> {
        let n = self.initial_x.len();
        let m = self.diffusion.len();
        if n == 0 || m == 0 {
            return err("model.inline: need n >= 1 and at least one diffusion column");
        }
        let sg = match (&self.spectrum, &self.generator) {
            (Some(s), None) => {
                if s.len() != n {
                    return err(format!("model.inline.spectrum: expected {n} entries"));
                }
                Semigroup::diagonal(s.clone())
            }
            (None, Some(g)) => {
                if g.len() != n || g.iter().any(|r| r.len() != n) {
                    return err(format!("model.inline.generator: expected {n}x{n}"));
                }
                Semigroup::dense(DMatrix::from_fn(n, n, |i, j| g[i][j]))
            }
            (None, None) => Semigroup::zero(n),
            (Some(_), Some(_)) => return err("model.inline: give spectrum or generator, not both"),
        }
        .map_err(|e| ConfigError(format!("model.inline generator: {e}")))?;
        let e_w = self.e_weights.clone().unwrap_or_else(|| vec![1.0; n]);
        let h_w = self.h_weights.clone().unwrap_or_else(|| vec![1.0; m]);
        let cfg = TruncationConfig::new(e_w, h_w, self.embed_constant)
            .map_err(|e| ConfigError(format!("model.inline weights: {e}")))?;
        let drift = polynomial(&self.drift, n, "model.inline.drift")?;
        let columns = self
            .diffusion
            .iter()
            .enumerate()
            .map(|(k, c)| {
                polynomial(c, n, &format!("model.inline.diffusion[{k}]")).map(|p| Arc::new(p) as Arc<dyn VectorField>)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let diffusion = DiffusionFamily::new(columns).map_err(|e| ConfigError(format!("model.inline.diffusion: {e}")))?;
        ModelSpec::new(
            self.name.clone(),
            cfg,
            sg,
            Arc::new(drift),
            diffusion,
            DVector::from_vec(self.initial_x.clone()),
        )
        .map_err(|e| ConfigError(format!("model.inline: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml() {
        let cfg = ExperimentConfig::parse("[model]\nzoo = \"hypo3\"\n", false).unwrap();
        assert_eq!(cfg.grid.steps, 1000);
        assert_eq!(cfg.brackets.depth, 2);
        assert_eq!(cfg.build_model().unwrap().n(), 3);
    }

    #[test]
    fn unknown_key_names_line() {
        let e = ExperimentConfig::parse("[model]\nzoo = \"hypo3\"\n[grid]\nstep = 10\n", false).unwrap_err();
        assert!(e.0.contains("line 4") && e.0.contains("step"), "{e}");
    }

    #[test]
    fn bad_projection_width() {
        let e = ExperimentConfig::parse("projection = [[1.0, 0.0]]\n[model]\nzoo = \"hypo3\"\n", false).unwrap_err();
        assert!(e.0.contains("projection"));
    }

    #[test]
    fn unknown_model() {
        assert!(ExperimentConfig::parse("[model]\nzoo = \"nope\"\n", false).is_err());
    }

    #[test]
    fn inline_model_round_trip() {
        let text = r#"
[model.inline]
name = "ou2"
spectrum = [-1.0, -2.0]
initial_x = [0.5, 0.0]
drift = [[], [{ coeff = 1.0, powers = [1, 0] }]]
diffusion = [[[{ coeff = 1.0, powers = [0, 0] }], []]]
"#;
        let cfg = ExperimentConfig::parse(text, false).unwrap();
        let model = cfg.build_model().unwrap();
        assert_eq!((model.n(), model.m()), (2, 1));
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&json, true).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::for_zoo("hypo3");
        let o = Overrides { seed: Some(7), dt: Some(0.01), paths: Some(5), ..Default::default() };
        cfg.apply(&o, "simulate").unwrap();
        assert_eq!((cfg.seeds.master, cfg.grid.steps, cfg.monte_carlo.simulate_paths), (7, 100, 5));
        assert!(cfg.apply(&Overrides { dt: Some(-1.0), ..Default::default() }, "simulate").is_err());
    }
}

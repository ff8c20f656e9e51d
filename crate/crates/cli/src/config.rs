//! Run configuration (JSON). Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Deserialize;

use rsbench_core::analytics::MetricConventions;
use rsbench_core::estimate::{load_panel, EstimationOptions, EstimationReport, PanelSchema};
use rsbench_core::simulate::{Measure, SimConfig, Strategy};
use rsbench_core::{Error, ModelSpec, Result, ValidatedModel};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationInputs {
    pub panel: PathBuf,
    pub benchmark_weights: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_block")]
    pub block_length: f64,
}

fn default_dt() -> f64 {
    1.0 / 252.0
}

fn default_resamples() -> usize {
    500
}

fn default_block() -> f64 {
    21.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_spy")]
    pub steps_per_year: usize,
    /// Max Riccati residual allowed, relative to max(1, size of the t = 0 coefficients).
    #[serde(default = "default_residual_tol")]
    pub residual_tolerance: f64,
}

fn default_spy() -> usize {
    252
}

fn default_residual_tol() -> f64 {
    1e-6
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            steps_per_year: default_spy(),
            residual_tolerance: default_residual_tol(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub paths: usize,
    /// Defaults to the horizon in whole steps.
    pub steps: Option<usize>,
    pub dt: f64,
    pub measure: String,
    pub antithetic: bool,
    pub strategy: String,
    pub record_paths: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            paths: 5000,
            steps: None,
            dt: default_dt(),
            measure: "physical".into(),
            antithetic: false,
            strategy: "optimal".into(),
            record_paths: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Random (t, x) points for the pointwise identities.
    pub points: usize,
    pub saddle_probes: usize,
    pub paths: usize,
    pub steps: Option<usize>,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            points: 50,
            saddle_probes: 10_000,
            paths: 4000,
            steps: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub estimation: Option<EstimationInputs>,
    /// Overrides the model's θ (required with estimation inputs unless 1 is wanted).
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub horizon_years: Option<f64>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub metrics: MetricConventions,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn check(&self) -> Result<()> {
        match (&self.model, &self.estimation) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "config needs exactly one of \"model\" or \"estimation\"".into(),
                ))
            }
        }
        let referenced = self.model.iter().chain(self.estimation.as_ref().map(|e| &e.panel));
        for p in referenced {
            let full = self.resolve(p);
            if !full.exists() {
                return Err(Error::Io {
                    path: full.display().to_string(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file does not exist"),
                });
            }
        }
        if self.solver.steps_per_year == 0 {
            return Err(Error::Config("solver.steps_per_year must be positive".into()));
        }
        Ok(())
    }

    pub fn estimation_options(&self, inputs: &EstimationInputs) -> EstimationOptions {
        EstimationOptions {
            theta: self.theta.unwrap_or(1.0),
            horizon: self.horizon_years.unwrap_or(5.0),
            x0: inputs.x0.as_ref().map(|v| DVector::from_column_slice(v)),
            bootstrap_resamples: inputs.bootstrap_resamples,
            block_length: inputs.block_length,
            seed: derive_seed(self.seed, "bootstrap"),
        }
    }

    /// Run the estimation pipeline; None when the config names a model file.
    pub fn estimation_report(&self) -> Result<Option<EstimationReport>> {
        let Some(inputs) = &self.estimation else {
            return Ok(None);
        };
        let panel = load_panel(
            self.resolve(&inputs.panel),
            &PanelSchema::default(),
            &inputs.benchmark_weights,
            inputs.dt,
        )?;
        Ok(Some(rsbench_core::estimate::estimate_model(
            &panel,
            &self.estimation_options(inputs),
        )?))
    }

    /// The model to work with, from file or from estimation, with overrides applied.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = match &self.model {
            Some(p) => ModelSpec::from_path(self.resolve(p))?,
            None => {
                let inputs = self.estimation.as_ref().expect("checked");
                let mut inputs = inputs.clone();
                inputs.bootstrap_resamples = 0;
                let cfg = RunConfig {
                    estimation: Some(inputs),
                    ..self.clone()
                };
                cfg.estimation_report()?.expect("estimation inputs").spec
            }
        };
        if let Some(theta) = self.theta {
            spec.theta = theta;
        }
        if let Some(h) = self.horizon_years {
            spec.horizon = h;
        }
        Ok(spec)
    }

    pub fn model(&self) -> Result<ValidatedModel> {
        self.model_spec()?.validate()
    }

    pub fn sim_config(&self, model: &ValidatedModel) -> Result<SimConfig> {
        let s = &self.simulation;
        let steps = s.steps.unwrap_or_else(|| horizon_steps(model.horizon(), s.dt));
        Ok(SimConfig {
            n_paths: s.paths,
            steps,
            dt: s.dt,
            seed: derive_seed(self.seed, "simulate"),
            measure: Measure::parse(&s.measure)?,
            antithetic: s.antithetic,
            strategy: Strategy::parse(&s.strategy)?,
            densities: true,
            record_paths: s.record_paths,
            record_returns: true,
        })
    }
}

/// Whole steps of length dt that fit in the horizon.
pub fn horizon_steps(horizon: f64, dt: f64) -> usize {
    ((horizon / dt) * (1.0 + 1e-12)).floor().max(1.0) as usize
}

/// Per-role seed derived from the master seed (SplitMix64 over seed ⊕ FNV-1a(role)).
pub fn derive_seed(seed: u64, role: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in role.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = (seed ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

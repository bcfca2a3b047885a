//! Experiment configuration (TOML) and the objects built from it.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{self, LtiModel, MrpiOptions, ProblemData, TerminalIngredients};
use crate::ocp::{self, CostMode, MemoryEntry, SolverSettings, TerminalMode};
use crate::polytope::HPolytope;
use crate::runtime::{self, ClosedLoopRun, ControllerState, Memory, Schedule, SecondaryConfig};
use crate::sim::{self, DisturbanceLaw, GridSpec};

/// Bundled preset reproducing the reference example.
pub const EXAMPLE_PRESET: &str = include_str!("../presets/example.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub constraints: ConstraintsConfig,
    pub cost: CostConfig,
    #[serde(default)]
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub secondary: SecondaryCfg,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// A box given by its bounds, or general halfspaces `h x <= offsets`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SetConfig {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Halfspaces { h: Vec<Vec<f64>>, offsets: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    pub x: SetConfig,
    pub u: SetConfig,
    pub w: SetConfig,
}

/// Scalar multiple of the identity, or a full matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightConfig {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub q: WeightConfig,
    pub r: WeightConfig,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalConfig {
    pub mrpi_rho: f64,
    pub mrpi_eps: f64,
    pub max_power: usize,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        let d = MrpiOptions::default();
        Self {
            mrpi_rho: d.rho,
            mrpi_eps: d.eps,
            max_power: d.max_power,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub capacity: usize,
    pub rho: f64,
    /// Period `K`, `"background"` or `"never"`.
    pub schedule: String,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 3,
            rho: 1e-3,
            schedule: "5".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecondaryCostKind {
    Nominal,
    Tightening,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalKind {
    Scaled,
    Fir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecondaryCfg {
    pub cost: SecondaryCostKind,
    /// Weight of the nominal cost inside the tightening cost.
    pub tightening_weight: f64,
    pub terminal: TerminalKind,
    /// State at which the second initial memory entry is optimised; empty
    /// for a memory holding only the fixed-gain tubes.
    pub seed_state: Vec<f64>,
}

impl Default for SecondaryCfg {
    fn default() -> Self {
        Self {
            cost: SecondaryCostKind::Nominal,
            tightening_weight: 1.0,
            terminal: TerminalKind::Scaled,
            seed_state: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub accept_violation: f64,
    pub max_iter: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolverSettings::default();
        Self {
            tol: d.tol,
            accept_violation: d.accept_violation,
            max_iter: d.max_iter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub seed: u64,
    pub steps: usize,
    pub runs: usize,
    pub x0: Vec<f64>,
    pub disturbance: String,
    pub tube_snapshots: Vec<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 25,
            runs: 1,
            x0: Vec::new(),
            disturbance: "uniform".into(),
            tube_snapshots: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub spacing: f64,
    /// Defaults to the bounding box of `X` when the state set is a box.
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            spacing: 0.05,
            lower: None,
            upper: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub repeats: usize,
    /// Number of closed-loop states the benchmark is run on.
    pub states: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { repeats: 5, states: 25 }
    }
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!(
            "{field}: expected a non-empty rectangular matrix"
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{field}: entries must be finite")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn weight(field: &str, w: &WeightConfig, dim: usize) -> Result<DMatrix<f64>> {
    match w {
        WeightConfig::Scalar(s) => Ok(DMatrix::identity(dim, dim) * *s),
        WeightConfig::Matrix(rows) => matrix(field, rows),
    }
}

fn polytope(field: &str, s: &SetConfig) -> Result<HPolytope> {
    let built = match s {
        SetConfig::Box { lower, upper } => HPolytope::from_box(lower, upper),
        SetConfig::Halfspaces { h, offsets } => HPolytope::new(matrix(field, h)?, DVector::from_column_slice(offsets)),
    };
    built.map_err(|e| Error::Config(format!("{field}: {e}")))
}

fn state_vec(field: &str, v: &[f64], n: usize) -> Result<Option<DVector<f64>>> {
    match v.len() {
        0 => Ok(None),
        len if len == n && v.iter().all(|x| x.is_finite()) => Ok(Some(DVector::from_column_slice(v))),
        _ => Err(Error::Config(format!("{field}: expected {n} finite entries"))),
    }
}

fn in_field<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(msg) => Error::Config(msg),
        other => Error::Config(format!("{field}: {other}")),
    })
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn example() -> Self {
        Self::from_toml(EXAMPLE_PRESET).expect("bundled preset is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Structural checks that need no solver.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.memory.capacity == 0 {
            return cfg_err("memory.capacity: must be at least 1");
        }
        if !(self.memory.rho >= 0.0) {
            return cfg_err("memory.rho: must be non-negative");
        }
        self.schedule()?;
        self.disturbance_law()?;
        if !(self.secondary.tightening_weight >= 0.0) {
            return cfg_err("secondary.tightening_weight: must be non-negative");
        }
        if !(self.terminal.mrpi_rho > 0.0 && self.terminal.mrpi_rho < 1.0) {
            return cfg_err("terminal.mrpi_rho: must lie in (0, 1)");
        }
        if !(self.terminal.mrpi_eps >= 0.0) {
            return cfg_err("terminal.mrpi_eps: must be non-negative");
        }
        if !(self.solver.tol > 0.0) || !(self.solver.accept_violation > 0.0) || self.solver.max_iter == 0 {
            return cfg_err("solver: tolerances and max_iter must be positive");
        }
        if self.simulation.steps == 0 {
            return cfg_err("simulation.steps: must be at least 1");
        }
        if !(self.grid.spacing > 0.0) {
            return cfg_err("grid.spacing: must be positive");
        }
        if self.bench.repeats == 0 {
            return cfg_err("bench.repeats: must be at least 1");
        }
        self.problem_data().map(|_| ())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        self.memory
            .schedule
            .parse()
            .map_err(|e| Error::Config(format!("memory.schedule: {e}")))
    }

    pub fn disturbance_law(&self) -> Result<DisturbanceLaw> {
        self.simulation
            .disturbance
            .parse()
            .map_err(|e| Error::Config(format!("simulation.disturbance: {e}")))
    }

    pub fn problem_data(&self) -> Result<ProblemData> {
        let a = matrix("system.a", &self.system.a)?;
        let b = matrix("system.b", &self.system.b)?;
        let model = in_field("system", LtiModel::new(a, b))?;
        let (n, m) = (model.n(), model.m());
        let x = polytope("constraints.x", &self.constraints.x)?;
        let u = polytope("constraints.u", &self.constraints.u)?;
        let w = polytope("constraints.w", &self.constraints.w)?;
        let q = weight("cost.q", &self.cost.q, n)?;
        let r = weight("cost.r", &self.cost.r, m)?;
        in_field(
            "constraints/cost",
            ProblemData::new(model, x, u, w, q, r, self.cost.horizon),
        )
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            tol: self.solver.tol,
            accept_violation: self.solver.accept_violation,
            max_iter: self.solver.max_iter,
        }
    }

    pub fn mrpi_options(&self) -> MrpiOptions {
        MrpiOptions {
            rho: self.terminal.mrpi_rho,
            eps: self.terminal.mrpi_eps,
            max_power: self.terminal.max_power,
        }
    }

    pub fn secondary_config(&self) -> SecondaryConfig {
        SecondaryConfig {
            terminal_mode: match self.secondary.terminal {
                TerminalKind::Scaled => TerminalMode::Scaled,
                TerminalKind::Fir => TerminalMode::Fir,
            },
            cost_mode: match self.secondary.cost {
                SecondaryCostKind::Nominal => CostMode::Nominal,
                SecondaryCostKind::Tightening => CostMode::Tightening {
                    weight: self.secondary.tightening_weight,
                },
            },
        }
    }
}

/// Everything derived from a configuration, including the offline terminal
/// ingredients and the initial memory.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub data: ProblemData,
    pub terminal: TerminalIngredients,
    pub settings: SolverSettings,
    pub schedule: Schedule,
    pub secondary: SecondaryConfig,
    pub disturbance: DisturbanceLaw,
    /// Fixed-gain tubes first, then the optimised seed entry if configured.
    pub initial_memory: Vec<MemoryEntry>,
    pub x0: DVector<f64>,
}

impl Experiment {
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = config.problem_data()?;
        let settings = config.solver_settings();
        let terminal = TerminalIngredients::synthesize(&data, &config.mrpi_options())?;
        let mut initial_memory = vec![model::drs_tightenings(&data, &terminal, &terminal.k_f, 0, &settings)?];
        let secondary = config.secondary_config();
        if let Some(seed) = state_vec("secondary.seed_state", &config.secondary.seed_state, data.n())? {
            let entry = runtime::run_secondary(&data, &terminal, &seed, &secondary, 0, &settings)?
                .ok_or_else(|| Error::Infeasible("tube optimisation infeasible at secondary.seed_state".into()))?;
            initial_memory.push(entry);
        }
        if initial_memory.len() > config.memory.capacity {
            initial_memory.truncate(config.memory.capacity);
        }
        let x0 =
            state_vec("simulation.x0", &config.simulation.x0, data.n())?.unwrap_or_else(|| DVector::zeros(data.n()));
        Ok(Self {
            hash: config.hash(),
            schedule: config.schedule()?,
            disturbance: config.disturbance_law()?,
            secondary,
            data,
            terminal,
            settings,
            initial_memory,
            x0,
            config,
        })
    }

    pub fn controller(&self) -> Result<ControllerState> {
        let memory = Memory::with_entries(self.config.memory.capacity, self.initial_memory.clone())?;
        ControllerState::new(
            self.data.clone(),
            self.terminal.clone(),
            memory,
            self.config.memory.rho,
            self.settings.clone(),
        )
    }

    /// One closed-loop run with disturbances drawn from a generator seeded
    /// with `seed`.
    pub fn run(&self, seed: u64, schedule: Schedule) -> Result<(ClosedLoopRun, ControllerState)> {
        self.run_observed(seed, schedule, &mut |_| {})
    }

    /// Like [`Experiment::run`], calling `observer` after every step.
    pub fn run_observed(
        &self,
        seed: u64,
        schedule: Schedule,
        observer: &mut dyn FnMut(&runtime::StepView<'_>),
    ) -> Result<(ClosedLoopRun, ControllerState)> {
        if self.data.w_set.as_box().is_none() {
            return Err(Error::invalid("closed-loop simulation needs a box-shaped W"));
        }
        let mut state = self.controller()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_set = self.data.w_set.clone();
        let law = self.disturbance;
        let mut draw = |_k: usize| sim::sample_disturbance(&w_set, &mut rng, law).expect("box disturbance");
        let mut run = runtime::run_closed_loop(
            &mut state,
            &self.x0,
            schedule,
            &self.secondary,
            self.config.simulation.steps,
            &mut draw,
            observer,
        );
        run.log.seed = seed;
        run.log.config_hash = self.hash.clone();
        Ok((run, state))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let bbox = self.data.x_set.as_box();
        let lower = self
            .config
            .grid
            .lower
            .clone()
            .or_else(|| bbox.as_ref().map(|b| b.0.clone()));
        let upper = self
            .config
            .grid
            .upper
            .clone()
            .or_else(|| bbox.as_ref().map(|b| b.1.clone()));
        match (lower, upper) {
            (Some(l), Some(u)) => {
                GridSpec::new(self.config.grid.spacing, l, u).map_err(|e| Error::Config(format!("grid: {e}")))
            }
            _ => Err(Error::Config("grid: bounds are required when X is not a box".into())),
        }
    }

    /// Tube optimisation at `x` with the configured secondary settings.
    pub fn secondary_at(&self, x: &DVector<f64>, birth_step: usize) -> Result<Option<MemoryEntry>> {
        ocp::solve_entry(
            &self.data,
            &self.terminal,
            self.secondary.terminal_mode,
            self.secondary.cost_mode,
            x,
            birth_step,
            &self.settings,
        )
    }
}

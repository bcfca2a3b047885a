//! Tube memory, the primary control step and the hand-over of secondary
//! results at loop boundaries.

use std::fmt;
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ProblemData, TerminalIngredients};
use crate::ocp::{self, CostMode, MemoryEntry, PrimarySolution, SolverSettings, TerminalMode};
use crate::sim::{StepRecord, TrajectoryLog};

/// Weights at or below this value count as unused when deciding which slot
/// a new entry may overwrite.
pub const LAMBDA_ZERO_TOL: f64 = 1e-9;

/// Outcome of offering a new entry to the memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryEvent {
    None,
    Insert(usize),
    Replace(usize),
    Discard,
}

impl fmt::Display for MemoryEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryEvent::None => write!(f, "none"),
            MemoryEvent::Insert(j) => write!(f, "insert({j})"),
            MemoryEvent::Replace(j) => write!(f, "replace({j})"),
            MemoryEvent::Discard => write!(f, "discard"),
        }
    }
}

/// Bounded set of certified tube sequences plus the weights of the most
/// recent primary solve.
#[derive(Clone, Debug)]
pub struct Memory {
    entries: Vec<MemoryEntry>,
    capacity: usize,
    last_lambda: Option<Vec<f64>>,
}

impl Memory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("memory capacity must be positive"));
        }
        Ok(Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            last_lambda: None,
        })
    }

    pub fn with_entries(capacity: usize, entries: Vec<MemoryEntry>) -> Result<Self> {
        let mut m = Self::new(capacity)?;
        if entries.len() > capacity {
            return Err(Error::invalid(format!(
                "{} initial entries exceed the capacity {capacity}",
                entries.len()
            )));
        }
        m.entries = entries;
        Ok(m)
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn last_lambda(&self) -> Option<&[f64]> {
        self.last_lambda.as_deref()
    }

    pub fn set_last_lambda(&mut self, lambda: Vec<f64>) -> Result<()> {
        if lambda.len() != self.entries.len() {
            return Err(Error::dim("weight vector does not match the memory size"));
        }
        self.last_lambda = Some(lambda);
        Ok(())
    }

    /// Offers a new entry: fill a free slot, else overwrite an unused one
    /// (the oldest among them), else discard. Weight bookkeeping follows
    /// the slot layout, with the new slot carrying weight zero.
    pub fn update(&mut self, entry: MemoryEntry) -> MemoryEvent {
        if !self.is_full() {
            self.entries.push(entry);
            if let Some(l) = self.last_lambda.as_mut() {
                l.push(0.0);
            }
            return MemoryEvent::Insert(self.entries.len() - 1);
        }
        let Some(lambda) = self.last_lambda.as_mut() else {
            return MemoryEvent::Discard;
        };
        let slot = (0..self.entries.len())
            .filter(|&j| lambda[j] <= LAMBDA_ZERO_TOL)
            .min_by_key(|&j| (self.entries[j].birth_step, j));
        match slot {
            Some(j) => {
                self.entries[j] = entry;
                lambda[j] = 0.0;
                MemoryEvent::Replace(j)
            }
            None => MemoryEvent::Discard,
        }
    }
}

/// Free-function form of [`Memory::update`].
pub fn update_memory(entry: MemoryEntry, memory: &mut Memory) -> MemoryEvent {
    memory.update(entry)
}

/// When and how the secondary process runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Synchronously on `x(k)` whenever `k > 0` and `k % K == 0`.
    Periodic(usize),
    /// On a background thread, restarted whenever idle.
    Background,
    Never,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "background" => Ok(Schedule::Background),
            "never" => Ok(Schedule::Never),
            other => match other.parse::<usize>() {
                Ok(0) | Err(_) => Err(Error::Config(format!(
                    "schedule must be a positive period, 'background' or 'never', got '{other}'"
                ))),
                Ok(k) => Ok(Schedule::Periodic(k)),
            },
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Periodic(k) => write!(f, "{k}"),
            Schedule::Background => write!(f, "background"),
            Schedule::Never => write!(f, "never"),
        }
    }
}

/// What the secondary process solves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SecondaryConfig {
    pub terminal_mode: TerminalMode,
    pub cost_mode: CostMode,
}

impl Default for SecondaryConfig {
    fn default() -> Self {
        Self {
            terminal_mode: TerminalMode::Scaled,
            cost_mode: CostMode::Nominal,
        }
    }
}

/// Result of one primary solve.
#[derive(Clone, Debug)]
pub struct PrimaryOutput {
    pub u: DVector<f64>,
    pub objective: f64,
    pub solve_time: Duration,
    pub solution: PrimarySolution,
}

#[derive(Clone, Debug)]
pub struct ControllerState {
    pub data: ProblemData,
    pub terminal: TerminalIngredients,
    pub memory: Memory,
    pub k: usize,
    pub rho: f64,
    pub settings: SolverSettings,
}

impl ControllerState {
    pub fn new(
        data: ProblemData,
        terminal: TerminalIngredients,
        memory: Memory,
        rho: f64,
        settings: SolverSettings,
    ) -> Result<Self> {
        if memory.is_empty() {
            return Err(Error::invalid("the controller needs at least one memory entry"));
        }
        if !(rho >= 0.0) {
            return Err(Error::invalid("regularisation weight must be non-negative"));
        }
        Ok(Self {
            data,
            terminal,
            memory,
            k: 0,
            rho,
            settings,
        })
    }

    /// Solves the primary problem at `x` and records the weights.
    pub fn primary_step(&mut self, x: &DVector<f64>) -> Result<PrimaryOutput> {
        let entries = self.memory.entries();
        let spec = ocp::build_primary(&self.data, &self.terminal, entries, x, self.rho)?;
        let mut res = ocp::solve(&spec, &self.settings)?;
        if res.is_optimal() {
            if let Some(polished) = polish_weights(&spec, &res, &self.settings)? {
                res = polished;
            }
        }
        match res.status {
            ocp::SolveStatus::Optimal => {}
            ocp::SolveStatus::Infeasible => {
                let births: Vec<usize> = entries.iter().map(|e| e.birth_step).collect();
                return Err(Error::Infeasible(format!(
                    "primary problem infeasible at step {} for x = {:?}; memory births {:?}, alphas {:?}, last weights {:?}",
                    self.k,
                    x.as_slice(),
                    births,
                    entries.iter().map(|e| e.alpha).collect::<Vec<_>>(),
                    self.memory.last_lambda(),
                )));
            }
            ocp::SolveStatus::NumericalFailure => {
                return Err(Error::Solver(format!(
                    "primary solve failed at step {} for x = {:?}",
                    self.k,
                    x.as_slice()
                )));
            }
        }
        let solution = PrimarySolution::from_result(&res, entries.len())?;
        self.memory.set_last_lambda(solution.lambda.clone())?;
        Ok(PrimaryOutput {
            u: ocp::extract_control(&res)?,
            objective: res.objective,
            solve_time: res.solve_time,
            solution,
        })
    }

    /// Synchronous secondary solve on the given state snapshot.
    pub fn run_secondary(&self, x: &DVector<f64>, cfg: &SecondaryConfig) -> Result<Option<MemoryEntry>> {
        run_secondary(&self.data, &self.terminal, x, cfg, self.k, &self.settings)
    }
}

/// Interior-point weights of unused entries come back small but positive.
/// Weights below this value are pinned to zero in a second solve.
pub const POLISH_THRESHOLD: f64 = 1e-6;

/// Re-solves with near-zero weights fixed at zero. The result is kept only
/// if it is optimal and its objective is no worse than the original one up
/// to solver accuracy; the reported solve time covers both solves.
fn polish_weights(
    spec: &ocp::ProblemSpec,
    res: &ocp::SolveResult,
    settings: &SolverSettings,
) -> Result<Option<ocp::SolveResult>> {
    let lambda = res.expect_value("lambda")?;
    let small: Vec<usize> = (0..lambda.nrows())
        .filter(|&j| lambda[(j, 0)] > 0.0 && lambda[(j, 0)] <= POLISH_THRESHOLD)
        .collect();
    if small.is_empty() || small.len() == lambda.nrows() {
        return Ok(None);
    }
    let block = spec.var("lambda").cloned().expect("primary problem has weights");
    let mut pinned = spec.clone();
    for j in small {
        pinned.eq(block.expr(j, 0));
    }
    let mut polished = ocp::solve(&pinned, settings)?;
    let slack = settings.tol * (1.0 + res.objective.abs());
    if !polished.is_optimal() || polished.objective > res.objective + slack {
        return Ok(None);
    }
    polished.solve_time += res.solve_time;
    Ok(Some(polished))
}

/// Solves the tube optimisation on a snapshot. `Ok(None)` when infeasible
/// there; a certificate failure is an error.
pub fn run_secondary(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    x: &DVector<f64>,
    cfg: &SecondaryConfig,
    birth_step: usize,
    settings: &SolverSettings,
) -> Result<Option<MemoryEntry>> {
    ocp::solve_entry(
        data,
        terminal,
        cfg.terminal_mode,
        cfg.cost_mode,
        x,
        birth_step,
        settings,
    )
}

/// Closed-loop log plus the error that stopped the run early, if any.
#[derive(Debug)]
pub struct ClosedLoopRun {
    pub log: TrajectoryLog,
    pub failure: Option<Error>,
}

/// Runs `steps` control steps. `disturbance(k)` supplies `w(k)`; the
/// observer sees every completed step together with the state it produced.
pub fn run_closed_loop(
    state: &mut ControllerState,
    x0: &DVector<f64>,
    schedule: Schedule,
    secondary: &SecondaryConfig,
    steps: usize,
    disturbance: &mut dyn FnMut(usize) -> DVector<f64>,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> ClosedLoopRun {
    let mut log = TrajectoryLog::new(state.memory.capacity());
    let snapshot = (state.data.clone(), state.terminal.clone(), state.settings.clone());
    let failure = match schedule {
        Schedule::Background => std::thread::scope(|scope| {
            let (tx, rx) = mpsc::channel::<Result<Option<MemoryEntry>>>();
            let mut busy = false;
            let launch = |x: DVector<f64>, birth: usize| {
                let tx = tx.clone();
                let (data, terminal, settings) = (&snapshot.0, &snapshot.1, &snapshot.2);
                scope.spawn(move || {
                    let _ = tx.send(run_secondary(data, terminal, &x, secondary, birth, settings));
                });
            };
            let mut x = x0.clone();
            for k in 0..steps {
                state.k = k;
                let mut event = MemoryEvent::None;
                if busy {
                    if let Ok(done) = rx.try_recv() {
                        busy = false;
                        match done {
                            Ok(Some(entry)) => event = state.memory.update(entry),
                            Ok(None) => {}
                            Err(e) => return Some(e),
                        }
                    }
                }
                if !busy {
                    launch(x.clone(), k);
                    busy = true;
                }
                match advance(state, &x, k, event, disturbance, &mut log, observer) {
                    Ok(next) => x = next,
                    Err(e) => return Some(e),
                }
            }
            None
        }),
        Schedule::Periodic(_) | Schedule::Never => {
            let mut x = x0.clone();
            let mut failure = None;
            for k in 0..steps {
                state.k = k;
                let mut event = MemoryEvent::None;
                if let Schedule::Periodic(period) = schedule {
                    if k > 0 && k % period == 0 {
                        match state.run_secondary(&x, secondary) {
                            Ok(Some(entry)) => event = state.memory.update(entry),
                            Ok(None) => {}
                            Err(e) => {
                                failure = Some(e);
                                break;
                            }
                        }
                    }
                }
                match advance(state, &x, k, event, disturbance, &mut log, observer) {
                    Ok(next) => x = next,
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            failure
        }
    };
    ClosedLoopRun { log, failure }
}

/// One completed closed-loop step as seen by an observer.
pub struct StepView<'a> {
    pub k: usize,
    /// Memory change applied right before this step's primary solve.
    pub event: MemoryEvent,
    pub x: &'a DVector<f64>,
    pub x_next: &'a DVector<f64>,
    pub w: &'a DVector<f64>,
    pub output: &'a PrimaryOutput,
    pub state: &'a ControllerState,
}

fn advance(
    state: &mut ControllerState,
    x: &DVector<f64>,
    k: usize,
    event: MemoryEvent,
    disturbance: &mut dyn FnMut(usize) -> DVector<f64>,
    log: &mut TrajectoryLog,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<DVector<f64>> {
    let out = state.primary_step(x)?;
    let w = disturbance(k);
    let x_next = state.data.model.step(x, &out.u, &w);
    log.records.push(StepRecord {
        k,
        x: x.clone(),
        u: out.u.clone(),
        w: w.clone(),
        lambda: out.solution.lambda.clone(),
        objective: out.objective,
        solve_time: out.solve_time,
        event,
    });
    observer(&StepView {
        k,
        event,
        x,
        x_next: &x_next,
        w: &w,
        output: &out,
        state,
    });
    Ok(x_next)
}

/// Shifted candidate for the next primary problem, built from the current
/// optimum, the realised disturbance and the memory event applied before
/// the next solve. New or overwritten slots get weight zero and zero parts.
pub fn shifted_candidate(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    entries: &[MemoryEntry],
    sol: &PrimarySolution,
    w: &DVector<f64>,
    event: MemoryEvent,
) -> Result<PrimarySolution> {
    let (n, m, horizon) = (data.n(), data.m(), data.horizon);
    let count = entries.len();
    if sol.lambda.len() != count || sol.zeta.len() != count {
        return Err(Error::dim("solution does not match the memory size"));
    }
    let z_n = sol.z.column(horizon).into_owned();
    let kz_n = &terminal.k_f * &z_n;
    let total: f64 = entries.iter().zip(&sol.lambda).map(|(e, l)| l * e.alpha).sum();

    let mut zeta = Vec::with_capacity(count + 1);
    let mut nu = Vec::with_capacity(count + 1);
    for (j, entry) in entries.iter().enumerate() {
        let l = sol.lambda[j];
        let share = if total > 0.0 { l * entry.alpha / total } else { l };
        let mut zj = DMatrix::zeros(n, horizon);
        let mut nj = DMatrix::zeros(m, horizon);
        for i in 0..horizon {
            let (zb, nb) = if i + 1 < horizon {
                (
                    sol.zeta[j].column(i + 1).into_owned(),
                    sol.nu[j].column(i + 1).into_owned(),
                )
            } else {
                (&z_n * share, &kz_n * share)
            };
            zj.set_column(i, &(zb + &entry.response.phi_x[i] * w * l));
            nj.set_column(i, &(nb + &entry.response.phi_u[i] * w * l));
        }
        zeta.push(zj);
        nu.push(nj);
    }
    let mut lambda = sol.lambda.clone();
    match event {
        MemoryEvent::None | MemoryEvent::Discard => {}
        MemoryEvent::Insert(j) if j == count => {
            lambda.push(0.0);
            zeta.push(DMatrix::zeros(n, horizon));
            nu.push(DMatrix::zeros(m, horizon));
        }
        MemoryEvent::Replace(j) if j < count => {
            lambda[j] = 0.0;
            zeta[j].fill(0.0);
            nu[j].fill(0.0);
        }
        other => {
            return Err(Error::invalid(format!(
                "event {other} does not fit a memory of size {count}"
            )))
        }
    }

    let mut z = DMatrix::zeros(n, horizon + 1);
    let mut v = DMatrix::zeros(m, horizon);
    for i in 0..horizon {
        let zi = zeta.iter().fold(DVector::zeros(n), |acc, zj| acc + zj.column(i));
        let vi = nu.iter().fold(DVector::zeros(m), |acc, nj| acc + nj.column(i));
        z.set_column(i, &zi);
        v.set_column(i, &vi);
    }
    let last = data.model.a() * z.column(horizon - 1) + data.model.b() * v.column(horizon - 1);
    z.set_column(horizon, &last);
    Ok(PrimarySolution {
        z,
        v,
        lambda,
        zeta,
        nu,
        objective: f64::NAN,
    })
}

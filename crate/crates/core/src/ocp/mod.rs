//! Builders for the tube MPC problems and the memory entries they produce.
//!
//! All builders emit a [`ProblemSpec`]; nothing here talks to a solver
//! directly except [`certify_fixed_response`] and [`solve_entry`], which
//! solve and post-process.
//!
//! Variable naming (shared by extraction and candidate construction):
//! - `z` (n x N+1) and `v` (m x N): nominal states/inputs, one column per step.
//! - `phi_u_{j}` (m x n), `j = 1..=N`: input response blocks; state blocks
//!   are substituted through the response recursion.
//! - `sx` (n_x x N), `su` (n_u x N): per-step support increments, so that
//!   `t[i] = sum_{j < i} s[:, j]`.
//! - `alpha`, `lambda_cert` (n_f x n_f), `g` (n_f): terminal scaling, its
//!   containment certificate and the stacked supports of `Gamma W`.
//! - `lambda` (M), `zeta_{j}` (n x N), `nu_{j}` (m x N): convex weights and
//!   the per-entry split of the nominal trajectory in the primary problem.

mod problem;

pub use problem::{
    solve, ExprMatrix, LinExpr, ProblemKind, ProblemSpec, SolveResult, SolveStatus, SolverSettings, VarBlock,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{ProblemData, TerminalIngredients};
use crate::polytope::{self, DEFAULT_TOL};
use crate::slp::{self, SystemResponse, TubeSequence};

/// Upper bound on the terminal scaling; only active when `X_f` degenerates
/// (no disturbance).
pub const ALPHA_CAP: f64 = 1e3;

/// Terminal handling of the tube optimisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalMode {
    /// Scaled robust invariant terminal set `alpha X_f`.
    Scaled,
    /// Additionally forces `Gamma = 0` (finite impulse response).
    Fir,
}

/// Objective of the tube optimisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CostMode {
    /// Nominal quadratic tracking cost.
    Nominal,
    /// Sum of all tightenings plus `weight` times the nominal cost.
    Tightening { weight: f64 },
}

/// One stored tube sequence with its terminal scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub tubes: TubeSequence,
    pub alpha: f64,
    pub response: SystemResponse,
    pub birth_step: usize,
    /// Multiplier certifying `alpha A_cl X_f ⊆ alpha X_f ⊖ Gamma W`.
    pub certificate: DMatrix<f64>,
}

impl MemoryEntry {
    /// Re-derives the tubes from the response and re-checks every terminal
    /// condition. Returns a description of the first failure.
    pub fn certify(&self, data: &ProblemData, terminal: &TerminalIngredients, tol: f64) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Certificate(format!("negative terminal scaling {}", self.alpha)));
        }
        if !slp::validate_response(&self.response, &data.model, slp::RESPONSE_TOL) {
            return Err(Error::Certificate("response violates the structural recursion".into()));
        }
        let tubes = slp::tube_tightenings(
            &self.response,
            &data.model,
            &data.w_vertices,
            data.x_set.normals(),
            data.u_set.normals(),
        )?;
        let close = |a: &[DVector<f64>], b: &[DVector<f64>]| {
            a.iter()
                .zip(b)
                .all(|(x, y)| (x - y).abs().max() <= 1e-9 * (1.0 + y.abs().max()))
        };
        if !close(&tubes.t_x, &self.tubes.t_x) || !close(&tubes.t_u, &self.tubes.t_u) {
            return Err(Error::Certificate("stored tubes do not match the response".into()));
        }
        if !polytope::check_lemma1(
            &self.certificate,
            self.alpha,
            self.alpha,
            &terminal.a_cl,
            &self.tubes.gamma,
            &terminal.x_f,
            &terminal.x_f,
            &data.w_vertices,
            tol,
        )? {
            return Err(Error::Certificate("terminal invariance certificate rejected".into()));
        }
        let n = self.tubes.horizon();
        let state_ok = (&terminal.h_xf_at_hx * self.alpha + &self.tubes.t_x[n] - data.x_set.offsets()).max() <= tol;
        let input_ok = (&terminal.h_kxf_at_hu * self.alpha + &self.tubes.t_u[n] - data.u_set.offsets()).max() <= tol;
        if !state_ok {
            return Err(Error::Certificate(
                "scaled terminal set leaves the tightened state set".into(),
            ));
        }
        if !input_ok {
            return Err(Error::Certificate(
                "terminal control leaves the tightened input set".into(),
            ));
        }
        Ok(())
    }

    /// The nominal-feasible state polytope `X ⊖ F_i^x` as offsets.
    pub fn state_offsets(&self, data: &ProblemData, i: usize) -> DVector<f64> {
        data.x_set.offsets() - &self.tubes.t_x[i]
    }

    pub fn input_offsets(&self, data: &ProblemData, i: usize) -> DVector<f64> {
        data.u_set.offsets() - &self.tubes.t_u[i]
    }
}

fn add_dynamics(p: &mut ProblemSpec, data: &ProblemData, z: &VarBlock, v: &VarBlock, x0: &DVector<f64>) {
    let (n, m) = (data.n(), data.m());
    let (a, b) = (data.model.a(), data.model.b());
    for r in 0..n {
        p.eq(z.expr(r, 0) - LinExpr::constant(x0[r]));
    }
    for i in 0..data.horizon {
        for r in 0..n {
            let mut e = z.expr(r, i + 1);
            for c in 0..n {
                e.add_term(z.at(c, i), -a[(r, c)]);
            }
            for c in 0..m {
                e.add_term(v.at(c, i), -b[(r, c)]);
            }
            p.eq(e);
        }
    }
}

fn add_nominal_cost(
    p: &mut ProblemSpec,
    data: &ProblemData,
    terminal: &TerminalIngredients,
    z: &VarBlock,
    v: &VarBlock,
    weight: f64,
) {
    let (n, m, horizon) = (data.n(), data.m(), data.horizon);
    for i in 0..horizon {
        let zi: Vec<usize> = (0..n).map(|r| z.at(r, i)).collect();
        let vi: Vec<usize> = (0..m).map(|r| v.at(r, i)).collect();
        p.add_quadratic_form(&zi, &(&data.q * weight));
        p.add_quadratic_form(&vi, &(&data.r * weight));
    }
    let zn: Vec<usize> = (0..n).map(|r| z.at(r, horizon)).collect();
    p.add_quadratic_form(&zn, &(&terminal.p * weight));
}

/// `sum_c h[r, c] * y[c, col]`
fn row_dot(h: &DMatrix<f64>, r: usize, y: &VarBlock, col: usize) -> LinExpr {
    let mut e = LinExpr::default();
    for c in 0..h.ncols() {
        e.add_term(y.at(c, col), h[(r, c)]);
    }
    e
}

/// Terminal invariance via the linear containment certificate:
/// `Lambda >= 0`, `Lambda H_f = alpha H_f A_cl`, `Lambda h_f <= alpha h_f - g`.
fn add_invariance_certificate(
    p: &mut ProblemSpec,
    terminal: &TerminalIngredients,
    alpha: &LinExpr,
    lam: &VarBlock,
    g: &[LinExpr],
) {
    let hf = terminal.x_f.normals();
    let hfv = terminal.x_f.offsets();
    let nf = hf.nrows();
    let n = hf.ncols();
    let hf_acl = hf * &terminal.a_cl;
    for a in 0..nf {
        for b in 0..nf {
            p.le(-lam.expr(a, b));
        }
    }
    for a in 0..nf {
        for c in 0..n {
            let mut e = alpha.clone() * -hf_acl[(a, c)];
            for b in 0..nf {
                e.add_term(lam.at(a, b), hf[(b, c)]);
            }
            p.eq(e);
        }
        let mut e = alpha.clone() * -hfv[a] + g[a].clone();
        for b in 0..nf {
            e.add_term(lam.at(a, b), hfv[b]);
        }
        p.le(e);
    }
}

/// Tube optimisation with a scaled terminal set (the secondary process).
pub fn build_sltmpc(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    terminal_mode: TerminalMode,
    cost_mode: CostMode,
    x0: &DVector<f64>,
) -> Result<ProblemSpec> {
    let (n, m, horizon) = (data.n(), data.m(), data.horizon);
    if x0.len() != n {
        return Err(Error::dim("initial state has the wrong dimension"));
    }
    let (hx, hxv) = (data.x_set.normals(), data.x_set.offsets());
    let (hu, huv) = (data.u_set.normals(), data.u_set.offsets());
    let (hf, hfv) = (terminal.x_f.normals(), terminal.x_f.offsets());
    let (nx, nu, nf) = (hx.nrows(), hu.nrows(), hf.nrows());
    let wv = &data.w_vertices;

    let mut p = ProblemSpec::new(ProblemKind::Sltmpc);
    let z = p.add_var("z", n, horizon + 1);
    let v = p.add_var("v", m, horizon);
    let phi_u: Vec<VarBlock> = (1..=horizon).map(|j| p.add_var(format!("phi_u_{j}"), m, n)).collect();
    let sx = p.add_var("sx", nx, horizon);
    let su = p.add_var("su", nu, horizon);
    let alpha = p.add_var("alpha", 1, 1);
    let lam = p.add_var("lambda_cert", nf, nf);
    let g = p.add_var("g", nf, 1);

    let phi_u_e: Vec<ExprMatrix> = phi_u.iter().map(ExprMatrix::from_block).collect();
    let mut phi_x_e = vec![ExprMatrix::from_constant(&DMatrix::identity(n, n))];
    for j in 0..horizon - 1 {
        let next = phi_x_e[j]
            .premul(data.model.a())
            .add(&phi_u_e[j].premul(data.model.b()));
        phi_x_e.push(next);
    }
    let gamma = phi_x_e[horizon - 1]
        .premul(data.model.a())
        .add(&phi_u_e[horizon - 1].premul(data.model.b()));

    // per-step support increments as vertex-wise epigraphs
    for j in 0..horizon {
        for r in 0..nx {
            let eta: Vec<f64> = hx.row(r).iter().copied().collect();
            for w in wv.iter() {
                p.le(phi_x_e[j].bilinear(&eta, w.as_slice()) - sx.expr(r, j));
            }
        }
        for r in 0..nu {
            let eta: Vec<f64> = hu.row(r).iter().copied().collect();
            for w in wv.iter() {
                p.le(phi_u_e[j].bilinear(&eta, w.as_slice()) - su.expr(r, j));
            }
        }
    }
    let tight = |s: &VarBlock, r: usize, i: usize| -> LinExpr {
        let mut e = LinExpr::default();
        for j in 0..i {
            e.add_term(s.at(r, j), 1.0);
        }
        e
    };

    add_dynamics(&mut p, data, &z, &v, x0);
    for i in 0..horizon {
        for r in 0..nx {
            p.le(row_dot(hx, r, &z, i) + tight(&sx, r, i) - LinExpr::constant(hxv[r]));
        }
        for r in 0..nu {
            p.le(row_dot(hu, r, &v, i) + tight(&su, r, i) - LinExpr::constant(huv[r]));
        }
    }

    let a_e = alpha.expr(0, 0);
    for r in 0..nf {
        p.le(row_dot(hf, r, &z, horizon) - a_e.clone() * hfv[r]);
    }
    p.le(-a_e.clone());
    p.le(a_e.clone() - LinExpr::constant(ALPHA_CAP));
    for r in 0..nx {
        p.le(a_e.clone() * terminal.h_xf_at_hx[r] + tight(&sx, r, horizon) - LinExpr::constant(hxv[r]));
    }
    for r in 0..nu {
        p.le(a_e.clone() * terminal.h_kxf_at_hu[r] + tight(&su, r, horizon) - LinExpr::constant(huv[r]));
    }

    let g_e: Vec<LinExpr> = (0..nf).map(|r| g.expr(r, 0)).collect();
    for (r, g_r) in g_e.iter().enumerate() {
        let eta: Vec<f64> = hf.row(r).iter().copied().collect();
        for w in wv.iter() {
            p.le(gamma.bilinear(&eta, w.as_slice()) - g_r.clone());
        }
    }
    add_invariance_certificate(&mut p, terminal, &a_e, &lam, &g_e);

    if terminal_mode == TerminalMode::Fir {
        for r in 0..n {
            for c in 0..n {
                p.eq(gamma.get(r, c).clone());
            }
        }
    }

    match cost_mode {
        CostMode::Nominal => add_nominal_cost(&mut p, data, terminal, &z, &v, 1.0),
        CostMode::Tightening { weight } => {
            if !(weight >= 0.0) {
                return Err(Error::invalid("tightening cost weight must be non-negative"));
            }
            // step j contributes to t[i] for every i > j
            for j in 0..horizon {
                let count = (horizon - j) as f64;
                for r in 0..nx {
                    p.add_linear(LinExpr::term(sx.at(r, j), count));
                }
                for r in 0..nu {
                    p.add_linear(LinExpr::term(su.at(r, j), count));
                }
            }
            if weight > 0.0 {
                add_nominal_cost(&mut p, data, terminal, &z, &v, weight);
            }
        }
    }
    Ok(p)
}

/// Converts an optimal tube optimisation into a certified memory entry. The
/// tubes are recomputed exactly from the input response.
pub fn entry_from_solution(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    result: &SolveResult,
    birth_step: usize,
    tol: f64,
) -> Result<MemoryEntry> {
    if !result.is_optimal() {
        return Err(Error::Solver(format!(
            "cannot build an entry from status {:?}",
            result.status
        )));
    }
    let phi_u = (1..=data.horizon)
        .map(|j| result.expect_value(&format!("phi_u_{j}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let response = SystemResponse::from_input_response(&data.model, phi_u)?;
    let tubes = slp::tube_tightenings(
        &response,
        &data.model,
        &data.w_vertices,
        data.x_set.normals(),
        data.u_set.normals(),
    )?;
    let alpha = result.expect_value("alpha")?[(0, 0)].max(0.0);
    let certificate = result.expect_value("lambda_cert")?.map(|v| v.max(0.0));
    let entry = MemoryEntry {
        tubes,
        alpha,
        response,
        birth_step,
        certificate,
    };
    entry.certify(data, terminal, tol)?;
    Ok(entry)
}

/// Solves the tube optimisation at `x0` and returns the certified entry,
/// or `None` when the problem is infeasible at that state.
pub fn solve_entry(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    terminal_mode: TerminalMode,
    cost_mode: CostMode,
    x0: &DVector<f64>,
    birth_step: usize,
    settings: &SolverSettings,
) -> Result<Option<MemoryEntry>> {
    let spec = build_sltmpc(data, terminal, terminal_mode, cost_mode, x0)?;
    let res = solve(&spec, settings)?;
    match res.status {
        SolveStatus::Optimal => entry_from_solution(data, terminal, &res, birth_step, DEFAULT_TOL).map(Some),
        SolveStatus::Infeasible => Ok(None),
        SolveStatus::NumericalFailure => Err(Error::Solver("tube optimisation failed numerically".into())),
    }
}

/// Largest terminal scaling admissible for a frozen response, found with a
/// small LP over the scaled-terminal-set conditions.
pub fn certify_fixed_response(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    response: SystemResponse,
    birth_step: usize,
    settings: &SolverSettings,
) -> Result<MemoryEntry> {
    let tubes = slp::tube_tightenings(
        &response,
        &data.model,
        &data.w_vertices,
        data.x_set.normals(),
        data.u_set.normals(),
    )?;
    let nf = terminal.n_facets();
    let horizon = data.horizon;
    let g_val = polytope::support_rows(&(terminal.x_f.normals() * &tubes.gamma), &data.w_vertices)?;

    let mut p = ProblemSpec::new(ProblemKind::TerminalScaling);
    let alpha = p.add_var("alpha", 1, 1);
    let lam = p.add_var("lambda_cert", nf, nf);
    let a_e = alpha.expr(0, 0);
    p.le(-a_e.clone());
    p.le(a_e.clone() - LinExpr::constant(ALPHA_CAP));
    let xs = data.x_set.offsets() - &tubes.t_x[horizon];
    for r in 0..xs.len() {
        p.le(a_e.clone() * terminal.h_xf_at_hx[r] - LinExpr::constant(xs[r]));
    }
    let us = data.u_set.offsets() - &tubes.t_u[horizon];
    for r in 0..us.len() {
        p.le(a_e.clone() * terminal.h_kxf_at_hu[r] - LinExpr::constant(us[r]));
    }
    let g: Vec<LinExpr> = g_val.iter().map(|v| LinExpr::constant(*v)).collect();
    add_invariance_certificate(&mut p, terminal, &a_e, &lam, &g);
    p.add_linear(LinExpr::term(alpha.at(0, 0), -1.0));

    let res = solve(&p, settings)?;
    match res.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Err(Error::Infeasible(
                "no terminal scaling satisfies the invariance conditions".into(),
            ))
        }
        SolveStatus::NumericalFailure => return Err(Error::Solver("terminal scaling LP failed numerically".into())),
    }
    let entry = MemoryEntry {
        tubes,
        alpha: res.expect_value("alpha")?[(0, 0)].max(0.0),
        response,
        birth_step,
        certificate: res.expect_value("lambda_cert")?.map(|v| v.max(0.0)),
    };
    entry.certify(data, terminal, DEFAULT_TOL)?;
    Ok(entry)
}

/// Nominal MPC over one frozen tube sequence.
pub fn build_fixed_tube(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    entry: &MemoryEntry,
    x0: &DVector<f64>,
) -> Result<ProblemSpec> {
    let (n, m, horizon) = (data.n(), data.m(), data.horizon);
    if x0.len() != n {
        return Err(Error::dim("initial state has the wrong dimension"));
    }
    if entry.tubes.horizon() != horizon {
        return Err(Error::dim("entry horizon differs from the problem horizon"));
    }
    let (hx, hu, hf) = (data.x_set.normals(), data.u_set.normals(), terminal.x_f.normals());
    let mut p = ProblemSpec::new(ProblemKind::FixedTube);
    let z = p.add_var("z", n, horizon + 1);
    let v = p.add_var("v", m, horizon);
    add_dynamics(&mut p, data, &z, &v, x0);
    for i in 0..horizon {
        let xo = entry.state_offsets(data, i);
        for r in 0..hx.nrows() {
            p.le(row_dot(hx, r, &z, i) - LinExpr::constant(xo[r]));
        }
        let uo = entry.input_offsets(data, i);
        for r in 0..hu.nrows() {
            p.le(row_dot(hu, r, &v, i) - LinExpr::constant(uo[r]));
        }
    }
    for r in 0..hf.nrows() {
        p.le(row_dot(hf, r, &z, horizon) - LinExpr::constant(entry.alpha * terminal.x_f.offsets()[r]));
    }
    add_nominal_cost(&mut p, data, terminal, &z, &v, 1.0);
    Ok(p)
}

/// Age of each entry relative to the newest one.
pub fn relative_ages(entries: &[MemoryEntry]) -> Vec<f64> {
    let newest = entries.iter().map(|e| e.birth_step).max().unwrap_or(0);
    entries.iter().map(|e| (newest - e.birth_step) as f64).collect()
}

/// Nominal MPC over the convex combination of all memory entries (the
/// primary process). Minkowski sums of the scaled tightened sets are encoded
/// exactly by splitting each nominal state and input into per-entry parts.
pub fn build_primary(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    entries: &[MemoryEntry],
    x0: &DVector<f64>,
    rho: f64,
) -> Result<ProblemSpec> {
    if entries.is_empty() {
        return Err(Error::invalid("primary problem needs at least one memory entry"));
    }
    let (n, m, horizon) = (data.n(), data.m(), data.horizon);
    if x0.len() != n {
        return Err(Error::dim("initial state has the wrong dimension"));
    }
    if entries.iter().any(|e| e.tubes.horizon() != horizon) {
        return Err(Error::dim("entry horizon differs from the problem horizon"));
    }
    let (hx, hu, hf) = (data.x_set.normals(), data.u_set.normals(), terminal.x_f.normals());
    let count = entries.len();

    let mut p = ProblemSpec::new(ProblemKind::Primary);
    let z = p.add_var("z", n, horizon + 1);
    let v = p.add_var("v", m, horizon);
    let lambda = p.add_var("lambda", count, 1);
    let zeta: Vec<VarBlock> = (0..count).map(|j| p.add_var(format!("zeta_{j}"), n, horizon)).collect();
    let nu: Vec<VarBlock> = (0..count).map(|j| p.add_var(format!("nu_{j}"), m, horizon)).collect();

    add_dynamics(&mut p, data, &z, &v, x0);
    for i in 0..horizon {
        for r in 0..n {
            let mut e = z.expr(r, i);
            for zj in &zeta {
                e.add_term(zj.at(r, i), -1.0);
            }
            p.eq(e);
        }
        for r in 0..m {
            let mut e = v.expr(r, i);
            for nj in &nu {
                e.add_term(nj.at(r, i), -1.0);
            }
            p.eq(e);
        }
    }
    for (j, entry) in entries.iter().enumerate() {
        for i in 0..horizon {
            let xo = entry.state_offsets(data, i);
            for r in 0..hx.nrows() {
                p.le(row_dot(hx, r, &zeta[j], i) + LinExpr::term(lambda.at(j, 0), -xo[r]));
            }
            let uo = entry.input_offsets(data, i);
            for r in 0..hu.nrows() {
                p.le(row_dot(hu, r, &nu[j], i) + LinExpr::term(lambda.at(j, 0), -uo[r]));
            }
        }
    }
    // ⊕_j lambda_j alpha_j X_f = (sum_j lambda_j alpha_j) X_f
    for r in 0..hf.nrows() {
        let mut e = row_dot(hf, r, &z, horizon);
        for (j, entry) in entries.iter().enumerate() {
            e.add_term(lambda.at(j, 0), -entry.alpha * terminal.x_f.offsets()[r]);
        }
        p.le(e);
    }
    let mut sum = LinExpr::constant(-1.0);
    for j in 0..count {
        p.le(-lambda.expr(j, 0));
        sum.add_term(lambda.at(j, 0), 1.0);
    }
    p.eq(sum);

    add_nominal_cost(&mut p, data, terminal, &z, &v, 1.0);
    if rho != 0.0 {
        for (j, age) in relative_ages(entries).into_iter().enumerate() {
            p.add_linear(LinExpr::term(lambda.at(j, 0), rho * age));
        }
    }
    Ok(p)
}

/// First nominal input `v_0` of an optimal solution.
pub fn extract_control(r: &SolveResult) -> Result<DVector<f64>> {
    if !r.is_optimal() {
        return Err(Error::Solver(format!("no control available, status {:?}", r.status)));
    }
    Ok(r.expect_value("v")?.column(0).into_owned())
}

/// Primal values of an optimal primary problem.
#[derive(Clone, Debug)]
pub struct PrimarySolution {
    pub z: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub lambda: Vec<f64>,
    pub zeta: Vec<DMatrix<f64>>,
    pub nu: Vec<DMatrix<f64>>,
    pub objective: f64,
}

impl PrimarySolution {
    pub fn from_result(r: &SolveResult, count: usize) -> Result<Self> {
        if !r.is_optimal() {
            return Err(Error::Solver(format!("primary status {:?}", r.status)));
        }
        Ok(Self {
            z: r.expect_value("z")?.clone(),
            v: r.expect_value("v")?.clone(),
            lambda: r.expect_value("lambda")?.iter().copied().collect(),
            zeta: (0..count)
                .map(|j| r.expect_value(&format!("zeta_{j}")).cloned())
                .collect::<Result<_>>()?,
            nu: (0..count)
                .map(|j| r.expect_value(&format!("nu_{j}")).cloned())
                .collect::<Result<_>>()?,
            objective: r.objective,
        })
    }

    /// Primal vector of a primary problem with the same memory size.
    pub fn to_point(&self, spec: &ProblemSpec) -> Result<Vec<f64>> {
        let mut x = spec.zero_point();
        spec.assign(&mut x, "z", &self.z)?;
        spec.assign(&mut x, "v", &self.v)?;
        spec.assign(
            &mut x,
            "lambda",
            &DMatrix::from_column_slice(self.lambda.len(), 1, &self.lambda),
        )?;
        for (j, (zeta, nu)) in self.zeta.iter().zip(&self.nu).enumerate() {
            spec.assign(&mut x, &format!("zeta_{j}"), zeta)?;
            spec.assign(&mut x, &format!("nu_{j}"), nu)?;
        }
        Ok(x)
    }
}

//! Solver-agnostic convex QP description and the solver contract.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::time::{Duration, Instant};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT, ZeroConeT,
};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Which optimal control problem a spec encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    /// Full tube optimisation with a scaled terminal set (secondary process).
    Sltmpc,
    /// Nominal trajectory over a fused memory (primary process).
    Primary,
    /// Nominal trajectory over one frozen tube sequence.
    FixedTube,
    /// Largest admissible terminal scaling for a frozen response.
    TerminalScaling,
    Custom,
}

/// Matrix-shaped block of decision variables, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VarBlock {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl VarBlock {
    pub fn at(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.rows && c < self.cols);
        self.offset + r * self.cols + c
    }

    pub fn expr(&self, r: usize, c: usize) -> LinExpr {
        LinExpr::var(self.at(r, c))
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Affine expression `sum_k c_k x_{i_k} + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(i: usize) -> Self {
        Self {
            terms: vec![(i, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(i: usize, c: f64) -> Self {
        Self {
            terms: vec![(i, c)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, i: usize, c: f64) {
        if c != 0.0 {
            self.terms.push((i, c));
        }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, c: f64) {
        if c == 0.0 {
            return;
        }
        self.terms.extend(other.terms.iter().map(|&(i, v)| (i, v * c)));
        self.constant += other.constant * c;
    }

    /// Merges duplicate indices and drops zero coefficients.
    pub fn compact(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (i, v) in self.terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => out.push((i, v)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        Self {
            terms: out,
            constant: self.constant,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.1 == 0.0)
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self += rhs;
        self
    }
}

impl AddAssign for LinExpr {
    fn add_assign(&mut self, rhs: LinExpr) {
        self.terms.extend(rhs.terms);
        self.constant += rhs.constant;
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: LinExpr) -> LinExpr {
        self.add_scaled(&rhs, -1.0);
        self
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self * -1.0
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(mut self, c: f64) -> LinExpr {
        for t in &mut self.terms {
            t.1 *= c;
        }
        self.constant *= c;
        self
    }
}

/// Dense matrix of affine expressions; used for responses that are affine in
/// the decision variables.
#[derive(Clone, Debug)]
pub struct ExprMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<LinExpr>,
}

impl ExprMatrix {
    pub fn from_constant(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(LinExpr::constant(m[(r, c)]));
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn from_block(b: &VarBlock) -> Self {
        let mut data = Vec::with_capacity(b.len());
        for r in 0..b.rows {
            for c in 0..b.cols {
                data.push(b.expr(r, c));
            }
        }
        Self {
            rows: b.rows,
            cols: b.cols,
            data,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> &LinExpr {
        &self.data[r * self.cols + c]
    }

    /// `m * self` for a constant left factor.
    pub fn premul(&self, m: &DMatrix<f64>) -> ExprMatrix {
        assert_eq!(m.ncols(), self.rows);
        let mut data = Vec::with_capacity(m.nrows() * self.cols);
        for r in 0..m.nrows() {
            for c in 0..self.cols {
                let mut e = LinExpr::default();
                for k in 0..self.rows {
                    e.add_scaled(self.get(k, c), m[(r, k)]);
                }
                data.push(e.compact());
            }
        }
        ExprMatrix {
            rows: m.nrows(),
            cols: self.cols,
            data,
        }
    }

    pub fn add(&self, other: &ExprMatrix) -> ExprMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        ExprMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.clone() + b.clone()).compact())
                .collect(),
        }
    }

    /// Row vector `eta^T * self * v` as a scalar expression.
    pub fn bilinear(&self, eta: &[f64], v: &[f64]) -> LinExpr {
        let mut e = LinExpr::default();
        for (r, er) in eta.iter().enumerate() {
            if *er == 0.0 {
                continue;
            }
            for (c, vc) in v.iter().enumerate() {
                if *vc != 0.0 {
                    e.add_scaled(self.get(r, c), er * vc);
                }
            }
        }
        e.compact()
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c).eval(x))
    }
}

/// Convex QP: minimise `x^T W x + c^T x + c0` subject to affine equalities
/// `e(x) = 0` and inequalities `g(x) <= 0`.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    vars: Vec<VarBlock>,
    n_vars: usize,
    equalities: Vec<LinExpr>,
    inequalities: Vec<LinExpr>,
    quad: Vec<(usize, usize, f64)>,
    linear: LinExpr,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind) -> Self {
        Self {
            kind,
            vars: Vec::new(),
            n_vars: 0,
            equalities: Vec::new(),
            inequalities: Vec::new(),
            quad: Vec::new(),
            linear: LinExpr::default(),
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> VarBlock {
        let name = name.into();
        assert!(self.var(&name).is_none(), "duplicate variable {name}");
        let block = VarBlock {
            name,
            offset: self.n_vars,
            rows,
            cols,
        };
        self.n_vars += rows * cols;
        self.vars.push(block.clone());
        block
    }

    pub fn var(&self, name: &str) -> Option<&VarBlock> {
        self.vars.iter().find(|v| v.name == name)
    }

    pub fn vars(&self) -> &[VarBlock] {
        &self.vars
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_equalities(&self) -> usize {
        self.equalities.len()
    }

    pub fn n_inequalities(&self) -> usize {
        self.inequalities.len()
    }

    /// `e == 0`
    pub fn eq(&mut self, e: LinExpr) {
        self.equalities.push(e.compact());
    }

    /// `e <= 0`
    pub fn le(&mut self, e: LinExpr) {
        self.inequalities.push(e.compact());
    }

    /// Adds `coef * x_i * x_j` to the objective.
    pub fn add_quad(&mut self, i: usize, j: usize, coef: f64) {
        if coef != 0.0 {
            self.quad.push((i, j, coef));
        }
    }

    /// Adds `y^T M y` where `y_k = x[idx[k]]`.
    pub fn add_quadratic_form(&mut self, idx: &[usize], m: &DMatrix<f64>) {
        assert_eq!(m.shape(), (idx.len(), idx.len()));
        for a in 0..idx.len() {
            for b in 0..idx.len() {
                self.add_quad(idx[a], idx[b], m[(a, b)]);
            }
        }
    }

    pub fn add_linear(&mut self, e: LinExpr) {
        self.linear += e;
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.quad.iter().map(|&(i, j, c)| c * x[i] * x[j]).sum::<f64>() + self.linear.eval(x)
    }

    /// Largest violation over all constraints (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n_vars);
        let eq = self.equalities.iter().map(|e| e.eval(x).abs());
        let ineq = self.inequalities.iter().map(|e| e.eval(x).max(0.0));
        eq.chain(ineq).fold(0.0, f64::max)
    }

    /// Zero vector to be filled with [`ProblemSpec::assign`].
    pub fn zero_point(&self) -> Vec<f64> {
        vec![0.0; self.n_vars]
    }

    /// Writes the values of a named block into a primal vector.
    pub fn assign(&self, x: &mut [f64], name: &str, value: &DMatrix<f64>) -> Result<()> {
        let block = self
            .var(name)
            .ok_or_else(|| Error::invalid(format!("no variable named {name}")))?;
        if value.shape() != (block.rows, block.cols) {
            return Err(Error::dim(format!(
                "{name} is {}x{}, value is {}x{}",
                block.rows,
                block.cols,
                value.nrows(),
                value.ncols()
            )));
        }
        for r in 0..block.rows {
            for c in 0..block.cols {
                x[block.at(r, c)] = value[(r, c)];
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let bad_idx = |e: &LinExpr| e.terms.iter().any(|t| t.0 >= self.n_vars || !t.1.is_finite());
        if self.equalities.iter().chain(&self.inequalities).any(bad_idx) || bad_idx(&self.linear) {
            return Err(Error::invalid(
                "constraint references an undeclared variable or is non-finite",
            ));
        }
        if self
            .quad
            .iter()
            .any(|q| q.0 >= self.n_vars || q.1 >= self.n_vars || !q.2.is_finite())
        {
            return Err(Error::invalid("cost references an undeclared variable"));
        }
        Ok(())
    }
}

impl fmt::Display for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_of = |i: usize| -> String {
            self.vars
                .iter()
                .find(|v| i >= v.offset && i < v.offset + v.len())
                .map(|v| {
                    let k = i - v.offset;
                    format!("{}[{},{}]", v.name, k / v.cols, k % v.cols)
                })
                .unwrap_or_else(|| format!("x{i}"))
        };
        let fmt_expr = |e: &LinExpr| -> String {
            let mut s: Vec<String> = e.terms.iter().map(|&(i, c)| format!("{c:+e}*{}", name_of(i))).collect();
            if e.constant != 0.0 || s.is_empty() {
                s.push(format!("{:+e}", e.constant));
            }
            s.join(" ")
        };
        writeln!(f, "problem {:?}", self.kind)?;
        writeln!(f, "variables ({} scalars)", self.n_vars)?;
        for v in &self.vars {
            writeln!(f, "  {} : {}x{} @ {}", v.name, v.rows, v.cols, v.offset)?;
        }
        writeln!(f, "objective")?;
        for &(i, j, c) in &self.quad {
            writeln!(f, "  {c:+e}*{}*{}", name_of(i), name_of(j))?;
        }
        writeln!(f, "  {}", fmt_expr(&self.linear))?;
        writeln!(f, "equalities ({})", self.equalities.len())?;
        for e in &self.equalities {
            writeln!(f, "  {} == 0", fmt_expr(e))?;
        }
        writeln!(f, "inequalities ({})", self.inequalities.len())?;
        for e in &self.inequalities {
            writeln!(f, "  {} <= 0", fmt_expr(e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverSettings {
    /// Feasibility and duality-gap tolerance handed to the interior point method.
    pub tol: f64,
    /// Largest primal constraint violation accepted when classifying a
    /// solution as optimal.
    pub accept_violation: f64,
    pub max_iter: u32,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            accept_violation: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub status: SolveStatus,
    /// Full primal vector; empty unless optimal.
    pub x: Vec<f64>,
    values: BTreeMap<String, DMatrix<f64>>,
    pub objective: f64,
    pub solve_time: Duration,
    pub iterations: u32,
    pub max_violation: f64,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.values.get(name)
    }

    pub fn expect_value(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.value(name)
            .ok_or_else(|| Error::Solver(format!("solution has no variable {name} (status {:?})", self.status)))
    }
}

/// Solves a spec with the interior point backend and classifies the outcome.
/// Primal values are only reported for an optimal status, and an optimal
/// status is only reported when the primal point satisfies every constraint
/// within `accept_violation`.
pub fn solve(p: &ProblemSpec, settings: &SolverSettings) -> Result<SolveResult> {
    p.validate()?;
    let start = Instant::now();
    let n = p.n_vars;
    let n_eq = p.equalities.len();
    let n_in = p.inequalities.len();

    // Clarabel form: min 1/2 x'Px + q'x  s.t. Ax + s = b, s in K, P upper triangular.
    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for &(i, j, c) in &p.quad {
        let (r, col) = if i <= j { (i, j) } else { (j, i) };
        pi.push(r);
        pj.push(col);
        pv.push(if i == j { 2.0 * c } else { c });
    }
    let pmat = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
    let mut q = vec![0.0; n];
    for &(i, c) in &p.linear.terms {
        q[i] += c;
    }

    let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
    let mut b = Vec::with_capacity(n_eq + n_in);
    for (r, e) in p.equalities.iter().chain(&p.inequalities).enumerate() {
        for &(i, c) in &e.terms {
            ai.push(r);
            aj.push(i);
            av.push(c);
        }
        b.push(-e.constant);
    }
    let amat = CscMatrix::new_from_triplets(n_eq + n_in, n, ai, aj, av);
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_eq > 0 {
        cones.push(ZeroConeT(n_eq));
    }
    if n_in > 0 {
        cones.push(NonnegativeConeT(n_in));
    }

    let cl_settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(settings.max_iter)
        .tol_feas(settings.tol)
        .tol_gap_abs(settings.tol)
        .tol_gap_rel(settings.tol)
        .max_threads(1)
        .build()
        .map_err(|e| Error::Solver(format!("bad solver settings: {e}")))?;
    let mut solver = DefaultSolver::new(&pmat, &q, &amat, &b, &cones, cl_settings)
        .map_err(|e| Error::Solver(format!("solver setup failed: {e}")))?;
    solver.solve();
    let sol = &solver.solution;

    let mut result = SolveResult {
        status: SolveStatus::NumericalFailure,
        x: Vec::new(),
        values: BTreeMap::new(),
        objective: f64::NAN,
        solve_time: Duration::ZERO,
        iterations: sol.iterations,
        max_violation: f64::NAN,
    };
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let viol = p.max_violation(&sol.x);
            result.max_violation = viol;
            if viol <= settings.accept_violation && sol.x.iter().all(|v| v.is_finite()) {
                result.status = SolveStatus::Optimal;
                result.objective = p.objective(&sol.x);
                for v in &p.vars {
                    let m = DMatrix::from_fn(v.rows, v.cols, |r, c| sol.x[v.at(r, c)]);
                    result.values.insert(v.name.clone(), m);
                }
                result.x = sol.x.clone();
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            result.status = SolveStatus::Infeasible;
        }
        _ => {}
    }
    result.solve_time = start.elapsed();
    Ok(result)
}

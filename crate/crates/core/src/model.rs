//! Plant, constraint data and offline terminal ingredients.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ocp::{self, MemoryEntry, SolverSettings};
use crate::polytope::{self, HPolytope, VertexSet};
use crate::slp::SystemResponse;

/// `x+ = A x + B u + w`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::dim("A must be square and non-empty"));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::dim(format!(
                "B is {}x{}, expected {} rows and at least one column",
                b.nrows(),
                b.ncols(),
                a.nrows()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w
    }

    /// `A + B K`.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * k
    }
}

/// Everything the optimal control problems need besides terminal ingredients.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub model: LtiModel,
    pub x_set: HPolytope,
    pub u_set: HPolytope,
    pub w_set: HPolytope,
    pub w_vertices: VertexSet,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub horizon: usize,
}

impl ProblemData {
    /// Validates dimensions, positive definiteness of the weights and the
    /// constraint sets. `W` only needs to be compact and contain the origin,
    /// so the disturbance-free case `W = {0}` is allowed.
    pub fn new(
        model: LtiModel,
        x_set: HPolytope,
        u_set: HPolytope,
        w_set: HPolytope,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let (n, m) = (model.n(), model.m());
        if x_set.dim() != n || w_set.dim() != n || u_set.dim() != m {
            return Err(Error::dim("constraint sets do not match the model dimensions"));
        }
        if q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(Error::dim("cost weights do not match the model dimensions"));
        }
        if horizon < 2 {
            return Err(Error::invalid("horizon must be at least 2"));
        }
        check_pd(&q, "Q")?;
        check_pd(&r, "R")?;
        let x_set = HPolytope::constraint_set(x_set.normals().clone(), x_set.offsets().clone())?;
        let u_set = HPolytope::constraint_set(u_set.normals().clone(), u_set.offsets().clone())?;
        if w_set.offsets().iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("W must contain the origin"));
        }
        let w_vertices = match w_set.as_box() {
            Some((lo, hi)) => VertexSet::box_corners(&lo, &hi)?,
            None if n == 2 => polytope::vertices_2d(&w_set)?,
            None => {
                return Err(Error::invalid(
                    "non-box disturbance sets are only supported in two dimensions",
                ))
            }
        };
        Ok(Self {
            model,
            x_set,
            u_set,
            w_set,
            w_vertices,
            q,
            r,
            horizon,
        })
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn m(&self) -> usize {
        self.model.m()
    }

    /// Same data with the disturbance set replaced.
    pub fn with_disturbance(&self, w_set: HPolytope) -> Result<Self> {
        Self::new(
            self.model.clone(),
            self.x_set.clone(),
            self.u_set.clone(),
            w_set,
            self.q.clone(),
            self.r.clone(),
            self.horizon,
        )
    }
}

fn check_pd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if (m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
        return Err(Error::invalid(format!("{name} must be symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::invalid(format!("{name} must be positive definite")));
    }
    Ok(())
}

/// Parameters for the invariant terminal set construction.
#[derive(Clone, Debug, PartialEq)]
pub struct MrpiOptions {
    /// Required contraction `A^s W ⊆ rho W`.
    pub rho: f64,
    /// Slack allowed in the invariance check.
    pub eps: f64,
    pub max_power: usize,
}

impl Default for MrpiOptions {
    fn default() -> Self {
        Self {
            rho: 0.1,
            eps: 1e-9,
            max_power: 200,
        }
    }
}

/// Terminal controller, cost and invariant set, plus the support values the
/// scaled-terminal-set conditions need.
#[derive(Clone, Debug)]
pub struct TerminalIngredients {
    pub k_f: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
    pub x_f: HPolytope,
    pub x_f_vertices: VertexSet,
    /// `h_{X_f}(H_x^T)` per state constraint row.
    pub h_xf_at_hx: DVector<f64>,
    /// `h_{K_f X_f}(H_u^T)` per input constraint row.
    pub h_kxf_at_hu: DVector<f64>,
    /// `h_{X_f}(A_cl^T H_f^T)` per terminal set row.
    pub h_acl_xf_at_hf: DVector<f64>,
}

impl TerminalIngredients {
    /// LQR gain and cost with the minimal-RPI outer bound as terminal set.
    pub fn synthesize(data: &ProblemData, opts: &MrpiOptions) -> Result<Self> {
        let (k_f, p) = lqr_terminal(data)?;
        let a_cl = data.model.closed_loop(&k_f);
        let x_f = mrpi_set(&a_cl, &data.w_set, &data.w_vertices, opts)?;
        Self::from_parts(data, k_f, p, x_f)
    }

    pub fn from_parts(data: &ProblemData, k_f: DMatrix<f64>, p: DMatrix<f64>, x_f: HPolytope) -> Result<Self> {
        let a_cl = data.model.closed_loop(&k_f);
        let x_f_vertices = match x_f.as_box() {
            Some((lo, hi)) => VertexSet::box_corners(&lo, &hi)?,
            None => polytope::vertices_2d(&x_f)?,
        };
        let h_xf_at_hx = polytope::support_rows(data.x_set.normals(), &x_f_vertices)?;
        let h_kxf_at_hu = polytope::support_rows(&(data.u_set.normals() * &k_f), &x_f_vertices)?;
        let h_acl_xf_at_hf = polytope::support_rows(&(x_f.normals() * &a_cl), &x_f_vertices)?;
        Ok(Self {
            k_f,
            p,
            a_cl,
            x_f,
            x_f_vertices,
            h_xf_at_hx,
            h_kxf_at_hu,
            h_acl_xf_at_hf,
        })
    }

    pub fn n_facets(&self) -> usize {
        self.x_f.n_constraints()
    }
}

const RICCATI_MAX_ITER: usize = 100_000;

/// Infinite-horizon LQR by Riccati value iteration. Returns `(K_f, P)` with
/// the convention `u = K_f x`.
pub fn lqr_terminal(data: &ProblemData) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    lqr(data.model.a(), data.model.b(), &data.q, &data.r)
}

pub fn lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITER {
        let next = riccati_step(a, b, q, r, &p)?;
        let delta = (&next - &p).abs().max();
        p = next;
        if delta <= 1e-14 * (1.0 + p.abs().max()) {
            let p_sym = (&p + p.transpose()) * 0.5;
            let k = lqr_gain(a, b, r, &p_sym)?;
            return Ok((k, p_sym));
        }
    }
    Err(Error::Synthesis(format!(
        "Riccati iteration did not converge in {RICCATI_MAX_ITER} steps"
    )))
}

fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let btpa = b.transpose() * p * a;
    let s = r + b.transpose() * p * b;
    let sol = s
        .cholesky()
        .ok_or_else(|| Error::Synthesis("R + B'PB is not positive definite".into()))?
        .solve(&btpa);
    let next = q + a.transpose() * p * a - btpa.transpose() * sol;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Synthesis("Riccati iteration diverged".into()));
    }
    Ok(next)
}

fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = r + b.transpose() * p * b;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Synthesis("R + B'PB is not positive definite".into()))?;
    Ok(-chol.solve(&(b.transpose() * p * a)))
}

/// Max-abs residual of the discrete algebraic Riccati equation at `p`.
pub fn riccati_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    match riccati_step(a, b, q, r, p) {
        Ok(next) => (next - p).abs().max(),
        Err(_) => f64::INFINITY,
    }
}

/// Checks `A_cl' P A_cl - P + Q + K' R K ⪯ tol I`.
pub fn verify_lyapunov(
    model: &LtiModel,
    p: &DMatrix<f64>,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
) -> bool {
    let a_cl = model.closed_loop(k);
    let m = a_cl.transpose() * p * &a_cl - p + q + k.transpose() * r * k;
    let sym = (&m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.max() <= tol
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Outer bound of the minimal RPI set of `x+ = A_cl x + w`: with `s` the
/// smallest power such that `A_cl^s W ⊆ a W` for some `a <= rho`, returns
/// `(1 - a)^{-1} (W ⊕ A_cl W ⊕ .. ⊕ A_cl^{s-1} W)`.
///
/// The halfspace form uses the facet normals of the Minkowski sum (edge
/// normals of every `A_cl^j W`), so the representation is exact in 2D. The
/// result is checked for invariance before it is returned.
pub fn mrpi_set(
    a_cl: &DMatrix<f64>,
    w_set: &HPolytope,
    w_vertices: &VertexSet,
    opts: &MrpiOptions,
) -> Result<HPolytope> {
    let n = a_cl.nrows();
    if n != 2 {
        return Err(Error::invalid(
            "invariant set computation is implemented for 2D systems",
        ));
    }
    if !(opts.rho > 0.0 && opts.rho < 1.0) || !(opts.eps > 0.0) {
        return Err(Error::invalid("mRPI requires 0 < rho < 1 and eps > 0"));
    }
    let radius = spectral_radius(a_cl);
    if radius >= 1.0 {
        return Err(Error::Synthesis(format!(
            "closed loop is not stable (spectral radius {radius})"
        )));
    }

    if w_vertices.iter().all(|v| v.iter().all(|c| *c == 0.0)) {
        let id = DMatrix::identity(n, n);
        let mut h = DMatrix::zeros(2 * n, n);
        h.view_mut((0, 0), (n, n)).copy_from(&id);
        h.view_mut((n, 0), (n, n)).copy_from(&(-id));
        return HPolytope::new(h, DVector::zeros(2 * n));
    }

    // smallest s with A^s W ⊆ a W, a <= rho
    let h_w = w_set.normals();
    let mut power = DMatrix::identity(n, n);
    let mut powers = Vec::new();
    let mut contraction = None;
    for s in 1..=opts.max_power {
        powers.push(power.clone());
        power = a_cl * &power;
        let mut a = 0.0f64;
        for r in 0..w_set.n_constraints() {
            let eta = h_w.row(r).transpose();
            let sup = polytope::mapped_support(&power, w_vertices, &eta)?;
            let off = w_set.offsets()[r];
            if off > 0.0 {
                a = a.max(sup / off);
            } else if sup > 0.0 {
                a = f64::INFINITY;
            }
        }
        if a <= opts.rho {
            contraction = Some((s, a.max(0.0)));
            break;
        }
    }
    let Some((_s, a)) = contraction else {
        return Err(Error::Synthesis(format!(
            "A_cl^s W ⊆ rho W not reached within {} powers; increase rho",
            opts.max_power
        )));
    };

    // facet normals of the Minkowski sum: edge normals of each A^j W
    let w_poly = polytope::convex_hull_2d(w_vertices.as_slice())?;
    let wv = w_poly.as_slice();
    let mut normals: Vec<DVector<f64>> = Vec::new();
    for pw in &powers {
        for i in 0..wv.len() {
            let d = pw * (&wv[(i + 1) % wv.len()] - &wv[i]);
            let norm = d.norm();
            if norm <= 1e-12 {
                continue;
            }
            let nrm = DVector::from_vec(vec![d[1] / norm, -d[0] / norm]);
            for cand in [nrm.clone(), -nrm] {
                if !normals.iter().any(|e| (e - &cand).norm() < 1e-9) {
                    normals.push(cand);
                }
            }
        }
    }
    if normals.len() < 3 {
        for i in 0..n {
            for sgn in [1.0, -1.0] {
                let mut e = DVector::zeros(n);
                e[i] = sgn;
                if !normals.iter().any(|x| (x - &e).norm() < 1e-9) {
                    normals.push(e);
                }
            }
        }
    }

    let inflate = 1.0 / (1.0 - a);
    let mut h_mat = DMatrix::zeros(normals.len(), n);
    let mut h_vec = DVector::zeros(normals.len());
    for (r, eta) in normals.iter().enumerate() {
        h_mat.set_row(r, &eta.transpose());
        let mut off = 0.0;
        for pw in &powers {
            off += polytope::mapped_support(pw, w_vertices, eta)?;
        }
        h_vec[r] = inflate * off;
    }
    let raw = HPolytope::new(h_mat, h_vec)?;
    let x_f = polytope::minimal_2d(&raw)?;

    // (A_cl X_f) ⊕ W ⊆ X_f
    let verts = polytope::vertices_2d(&x_f)?;
    for r in 0..x_f.n_constraints() {
        let eta = x_f.normals().row(r).transpose();
        let lhs = polytope::mapped_support(a_cl, &verts, &eta)? + polytope::support(w_vertices, &eta)?;
        if lhs > x_f.offsets()[r] + opts.eps {
            return Err(Error::Synthesis(format!(
                "terminal set failed the invariance check on row {r} ({lhs} > {})",
                x_f.offsets()[r]
            )));
        }
    }
    Ok(x_f)
}

/// Offline memory entry from the fixed response of the tube gain `k`:
/// `Phi_x^j = (A + B K)^{j-1}`, `Phi_u^j = K (A + B K)^{j-1}`. The terminal
/// scaling is the largest admissible one for that response.
pub fn drs_tightenings(
    data: &ProblemData,
    terminal: &TerminalIngredients,
    k: &DMatrix<f64>,
    birth_step: usize,
    settings: &SolverSettings,
) -> Result<MemoryEntry> {
    let (n, m) = (data.n(), data.m());
    if k.shape() != (m, n) {
        return Err(Error::dim(format!("tube gain must be {m}x{n}")));
    }
    let a_k = data.model.closed_loop(k);
    let mut phi_x = Vec::with_capacity(data.horizon);
    let mut phi_u = Vec::with_capacity(data.horizon);
    let mut power = DMatrix::identity(n, n);
    for _ in 0..data.horizon {
        phi_u.push(k * &power);
        phi_x.push(power.clone());
        power = &a_k * &power;
    }
    let response = SystemResponse::new(phi_x, phi_u)?;
    ocp::certify_fixed_response(data, terminal, response, birth_step, settings)
}

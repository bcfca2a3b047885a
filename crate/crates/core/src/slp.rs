//! Toeplitz error-system responses and the tube tightenings they induce.
//!
//! Only the first block column of each block-lower-triangular response is
//! stored: `phi_x[j - 1]` is `Phi_x^j` and `phi_u[j - 1]` is `Phi_u^j` for
//! `j = 1..=N`. The state tube `F_i^x = ⊕_{j=1}^i Phi_x^j W` is kept as its
//! support values along the state constraint normals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::LtiModel;
use crate::polytope::{self, VertexSet};

/// Residual tolerance used when validating a response.
pub const RESPONSE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SystemResponse {
    pub phi_x: Vec<DMatrix<f64>>,
    pub phi_u: Vec<DMatrix<f64>>,
}

impl SystemResponse {
    pub fn new(phi_x: Vec<DMatrix<f64>>, phi_u: Vec<DMatrix<f64>>) -> Result<Self> {
        if phi_x.is_empty() || phi_x.len() != phi_u.len() {
            return Err(Error::dim(
                "response needs the same non-zero number of state and input blocks",
            ));
        }
        let n = phi_x[0].nrows();
        let m = phi_u[0].nrows();
        if phi_x.iter().any(|b| b.shape() != (n, n)) || phi_u.iter().any(|b| b.shape() != (m, n)) {
            return Err(Error::dim("response blocks have inconsistent shapes"));
        }
        Ok(Self { phi_x, phi_u })
    }

    /// Builds `Phi_x` from `Phi_u` through `Phi_x^1 = I`,
    /// `Phi_x^{i+1} = A Phi_x^i + B Phi_u^i`.
    pub fn from_input_response(model: &LtiModel, phi_u: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = model.n();
        if phi_u.iter().any(|b| b.shape() != (model.m(), n)) {
            return Err(Error::dim("input response blocks must be m x n"));
        }
        let mut phi_x = Vec::with_capacity(phi_u.len());
        let mut cur = DMatrix::identity(n, n);
        for pu in &phi_u {
            phi_x.push(cur.clone());
            cur = model.a() * &cur + model.b() * pu;
        }
        Self::new(phi_x, phi_u)
    }

    /// Response of the static tube controller `u = K x`.
    pub fn from_gain(model: &LtiModel, k: &DMatrix<f64>, horizon: usize) -> Self {
        let a_k = model.closed_loop(k);
        let mut phi_x = Vec::with_capacity(horizon);
        let mut phi_u = Vec::with_capacity(horizon);
        let mut power = DMatrix::identity(model.n(), model.n());
        for _ in 0..horizon {
            phi_u.push(k * &power);
            phi_x.push(power.clone());
            power = &a_k * &power;
        }
        Self { phi_x, phi_u }
    }

    pub fn horizon(&self) -> usize {
        self.phi_x.len()
    }

    /// `theta * self + (1 - theta) * other`, blockwise.
    pub fn blend(&self, other: &SystemResponse, theta: f64) -> Result<SystemResponse> {
        if self.horizon() != other.horizon() {
            return Err(Error::dim("responses have different horizons"));
        }
        let mix = |a: &[DMatrix<f64>], b: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
            a.iter().zip(b).map(|(x, y)| x * theta + y * (1.0 - theta)).collect()
        };
        SystemResponse::new(mix(&self.phi_x, &other.phi_x), mix(&self.phi_u, &other.phi_u))
    }
}

/// True iff `Phi_x^1 = I` and `Phi_x^{i+1} = A Phi_x^i + B Phi_u^i` hold
/// blockwise within `tol` (max-abs).
pub fn validate_response(sr: &SystemResponse, model: &LtiModel, tol: f64) -> bool {
    let n = model.n();
    if sr.phi_x.iter().any(|b| b.shape() != (n, n)) || sr.phi_u.iter().any(|b| b.shape() != (model.m(), n)) {
        return false;
    }
    if (&sr.phi_x[0] - DMatrix::identity(n, n)).abs().max() > tol {
        return false;
    }
    (0..sr.horizon() - 1).all(|i| {
        let next = model.a() * &sr.phi_x[i] + model.b() * &sr.phi_u[i];
        (next - &sr.phi_x[i + 1]).abs().max() <= tol
    })
}

/// `Gamma = A Phi_x^N + B Phi_u^N`.
pub fn gamma_of(sr: &SystemResponse, model: &LtiModel) -> DMatrix<f64> {
    let last = sr.horizon() - 1;
    model.a() * &sr.phi_x[last] + model.b() * &sr.phi_u[last]
}

/// Tightening vectors `t_x[i]`, `t_u[i]` for `i = 0..=N` plus `Gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeSequence {
    pub t_x: Vec<DVector<f64>>,
    pub t_u: Vec<DVector<f64>>,
    pub gamma: DMatrix<f64>,
}

impl TubeSequence {
    pub fn horizon(&self) -> usize {
        self.t_x.len() - 1
    }

    /// Whether both sequences start at zero and never decrease.
    pub fn is_monotone(&self) -> bool {
        let starts_zero = self.t_x[0].iter().chain(self.t_u[0].iter()).all(|v| *v == 0.0);
        let mono = |t: &[DVector<f64>]| t.windows(2).all(|w| w[0].iter().zip(w[1].iter()).all(|(a, b)| a <= b));
        starts_zero && mono(&self.t_x) && mono(&self.t_u)
    }

    /// Tube polygon `{x | H x <= t_x[i]}` in the plane.
    pub fn state_polygon(&self, h_x: &DMatrix<f64>, i: usize) -> Result<VertexSet> {
        let p = polytope::HPolytope::new(h_x.clone(), self.t_x[i].clone())?;
        polytope::vertices_2d(&p)
    }
}

/// Per-step support increment `h_W((H Phi^j)^T)` for each row of `h`.
pub fn step_increment(h: &DMatrix<f64>, phi_j: &DMatrix<f64>, w_vertices: &VertexSet) -> Result<DVector<f64>> {
    polytope::support_rows(&(h * phi_j), w_vertices)
}

/// Tightenings `t[i] = sum_{j=1}^i h_{Phi^j W}(H^T)`, accumulated step by
/// step so that `t[i+1] = t[i] + increment(i+1)` holds exactly.
pub fn tube_tightenings(
    sr: &SystemResponse,
    model: &LtiModel,
    w_vertices: &VertexSet,
    h_x: &DMatrix<f64>,
    h_u: &DMatrix<f64>,
) -> Result<TubeSequence> {
    if h_x.ncols() != model.n() || h_u.ncols() != model.m() || w_vertices.dim() != model.n() {
        return Err(Error::dim("constraint normals or disturbance do not match the model"));
    }
    let mut t_x = vec![DVector::zeros(h_x.nrows())];
    let mut t_u = vec![DVector::zeros(h_u.nrows())];
    for j in 0..sr.horizon() {
        let inc_x = step_increment(h_x, &sr.phi_x[j], w_vertices)?;
        let inc_u = step_increment(h_u, &sr.phi_u[j], w_vertices)?;
        t_x.push(&t_x[j] + inc_x);
        t_u.push(&t_u[j] + inc_u);
    }
    Ok(TubeSequence {
        t_x,
        t_u,
        gamma: gamma_of(sr, model),
    })
}

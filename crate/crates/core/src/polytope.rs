//! Halfspace and vertex polytopes plus the set algebra built on support
//! functions: Pontryagin tightening, scaling, membership and the linear
//! containment certificate used for scaled terminal sets.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default tolerance for membership and certificate checks.
pub const DEFAULT_TOL: f64 = 1e-7;

/// Convex polytope `{x | H x <= h}`.
#[derive(Clone, Debug, PartialEq)]
pub struct HPolytope {
    h_mat: DMatrix<f64>,
    h_vec: DVector<f64>,
}

/// Finite generator representation of a polytope.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexSet {
    vertices: Vec<DVector<f64>>,
}

/// Result of a Pontryagin tightening. An empty result is a legitimate state,
/// not an error.
#[derive(Clone, Debug)]
pub struct Tightened {
    pub set: HPolytope,
    pub empty: bool,
}

impl HPolytope {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() {
            return Err(Error::dim(format!(
                "H has {} rows but h has {} entries",
                h_mat.nrows(),
                h_vec.len()
            )));
        }
        if h_mat.ncols() == 0 {
            return Err(Error::invalid("polytope in zero dimensions"));
        }
        for (r, row) in h_mat.row_iter().enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::invalid(format!("row {r} of H is zero")));
            }
        }
        if h_mat.iter().chain(h_vec.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite polytope data"));
        }
        Ok(Self { h_mat, h_vec })
    }

    /// Like [`HPolytope::new`] but also enforces the constraint-set
    /// requirements: enough halfspaces for compactness, strictly positive
    /// offsets (origin in the interior), and boundedness in 1D/2D.
    pub fn constraint_set(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        let p = Self::new(h_mat, h_vec)?;
        if p.n_constraints() < p.dim() + 1 {
            return Err(Error::invalid(format!(
                "{} halfspaces cannot bound a set in {} dimensions",
                p.n_constraints(),
                p.dim()
            )));
        }
        if p.h_vec.iter().any(|v| *v <= 0.0) {
            return Err(Error::invalid("constraint set must contain the origin in its interior"));
        }
        if p.dim() <= 2 {
            p.check_bounded()?;
        }
        Ok(p)
    }

    /// Axis-aligned box `lower <= x <= upper`, rows ordered `+e_0, .., +e_{p-1}, -e_0, ..`.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::dim("box bounds must be non-empty and of equal length"));
        }
        if lower.iter().zip(upper).any(|(l, u)| l > u) {
            return Err(Error::invalid("box lower bound exceeds upper bound"));
        }
        let p = lower.len();
        let mut h_mat = DMatrix::zeros(2 * p, p);
        let mut h_vec = DVector::zeros(2 * p);
        for i in 0..p {
            h_mat[(i, i)] = 1.0;
            h_vec[i] = upper[i];
            h_mat[(p + i, i)] = -1.0;
            h_vec[p + i] = -lower[i];
        }
        Self::new(h_mat, h_vec)
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn n_constraints(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.h_mat
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.h_vec
    }

    /// Same normals, new offsets.
    pub fn with_offsets(&self, h_vec: DVector<f64>) -> Result<Self> {
        Self::new(self.h_mat.clone(), h_vec)
    }

    /// Returns `(lower, upper)` when every row is a positive multiple of some
    /// `±e_i` and each coordinate is bounded on both sides.
    pub fn as_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let p = self.dim();
        let mut lower = vec![f64::NEG_INFINITY; p];
        let mut upper = vec![f64::INFINITY; p];
        for (r, row) in self.h_mat.row_iter().enumerate() {
            let nz: Vec<usize> = (0..p).filter(|&c| row[c] != 0.0).collect();
            if nz.len() != 1 {
                return None;
            }
            let c = nz[0];
            let bound = self.h_vec[r] / row[c];
            if row[c] > 0.0 {
                upper[c] = upper[c].min(bound);
            } else {
                lower[c] = lower[c].max(bound);
            }
        }
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return None;
        }
        Some((lower, upper))
    }

    /// True iff `H x <= h + tol` componentwise.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        debug_assert_eq!(x.len(), self.dim());
        let hx = &self.h_mat * x;
        hx.iter().zip(self.h_vec.iter()).all(|(a, b)| *a <= *b + tol)
    }

    /// Largest constraint violation `max_r (H x - h)_r` (negative inside).
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let hx = &self.h_mat * x - &self.h_vec;
        hx.max()
    }

    fn check_bounded(&self) -> Result<()> {
        match self.dim() {
            1 => {
                let pos = self.h_mat.column(0).iter().any(|v| *v > 0.0);
                let neg = self.h_mat.column(0).iter().any(|v| *v < 0.0);
                if pos && neg {
                    Ok(())
                } else {
                    Err(Error::Unbounded)
                }
            }
            2 => {
                let mut angles: Vec<f64> = self.h_mat.row_iter().map(|r| r[1].atan2(r[0])).collect();
                angles.sort_by(f64::total_cmp);
                let mut max_gap = angles[0] + 2.0 * std::f64::consts::PI - angles[angles.len() - 1];
                for w in angles.windows(2) {
                    max_gap = max_gap.max(w[1] - w[0]);
                }
                if max_gap < std::f64::consts::PI - 1e-12 {
                    Ok(())
                } else {
                    Err(Error::Unbounded)
                }
            }
            _ => Ok(()),
        }
    }

    /// Emptiness test: exact interval/polygon arithmetic in one and two
    /// dimensions, a feasibility LP otherwise.
    pub fn is_empty(&self) -> bool {
        match self.dim() {
            1 => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for r in 0..self.n_constraints() {
                    let a = self.h_mat[(r, 0)];
                    let b = self.h_vec[r];
                    if a > 0.0 {
                        hi = hi.min(b / a);
                    } else {
                        lo = lo.max(b / a);
                    }
                }
                lo > hi + 1e-12 * (1.0 + lo.abs().max(hi.abs()).min(1e12))
            }
            2 => match facet_walk(self) {
                Ok(v) => v.is_empty(),
                // unbounded sets are handled by the LP route
                Err(_) => lp_infeasible(self),
            },
            _ => lp_infeasible(self),
        }
    }
}

impl VertexSet {
    pub fn new(vertices: Vec<DVector<f64>>) -> Result<Self> {
        let first = vertices.first().ok_or_else(|| Error::invalid("vertex set is empty"))?;
        let p = first.len();
        if p == 0 {
            return Err(Error::invalid("vertices in zero dimensions"));
        }
        if vertices.iter().any(|v| v.len() != p) {
            return Err(Error::dim("vertices have differing dimensions"));
        }
        if vertices.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid("non-finite vertex"));
        }
        Ok(Self { vertices })
    }

    /// The singleton `{0}`.
    pub fn origin(p: usize) -> Self {
        Self {
            vertices: vec![DVector::zeros(p)],
        }
    }

    /// All `2^p` corners of a box.
    pub fn box_corners(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("box bounds of unequal length"));
        }
        let p = lower.len();
        let mut out: Vec<DVector<f64>> = Vec::with_capacity(1 << p);
        for mask in 0..(1usize << p) {
            let v = DVector::from_fn(p, |i, _| if mask >> i & 1 == 1 { upper[i] } else { lower[i] });
            if !out.iter().any(|o| o == &v) {
                out.push(v);
            }
        }
        Self::new(out)
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.vertices.iter()
    }

    pub fn as_slice(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    /// Image of every vertex under `m`.
    pub fn mapped(&self, m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() != self.dim() {
            return Err(Error::dim("map does not act on the vertex space"));
        }
        Self::new(self.vertices.iter().map(|v| m * v).collect())
    }
}

/// Support function `max_v eta^T v` over the generators of `v_set`.
pub fn support(v_set: &VertexSet, eta: &DVector<f64>) -> Result<f64> {
    if eta.len() != v_set.dim() {
        return Err(Error::dim(format!(
            "direction has {} entries, vertices live in R^{}",
            eta.len(),
            v_set.dim()
        )));
    }
    if eta.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite direction"));
    }
    Ok(v_set.iter().map(|v| eta.dot(v)).fold(f64::NEG_INFINITY, f64::max))
}

/// Support of the linear image `M Z` evaluated at `eta`, i.e. `h_Z(M^T eta)`.
pub fn mapped_support(m: &DMatrix<f64>, v_set: &VertexSet, eta: &DVector<f64>) -> Result<f64> {
    if m.nrows() != eta.len() || m.ncols() != v_set.dim() {
        return Err(Error::dim(format!(
            "map is {}x{}, direction has {} entries and vertices live in R^{}",
            m.nrows(),
            m.ncols(),
            eta.len(),
            v_set.dim()
        )));
    }
    support(v_set, &(m.transpose() * eta))
}

/// Stacked supports `h_Z(H_r^T)` for every row `r` of `h_mat`.
pub fn support_rows(h_mat: &DMatrix<f64>, v_set: &VertexSet) -> Result<DVector<f64>> {
    if h_mat.ncols() != v_set.dim() {
        return Err(Error::dim("normals and vertices differ in dimension"));
    }
    let mut out = DVector::zeros(h_mat.nrows());
    for r in 0..h_mat.nrows() {
        let eta = h_mat.row(r).transpose();
        out[r] = v_set.iter().map(|v| eta.dot(v)).fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(out)
}

/// `P ⊖ conv(V_S)`: offsets reduced by the support of `S` along each normal.
pub fn pontryagin_tighten(p: &HPolytope, s: &VertexSet) -> Result<Tightened> {
    if p.dim() != s.dim() {
        return Err(Error::dim("polytope and subtrahend differ in dimension"));
    }
    let offsets = p.offsets() - support_rows(p.normals(), s)?;
    let set = p.with_offsets(offsets)?;
    let empty = set.is_empty();
    Ok(Tightened { set, empty })
}

/// `alpha P`, for `alpha >= 0`.
pub fn scale(p: &HPolytope, alpha: f64) -> Result<HPolytope> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!(
            "scaling factor {alpha} must be finite and >= 0"
        )));
    }
    p.with_offsets(p.offsets() * alpha)
}

/// Counterclockwise vertices of a bounded 2D polytope with redundant
/// halfspaces dropped.
pub fn vertices_2d(p: &HPolytope) -> Result<VertexSet> {
    let verts = facet_walk(p)?;
    if verts.is_empty() {
        return Err(Error::Empty);
    }
    VertexSet::new(verts)
}

/// Indices of the rows of a bounded 2D polytope that support an edge of
/// positive length.
pub fn irredundant_rows_2d(p: &HPolytope) -> Result<Vec<usize>> {
    if p.dim() != 2 {
        return Err(Error::invalid("irredundant_rows_2d needs a 2D polytope"));
    }
    p.check_bounded()?;
    let scale = length_scale(p);
    let mut rows = Vec::new();
    for r in sorted_by_angle(p) {
        if let Some((lo, hi)) = edge_interval(p, r) {
            let norm = p.h_mat.row(r).norm();
            if (hi - lo) * norm > 1e-9 * scale {
                rows.push(r);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty);
    }
    Ok(rows)
}

/// Copy of a 2D polytope with redundant rows removed, normals scaled to unit
/// length and sorted by angle.
pub fn minimal_2d(p: &HPolytope) -> Result<HPolytope> {
    let rows = irredundant_rows_2d(p)?;
    let mut h_mat = DMatrix::zeros(rows.len(), 2);
    let mut h_vec = DVector::zeros(rows.len());
    for (i, &r) in rows.iter().enumerate() {
        let norm = p.h_mat.row(r).norm();
        h_mat.set_row(i, &(p.h_mat.row(r) / norm));
        h_vec[i] = p.h_vec[r] / norm;
    }
    HPolytope::new(h_mat, h_vec)
}

/// Counterclockwise convex hull of a planar point cloud (monotone chain).
/// Collinear points are dropped; a degenerate cloud yields one or two points.
pub fn convex_hull_2d(points: &[DVector<f64>]) -> Result<VertexSet> {
    if points.iter().any(|p| p.len() != 2) {
        return Err(Error::dim("convex_hull_2d needs planar points"));
    }
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() <= 2 {
        return VertexSet::new(pts.iter().map(|&(x, y)| DVector::from_vec(vec![x, y])).collect());
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let extent = pts
        .iter()
        .fold(0.0f64, |m, p| m.max(p.0.abs()).max(p.1.abs()))
        .max(1e-300);
    let eps = 1e-14 * extent * extent;
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= eps {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= eps {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    VertexSet::new(lower.into_iter().map(|(x, y)| DVector::from_vec(vec![x, y])).collect())
}

/// Halfspace form of the convex hull of planar points. Needs a hull with at
/// least three vertices.
pub fn hull_halfspaces_2d(points: &[DVector<f64>]) -> Result<HPolytope> {
    let hull = convex_hull_2d(points)?;
    if hull.len() < 3 {
        return Err(Error::invalid("hull is degenerate, no halfspace form"));
    }
    let n = hull.len();
    let mut h_mat = DMatrix::zeros(n, 2);
    let mut h_vec = DVector::zeros(n);
    for i in 0..n {
        let a = &hull.as_slice()[i];
        let b = &hull.as_slice()[(i + 1) % n];
        let d = b - a;
        let normal = DVector::from_vec(vec![d[1], -d[0]]).normalize();
        h_vec[i] = normal.dot(a);
        h_mat.set_row(i, &normal.transpose());
    }
    HPolytope::new(h_mat, h_vec)
}

/// Checks the sufficient conditions for `alpha A X ⊆ beta Y ⊖ Gamma Z`:
/// `Lambda >= 0`, `Lambda H_x = alpha H_y A` and
/// `Lambda h_x <= beta h_y - h_Z(Gamma^T H_y^T)`, each up to `tol`
/// (the equality is checked entrywise).
#[allow(clippy::too_many_arguments)]
pub fn check_lemma1(
    lambda: &DMatrix<f64>,
    alpha: f64,
    beta: f64,
    a: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    x: &HPolytope,
    y: &HPolytope,
    z_vertices: &VertexSet,
    tol: f64,
) -> Result<bool> {
    let p = x.dim();
    if y.dim() != p || a.shape() != (p, p) || gamma.shape() != (p, p) || z_vertices.dim() != p {
        return Err(Error::dim("containment certificate operands have inconsistent dimensions"));
    }
    if lambda.shape() != (y.n_constraints(), x.n_constraints()) {
        return Err(Error::dim(format!(
            "Lambda is {}x{}, expected {}x{}",
            lambda.nrows(),
            lambda.ncols(),
            y.n_constraints(),
            x.n_constraints()
        )));
    }
    if lambda.iter().any(|v| *v < -tol) {
        return Ok(false);
    }
    let eq_res = lambda * x.normals() - y.normals() * a * alpha;
    if eq_res.iter().any(|v| v.abs() > tol) {
        return Ok(false);
    }
    let hz = support_rows(&(y.normals() * gamma), z_vertices)?;
    let lhs = lambda * x.offsets();
    let rhs = y.offsets() * beta - hz;
    Ok(lhs.iter().zip(rhs.iter()).all(|(l, r)| *l <= *r + tol))
}

fn length_scale(p: &HPolytope) -> f64 {
    p.h_vec
        .iter()
        .zip(p.h_mat.row_iter())
        .map(|(h, row)| h.abs() / row.norm())
        .fold(1.0, f64::max)
}

fn sorted_by_angle(p: &HPolytope) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.n_constraints()).collect();
    idx.sort_by(|&a, &b| {
        let ta = p.h_mat[(a, 1)].atan2(p.h_mat[(a, 0)]);
        let tb = p.h_mat[(b, 1)].atan2(p.h_mat[(b, 0)]);
        ta.total_cmp(&tb)
    });
    idx
}

/// Parameter interval of row `r`'s boundary line that satisfies all other
/// rows, parameterised by `x = p0 + t d` with `d` the counterclockwise
/// tangent. `None` when the interval is empty.
fn edge_interval(p: &HPolytope, r: usize) -> Option<(f64, f64)> {
    let n = p.h_mat.row(r).transpose();
    let nn = n.norm_squared();
    let p0 = &n * (p.h_vec[r] / nn);
    let d = DVector::from_vec(vec![-n[1], n[0]]);
    let scale = length_scale(p);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for s in 0..p.n_constraints() {
        if s == r {
            continue;
        }
        let ns = p.h_mat.row(s).transpose();
        let a = ns.dot(&d);
        let b = p.h_vec[s] - ns.dot(&p0);
        let tol = 1e-12 * ns.norm() * scale;
        if a.abs() <= 1e-12 * ns.norm() * d.norm() {
            if b < -tol {
                return None;
            }
        } else if a > 0.0 {
            hi = hi.min(b / a);
        } else {
            lo = lo.max(b / a);
        }
    }
    if lo <= hi {
        Some((lo, hi))
    } else if lo - hi <= 1e-12 * scale / d.norm() {
        Some((lo, lo))
    } else {
        None
    }
}

fn facet_walk(p: &HPolytope) -> Result<Vec<DVector<f64>>> {
    if p.dim() != 2 {
        return Err(Error::invalid("vertex enumeration is only available in 2D"));
    }
    p.check_bounded()?;
    let scale = length_scale(p);
    let mut out: Vec<DVector<f64>> = Vec::new();
    for r in sorted_by_angle(p) {
        let Some((lo, _)) = edge_interval(p, r) else {
            continue;
        };
        let n = p.h_mat.row(r).transpose();
        let p0 = &n * (p.h_vec[r] / n.norm_squared());
        let d = DVector::from_vec(vec![-n[1], n[0]]);
        let v = p0 + d * lo;
        if out.last().is_none_or(|last| (last - &v).norm() > 1e-10 * scale) {
            out.push(v);
        }
    }
    while out.len() > 1 && (&out[0] - out.last().unwrap()).norm() <= 1e-10 * scale {
        out.pop();
    }
    Ok(out)
}

fn lp_infeasible(p: &HPolytope) -> bool {
    use clarabel::algebra::CscMatrix;
    use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus};

    let (m, n) = p.h_mat.shape();
    let a = CscMatrix::new_from_triplets(
        m,
        n,
        (0..m).flat_map(|r| std::iter::repeat_n(r, n)).collect(),
        (0..m).flat_map(|_| 0..n).collect(),
        (0..m)
            .flat_map(|r| (0..n).map(move |c| (r, c)))
            .map(|(r, c)| p.h_mat[(r, c)])
            .collect(),
    );
    let pz = CscMatrix::zeros((n, n));
    let q = vec![0.0; n];
    let b: Vec<f64> = p.h_vec.iter().copied().collect();
    let settings = DefaultSettingsBuilder::default().verbose(false).build().unwrap();
    let Ok(mut solver) = DefaultSolver::new(&pz, &q, &a, &b, &[NonnegativeConeT(m)], settings) else {
        return false;
    };
    solver.solve();
    matches!(
        solver.solution.status,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn w_box() -> VertexSet {
        VertexSet::box_corners(&[-0.1, -0.1], &[0.1, 0.1]).unwrap()
    }

    fn a_example() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.05, 0.25, 0.0, 1.0])
    }

    #[test]
    fn box_support() {
        assert!((support(&w_box(), &v2(1.0, 1.0)).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(support(&w_box(), &v2(0.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn empty_vertex_set_rejected() {
        assert!(matches!(VertexSet::new(vec![]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn support_dimension_mismatch() {
        let eta = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(matches!(support(&w_box(), &eta), Err(Error::Dimension(_))));
    }

    #[test]
    fn mapped_support_cases() {
        let eta = v2(0.3, -0.7);
        let id = DMatrix::identity(2, 2);
        assert_eq!(
            mapped_support(&id, &w_box(), &eta).unwrap(),
            support(&w_box(), &eta).unwrap()
        );
        assert_eq!(mapped_support(&DMatrix::zeros(2, 2), &w_box(), &eta).unwrap(), 0.0);
        // vertices (±0.1, ±0.1) mapped by A, first coordinate: 1.05*0.1 + 0.25*0.1
        let val = mapped_support(&a_example(), &w_box(), &v2(1.0, 0.0)).unwrap();
        assert!((val - 0.13).abs() < 1e-15);
        assert!(mapped_support(&DMatrix::zeros(3, 2), &w_box(), &eta).is_err());
    }

    #[test]
    fn tighten_example_box() {
        let x = HPolytope::from_box(&[-1.5, -1.5], &[0.5, 1.5]).unwrap();
        let t = pontryagin_tighten(&x, &w_box()).unwrap();
        assert!(!t.empty);
        let (lo, hi) = t.set.as_box().unwrap();
        for (a, b) in lo.iter().zip([-1.4, -1.4]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in hi.iter().zip([0.4, 1.4]) {
            assert!((a - b).abs() < 1e-12);
        }
        let same = pontryagin_tighten(&x, &VertexSet::origin(2)).unwrap();
        assert_eq!(same.set, x);
    }

    #[test]
    fn tighten_flags_emptiness() {
        let x = HPolytope::from_box(&[-0.05, -1.0], &[0.05, 1.0]).unwrap();
        let t = pontryagin_tighten(&x, &w_box()).unwrap();
        assert!(t.empty);
    }

    #[test]
    fn scale_cases() {
        let unit = HPolytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(scale(&unit, 1.0).unwrap(), unit);
        let half = scale(&unit, 0.5).unwrap();
        assert_eq!(half.as_box().unwrap(), (vec![-0.5, -0.5], vec![0.5, 0.5]));
        let point = scale(&unit, 0.0).unwrap();
        let v = vertices_2d(&point).unwrap();
        assert_eq!(v.len(), 1);
        assert!(v.as_slice()[0].norm() < 1e-15);
        assert!(scale(&unit, -0.1).is_err());
    }

    #[test]
    fn contains_cases() {
        let unit = HPolytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert!(unit.contains(&v2(0.0, 0.0), 0.0));
        assert!(unit.contains(&v2(1.0, -1.0), 0.0));
        let tol = 1e-7;
        assert!(!unit.contains(&v2(1.0 + 2.0 * tol, 0.0), tol));
    }

    #[test]
    fn vertices_of_box_and_triangle() {
        let unit = HPolytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let v = vertices_2d(&unit).unwrap();
        assert_eq!(v.len(), 4);
        for corner in [v2(1.0, 1.0), v2(-1.0, 1.0), v2(-1.0, -1.0), v2(1.0, -1.0)] {
            assert!(v.iter().any(|p| (p - &corner).norm() < 1e-12));
        }
        assert!(signed_area(&v) > 0.0);

        let tri = HPolytope::new(
            DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
            DVector::from_vec(vec![0.0, 0.0, 1.0]),
        )
        .unwrap();
        assert_eq!(vertices_2d(&tri).unwrap().len(), 3);
    }

    #[test]
    fn vertices_error_paths() {
        let half = HPolytope::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        assert!(matches!(vertices_2d(&half), Err(Error::Unbounded)));
        let empty = HPolytope::from_box(&[0.0, 0.0], &[1.0, 1.0])
            .unwrap()
            .with_offsets(DVector::from_vec(vec![1.0, 1.0, -2.0, 0.0]))
            .unwrap();
        assert!(matches!(vertices_2d(&empty), Err(Error::Empty)));
    }

    #[test]
    fn redundant_rows_dropped() {
        let p = HPolytope::new(
            DMatrix::from_row_slice(5, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 5.0]),
        )
        .unwrap();
        assert_eq!(irredundant_rows_2d(&p).unwrap().len(), 4);
        assert_eq!(minimal_2d(&p).unwrap().n_constraints(), 4);
    }

    #[test]
    fn constraint_set_validation() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(HPolytope::constraint_set(h, DVector::from_vec(vec![1.0, 1.0])).is_err());
        let b = HPolytope::from_box(&[0.0, -1.0], &[1.0, 1.0]).unwrap();
        assert!(HPolytope::constraint_set(b.normals().clone(), b.offsets().clone()).is_err());
        assert!(HPolytope::new(DMatrix::zeros(1, 2), DVector::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn hull_roundtrip() {
        let pts = vec![v2(0.0, 0.0), v2(1.0, 0.0), v2(0.5, 0.5), v2(1.0, 1.0), v2(0.0, 1.0)];
        let hull = convex_hull_2d(&pts).unwrap();
        assert_eq!(hull.len(), 4);
        let h = hull_halfspaces_2d(&pts).unwrap();
        for p in &pts {
            assert!(h.contains(p, 1e-12));
        }
        assert!(!h.contains(&v2(1.1, 0.5), 1e-12));
    }

    #[test]
    fn containment_certificate_trivial_cases() {
        let x = HPolytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let nx = x.n_constraints();
        let id = DMatrix::identity(2, 2);
        let zero = DMatrix::zeros(2, 2);
        // empty action
        let ok = check_lemma1(&DMatrix::zeros(nx, nx), 0.0, 1.0, &id, &zero, &x, &x, &w_box(), 1e-9).unwrap();
        assert!(ok);
        // identity containment
        let ok = check_lemma1(&DMatrix::identity(nx, nx), 1.0, 1.0, &id, &zero, &x, &x, &w_box(), 1e-9).unwrap();
        assert!(ok);
        // identity containment with a disturbance does not hold
        let ok = check_lemma1(&DMatrix::identity(nx, nx), 1.0, 1.0, &id, &id, &x, &x, &w_box(), 1e-9).unwrap();
        assert!(!ok);
        assert!(check_lemma1(&DMatrix::zeros(2, 2), 1.0, 1.0, &id, &zero, &x, &x, &w_box(), 1e-9).is_err());
    }

    #[test]
    fn is_empty_higher_dim() {
        let b = HPolytope::from_box(&[-1.0, -1.0, -1.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(!b.is_empty());
        let e = b
            .with_offsets(DVector::from_vec(vec![1.0, 1.0, -2.0, 1.0, 1.0, 1.0]))
            .unwrap();
        assert!(e.is_empty());
        let line = HPolytope::from_box(&[-1.0], &[2.0]).unwrap();
        assert!(!line.is_empty());
        assert!(line
            .with_offsets(DVector::from_vec(vec![-1.0, 0.0]))
            .unwrap()
            .is_empty());
    }

    fn signed_area(v: &VertexSet) -> f64 {
        let pts = v.as_slice();
        let n = pts.len();
        (0..n)
            .map(|i| {
                let a = &pts[i];
                let b = &pts[(i + 1) % n];
                a[0] * b[1] - a[1] * b[0]
            })
            .sum::<f64>()
            / 2.0
    }

    prop_compose! {
        fn direction()(x in -5.0f64..5.0, y in -5.0f64..5.0) -> DVector<f64> {
            v2(x, y)
        }
    }

    proptest! {
        #[test]
        fn support_subadditive(a in direction(), b in direction()) {
            let v = VertexSet::new(vec![v2(0.3, -0.2), v2(-1.0, 0.4), v2(0.7, 0.9), v2(0.0, -1.1)]).unwrap();
            let lhs = support(&v, &(&a + &b)).unwrap();
            let rhs = support(&v, &a).unwrap() + support(&v, &b).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn scaling_composes(a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let p = HPolytope::new(
                DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.5, 1.0, -0.3, -1.0]),
                DVector::from_vec(vec![1.0, 0.7, 0.4]),
            ).unwrap();
            let lhs = scale(&scale(&p, a).unwrap(), b).unwrap();
            let rhs = scale(&p, a * b).unwrap();
            // offsets are h * a * b in both cases up to associativity of the products
            for (l, r) in lhs.offsets().iter().zip(rhs.offsets().iter()) {
                prop_assert!((l - r).abs() <= 1e-15 * (1.0 + r.abs()));
            }
        }

        #[test]
        fn tighten_then_add_stays_inside(lo in 0.2f64..1.0, hi in 0.2f64..1.0, r in 0.0f64..0.15, t in 0.0f64..1.0, s in 0.0f64..1.0) {
            let p = HPolytope::from_box(&[-lo, -hi], &[hi, lo]).unwrap();
            let sset = VertexSet::box_corners(&[-r, -r], &[r, r]).unwrap();
            let tight = pontryagin_tighten(&p, &sset).unwrap();
            prop_assume!(!tight.empty);
            let inner = vertices_2d(&tight.set).unwrap();
            // a convex combination of tightened vertices plus a point of S
            let k = inner.len();
            let a = &inner.as_slice()[0] * t + &inner.as_slice()[k / 2] * (1.0 - t);
            let b = v2(r * (2.0 * s - 1.0), -r * (2.0 * t - 1.0));
            prop_assert!(p.contains(&(a + b), 1e-12));
        }
    }
}

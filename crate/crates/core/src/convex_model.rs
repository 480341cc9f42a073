//! The lifted convex program: a group lasso over per-arrangement weight
//! vectors with linear cone constraints.
//!
//! Each group is indexed by `(side, sign, l, i, j)`. Its block acts on a
//! d-vector `v` as `D_2l D_1ij X v`, with masks applied elementwise. The
//! prediction is `sum_g side(g) * block_g w_g` where primed groups enter with
//! `+` and unprimed groups with `-`.
//!
//! Constraints, written as `C_g w_g >= 0`:
//! - plus groups: `(2 D_1ij - I) X w >= 0`
//! - minus groups: `(2 D_1ij - I) X w <= 0`
//! - every group: `(2 D_2l - I) D_1ij X w >= 0`

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arrangements::ArrangementPlan;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Dense};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Unprimed,
    Primed,
}

impl Side {
    /// Coefficient of the group's block in the prediction.
    pub fn coefficient(self) -> f64 {
        match self {
            Side::Unprimed => -1.0,
            Side::Primed => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Group index. The derived ordering is the canonical group order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub side: Side,
    pub sign: Sign,
    pub l: usize,
    pub i: usize,
    pub j: usize,
}

/// Masks of one `(l, i, j)` cell as 0/1 floats.
#[derive(Debug, Clone)]
struct Cell {
    /// `D_1ij` diagonal
    first: Vec<f64>,
    /// `D_2l * D_1ij` diagonal
    joint: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Cone {
    /// constraint rows as columns, `d x m`
    ct: Dense,
    /// norm of the data row behind each constraint row
    row_scale: Vec<f64>,
    /// squared Frobenius norm of `C`
    frob2: f64,
    /// the cone is `{0}`
    trivial: bool,
}

/// `{w : C w >= 0} = {0}` exactly when every `+-e_i` lies in the polar cone,
/// i.e. projects to zero.
fn cone_is_zero(ct: &Dense, d: usize) -> bool {
    (0..d).all(|i| {
        [1.0, -1.0].iter().all(|s| {
            let mut e = vec![0.0; d];
            e[i] = *s;
            linalg::project_cone(ct, &e).iter().all(|v| v.abs() <= 1e-12)
        })
    })
}

/// Worst violations of the cone constraints at a point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// `max(0, -c_k^T w_g)` over all constraint rows and groups
    pub max_violation: f64,
    /// the same, divided by the norm of the corresponding data row
    pub max_relative_violation: f64,
    /// number of strictly violated constraint rows
    pub violated_rows: usize,
}

impl FeasibilityReport {
    fn merge(self, other: Self) -> Self {
        Self {
            max_violation: self.max_violation.max(other.max_violation),
            max_relative_violation: self.max_relative_violation.max(other.max_relative_violation),
            violated_rows: self.violated_rows + other.violated_rows,
        }
    }
}

/// Per-group coefficient vectors, one row of `coeffs` per group in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPoint {
    pub coeffs: Array2<f64>,
}

impl ConvexPoint {
    pub fn group(&self, g: usize) -> ArrayView1<'_, f64> {
        self.coeffs.row(g)
    }

    pub fn group_mut(&mut self, g: usize) -> ArrayViewMut1<'_, f64> {
        self.coeffs.row_mut(g)
    }

    pub fn num_groups(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn group_norms(&self) -> Vec<f64> {
        self.coeffs
            .outer_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect()
    }

    /// `a * self + b * other`
    pub fn combine(&self, a: f64, other: &ConvexPoint, b: f64) -> ConvexPoint {
        ConvexPoint {
            coeffs: &self.coeffs * a + &other.coeffs * b,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupEntry {
    side: Side,
    sign: Sign,
    l: usize,
    i: usize,
    j: usize,
    w: Vec<f64>,
}

/// JSON form of a convex point: model descriptor plus one entry per group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointDocument {
    pub plan_hash: String,
    pub beta: f64,
    pub d: usize,
    groups: Vec<GroupEntry>,
}

/// Descriptor of the lifted program built from a dataset and plan.
#[derive(Debug, Clone)]
pub struct ConvexModel {
    x: Array2<f64>,
    y: Array1<f64>,
    beta: f64,
    m1: usize,
    p1: usize,
    p2: usize,
    plan_hash: String,
    groups: Vec<GroupId>,
    cells: Vec<Cell>,
    /// indexed by `sign * num_cells + cell`
    cones: Vec<Cone>,
}

impl ConvexModel {
    pub fn new(ds: &Dataset, plan: &ArrangementPlan, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
        }
        if plan.n != ds.n() || plan.d != ds.d() {
            return Err(Error::Shape(format!(
                "plan built for n = {}, d = {} but dataset is {} x {}",
                plan.n,
                plan.d,
                ds.n(),
                ds.d()
            )));
        }
        let (n, d) = (ds.n(), ds.d());
        let (m1, p1, p2) = (plan.m1, plan.p1, plan.p2);
        let row_norms: Vec<f64> = ds.x.outer_iter().map(|r| r.dot(&r).sqrt()).collect();

        let mut cells = Vec::with_capacity(p2 * p1 * m1);
        for l in 0..p2 {
            for i in 0..p1 {
                for j in 0..m1 {
                    let d1 = plan.first(i, j);
                    let d2 = plan.second(l);
                    let first: Vec<f64> = (0..n).map(|k| f64::from(d1.get(k) as u8)).collect();
                    let joint: Vec<f64> = (0..n)
                        .map(|k| f64::from((d1.get(k) && d2.get(k)) as u8))
                        .collect();
                    cells.push(Cell { first, joint });
                }
            }
        }
        let second_of_cell = |c: usize| c / (p1 * m1);

        let mut cones = Vec::with_capacity(2 * cells.len());
        for sign in [Sign::Plus, Sign::Minus] {
            for (c, cell) in cells.iter().enumerate() {
                let d2 = plan.second(second_of_cell(c));
                let mut cols: Vec<f64> = Vec::with_capacity(2 * n * d);
                let mut row_scale = Vec::with_capacity(2 * n);
                for k in 0..n {
                    let s = sign.value() * (2.0 * cell.first[k] - 1.0);
                    cols.extend(ds.x.row(k).iter().map(|v| s * v));
                    row_scale.push(row_norms[k]);
                }
                for k in 0..n {
                    if cell.first[k] == 1.0 {
                        let s = if d2.get(k) { 1.0 } else { -1.0 };
                        cols.extend(ds.x.row(k).iter().map(|v| s * v));
                        row_scale.push(row_norms[k]);
                    }
                }
                let frob2 = cols.iter().map(|v| v * v).sum();
                let ct = Dense::from_columns(d, cols.chunks(d.max(1)).take(row_scale.len()));
                let trivial = cone_is_zero(&ct, d);
                cones.push(Cone {
                    ct,
                    row_scale,
                    frob2,
                    trivial,
                });
            }
        }

        let mut groups = Vec::with_capacity(4 * cells.len());
        for side in [Side::Unprimed, Side::Primed] {
            for sign in [Sign::Plus, Sign::Minus] {
                for l in 0..p2 {
                    for i in 0..p1 {
                        for j in 0..m1 {
                            groups.push(GroupId { side, sign, l, i, j });
                        }
                    }
                }
            }
        }
        debug_assert!(groups.windows(2).all(|w| w[0] < w[1]));

        Ok(Self {
            x: ds.x.clone(),
            y: ds.y.clone(),
            beta,
            m1,
            p1,
            p2,
            plan_hash: plan.content_hash(),
            groups,
            cells,
            cones,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn p1(&self) -> usize {
        self.p1
    }

    pub fn p2(&self) -> usize {
        self.p2
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn plan_hash(&self) -> &str {
        &self.plan_hash
    }

    pub fn groups(&self) -> &[GroupId] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub(crate) fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Same model with a different regularisation weight.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
        }
        Ok(Self {
            beta,
            ..self.clone()
        })
    }

    /// Position of a group in the canonical order.
    pub fn group_index(&self, id: GroupId) -> Option<usize> {
        if id.l >= self.p2 || id.i >= self.p1 || id.j >= self.m1 {
            return None;
        }
        let side = match id.side {
            Side::Unprimed => 0,
            Side::Primed => 1,
        };
        Some((side * 2 + Self::sign_index(id.sign)) * self.num_cells() + self.cell_index(id))
    }

    fn sign_index(sign: Sign) -> usize {
        match sign {
            Sign::Plus => 0,
            Sign::Minus => 1,
        }
    }

    fn cell_index(&self, id: GroupId) -> usize {
        (id.l * self.p1 + id.i) * self.m1 + id.j
    }

    pub(crate) fn cell_of(&self, g: usize) -> usize {
        g % self.num_cells()
    }

    fn cone_of(&self, g: usize) -> &Cone {
        let id = self.groups[g];
        &self.cones[Self::sign_index(id.sign) * self.num_cells() + self.cell_of(g)]
    }

    pub fn zero_point(&self) -> ConvexPoint {
        ConvexPoint {
            coeffs: Array2::zeros((self.num_groups(), self.d())),
        }
    }

    pub fn check_point(&self, p: &ConvexPoint) -> Result<()> {
        if p.coeffs.dim() != (self.num_groups(), self.d()) {
            return Err(Error::Shape(format!(
                "point has shape {:?}, model expects ({}, {})",
                p.coeffs.dim(),
                self.num_groups(),
                self.d()
            )));
        }
        Ok(())
    }

    /// `sum_g side(g) * D_2l D_1ij X w_g`
    pub fn predict(&self, p: &ConvexPoint) -> Result<Array1<f64>> {
        self.check_point(p)?;
        Ok(self.predict_unchecked(p))
    }

    pub(crate) fn predict_unchecked(&self, p: &ConvexPoint) -> Array1<f64> {
        let nc = self.num_cells();
        let d = self.d();
        let mut out = Array1::zeros(self.n());
        let mut v = vec![0.0; d];
        for (c, cell) in self.cells.iter().enumerate() {
            // net coefficient of the cell: primed minus unprimed, both signs
            v.iter_mut().for_each(|e| *e = 0.0);
            let mut any = false;
            for quadrant in 0..4 {
                let row = p.coeffs.row(quadrant * nc + c);
                let coef = if quadrant >= 2 { 1.0 } else { -1.0 };
                for (e, w) in v.iter_mut().zip(row.iter()) {
                    if *w != 0.0 {
                        any = true;
                        *e += coef * w;
                    }
                }
            }
            if !any {
                continue;
            }
            for (k, xk) in self.x.outer_iter().enumerate() {
                if cell.joint[k] != 0.0 {
                    out[k] += xk.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        out
    }

    /// `X^T (D_2l D_1ij r)` for every cell.
    pub(crate) fn cell_correlations(&self, r: &Array1<f64>) -> Array2<f64> {
        let d = self.d();
        let mut q = Array2::zeros((self.num_cells(), d));
        for (c, cell) in self.cells.iter().enumerate() {
            let mut row = q.row_mut(c);
            for (k, xk) in self.x.outer_iter().enumerate() {
                let s = cell.joint[k] * r[k];
                if s != 0.0 {
                    row.scaled_add(s, &xk);
                }
            }
        }
        q
    }

    /// `beta * sum_g ||w_g||_2`
    pub fn regularizer(&self, p: &ConvexPoint) -> f64 {
        self.beta * p.group_norms().iter().sum::<f64>()
    }

    pub fn data_fit(&self, p: &ConvexPoint) -> Result<f64> {
        let r = self.predict(p)? - &self.y;
        Ok(0.5 * r.dot(&r))
    }

    /// Constraint values `C_g w_g` of one group.
    fn constraint_values(&self, g: usize, w: ArrayView1<f64>) -> Vec<f64> {
        let cone = self.cone_of(g);
        let w = w.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| w.to_vec());
        cone.ct.tr_mul_vec(&w)
    }

    pub fn feasibility(&self, p: &ConvexPoint) -> Result<FeasibilityReport> {
        self.check_point(p)?;
        Ok((0..self.num_groups())
            .into_par_iter()
            .map(|g| {
                let w = p.group(g);
                let mut rep = FeasibilityReport::default();
                if w.iter().all(|&v| v == 0.0) {
                    return rep;
                }
                let cone = self.cone_of(g);
                for (val, scale) in self.constraint_values(g, w).iter().zip(&cone.row_scale) {
                    if *val < 0.0 {
                        rep.violated_rows += 1;
                        rep.max_violation = rep.max_violation.max(-val);
                        if *scale > 0.0 {
                            rep.max_relative_violation =
                                rep.max_relative_violation.max(-val / scale);
                        }
                    }
                }
                rep
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(FeasibilityReport::default(), FeasibilityReport::merge))
    }

    /// `1/2 ||predict - y||^2 + beta * (||w||_{2,1} + ||w'||_{2,1})`, with the
    /// cone-constraint report.
    pub fn objective_constrained(&self, p: &ConvexPoint) -> Result<(f64, FeasibilityReport)> {
        let fit = self.data_fit(p)?;
        let rep = self.feasibility(p)?;
        Ok((fit + self.regularizer(p), rep))
    }

    /// Hinge penalty `sum_g sum_k relu(-c_k^T w_g)`.
    pub fn penalty(&self, p: &ConvexPoint) -> Result<f64> {
        self.check_point(p)?;
        let parts: Vec<f64> = (0..self.num_groups())
            .into_par_iter()
            .map(|g| {
                let w = p.group(g);
                if w.iter().all(|&v| v == 0.0) {
                    return 0.0;
                }
                self.constraint_values(g, w)
                    .iter()
                    .map(|v| (-v).max(0.0))
                    .sum::<f64>()
            })
            .collect();
        Ok(pairwise_sum(&parts))
    }

    /// Data fit plus `rho` times the hinge penalty plus the group regulariser.
    pub fn objective_penalized(&self, p: &ConvexPoint, rho: f64) -> Result<f64> {
        if rho < 0.0 {
            return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
        }
        let fit = self.data_fit(p)?;
        let pen = if rho > 0.0 { rho * self.penalty(p)? } else { 0.0 };
        Ok(fit + pen + self.regularizer(p))
    }

    /// Gradient of `1/2 ||predict - y||^2 + rho * penalty`. Constraint rows
    /// sitting exactly at zero contribute nothing.
    pub fn grad_smooth(&self, p: &ConvexPoint, rho: f64) -> Result<ConvexPoint> {
        if rho < 0.0 {
            return Err(Error::InvalidArgument(format!("rho must be >= 0, got {rho}")));
        }
        self.check_point(p)?;
        let r = self.predict_unchecked(p) - &self.y;
        Ok(self.grad_from_residual(p, &r, rho))
    }

    pub(crate) fn grad_from_residual(&self, p: &ConvexPoint, r: &Array1<f64>, rho: f64) -> ConvexPoint {
        let q = self.cell_correlations(r);
        let nc = self.num_cells();
        let d = self.d();
        let mut grad = self.zero_point();
        grad.coeffs
            .as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(g, out)| {
                let coef = self.groups[g].side.coefficient();
                for (o, v) in out.iter_mut().zip(q.row(g % nc).iter()) {
                    *o = coef * v;
                }
                if rho > 0.0 {
                    let w = p.group(g);
                    if w.iter().all(|&v| v == 0.0) {
                        return;
                    }
                    let cone = self.cone_of(g);
                    let vals = self.constraint_values(g, w);
                    for (k, val) in vals.iter().enumerate() {
                        if *val < 0.0 {
                            for (o, c) in out.iter_mut().zip(cone.ct.col(k)) {
                                *o -= rho * c;
                            }
                        }
                    }
                }
            });
        grad
    }

    /// Euclidean projection of a d-vector onto group `g`'s constraint cone.
    pub fn project_group(&self, g: usize, u: &[f64]) -> Vec<f64> {
        let cone = self.cone_of(g);
        if cone.trivial {
            return vec![0.0; u.len()];
        }
        linalg::project_cone(&cone.ct, u)
    }

    /// Whether group `g`'s constraint cone is `{0}`, forcing `w_g = 0`.
    pub fn group_is_fixed_zero(&self, g: usize) -> bool {
        self.cone_of(g).trivial
    }

    pub fn num_free_groups(&self) -> usize {
        (0..self.num_groups()).filter(|&g| !self.group_is_fixed_zero(g)).count()
    }

    /// Largest squared Frobenius norm of any group's constraint matrix.
    pub fn max_constraint_frob2(&self) -> f64 {
        self.cones.iter().map(|c| c.frob2).fold(0.0, f64::max)
    }

    /// `max_g ||block_g^T y||_2`: at or above this beta, zero is optimal
    /// for the unconstrained group lasso.
    pub fn zero_solution_threshold(&self) -> f64 {
        let q = self.cell_correlations(&self.y);
        q.outer_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max)
    }

    /// Gram matrix `Xt Xt^T` of the lifted design (n x n).
    pub(crate) fn lifted_gram(&self) -> Array2<f64> {
        let n = self.n();
        let mut gram = Array2::zeros((n, n));
        for cell in &self.cells {
            let rows: Vec<usize> = (0..n).filter(|&k| cell.joint[k] != 0.0).collect();
            for &a in &rows {
                for &b in &rows {
                    gram[[a, b]] += 4.0 * self.x.row(a).dot(&self.x.row(b));
                }
            }
        }
        gram
    }

    /// Power-iteration estimate of `lambda_max(Xt^T Xt)`, the Lipschitz
    /// constant of the data-fit gradient.
    pub fn lipschitz_estimate(&self, iterations: usize) -> f64 {
        let gram = self.lifted_gram();
        let n = self.n();
        // deterministic, not orthogonal to a nonnegative Perron vector
        let mut v = Array1::from_iter((0..n).map(|k| 1.0 + 1e-3 * k as f64));
        let mut est = 0.0;
        for _ in 0..iterations {
            let w = gram.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            est = v.dot(&w) / v.dot(&v);
            v = w / norm;
        }
        est.max(gram.dot(&v).dot(&v))
    }

    pub fn point_to_document(&self, p: &ConvexPoint) -> Result<PointDocument> {
        self.check_point(p)?;
        let groups = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, id)| GroupEntry {
                side: id.side,
                sign: id.sign,
                l: id.l,
                i: id.i,
                j: id.j,
                w: p.group(g).to_vec(),
            })
            .collect();
        Ok(PointDocument {
            plan_hash: self.plan_hash.clone(),
            beta: self.beta,
            d: self.d(),
            groups,
        })
    }

    /// Inverse of [`ConvexModel::point_to_document`]; groups may appear in
    /// any order, missing groups are zero.
    pub fn point_from_document(&self, doc: &PointDocument) -> Result<ConvexPoint> {
        if doc.plan_hash != self.plan_hash {
            return Err(Error::InvalidArgument(
                "point was produced for a different arrangement plan".into(),
            ));
        }
        if doc.d != self.d() {
            return Err(Error::Shape(format!("point has d = {}, model d = {}", doc.d, self.d())));
        }
        let mut p = self.zero_point();
        for e in &doc.groups {
            let id = GroupId {
                side: e.side,
                sign: e.sign,
                l: e.l,
                i: e.i,
                j: e.j,
            };
            let g = self
                .group_index(id)
                .ok_or_else(|| Error::Shape(format!("group {id:?} outside the model")))?;
            if e.w.len() != self.d() {
                return Err(Error::Shape(format!("group {id:?} has {} entries", e.w.len())));
            }
            p.group_mut(g).assign(&ArrayView1::from(&e.w[..]));
        }
        Ok(p)
    }
}

/// Pairwise summation in a fixed tree order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2..=8 => v.iter().sum(),
        len => {
            let (a, b) = v.split_at(len / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrangements::{sample_plan, ArrangementPlan, MaskVector, PlanMode};
    use crate::network::standard_normal_matrix;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64) -> (Dataset, ArrangementPlan) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal_matrix(&mut rng, 6, 2, 1.0);
        let y = standard_normal_matrix(&mut rng, 6, 1, 1.0).column(0).to_owned();
        let ds = Dataset::new(x, y, "r").unwrap();
        let plan = sample_plan(&ds, 2, 4, 3, seed).unwrap();
        (ds, plan)
    }

    fn random_point(model: &ConvexModel, seed: u64) -> ConvexPoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvexPoint {
            coeffs: standard_normal_matrix(&mut rng, model.num_groups(), model.d(), 1.0),
        }
    }

    /// One (i, j, l) cell with all-ones masks.
    fn identity_plan(x: &Array2<f64>) -> ArrangementPlan {
        let n = x.nrows();
        let ones = MaskVector::new(vec![true; n]);
        ArrangementPlan {
            n,
            d: x.ncols(),
            m1: 1,
            p1: 1,
            p2: 1,
            mode: PlanMode::Sampled,
            seed: 0,
            first_layer: vec![vec![ones.clone()]],
            second_layer: vec![ones],
            first_witnesses: vec![vec![Array1::zeros(x.ncols())]],
            second_witnesses: vec![],
        }
    }

    #[test]
    fn group_count_and_order() {
        let (ds, plan) = random_instance(1);
        let model = ConvexModel::new(&ds, &plan, 0.1).unwrap();
        assert_eq!(model.num_groups(), 4 * plan.p1 * plan.m1 * plan.p2);
        for (g, id) in model.groups().iter().enumerate() {
            assert_eq!(model.group_index(*id), Some(g));
        }
    }

    #[test]
    fn zero_point_predicts_zero() {
        let (ds, plan) = random_instance(2);
        let model = ConvexModel::new(&ds, &plan, 0.1).unwrap();
        let z = model.predict(&model.zero_point()).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let (val, rep) = model.objective_constrained(&model.zero_point()).unwrap();
        assert!((val - 0.5 * ds.y.dot(&ds.y)).abs() < 1e-15);
        assert_eq!(rep.max_violation, 0.0);
    }

    #[test]
    fn identity_masks_give_linear_prediction() {
        let x = array![[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]];
        let ds = Dataset::new(x.clone(), array![0.0, 0.0, 0.0], "id").unwrap();
        let model = ConvexModel::new(&ds, &identity_plan(&x), 1.0).unwrap();
        let mut p = model.zero_point();
        let g = model
            .group_index(GroupId {
                side: Side::Primed,
                sign: Sign::Plus,
                l: 0,
                i: 0,
                j: 0,
            })
            .unwrap();
        p.group_mut(g).assign(&array![0.3, -0.7]);
        let pred = model.predict(&p).unwrap();
        let want = x.dot(&array![0.3, -0.7]);
        for (a, b) in pred.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        // unprimed groups enter with a minus sign
        let mut q = model.zero_point();
        q.group_mut(0).assign(&array![0.3, -0.7]);
        let pred = model.predict(&q).unwrap();
        for (a, b) in pred.iter().zip(want.iter()) {
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_is_linear() {
        let (ds, plan) = random_instance(3);
        let model = ConvexModel::new(&ds, &plan, 0.1).unwrap();
        let p1 = random_point(&model, 10);
        let p2 = random_point(&model, 11);
        let lhs = model.predict(&p1.combine(1.0, &p2, 1.0)).unwrap();
        let rhs = model.predict(&p1).unwrap() + model.predict(&p2).unwrap();
        let scale = rhs.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn negative_constraint_value_is_reported() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let ds = Dataset::new(x.clone(), array![0.0, 0.0], "v").unwrap();
        let model = ConvexModel::new(&ds, &identity_plan(&x), 1.0).unwrap();
        // plus group, all-ones D1: constraint X w >= 0; second row gives -0.3
        let mut p = model.zero_point();
        p.group_mut(0).assign(&array![1.0, -0.3]);
        let (_, rep) = model.objective_constrained(&p).unwrap();
        assert!(rep.max_violation >= 0.3 - 1e-15);
        assert!(rep.violated_rows >= 1);
    }

    #[test]
    fn penalty_vanishes_on_feasible_points() {
        let (ds, plan) = random_instance(4);
        let model = ConvexModel::new(&ds, &plan, 0.1).unwrap();
        let mut p = random_point(&model, 5);
        for g in 0..model.num_groups() {
            let proj = model.project_group(g, &p.group(g).to_vec());
            p.group_mut(g).assign(&ArrayView1::from(&proj[..]));
        }
        let (val, rep) = model.objective_constrained(&p).unwrap();
        assert!(rep.max_violation <= 1e-12, "{rep:?}");
        for rho in [0.0, 1.0, 1e3] {
            let pen = model.objective_penalized(&p, rho).unwrap();
            assert!((pen - val).abs() <= 1e-9 * (1.0 + val.abs()));
        }
    }

    #[test]
    fn rho_zero_is_plain_group_lasso_and_penalty_is_nonnegative() {
        let (ds, plan) = random_instance(6);
        let model = ConvexModel::new(&ds, &plan, 0.2).unwrap();
        let p = random_point(&model, 7);
        let plain = model.data_fit(&p).unwrap() + model.regularizer(&p);
        assert_eq!(model.objective_penalized(&p, 0.0).unwrap(), plain);
        assert!(model.objective_penalized(&p, 1.0).unwrap() >= plain);
    }

    #[test]
    fn zero_gradient_at_stationary_origin() {
        let (mut ds, plan) = random_instance(8);
        ds.y.fill(0.0);
        let model = ConvexModel::new(&ds, &plan, 0.1).unwrap();
        let g = model.grad_smooth(&model.zero_point(), 10.0).unwrap();
        assert!(g.coeffs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn data_fit_gradient_formula() {
        let (ds, plan) = random_instance(9);
        let model = ConvexModel::new(&ds, &plan, 0.1).unwrap();
        let p = random_point(&model, 1);
        let grad = model.grad_smooth(&p, 0.0).unwrap();
        let r = model.predict(&p).unwrap() - &ds.y;
        for (g, id) in model.groups().iter().enumerate() {
            let c = model.cell_of(g);
            let cell = &model.cells[c];
            let masked: Array1<f64> = r.iter().zip(&cell.joint).map(|(a, b)| a * b).collect();
            let want = ds.x.t().dot(&masked) * id.side.coefficient();
            for (a, b) in grad.group(g).iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn document_round_trip() {
        let (ds, plan) = random_instance(12);
        let model = ConvexModel::new(&ds, &plan, 0.1).unwrap();
        let p = random_point(&model, 13);
        let doc = model.point_to_document(&p).unwrap();
        let json = serde_json::to_string(&doc).unwrap();
        let back: PointDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(model.point_from_document(&back).unwrap(), p);
    }

    #[test]
    fn lipschitz_estimate_bounds_rayleigh_quotients() {
        let (ds, plan) = random_instance(14);
        let model = ConvexModel::new(&ds, &plan, 0.1).unwrap();
        let l = model.lipschitz_estimate(30);
        for s in 0..10 {
            let p = random_point(&model, 100 + s);
            let pred = model.predict(&p).unwrap();
            let num = pred.dot(&pred);
            let den: f64 = p.coeffs.iter().map(|v| v * v).sum();
            assert!(num / den <= l * (1.0 + 1e-6));
        }
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..100).map(|k| k as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }
}

//! Dense strictly convex quadratic programs with a diagonal Hessian.
//!
//! Solves
//!
//! ```text
//! min  ½ xᵀ diag(h) x + cᵀx
//! s.t. A_eq x = b_eq,  A_in x ≤ b_in,  lower ≤ x ≤ upper
//! ```
//!
//! with the dual active-set method of Goldfarb and Idnani. The method starts
//! from the unconstrained minimiser and adds violated constraints one at a
//! time while keeping the multipliers of the working set dual feasible, so
//! no feasible starting point is needed and infeasibility is detected when a
//! violated constraint cannot be added.
//!
//! The working-set projections are recomputed from a thin QR factorization of
//! the scaled active normals at every step. That is O(n k²) per step, which is
//! fine at the sizes this crate targets (a few hundred variables).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// A linear row `coeffs · x (= or ≤) rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRow {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn new(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    fn norm(&self) -> f64 {
        self.coeffs.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadProgram {
    /// Diagonal of the Hessian; every entry must be positive.
    pub hessian: Vec<f64>,
    pub linear: Vec<f64>,
    pub eq: Vec<LinearRow>,
    pub ineq: Vec<LinearRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QuadProgram {
    pub fn new(hessian: Vec<f64>, linear: Vec<f64>) -> Self {
        let n = hessian.len();
        Self {
            hessian,
            linear,
            eq: Vec::new(),
            ineq: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.hessian.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.hessian)
            .zip(&self.linear)
            .map(|((x, h), c)| 0.5 * h * x * x + c * x)
            .sum()
    }
}

/// Optimal point with multipliers for the Lagrangian
/// `f(x) + yᵀ(A_eq x − b_eq) + zᵀ(A_in x − b_in) + β_uᵀ(x − u) + β_lᵀ(l − x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("constraint set is infeasible (blocking constraint {0:?})")]
    Infeasible(ConstraintRef),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("iteration limit reached")]
    IterationLimit,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintRef {
    Eq(usize),
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct QpOptions {
    /// Feasibility tolerance on unit-normalised rows.
    pub feas_tol: f64,
    /// Relative tolerance for linear dependence of a new normal.
    pub dep_tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { feas_tol: 1e-10, dep_tol: 1e-10, max_iter: 0 }
    }
}

/// Internal constraint `a·x ≥ c` on the original variables, unit-normalised.
struct Cons {
    a: Vec<f64>,
    c: f64,
    is_eq: bool,
    origin: ConstraintRef,
    scale: f64,
}

pub fn solve(qp: &QuadProgram) -> Result<QpSolution, QpError> {
    solve_with(qp, &QpOptions::default())
}

pub fn solve_with(qp: &QuadProgram, opts: &QpOptions) -> Result<QpSolution, QpError> {
    check_dims(qp)?;
    if qp.hessian.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
        return Err(QpError::Dimension("hessian diagonal must be positive".into()));
    }
    let fixed: Vec<usize> = (0..qp.dim()).filter(|&j| qp.lower[j] == qp.upper[j]).collect();
    if fixed.is_empty() {
        return solve_inner(qp, opts);
    }
    if let Some(j) = (0..qp.dim()).find(|&j| qp.lower[j] > qp.upper[j]) {
        return Err(QpError::Infeasible(ConstraintRef::Lower(j)));
    }
    solve_fixed(qp, opts, &fixed)
}

/// Substitutes variables with equal bounds (both bounds active at once would
/// make the working set degenerate) and recovers their bound multipliers
/// from stationarity.
fn solve_fixed(qp: &QuadProgram, opts: &QpOptions, fixed: &[usize]) -> Result<QpSolution, QpError> {
    let n = qp.dim();
    let mut is_fixed = vec![false; n];
    fixed.iter().for_each(|&j| is_fixed[j] = true);
    let free: Vec<usize> = (0..n).filter(|&j| !is_fixed[j]).collect();
    let value = |j: usize| qp.lower[j];
    let shrink = |r: &LinearRow| {
        let rhs = r.rhs - fixed.iter().map(|&j| r.coeffs[j] * value(j)).sum::<f64>();
        LinearRow::new(free.iter().map(|&j| r.coeffs[j]).collect(), rhs)
    };
    let sub = QuadProgram {
        hessian: free.iter().map(|&j| qp.hessian[j]).collect(),
        linear: free.iter().map(|&j| qp.linear[j]).collect(),
        eq: qp.eq.iter().map(shrink).collect(),
        ineq: qp.ineq.iter().map(shrink).collect(),
        lower: free.iter().map(|&j| qp.lower[j]).collect(),
        upper: free.iter().map(|&j| qp.upper[j]).collect(),
    };
    let s = solve_inner(&sub, opts).map_err(|e| match e {
        QpError::Infeasible(c) => QpError::Infeasible(match c {
            ConstraintRef::Lower(j) => ConstraintRef::Lower(free[j]),
            ConstraintRef::Upper(j) => ConstraintRef::Upper(free[j]),
            other => other,
        }),
        other => other,
    })?;
    let mut x = vec![0.0; n];
    let mut lower_duals = vec![0.0; n];
    let mut upper_duals = vec![0.0; n];
    for (i, &j) in free.iter().enumerate() {
        x[j] = s.x[i];
        lower_duals[j] = s.lower_duals[i];
        upper_duals[j] = s.upper_duals[i];
    }
    for &j in fixed {
        x[j] = value(j);
        let mut g = qp.hessian[j] * x[j] + qp.linear[j];
        for (r, y) in qp.eq.iter().zip(&s.eq_duals) {
            g += y * r.coeffs[j];
        }
        for (r, z) in qp.ineq.iter().zip(&s.ineq_duals) {
            g += z * r.coeffs[j];
        }
        // g + β_u − β_l = 0
        upper_duals[j] = (-g).max(0.0);
        lower_duals[j] = g.max(0.0);
    }
    Ok(QpSolution {
        objective: qp.objective(&x),
        x,
        eq_duals: s.eq_duals,
        ineq_duals: s.ineq_duals,
        lower_duals,
        upper_duals,
        iterations: s.iterations,
    })
}

fn solve_inner(qp: &QuadProgram, opts: &QpOptions) -> Result<QpSolution, QpError> {
    let n = qp.dim();
    let cons = collect_constraints(qp);
    let inv_sqrt: Vec<f64> = qp.hessian.iter().map(|h| 1.0 / h.sqrt()).collect();
    // scaled normals ã = G^{-1/2} a
    let scaled: Vec<DVector<f64>> = cons
        .iter()
        .map(|c| DVector::from_iterator(n, c.a.iter().zip(&inv_sqrt).map(|(a, s)| a * s)))
        .collect();

    let mut x: Vec<f64> = qp.linear.iter().zip(&qp.hessian).map(|(c, h)| -c / h).collect();
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    // sign flips applied to equality rows when they enter the working set
    let mut sign = vec![1.0; cons.len()];
    let mut skipped = vec![false; cons.len()];
    let max_iter = if opts.max_iter > 0 { opts.max_iter } else { 50 * (n + cons.len()) + 100 };
    let mut iterations = 0usize;

    loop {
        // pick the next constraint to add
        let mut pick: Option<usize> = None;
        for (i, c) in cons.iter().enumerate() {
            if c.is_eq && !skipped[i] && !active.contains(&i) {
                pick = Some(i);
                break;
            }
        }
        if pick.is_none() {
            let mut worst = -opts.feas_tol;
            for (i, c) in cons.iter().enumerate() {
                if c.is_eq || active.contains(&i) {
                    continue;
                }
                let s = dot(&c.a, &x) - c.c;
                if s < worst * (1.0 + c.c.abs()) {
                    worst = s / (1.0 + c.c.abs());
                    pick = Some(i);
                }
            }
        }
        let Some(p) = pick else { break };
        if cons[p].is_eq {
            let s = dot(&cons[p].a, &x) - cons[p].c;
            sign[p] = if s > 0.0 { -1.0 } else { 1.0 };
        }
        let ap: Vec<f64> = cons[p].a.iter().map(|v| v * sign[p]).collect();
        let cp = cons[p].c * sign[p];
        let ap_scaled = &scaled[p] * sign[p];
        let mut up = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let sp = dot(&ap, &x) - cp;
            let (z_scaled, r) = directions(&scaled, &sign, &active, &ap_scaled)?;
            let zn = z_scaled.norm();
            let dependent = zn <= opts.dep_tol * ap_scaled.norm().max(1e-300);

            if dependent && cons[p].is_eq && sp.abs() <= opts.feas_tol * (1.0 + cp.abs()) {
                // redundant consistent equality
                skipped[p] = true;
                break;
            }
            // partial (dual) step bound
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (j, &i) in active.iter().enumerate() {
                if cons[i].is_eq {
                    continue;
                }
                if r[j] > 0.0 {
                    let t = mult[j] / r[j];
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(j);
                    }
                }
            }
            // full (primal) step
            let t2 = if dependent {
                f64::INFINITY
            } else {
                let denom: f64 = z_scaled.dot(&ap_scaled);
                if denom <= 0.0 {
                    f64::INFINITY
                } else {
                    (-sp).max(0.0) / denom
                }
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible(cons[p].origin));
            }
            // dual update for the working set
            for (j, &i) in active.iter().enumerate() {
                mult[j] -= t * r[j];
                if !cons[i].is_eq && mult[j] < 0.0 {
                    mult[j] = 0.0;
                }
            }
            up += t;
            if t2.is_finite() {
                for (xi, (zi, s)) in x.iter_mut().zip(z_scaled.iter().zip(&inv_sqrt)) {
                    *xi += t * zi * s;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(QpError::NumericalFailure("non-finite iterate".into()));
            }
            if t2 <= t1 {
                active.push(p);
                mult.push(up);
                break;
            }
            let j = drop_at.expect("finite partial step has a blocking constraint");
            active.remove(j);
            mult.remove(j);
        }
    }

    // map multipliers back to the original constraint families
    let mut sol = QpSolution {
        objective: qp.objective(&x),
        x,
        eq_duals: vec![0.0; qp.eq.len()],
        ineq_duals: vec![0.0; qp.ineq.len()],
        lower_duals: vec![0.0; n],
        upper_duals: vec![0.0; n],
        iterations,
    };
    for (j, &i) in active.iter().enumerate() {
        let u = mult[j] * sign[i] / cons[i].scale;
        match cons[i].origin {
            ConstraintRef::Eq(k) => sol.eq_duals[k] = u,
            ConstraintRef::Ineq(k) => sol.ineq_duals[k] = u,
            ConstraintRef::Upper(k) => sol.upper_duals[k] = u,
            ConstraintRef::Lower(k) => sol.lower_duals[k] = u,
        }
    }
    Ok(sol)
}

fn check_dims(qp: &QuadProgram) -> Result<(), QpError> {
    let n = qp.dim();
    let bad = |what: &str| Err(QpError::Dimension(what.to_string()));
    if qp.linear.len() != n || qp.lower.len() != n || qp.upper.len() != n {
        return bad("vector length");
    }
    if qp.eq.iter().chain(&qp.ineq).any(|r| r.coeffs.len() != n) {
        return bad("row length");
    }
    Ok(())
}

fn collect_constraints(qp: &QuadProgram) -> Vec<Cons> {
    let n = qp.dim();
    let mut out = Vec::new();
    let mut push = |a: Vec<f64>, c: f64, is_eq: bool, origin: ConstraintRef| {
        let row = LinearRow::new(a, c);
        let s = row.norm();
        if s == 0.0 {
            // an empty row is either trivially satisfied or infeasible;
            // keep it so that infeasibility still surfaces
            out.push(Cons { a: row.coeffs, c, is_eq, origin, scale: 1.0 });
        } else {
            out.push(Cons {
                a: row.coeffs.iter().map(|v| v / s).collect(),
                c: c / s,
                is_eq,
                origin,
                scale: s,
            });
        }
    };
    for (k, r) in qp.eq.iter().enumerate() {
        // −a·x ≥ −b  (equality, sign is irrelevant until it is activated)
        push(r.coeffs.iter().map(|v| -v).collect(), -r.rhs, true, ConstraintRef::Eq(k));
    }
    for j in 0..n {
        if qp.lower[j].is_finite() {
            let mut a = vec![0.0; n];
            a[j] = 1.0;
            push(a, qp.lower[j], false, ConstraintRef::Lower(j));
        }
        if qp.upper[j].is_finite() {
            let mut a = vec![0.0; n];
            a[j] = -1.0;
            push(a, -qp.upper[j], false, ConstraintRef::Upper(j));
        }
    }
    for (k, r) in qp.ineq.iter().enumerate() {
        push(r.coeffs.iter().map(|v| -v).collect(), -r.rhs, false, ConstraintRef::Ineq(k));
    }
    out
}

/// Primal direction (in scaled space) and dual direction for adding `ap`.
fn directions(
    scaled: &[DVector<f64>],
    sign: &[f64],
    active: &[usize],
    ap: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<f64>), QpError> {
    let n = ap.len();
    let k = active.len();
    if k == 0 {
        return Ok((ap.clone(), Vec::new()));
    }
    let mut nmat = DMatrix::zeros(n, k);
    for (j, &i) in active.iter().enumerate() {
        nmat.set_column(j, &(&scaled[i] * sign[i]));
    }
    let qr = nmat.qr();
    let q = qr.q();
    let r = qr.r();
    let qt_ap = q.transpose() * ap;
    let z = ap - &q * &qt_ap;
    let rv = r
        .solve_upper_triangular(&qt_ap)
        .ok_or_else(|| QpError::NumericalFailure("singular working set".into()))?;
    if rv.iter().any(|v| !v.is_finite()) {
        return Err(QpError::NumericalFailure("singular working set".into()));
    }
    Ok((z, rv.iter().copied().collect()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Multipliers proving that a constraint set has no point inside the box.
///
/// With `g = A_eqᵀ eq + A_inᵀ ineq` (and `ineq ≥ 0`), every feasible `x`
/// would satisfy `gᵀx ≤ b_eqᵀ eq + b_inᵀ ineq`, but over the box
/// `min gᵀx − (b_eqᵀ eq + b_inᵀ ineq) = gap > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Infeasibility {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    pub gap: f64,
    /// Largest constraint violation at the least-violation point.
    pub violation: f64,
}

impl Infeasibility {
    /// Recomputes the gap from the problem data.
    pub fn recompute_gap(&self, qp: &QuadProgram) -> f64 {
        let n = qp.dim();
        let mut g = vec![0.0; n];
        let mut rhs = 0.0;
        for (row, y) in qp.eq.iter().zip(&self.eq) {
            rhs += y * row.rhs;
            for (gj, a) in g.iter_mut().zip(&row.coeffs) {
                *gj += y * a;
            }
        }
        for (row, z) in qp.ineq.iter().zip(&self.ineq) {
            rhs += z * row.rhs;
            for (gj, a) in g.iter_mut().zip(&row.coeffs) {
                *gj += z * a;
            }
        }
        box_min(&g, &qp.lower, &qp.upper) - rhs
    }
}

/// Minimum of `gᵀx` over the box; coordinates with negligible weight are
/// ignored so that unbounded variables do not spoil the value.
pub fn box_min(g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = 0.0;
    for j in 0..g.len() {
        let gj = g[j];
        if gj.abs() <= 1e-12 * scale {
            continue;
        }
        out += if gj > 0.0 { gj * lower[j] } else { gj * upper[j] };
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum PhaseOne {
    Feasible(Vec<f64>),
    Infeasible(Infeasibility),
}

/// Decides whether the constraints of `qp` (its objective is ignored) admit a
/// point, by minimising the squared violation over the box.
pub fn phase_one(qp: &QuadProgram, tol: f64) -> Result<PhaseOne, QpError> {
    check_dims(qp)?;
    let n = qp.dim();
    let me = qp.eq.len();
    let mi = qp.ineq.len();
    let dim = n + me + mi;
    let reg = 1e-10;
    let mut hess = vec![reg; n];
    hess.extend(std::iter::repeat(1.0).take(me + mi));
    let mut p = QuadProgram::new(hess, vec![0.0; dim]);
    p.lower[..n].copy_from_slice(&qp.lower);
    p.upper[..n].copy_from_slice(&qp.upper);
    for k in 0..mi {
        p.lower[n + me + k] = 0.0;
    }
    let scale_of = |r: &LinearRow| {
        let s = r.norm();
        if s > 0.0 { s } else { 1.0 }
    };
    let eq_scale: Vec<f64> = qp.eq.iter().map(scale_of).collect();
    let in_scale: Vec<f64> = qp.ineq.iter().map(scale_of).collect();
    for (i, r) in qp.eq.iter().enumerate() {
        let mut a: Vec<f64> = r.coeffs.iter().map(|v| v / eq_scale[i]).collect();
        a.resize(dim, 0.0);
        a[n + i] = -1.0;
        p.eq.push(LinearRow::new(a, r.rhs / eq_scale[i]));
    }
    for (k, r) in qp.ineq.iter().enumerate() {
        let mut a: Vec<f64> = r.coeffs.iter().map(|v| v / in_scale[k]).collect();
        a.resize(dim, 0.0);
        a[n + me + k] = -1.0;
        p.ineq.push(LinearRow::new(a, r.rhs / in_scale[k]));
    }
    let sol = match solve(&p) {
        Ok(s) => s,
        // the slack problem is feasible whenever the box is non-empty
        Err(QpError::Infeasible(_)) => {
            return Err(QpError::NumericalFailure("empty box in feasibility problem".into()))
        }
        Err(e) => return Err(e),
    };
    let s = &sol.x[n..n + me];
    let t = &sol.x[n + me..];
    let violation = s.iter().chain(t).fold(0.0f64, |a, v| a.max(v.abs()));
    if violation <= tol {
        return Ok(PhaseOne::Feasible(sol.x[..n].to_vec()));
    }
    let cert = Infeasibility {
        eq: s.iter().zip(&eq_scale).map(|(v, sc)| v / sc).collect(),
        ineq: t.iter().zip(&in_scale).map(|(v, sc)| v.max(0.0) / sc).collect(),
        gap: 0.0,
        violation,
    };
    let gap = cert.recompute_gap(qp);
    // at a genuine least-violation point the gap is the squared violation;
    // anything much smaller is a regularization artifact of a feasible set
    if !(gap > 0.5 * violation * violation) {
        return Ok(PhaseOne::Feasible(sol.x[..n].to_vec()));
    }
    Ok(PhaseOne::Infeasible(Infeasibility { gap, ..cert }))
}

/// Worst KKT residuals of a candidate solution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QpKktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl QpKktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// Recomputes the KKT residuals of `sol` from the problem data alone.
pub fn kkt_residuals(qp: &QuadProgram, sol: &QpSolution) -> QpKktReport {
    let n = qp.dim();
    let x = &sol.x;
    let mut grad: Vec<f64> = (0..n).map(|j| qp.hessian[j] * x[j] + qp.linear[j]).collect();
    for (row, y) in qp.eq.iter().zip(&sol.eq_duals) {
        for (g, a) in grad.iter_mut().zip(&row.coeffs) {
            *g += y * a;
        }
    }
    for (row, z) in qp.ineq.iter().zip(&sol.ineq_duals) {
        for (g, a) in grad.iter_mut().zip(&row.coeffs) {
            *g += z * a;
        }
    }
    for j in 0..n {
        grad[j] += sol.upper_duals[j] - sol.lower_duals[j];
    }
    let mut rep = QpKktReport {
        stationarity: grad.iter().fold(0.0, |a, g| a.max(g.abs())),
        ..Default::default()
    };
    for row in &qp.eq {
        rep.primal = rep.primal.max((row.dot(x) - row.rhs).abs());
    }
    for (row, z) in qp.ineq.iter().zip(&sol.ineq_duals) {
        let s = row.dot(x) - row.rhs;
        rep.primal = rep.primal.max(s.max(0.0));
        rep.dual = rep.dual.max((-z).max(0.0));
        rep.complementarity = rep.complementarity.max((z * s).abs());
    }
    for j in 0..n {
        let (l, u) = (qp.lower[j], qp.upper[j]);
        rep.primal = rep.primal.max((l - x[j]).max(0.0)).max((x[j] - u).max(0.0));
        rep.dual = rep.dual.max((-sol.lower_duals[j]).max(0.0)).max((-sol.upper_duals[j]).max(0.0));
        if l.is_finite() {
            rep.complementarity = rep.complementarity.max((sol.lower_duals[j] * (x[j] - l)).abs());
        } else {
            rep.dual = rep.dual.max(sol.lower_duals[j].abs());
        }
        if u.is_finite() {
            rep.complementarity = rep.complementarity.max((sol.upper_duals[j] * (u - x[j])).abs());
        } else {
            rep.dual = rep.dual.max(sol.upper_duals[j].abs());
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum() {
        let qp = QuadProgram::new(vec![2.0, 4.0], vec![-2.0, 4.0]);
        let s = solve(&qp).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14 && (s.x[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn equality_and_bound() {
        // min ½(x² + y²) s.t. x + y = 2, x ≤ 0.5  →  (0.5, 1.5)
        let mut qp = QuadProgram::new(vec![1.0, 1.0], vec![0.0, 0.0]);
        qp.eq.push(LinearRow::new(vec![1.0, 1.0], 2.0));
        qp.upper[0] = 0.5;
        let s = solve(&qp).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-12 && (s.x[1] - 1.5).abs() < 1e-12);
        // y = −1.5, β_u = 1.0
        assert!((s.eq_duals[0] + 1.5).abs() < 1e-12);
        assert!((s.upper_duals[0] - 1.0).abs() < 1e-12);
        assert!(kkt_residuals(&qp, &s).max() < 1e-12);
    }

    #[test]
    fn redundant_equalities_are_tolerated() {
        let mut qp = QuadProgram::new(vec![1.0; 3], vec![0.0; 3]);
        qp.eq.push(LinearRow::new(vec![1.0, 1.0, 0.0], 1.0));
        qp.eq.push(LinearRow::new(vec![0.0, 0.0, 1.0], 1.0));
        qp.eq.push(LinearRow::new(vec![1.0, 1.0, 1.0], 2.0));
        let s = solve(&qp).unwrap();
        assert!(kkt_residuals(&qp, &s).max() < 1e-12);
        assert!((s.x[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn infeasible_box_and_equality() {
        let mut qp = QuadProgram::new(vec![1.0, 1.0], vec![0.0, 0.0]);
        qp.eq.push(LinearRow::new(vec![1.0, 1.0], 3.0));
        qp.upper = vec![1.0, 1.0];
        assert!(matches!(solve(&qp), Err(QpError::Infeasible(_))));
    }

    #[test]
    fn inequality_rows() {
        // min ½‖x‖² − x₀ − x₁ s.t. x₀ + 2x₁ ≤ 1
        let mut qp = QuadProgram::new(vec![1.0, 1.0], vec![-1.0, -1.0]);
        qp.ineq.push(LinearRow::new(vec![1.0, 2.0], 1.0));
        let s = solve(&qp).unwrap();
        assert!(kkt_residuals(&qp, &s).max() < 1e-12);
        assert!((s.x[0] + 2.0 * s.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phase_one_feasible_and_certificate() {
        let mut qp = QuadProgram::new(vec![1.0, 1.0], vec![0.0, 0.0]);
        qp.eq.push(LinearRow::new(vec![1.0, 1.0], 1.5));
        qp.lower = vec![0.0, 0.0];
        qp.upper = vec![1.0, 1.0];
        assert!(matches!(phase_one(&qp, 1e-9).unwrap(), PhaseOne::Feasible(_)));
        qp.eq[0].rhs = 3.0;
        match phase_one(&qp, 1e-9).unwrap() {
            PhaseOne::Infeasible(c) => {
                // distance to the box corner is 1/√2 along the normal; gap = ‖v‖²
                assert!((c.gap - 0.5).abs() < 1e-6, "{c:?}");
                assert!((c.recompute_gap(&qp) - c.gap).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn phase_one_inequality_certificate_is_nonnegative() {
        let mut qp = QuadProgram::new(vec![1.0], vec![0.0]);
        qp.ineq.push(LinearRow::new(vec![1.0], -1.0));
        qp.lower = vec![0.0];
        qp.upper = vec![2.0];
        match phase_one(&qp, 1e-9).unwrap() {
            PhaseOne::Infeasible(c) => {
                assert!(c.ineq[0] > 0.0);
                assert!(c.gap > 0.9);
            }
            other => panic!("{other:?}"),
        }
    }
}

//! Projected primal-dual dynamics for the UC problem and a dual-divergence
//! detector for infeasible (critical) instances.
//!
//! The iteration works on the full variable vector `x = (θ, ω, d, f)` with
//! every constraint row scaled to unit norm. One step is
//!
//! ```text
//! x  ← Π_box( x − h ∇ₓ L_ρ(x, λ) )
//! λ₁ ← max(0, λ₁ + h (A x − g))
//! λ₂ ← λ₂ + h (C x − h)
//! ```
//!
//! where `L_ρ` adds `ρ/2 ‖Cx − h‖² + ρ/2 ‖[Ax − g + λ₁/ρ]⁺‖²`-type proximal
//! terms to the Lagrangian. The extra terms vanish at every saddle point, so
//! fixed points are exactly the KKT points, but they damp the oscillation of
//! the angle and flow variables, which have no curvature of their own. The
//! dual update uses the fresh primal iterate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::equilibria::{
    Controller, Duals, Equilibrium, EquilibriumProblem, FarkasCertificate, RowGroup, RowKey,
    SparseRow, StandardForm,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrimalDualError {
    #[error("non-finite {what} at iteration {iteration}")]
    NonFiniteValue { what: &'static str, iteration: usize },
    #[error("primal-dual detection requires a uc problem, got {0}")]
    NotUc(Controller),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub step: f64,
    /// Weight of the proximal penalty terms.
    pub rho: f64,
    /// Threshold for every group; `None` uses `1e3 × (initial dual scale + 1)`.
    pub threshold: Option<f64>,
    pub group_thresholds: BTreeMap<RowGroup, f64>,
    /// Consecutive iterations above threshold needed to raise an alarm.
    pub window: usize,
    pub budget: usize,
    /// Convergence tolerance on the normalized residuals.
    pub tol: f64,
    /// Record every n-th iteration in the trace.
    pub record_every: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            rho: 3.0,
            threshold: None,
            group_thresholds: BTreeMap::new(),
            window: 200,
            budget: 200_000,
            tol: 1e-7,
            record_every: 1,
        }
    }
}

pub const DEFAULT_STEP: f64 = 1e-2;

impl DetectorConfig {
    pub fn threshold_for(&self, group: RowGroup, initial_scale: f64) -> f64 {
        if let Some(t) = self.group_thresholds.get(&group) {
            return *t;
        }
        self.threshold.unwrap_or(1e3 * (initial_scale + 1.0))
    }
}

/// Iterate of the dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualState {
    pub x: Vec<f64>,
    /// Multipliers of the normalized inequality rows (non-negative).
    pub lambda_in: Vec<f64>,
    /// Multipliers of the normalized equality rows.
    pub lambda_eq: Vec<f64>,
    pub iteration: usize,
    pub step: f64,
    /// Running maximum of |λ| per group.
    pub running_max: [f64; 5],
}

/// Row-normalized standard form plus the data needed to map back.
#[derive(Clone, Debug)]
pub struct PrimalDual {
    pub form: StandardForm,
    pub eq_scale: Vec<f64>,
    pub in_scale: Vec<f64>,
    eq_group: Vec<usize>,
    in_group: Vec<usize>,
    // transposed rows: for each variable, (row, value)
    eq_cols: Vec<Vec<(usize, f64)>>,
    in_cols: Vec<Vec<(usize, f64)>>,
}

fn group_index(g: RowGroup) -> usize {
    RowGroup::ALL.iter().position(|x| *x == g).unwrap()
}

fn normalize(rows: &mut [SparseRow]) -> Vec<f64> {
    rows.iter_mut()
        .map(|r| {
            let s = r.norm();
            let s = if s > 0.0 { s } else { 1.0 };
            r.val.iter_mut().for_each(|v| *v /= s);
            r.rhs /= s;
            s
        })
        .collect()
}

fn columns(rows: &[SparseRow], dim: usize) -> Vec<Vec<(usize, f64)>> {
    let mut cols = vec![Vec::new(); dim];
    for (i, r) in rows.iter().enumerate() {
        for (&j, &v) in r.idx.iter().zip(&r.val) {
            cols[j].push((i, v));
        }
    }
    cols
}

impl PrimalDual {
    pub fn new(problem: &EquilibriumProblem) -> Self {
        let mut form = StandardForm::build(problem);
        let eq_scale = normalize(&mut form.eq);
        let in_scale = normalize(&mut form.ineq);
        let dim = form.dim();
        let eq_cols = columns(&form.eq, dim);
        let in_cols = columns(&form.ineq, dim);
        let eq_group = form.eq_keys.iter().map(|k| group_index(k.group())).collect();
        let in_group = form.ineq_keys.iter().map(|k| group_index(k.group())).collect();
        Self { form, eq_scale, in_scale, eq_group, in_group, eq_cols, in_cols }
    }

    /// Pre-contingency point: zero deviations, zero multipliers.
    pub fn initial_state(&self, step: f64) -> PrimalDualState {
        PrimalDualState {
            x: vec![0.0; self.form.dim()],
            lambda_in: vec![0.0; self.form.ineq.len()],
            lambda_eq: vec![0.0; self.form.eq.len()],
            iteration: 0,
            step,
            running_max: [0.0; 5],
        }
    }

    fn eq_residual(&self, x: &[f64]) -> Vec<f64> {
        self.form.eq.iter().map(|r| r.dot(x) - r.rhs).collect()
    }

    fn in_residual(&self, x: &[f64]) -> Vec<f64> {
        self.form.ineq.iter().map(|r| r.dot(x) - r.rhs).collect()
    }

    fn project(&self, x: &mut [f64]) {
        for j in self.form.d_range() {
            x[j] = x[j].clamp(self.form.lower[j], self.form.upper[j]);
        }
    }

    /// Gradient of the Lagrangian with multipliers `(leq, lin)`.
    fn gradient(&self, x: &[f64], leq: &[f64], lin: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = self.form.quad.iter().zip(x).map(|(q, v)| q * v).collect();
        for (j, gj) in g.iter_mut().enumerate() {
            for &(i, v) in &self.eq_cols[j] {
                *gj += leq[i] * v;
            }
            for &(i, v) in &self.in_cols[j] {
                *gj += lin[i] * v;
            }
        }
        g
    }

    /// One step of the dynamics.
    pub fn step(&self, s: &mut PrimalDualState, rho: f64) -> Result<(), PrimalDualError> {
        let h = s.step;
        let req = self.eq_residual(&s.x);
        let rin = self.in_residual(&s.x);
        let leq: Vec<f64> = s.lambda_eq.iter().zip(&req).map(|(l, r)| l + rho * r).collect();
        let lin: Vec<f64> = s.lambda_in.iter().zip(&rin).map(|(l, r)| (l + rho * r).max(0.0)).collect();
        let g = self.gradient(&s.x, &leq, &lin);
        for (x, gj) in s.x.iter_mut().zip(&g) {
            *x -= h * gj;
        }
        self.project(&mut s.x);
        if s.x.iter().any(|v| !v.is_finite()) {
            return Err(PrimalDualError::NonFiniteValue { what: "primal", iteration: s.iteration });
        }
        let req = self.eq_residual(&s.x);
        let rin = self.in_residual(&s.x);
        for (l, r) in s.lambda_eq.iter_mut().zip(&req) {
            *l += h * r;
        }
        for (l, r) in s.lambda_in.iter_mut().zip(&rin) {
            *l = (*l + h * r).max(0.0);
        }
        if s.lambda_eq.iter().chain(&s.lambda_in).any(|v| !v.is_finite()) {
            return Err(PrimalDualError::NonFiniteValue { what: "dual", iteration: s.iteration });
        }
        s.iteration += 1;
        let gm = self.group_max(s);
        for (m, v) in s.running_max.iter_mut().zip(gm) {
            *m = m.max(v);
        }
        Ok(())
    }

    /// Current max |λ| per group.
    pub fn group_max(&self, s: &PrimalDualState) -> [f64; 5] {
        let mut out = [0.0f64; 5];
        for (l, &g) in s.lambda_eq.iter().zip(&self.eq_group) {
            out[g] = out[g].max(l.abs());
        }
        for (l, &g) in s.lambda_in.iter().zip(&self.in_group) {
            out[g] = out[g].max(l.abs());
        }
        out
    }

    /// `(primal infeasibility, stationarity, dual complementarity)` in normalized units.
    pub fn residuals(&self, s: &PrimalDualState) -> (f64, f64, f64) {
        let req = self.eq_residual(&s.x);
        let rin = self.in_residual(&s.x);
        let primal = req
            .iter()
            .map(|v| v.abs())
            .chain(rin.iter().map(|v| v.max(0.0)))
            .fold(0.0, f64::max);
        let g = self.gradient(&s.x, &s.lambda_eq, &s.lambda_in);
        let mut y: Vec<f64> = s.x.iter().zip(&g).map(|(x, gj)| x - gj).collect();
        self.project(&mut y);
        let stat = s.x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let comp = s
            .lambda_in
            .iter()
            .zip(&rin)
            .map(|(l, r)| (l - (l + r).max(0.0)).abs())
            .fold(0.0, f64::max);
        (primal, stat, comp)
    }

    /// Weights of a certificate on the normalized rows.
    pub fn certificate_weights(&self, cert: &FarkasCertificate) -> (Vec<f64>, Vec<f64>) {
        (
            cert.eq.iter().zip(&self.eq_scale).map(|(w, s)| w * s).collect(),
            cert.ineq.iter().zip(&self.in_scale).map(|(w, s)| w * s).collect(),
        )
    }

    /// `zᵀλ` for certificate weights `z`.
    pub fn dual_inner(&self, s: &PrimalDualState, w: &(Vec<f64>, Vec<f64>)) -> f64 {
        let a: f64 = w.0.iter().zip(&s.lambda_eq).map(|(a, b)| a * b).sum();
        let b: f64 = w.1.iter().zip(&s.lambda_in).map(|(a, b)| a * b).sum();
        a + b
    }

    /// Reads an equilibrium off a (converged) state.
    pub fn equilibrium(&self, problem: &EquilibriumProblem, s: &PrimalDualState) -> Equilibrium {
        let n = self.form.n;
        let m = problem.net.m();
        let x = &s.x;
        let mut f = vec![0.0; m];
        for (col, &k) in self.form.lines.iter().enumerate() {
            f[k] = x[3 * n + col];
        }
        let groups = problem.ace_groups();
        let mut duals = Duals {
            frequency: vec![0.0; n],
            balance: vec![0.0; n],
            flow: vec![0.0; m],
            ace: vec![0.0; groups.len()],
            line_upper: vec![0.0; m],
            line_lower: vec![0.0; m],
            d_lower: vec![0.0; n],
            d_upper: vec![0.0; n],
        };
        for ((key, l), sc) in self.form.eq_keys.iter().zip(&s.lambda_eq).zip(&self.eq_scale) {
            let v = l / sc;
            match *key {
                RowKey::Frequency(j) => duals.frequency[j] = v,
                RowKey::Balance(j) => duals.balance[j] = v,
                RowKey::Flow(k) => duals.flow[k] = v,
                RowKey::Ace(g) => duals.ace[g] = v,
                _ => {}
            }
        }
        for ((key, l), sc) in self.form.ineq_keys.iter().zip(&s.lambda_in).zip(&self.in_scale) {
            match *key {
                RowKey::LineUpper(k) => duals.line_upper[k] = l / sc,
                RowKey::LineLower(k) => duals.line_lower[k] = l / sc,
                _ => {}
            }
        }
        let g = self.gradient(x, &s.lambda_eq, &s.lambda_in);
        for j in 0..n {
            let gj = g[2 * n + j];
            duals.d_upper[j] = (-gj).max(0.0);
            duals.d_lower[j] = gj.max(0.0);
        }
        let d = x[2 * n..3 * n].to_vec();
        let objective = (0..n).map(|j| 0.5 * problem.cost[j] * d[j] * d[j]).sum();
        Equilibrium {
            controller: problem.controller,
            theta: x[..n].to_vec(),
            omega: x[n..2 * n].to_vec(),
            d,
            f,
            objective,
            duals,
            ace_groups: groups,
        }
    }
}

/// One step from `state`, returning the new state.
pub fn primal_dual_step(
    pd: &PrimalDual,
    state: &PrimalDualState,
    rho: f64,
) -> Result<PrimalDualState, PrimalDualError> {
    let mut s = state.clone();
    pd.step(&mut s, rho)?;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub primal_residual: f64,
    /// Max |λ| per group, in [`RowGroup::ALL`] order.
    pub group_max: [f64; 5],
}

/// Append-only record of the dual magnitudes along a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DualTrace {
    pub record_every: usize,
    pub initial_scale: f64,
    pub records: Vec<TraceRecord>,
}

impl DualTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,primal_residual");
        for g in RowGroup::ALL {
            out.push(',');
            out.push_str(g.name());
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{:.9e}", r.iteration, r.primal_residual);
            for v in r.group_max {
                let _ = write!(out, ",{v:.9e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn peak(&self) -> f64 {
        self.records.iter().flat_map(|r| r.group_max).fold(0.0, f64::max)
    }
}

/// True when some group stays above its threshold for `window` consecutive
/// iterations of the trace.
pub fn detect_critical(trace: &DualTrace, config: &DetectorConfig) -> bool {
    first_alarm(trace, config).is_some()
}

fn first_alarm(trace: &DualTrace, config: &DetectorConfig) -> Option<(RowGroup, usize)> {
    let every = trace.record_every.max(1);
    let need = config.window.div_ceil(every).max(1);
    let mut run = [0usize; 5];
    for r in &trace.records {
        for (gi, g) in RowGroup::ALL.iter().enumerate() {
            if r.group_max[gi] > config.threshold_for(*g, trace.initial_scale) {
                run[gi] += 1;
                if run[gi] >= need {
                    return Some((*g, r.iteration));
                }
            } else {
                run[gi] = 0;
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Converged { equilibrium: Equilibrium, trace: DualTrace, iterations: usize },
    CriticalDetected { group: RowGroup, iteration: usize, trace: DualTrace },
    Budget { trace: DualTrace },
}

impl Outcome {
    pub fn trace(&self) -> &DualTrace {
        match self {
            Outcome::Converged { trace, .. }
            | Outcome::CriticalDetected { trace, .. }
            | Outcome::Budget { trace } => trace,
        }
    }

    pub fn verdict(&self) -> &'static str {
        match self {
            Outcome::Converged { .. } => "Converged",
            Outcome::CriticalDetected { .. } => "CriticalDetected",
            Outcome::Budget { .. } => "Budget",
        }
    }
}

/// Runs the dynamics from the pre-contingency point until convergence,
/// detection or the iteration budget.
pub fn run_primal_dual(
    problem: &EquilibriumProblem,
    config: &DetectorConfig,
) -> Result<Outcome, PrimalDualError> {
    let pd = PrimalDual::new(problem);
    run_with(problem, &pd, config, |_| {})
}

/// As [`run_primal_dual`], calling `observe` after every step.
pub fn run_with(
    problem: &EquilibriumProblem,
    pd: &PrimalDual,
    config: &DetectorConfig,
    mut observe: impl FnMut(&PrimalDualState),
) -> Result<Outcome, PrimalDualError> {
    if problem.controller != Controller::Uc {
        return Err(PrimalDualError::NotUc(problem.controller));
    }
    let mut s = pd.initial_state(config.step);
    let every = config.record_every.max(1);
    let initial_scale = pd.group_max(&s).iter().copied().fold(0.0, f64::max);
    let mut trace = DualTrace { record_every: every, initial_scale, records: Vec::new() };
    let thresholds: Vec<f64> =
        RowGroup::ALL.iter().map(|g| config.threshold_for(*g, initial_scale)).collect();
    let mut run = [0usize; 5];
    let check_every = 20;
    while s.iteration < config.budget {
        pd.step(&mut s, config.rho)?;
        let gm = pd.group_max(&s);
        if s.iteration % every == 0 {
            let primal = if s.iteration % check_every == 0 { pd.residuals(&s).0 } else { f64::NAN };
            trace.records.push(TraceRecord { iteration: s.iteration, primal_residual: primal, group_max: gm });
        }
        observe(&s);
        for gi in 0..5 {
            if gm[gi] > thresholds[gi] {
                run[gi] += 1;
                if run[gi] >= config.window.max(1) {
                    return Ok(Outcome::CriticalDetected {
                        group: RowGroup::ALL[gi],
                        iteration: s.iteration,
                        trace,
                    });
                }
            } else {
                run[gi] = 0;
            }
        }
        if s.iteration % check_every == 0 {
            let (p, st, c) = pd.residuals(&s);
            if p.max(st).max(c) <= config.tol {
                let equilibrium = pd.equilibrium(problem, &s);
                return Ok(Outcome::Converged { equilibrium, trace, iterations: s.iteration });
            }
        }
    }
    Ok(Outcome::Budget { trace })
}

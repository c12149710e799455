//! Post-contingency equilibria of the three controllers, posed as strictly
//! convex quadratic programs.
//!
//! Every controller uses the balance convention `r + d − Dω = C f` (the
//! damping term only appears under droop). Solves are carried out in the
//! space of adjustable injections `d` (plus one frequency per component for
//! droop): angles and flows are eliminated through the grounded Laplacian,
//! so `f = H (r + d − Dω)` with `H` the PTDF matrix. The full-space point and
//! multipliers are reconstructed afterwards and can be checked independently
//! with [`verify_kkt`] against the [`StandardForm`] of the problem.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcflow::{flows_from_angles, FlowError, GroundedLaplacian, Ptdf};
use crate::netmodel::{BusId, Network, NetworkError};
use crate::qp::{self, Infeasibility, LinearRow, PhaseOne, QpError, QuadProgram};
use crate::topology::Partition;

/// Tolerance on the largest normalized constraint violation at the
/// least-violation point below which a problem counts as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Uc,
    Agc,
    Droop,
}

impl std::fmt::Display for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Controller::Uc => "uc",
            Controller::Agc => "agc",
            Controller::Droop => "droop",
        })
    }
}

impl std::str::FromStr for Controller {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "uc" => Ok(Controller::Uc),
            "agc" => Ok(Controller::Agc),
            "droop" => Ok(Controller::Droop),
            _ => Err(format!("unknown controller `{s}` (expected uc, agc or droop)")),
        }
    }
}

/// One relaxation step applied to a problem after a critical failure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LiftAction {
    /// Merge the balancing groups containing these two areas.
    LiftAce { a: usize, b: usize },
    /// Replace the deviation bounds of load buses.
    ExpandLoadBounds { buses: Vec<BusId>, bounds: Vec<(f64, f64)> },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("equilibrium problem is infeasible (gap {:e})", .0.epsilon)]
    Infeasible(Box<FarkasCertificate>),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

impl From<QpError> for EquilibriumError {
    fn from(e: QpError) -> Self {
        EquilibriumError::NumericalFailure(e.to_string())
    }
}

/// One controller's equilibrium problem on a post-contingency network.
#[derive(Clone, Debug)]
pub struct EquilibriumProblem {
    pub net: Network,
    pub partition: Partition,
    /// Disturbance per bus index.
    pub disturbance: Vec<f64>,
    /// `[d̲, d̄]` per bus index.
    pub bounds: Vec<(f64, f64)>,
    /// Quadratic cost weight α per bus index.
    pub cost: Vec<f64>,
    /// Flow-deviation bounds per line index.
    pub line_bounds: Vec<(f64, f64)>,
    pub controller: Controller,
    pub lifts: Vec<LiftAction>,
}

impl EquilibriumProblem {
    /// Takes bounds and costs from the bus records and flow bounds from the
    /// base flows and thermal limits.
    pub fn new(
        net: Network,
        partition: Partition,
        disturbance: Vec<f64>,
        controller: Controller,
    ) -> Result<Self, EquilibriumError> {
        if disturbance.len() != net.n() || partition.labels().len() != net.n() {
            return Err(EquilibriumError::Invalid("dimension mismatch".into()));
        }
        let bounds = net.buses().iter().map(|b| (b.d_lower, b.d_upper)).collect();
        let cost = net.buses().iter().map(|b| b.cost).collect();
        let line_bounds = net.deviation_bounds()?;
        Ok(Self {
            net,
            partition,
            disturbance,
            bounds,
            cost,
            line_bounds,
            controller,
            lifts: Vec::new(),
        })
    }

    pub fn with_controller(mut self, controller: Controller) -> Self {
        self.controller = controller;
        self
    }

    /// Applies a lift and records it.
    pub fn apply_lift(&mut self, action: LiftAction) -> Result<(), EquilibriumError> {
        match &action {
            LiftAction::LiftAce { a, b } => {
                if *a >= self.partition.len() || *b >= self.partition.len() {
                    return Err(EquilibriumError::Invalid(format!("no area pair ({a}, {b})")));
                }
            }
            LiftAction::ExpandLoadBounds { buses, bounds } => {
                if buses.len() != bounds.len() {
                    return Err(EquilibriumError::Invalid("bounds per bus required".into()));
                }
                for (id, &(lo, hi)) in buses.iter().zip(bounds) {
                    let j = self.net.require_bus(*id)?;
                    let (l0, h0) = self.bounds[j];
                    if lo > l0 || hi < h0 {
                        return Err(EquilibriumError::Invalid(format!(
                            "bounds of bus {id} may only widen"
                        )));
                    }
                    self.bounds[j] = (lo, hi);
                }
            }
        }
        self.lifts.push(action);
        Ok(())
    }

    /// Balancing groups: the areas after merging lifted pairs, each a sorted
    /// list of area labels, ordered by smallest label.
    pub fn ace_groups(&self) -> Vec<Vec<usize>> {
        let k = self.partition.len();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for l in &self.lifts {
            if let LiftAction::LiftAce { a, b } = l {
                let (ra, rb) = (find(&mut parent, *a), find(&mut parent, *b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; k];
        for a in 0..k {
            let r = find(&mut parent, a);
            if slot[r] == usize::MAX {
                slot[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[r]].push(a);
        }
        groups
    }

    /// Group index of every bus.
    fn bus_groups(&self, groups: &[Vec<usize>]) -> Vec<usize> {
        let mut of_area = vec![0; self.partition.len()];
        for (g, areas) in groups.iter().enumerate() {
            for &a in areas {
                of_area[a] = g;
            }
        }
        (0..self.net.n()).map(|j| of_area[self.partition.area_of(j)]).collect()
    }

    fn has_ace(&self) -> bool {
        matches!(self.controller, Controller::Uc | Controller::Agc)
    }

    fn has_line_limits(&self) -> bool {
        self.controller == Controller::Uc
    }

    fn damping(&self) -> Vec<f64> {
        self.net.buses().iter().map(|b| b.damping).collect()
    }

    /// The problem in reduced variables, with row bookkeeping.
    pub fn reduced(&self) -> Result<Reduced, EquilibriumError> {
        Reduced::build(self)
    }
}

/// Rows of the reduced program, in order.
#[derive(Clone, Debug)]
pub struct Reduced {
    pub qp: QuadProgram,
    pub lap: GroundedLaplacian,
    pub ptdf: Ptdf,
    /// equality rows: one per component, then one per balancing group
    pub n_comp: usize,
    pub groups: Vec<Vec<usize>>,
    pub bus_group: Vec<usize>,
    /// inequality rows: upper then lower for each entry of `ptdf.lines`
    pub limited: bool,
}

impl Reduced {
    fn build(p: &EquilibriumProblem) -> Result<Self, EquilibriumError> {
        let net = &p.net;
        let n = net.n();
        let lap = GroundedLaplacian::new(net)?;
        let comps = lap.components().clone();
        let droop = p.controller == Controller::Droop;
        let nc = comps.len();
        let dim = if droop { n + nc } else { n };
        let damping = p.damping();
        let mut hess = p.cost.clone();
        let r = &p.disturbance;
        if droop {
            for members in &comps.members {
                let dsum: f64 = members.iter().map(|&j| damping[j]).sum();
                hess.push(if dsum > 0.0 { dsum } else { 1.0 });
            }
        }
        let mut qp = QuadProgram::new(hess, vec![0.0; dim]);
        for j in 0..n {
            qp.lower[j] = p.bounds[j].0;
            qp.upper[j] = p.bounds[j].1;
        }
        for (c, members) in comps.members.iter().enumerate() {
            let mut a = vec![0.0; dim];
            for &j in members {
                a[j] = 1.0;
            }
            if droop {
                a[n + c] = -members.iter().map(|&j| damping[j]).sum::<f64>();
            }
            let rhs = -members.iter().map(|&j| r[j]).sum::<f64>();
            qp.eq.push(LinearRow::new(a, rhs));
        }
        let groups = if p.has_ace() { p.ace_groups() } else { Vec::new() };
        let bus_group = p.bus_groups(&groups);
        for g in 0..groups.len() {
            let mut a = vec![0.0; dim];
            let mut rhs = 0.0;
            for j in 0..n {
                if bus_group[j] == g {
                    a[j] = 1.0;
                    rhs -= r[j];
                }
            }
            qp.eq.push(LinearRow::new(a, rhs));
        }
        let ptdf = Ptdf::from_laplacian(net, &lap);
        let limited = p.has_line_limits();
        if limited {
            for (row, &k) in ptdf.lines.iter().enumerate() {
                let h: Vec<f64> = ptdf.matrix.row(row).iter().copied().collect();
                let hr: f64 = h.iter().zip(r).map(|(a, b)| a * b).sum();
                let (lo, hi) = p.line_bounds[k];
                let mut up = h.clone();
                up.resize(dim, 0.0);
                let down: Vec<f64> = up.iter().map(|v| -v).collect();
                qp.ineq.push(LinearRow::new(up, hi - hr));
                qp.ineq.push(LinearRow::new(down, hr - lo));
            }
        }
        Ok(Self { qp, lap, ptdf, n_comp: nc, groups, bus_group, limited })
    }
}

/// Multipliers of an equilibrium, in full-space terms.
///
/// Signs follow the Lagrangian `cost + λᵀ(row − rhs)` of the rows in the
/// [`StandardForm`]; bound multipliers are non-negative.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    /// `ω_j = 0` rows (zero under droop, where these rows are absent).
    pub frequency: Vec<f64>,
    /// Nodal balance, per bus.
    pub balance: Vec<f64>,
    /// Flow definition, per line index (zero when out of service).
    pub flow: Vec<f64>,
    /// Zero-ACE rows, per balancing group.
    pub ace: Vec<f64>,
    pub line_upper: Vec<f64>,
    pub line_lower: Vec<f64>,
    pub d_lower: Vec<f64>,
    pub d_upper: Vec<f64>,
}

/// A solved operating point in deviation coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub controller: Controller,
    pub theta: Vec<f64>,
    /// Frequency deviation per bus.
    pub omega: Vec<f64>,
    pub d: Vec<f64>,
    /// Flow deviation per line index (zero when out of service).
    pub f: Vec<f64>,
    pub objective: f64,
    pub duals: Duals,
    /// Balancing groups (area labels) in force.
    pub ace_groups: Vec<Vec<usize>>,
}

impl Equilibrium {
    /// Full-space multipliers in [`StandardForm`] row order.
    pub fn row_duals(&self, form: &StandardForm) -> (Vec<f64>, Vec<f64>) {
        let mut eq = Vec::with_capacity(form.eq.len());
        let mut ineq = Vec::with_capacity(form.ineq.len());
        for key in &form.eq_keys {
            eq.push(match *key {
                RowKey::Frequency(j) => self.duals.frequency[j],
                RowKey::Balance(j) => self.duals.balance[j],
                RowKey::Flow(k) => self.duals.flow[k],
                RowKey::Ace(g) => self.duals.ace[g],
                _ => 0.0,
            });
        }
        for key in &form.ineq_keys {
            ineq.push(match *key {
                RowKey::LineUpper(k) => self.duals.line_upper[k],
                RowKey::LineLower(k) => self.duals.line_lower[k],
                _ => 0.0,
            });
        }
        (eq, ineq)
    }

    /// Full-space variable vector `(θ, ω, d, f_in-service)`.
    pub fn point(&self, form: &StandardForm) -> Vec<f64> {
        let mut x = Vec::with_capacity(form.dim());
        x.extend(&self.theta);
        x.extend(&self.omega);
        x.extend(&self.d);
        x.extend(form.lines.iter().map(|&k| self.f[k]));
        x
    }
}

pub fn uc_equilibrium(problem: &EquilibriumProblem) -> Result<Equilibrium, EquilibriumError> {
    expect(problem, Controller::Uc)?;
    solve(problem)
}

pub fn agc_equilibrium(problem: &EquilibriumProblem) -> Result<Equilibrium, EquilibriumError> {
    expect(problem, Controller::Agc)?;
    solve(problem)
}

pub fn droop_equilibrium(problem: &EquilibriumProblem) -> Result<Equilibrium, EquilibriumError> {
    expect(problem, Controller::Droop)?;
    solve(problem)
}

fn expect(problem: &EquilibriumProblem, c: Controller) -> Result<(), EquilibriumError> {
    if problem.controller != c {
        return Err(EquilibriumError::Invalid(format!(
            "expected a {c} problem, got {}",
            problem.controller
        )));
    }
    Ok(())
}

/// Solves the problem for its own controller.
pub fn solve(problem: &EquilibriumProblem) -> Result<Equilibrium, EquilibriumError> {
    let red = problem.reduced()?;
    let sol = match qp::solve(&red.qp) {
        Ok(s) => s,
        Err(QpError::Infeasible(_)) => {
            return match check_feasibility_reduced(problem, &red)? {
                Feasibility::Infeasible(c) => Err(EquilibriumError::Infeasible(Box::new(c))),
                Feasibility::Feasible => Err(EquilibriumError::NumericalFailure(
                    "active-set solve and feasibility check disagree".into(),
                )),
            };
        }
        Err(e) => return Err(e.into()),
    };
    Ok(reconstruct(problem, &red, &sol.x, &sol.eq_duals, &sol.ineq_duals, &sol))
}

fn reconstruct(
    problem: &EquilibriumProblem,
    red: &Reduced,
    x: &[f64],
    eq_duals: &[f64],
    ineq_duals: &[f64],
    sol: &qp::QpSolution,
) -> Equilibrium {
    let net = &problem.net;
    let n = net.n();
    let m = net.m();
    let comps = red.lap.components();
    let droop = problem.controller == Controller::Droop;
    let damping = problem.damping();
    let r = &problem.disturbance;
    let d = x[..n].to_vec();

    let y_comp = &eq_duals[..red.n_comp];
    let y_ace = &eq_duals[red.n_comp..];
    let mut omega = vec![0.0; n];
    if droop {
        for (c, members) in comps.members.iter().enumerate() {
            let dsum: f64 = members.iter().map(|&j| damping[j]).sum();
            // without damping the frequency is not pinned by the program;
            // report the balance multiplier, which is its limit as D → 0
            let w = if dsum > 0.0 { x[n + c] } else { y_comp[c] };
            for &j in members {
                omega[j] = w;
            }
        }
    }
    // omega is identically zero unless droop
    let p: Vec<f64> = (0..n).map(|j| r[j] + d[j] - damping[j] * omega[j]).collect();
    let theta = red.lap.solve_grounded(&p);
    let f = flows_from_angles(net, &theta);

    // line multipliers per line index
    let mut line_upper = vec![0.0; m];
    let mut line_lower = vec![0.0; m];
    let mut zeta = vec![0.0; red.ptdf.lines.len()];
    if red.limited {
        for (row, &k) in red.ptdf.lines.iter().enumerate() {
            line_upper[k] = ineq_duals[2 * row];
            line_lower[k] = ineq_duals[2 * row + 1];
            zeta[row] = line_upper[k] - line_lower[k];
        }
    }
    let balance = lift_balance(net, comps, red, y_comp, y_ace, &zeta);
    let ace = y_ace.to_vec();
    let flow = flow_multipliers(net, red, &balance, &ace, &zeta);
    let frequency = vec![0.0; n];

    let mut objective: f64 = (0..n).map(|j| 0.5 * problem.cost[j] * d[j] * d[j]).sum();
    if droop {
        objective += (0..n).map(|j| 0.5 * damping[j] * omega[j] * omega[j]).sum::<f64>();
    }
    Equilibrium {
        controller: problem.controller,
        theta,
        omega,
        d,
        f,
        objective,
        duals: Duals {
            frequency,
            balance,
            flow,
            ace,
            line_upper,
            line_lower,
            d_lower: sol.lower_duals[..n].to_vec(),
            d_upper: sol.upper_duals[..n].to_vec(),
        },
        ace_groups: red.groups.clone(),
    }
}

/// `μ = Σ_c y_c 1_c + Eᵀ y_ace + Hᵀ ζ`.
fn lift_balance(
    net: &Network,
    comps: &crate::netmodel::Components,
    red: &Reduced,
    y_comp: &[f64],
    y_ace: &[f64],
    zeta: &[f64],
) -> Vec<f64> {
    let n = net.n();
    let mut mu = vec![0.0; n];
    for j in 0..n {
        mu[j] = y_comp[comps.of_bus[j]];
        if !y_ace.is_empty() {
            mu[j] += y_ace[red.bus_group[j]];
        }
    }
    for (row, z) in zeta.iter().enumerate() {
        if *z != 0.0 {
            for j in 0..n {
                mu[j] += red.ptdf.matrix[(row, j)] * z;
            }
        }
    }
    mu
}

/// `ν = Cᵀ(μ − Eᵀκ) − ζ` per line index.
fn flow_multipliers(net: &Network, red: &Reduced, mu: &[f64], ace: &[f64], zeta: &[f64]) -> Vec<f64> {
    let mut nu = vec![0.0; net.m()];
    let eff = |j: usize| mu[j] - if ace.is_empty() { 0.0 } else { ace[red.bus_group[j]] };
    for (row, &k) in red.ptdf.lines.iter().enumerate() {
        let (a, b) = net.ends(k);
        nu[k] = eff(a) - eff(b) - zeta[row];
    }
    nu
}

/// Which family a full-space row belongs to, with its bus, line or group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowKey {
    Frequency(usize),
    Balance(usize),
    Flow(usize),
    Ace(usize),
    LineUpper(usize),
    LineLower(usize),
}

impl RowKey {
    pub fn group(&self) -> RowGroup {
        match self {
            RowKey::Frequency(_) => RowGroup::Frequency,
            RowKey::Balance(_) => RowGroup::Balance,
            RowKey::Flow(_) => RowGroup::Flow,
            RowKey::Ace(_) => RowGroup::Ace,
            RowKey::LineUpper(_) | RowKey::LineLower(_) => RowGroup::LineLimit,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowGroup {
    Frequency,
    Balance,
    Flow,
    Ace,
    LineLimit,
}

impl RowGroup {
    pub const ALL: [RowGroup; 5] =
        [RowGroup::Frequency, RowGroup::Balance, RowGroup::Flow, RowGroup::Ace, RowGroup::LineLimit];

    pub fn name(&self) -> &'static str {
        match self {
            RowGroup::Frequency => "frequency",
            RowGroup::Balance => "balance",
            RowGroup::Flow => "flow",
            RowGroup::Ace => "ace",
            RowGroup::LineLimit => "line_limit",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
    pub rhs: f64,
}

impl SparseRow {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, v)| v * x[i]).sum()
    }

    pub fn norm(&self) -> f64 {
        self.val.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The problem over `x = (θ, ω, d, f)` as
/// `min Σ ½ q_i x_i²  s.t.  A x ≤ g,  C x = h,  d̲ ≤ d ≤ d̄`,
/// with `f` restricted to in-service lines.
#[derive(Clone, Debug)]
pub struct StandardForm {
    pub n: usize,
    /// Line index of each flow variable.
    pub lines: Vec<usize>,
    pub quad: Vec<f64>,
    pub eq: Vec<SparseRow>,
    pub eq_keys: Vec<RowKey>,
    pub ineq: Vec<SparseRow>,
    pub ineq_keys: Vec<RowKey>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StandardForm {
    pub fn build(problem: &EquilibriumProblem) -> Self {
        let net = &problem.net;
        let n = net.n();
        let lines: Vec<usize> = net.in_service().collect();
        let ml = lines.len();
        let dim = 3 * n + ml;
        let (om, dd, ff) = (n, 2 * n, 3 * n);
        let droop = problem.controller == Controller::Droop;
        let damping = problem.damping();
        let mut quad = vec![0.0; dim];
        for j in 0..n {
            quad[dd + j] = problem.cost[j];
            if droop {
                quad[om + j] = damping[j];
            }
        }
        let mut lower = vec![f64::NEG_INFINITY; dim];
        let mut upper = vec![f64::INFINITY; dim];
        for j in 0..n {
            lower[dd + j] = problem.bounds[j].0;
            upper[dd + j] = problem.bounds[j].1;
        }
        let mut eq = Vec::new();
        let mut eq_keys = Vec::new();
        if !droop {
            for j in 0..n {
                eq.push(SparseRow { idx: vec![om + j], val: vec![1.0], rhs: 0.0 });
                eq_keys.push(RowKey::Frequency(j));
            }
        }
        // r + d − Dω − C f = 0
        let mut bal: Vec<SparseRow> = (0..n)
            .map(|j| {
                let mut row = SparseRow { idx: vec![dd + j], val: vec![1.0], rhs: -problem.disturbance[j] };
                if droop && damping[j] != 0.0 {
                    row.idx.push(om + j);
                    row.val.push(-damping[j]);
                }
                row
            })
            .collect();
        for (col, &k) in lines.iter().enumerate() {
            let (a, b) = net.ends(k);
            bal[a].idx.push(ff + col);
            bal[a].val.push(-1.0);
            bal[b].idx.push(ff + col);
            bal[b].val.push(1.0);
        }
        for (j, row) in bal.into_iter().enumerate() {
            eq.push(row);
            eq_keys.push(RowKey::Balance(j));
        }
        for (col, &k) in lines.iter().enumerate() {
            let (a, b) = net.ends(k);
            let w = net.line(k).susceptance;
            eq.push(SparseRow { idx: vec![ff + col, a, b], val: vec![1.0, -w, w], rhs: 0.0 });
            eq_keys.push(RowKey::Flow(k));
        }
        if problem.has_ace() {
            let groups = problem.ace_groups();
            let bg = problem.bus_groups(&groups);
            for g in 0..groups.len() {
                // (E C f)_g: net outflow of the group over lines leaving it
                let mut row = SparseRow { idx: Vec::new(), val: Vec::new(), rhs: 0.0 };
                for (col, &k) in lines.iter().enumerate() {
                    let (a, b) = net.ends(k);
                    let v = (bg[a] == g) as i32 as f64 - (bg[b] == g) as i32 as f64;
                    if v != 0.0 {
                        row.idx.push(ff + col);
                        row.val.push(v);
                    }
                }
                eq.push(row);
                eq_keys.push(RowKey::Ace(g));
            }
        }
        let mut ineq = Vec::new();
        let mut ineq_keys = Vec::new();
        if problem.has_line_limits() {
            for (col, &k) in lines.iter().enumerate() {
                let (lo, hi) = problem.line_bounds[k];
                ineq.push(SparseRow { idx: vec![ff + col], val: vec![1.0], rhs: hi });
                ineq_keys.push(RowKey::LineUpper(k));
                ineq.push(SparseRow { idx: vec![ff + col], val: vec![-1.0], rhs: -lo });
                ineq_keys.push(RowKey::LineLower(k));
            }
        }
        Self { n, lines, quad, eq, eq_keys, ineq, ineq_keys, lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.quad.len()
    }

    /// Range of the `d` block.
    pub fn d_range(&self) -> std::ops::Range<usize> {
        2 * self.n..3 * self.n
    }

    /// Gradient of the Lagrangian in `x` (without box multipliers).
    pub fn lagrangian_gradient(&self, x: &[f64], eq: &[f64], ineq: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = self.quad.iter().zip(x).map(|(q, v)| q * v).collect();
        for (row, l) in self.eq.iter().zip(eq).chain(self.ineq.iter().zip(ineq)) {
            for (&i, v) in row.idx.iter().zip(&row.val) {
                g[i] += l * v;
            }
        }
        g
    }
}

/// Worst residual per condition and per row group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    /// Variable block (`theta`, `omega`, `d`, `f`) with the worst stationarity residual.
    pub worst_block: &'static str,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
    /// Worst primal residual per row group.
    pub per_group: Vec<(RowGroup, f64)>,
    pub tol: f64,
}

impl KktReport {
    pub fn passed(&self) -> bool {
        self.max() <= self.tol
    }

    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// Checks the full-space optimality conditions of `eq` for `problem`.
pub fn verify_kkt(problem: &EquilibriumProblem, point: &Equilibrium, tol: f64) -> KktReport {
    let form = StandardForm::build(problem);
    let x = point.point(&form);
    let (leq, lin) = point.row_duals(&form);
    let mut grad = form.lagrangian_gradient(&x, &leq, &lin);
    let n = form.n;
    for j in 0..n {
        grad[2 * n + j] += point.duals.d_upper[j] - point.duals.d_lower[j];
    }
    let mut rep = KktReport { tol, worst_block: "none", ..Default::default() };
    for (i, g) in grad.iter().enumerate() {
        if g.abs() > rep.stationarity {
            rep.stationarity = g.abs();
            rep.worst_block = match i / n {
                0 => "theta",
                1 => "omega",
                2 => "d",
                _ => "f",
            };
        }
    }
    let mut per_group: Vec<(RowGroup, f64)> = Vec::new();
    let mut note = |g: RowGroup, v: f64| match per_group.iter_mut().find(|(k, _)| *k == g) {
        Some(e) => e.1 = e.1.max(v),
        None => per_group.push((g, v)),
    };
    for (row, key) in form.eq.iter().zip(&form.eq_keys) {
        let v = (row.dot(&x) - row.rhs).abs();
        rep.primal = rep.primal.max(v);
        note(key.group(), v);
    }
    for ((row, key), l) in form.ineq.iter().zip(&form.ineq_keys).zip(&lin) {
        let s = row.dot(&x) - row.rhs;
        rep.primal = rep.primal.max(s.max(0.0));
        note(key.group(), s.max(0.0));
        rep.dual = rep.dual.max((-l).max(0.0));
        rep.complementarity = rep.complementarity.max((l * s).abs());
    }
    for j in 0..n {
        let (lo, hi) = problem.bounds[j];
        let d = point.d[j];
        let (bl, bu) = (point.duals.d_lower[j], point.duals.d_upper[j]);
        rep.primal = rep.primal.max((lo - d).max(0.0)).max((d - hi).max(0.0));
        rep.dual = rep.dual.max((-bl).max(0.0)).max((-bu).max(0.0));
        rep.complementarity = rep.complementarity.max((bl * (d - lo)).abs()).max((bu * (hi - d)).abs());
    }
    rep.per_group = per_group;
    rep
}

/// Farkas multipliers over the full-space rows of [`StandardForm`].
///
/// `ineq ≥ 0`; the combination `Aᵀ ineq + Cᵀ eq` vanishes on θ, ω and f and
/// equals `q` on `d`; `epsilon = min_{d̲≤d≤d̄} qᵀd − (gᵀ ineq + hᵀ eq) > 0`,
/// so no feasible point exists inside the box.
#[derive(Clone, Debug, PartialEq)]
pub struct FarkasCertificate {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    pub epsilon: f64,
    /// Certificate on the reduced rows it was lifted from.
    pub reduced: Infeasibility,
}

impl FarkasCertificate {
    /// Recomputes `(max off-box combination residual, ε)` from the rows.
    pub fn check(&self, form: &StandardForm) -> (f64, f64) {
        let dim = form.dim();
        let mut comb = vec![0.0; dim];
        let mut rhs = 0.0;
        for (row, w) in form.eq.iter().zip(&self.eq).chain(form.ineq.iter().zip(&self.ineq)) {
            rhs += w * row.rhs;
            for (&i, v) in row.idx.iter().zip(&row.val) {
                comb[i] += w * v;
            }
        }
        let dr = form.d_range();
        let scale = comb.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let off = comb
            .iter()
            .enumerate()
            .filter(|(i, _)| !dr.contains(i))
            .fold(0.0f64, |a, (_, v)| a.max(v.abs()))
            / scale;
        let q = &comb[dr.clone()];
        let eps = qp::box_min(q, &form.lower[dr.clone()], &form.upper[dr]) - rhs;
        (off, eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Feasibility {
    Feasible,
    Infeasible(FarkasCertificate),
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible)
    }
}

/// Phase-1 feasibility verdict with a full-space certificate when infeasible.
pub fn check_feasibility(problem: &EquilibriumProblem) -> Result<Feasibility, EquilibriumError> {
    let red = problem.reduced()?;
    check_feasibility_reduced(problem, &red)
}

fn check_feasibility_reduced(
    problem: &EquilibriumProblem,
    red: &Reduced,
) -> Result<Feasibility, EquilibriumError> {
    match qp::phase_one(&red.qp, FEASIBILITY_TOL)? {
        PhaseOne::Feasible(_) => Ok(Feasibility::Feasible),
        PhaseOne::Infeasible(c) => Ok(Feasibility::Infeasible(lift_certificate(problem, red, c))),
    }
}

fn lift_certificate(problem: &EquilibriumProblem, red: &Reduced, c: Infeasibility) -> FarkasCertificate {
    let net = &problem.net;
    let comps = red.lap.components();
    let y_comp = &c.eq[..red.n_comp];
    let y_ace = &c.eq[red.n_comp..];
    let nl = red.ptdf.lines.len();
    let mut zeta = vec![0.0; nl];
    let mut up = vec![0.0; net.m()];
    let mut lo = vec![0.0; net.m()];
    if red.limited {
        for (row, &k) in red.ptdf.lines.iter().enumerate() {
            up[k] = c.ineq[2 * row];
            lo[k] = c.ineq[2 * row + 1];
            zeta[row] = up[k] - lo[k];
        }
    }
    let mu = lift_balance(net, comps, red, y_comp, y_ace, &zeta);
    let nu = flow_multipliers(net, red, &mu, y_ace, &zeta);
    let form = StandardForm::build(problem);
    let eq = form
        .eq_keys
        .iter()
        .map(|k| match *k {
            RowKey::Frequency(_) => 0.0,
            RowKey::Balance(j) => mu[j],
            RowKey::Flow(k) => nu[k],
            RowKey::Ace(g) => y_ace[g],
            _ => 0.0,
        })
        .collect();
    let ineq = form
        .ineq_keys
        .iter()
        .map(|k| match *k {
            RowKey::LineUpper(k) => up[k],
            RowKey::LineLower(k) => lo[k],
            _ => 0.0,
        })
        .collect();
    FarkasCertificate { eq, ineq, epsilon: c.gap, reduced: c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{BusKind, BusRecord, LineRecord};
    use crate::topology::bridge_block_decomposition;

    /// Two triangles joined by a bridge, one generator and one load per
    /// triangle, base flows from a DC solve.
    pub(crate) fn two_triangles(limit: f64) -> Network {
        let buses = vec![
            BusRecord::new(1, BusKind::Generator).with_injection(1.0).with_bounds(-1.0, 1.0),
            BusRecord::new(2, BusKind::Load).with_injection(-0.5).with_bounds(0.0, 0.0),
            BusRecord::new(3, BusKind::Generator).with_injection(0.0).with_bounds(-1.0, 1.0).with_cost(2.0),
            BusRecord::new(4, BusKind::Generator).with_injection(0.0).with_bounds(-1.0, 1.0),
            BusRecord::new(5, BusKind::Load).with_injection(-0.8).with_bounds(0.0, 0.0),
            BusRecord::new(6, BusKind::Generator).with_injection(0.3).with_bounds(-1.0, 1.0).with_cost(3.0),
        ];
        let pairs = [(1, 2), (2, 3), (1, 3), (4, 5), (5, 6), (4, 6), (3, 4)];
        let raw: Vec<LineRecord> = pairs
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| LineRecord::new(k as u32 + 1, a, b, 1.0, limit))
            .collect();
        let skel = Network::build(
            buses.iter().map(|b| b.clone().with_injection(0.0)).collect(),
            raw.clone(),
        )
        .unwrap();
        let p: Vec<f64> = buses.iter().map(|b| b.injection).collect();
        let sol = crate::dcflow::solve_dc_flow(&skel, &p).unwrap();
        let lines = raw
            .into_iter()
            .zip(sol.flows)
            .map(|(l, f)| l.with_base_flow(f))
            .collect();
        Network::build(buses, lines).unwrap()
    }

    fn outage(net: &Network, k: usize, controller: Controller) -> EquilibriumProblem {
        let part = bridge_block_decomposition(net);
        let f0 = net.line(k).base_flow;
        let (a, b) = net.ends(k);
        let mut r = vec![0.0; net.n()];
        r[a] += f0;
        r[b] -= f0;
        EquilibriumProblem::new(net.with_lines_out(&[k]), part, r, controller).unwrap()
    }

    #[test]
    fn internal_failure_is_localized() {
        let net = two_triangles(5.0);
        let p = outage(&net, 0, Controller::Uc);
        let eq = uc_equilibrium(&p).unwrap();
        // the bridge keeps its base flow and area 2 does not move
        assert!(eq.f[6].abs() < 1e-10, "{:?}", eq.f);
        for j in 3..6 {
            assert!(eq.d[j].abs() < 1e-10);
        }
        assert!(verify_kkt(&p, &eq, 1e-8).passed());
    }

    #[test]
    fn islands_rebalance_locally() {
        // 2-bus islands after tripping the only line
        let buses = vec![
            BusRecord::new(1, BusKind::Generator).with_injection(0.4).with_bounds(-2.0, 2.0),
            BusRecord::new(2, BusKind::Generator).with_injection(-0.4).with_bounds(-2.0, 2.0),
        ];
        let lines = vec![LineRecord::new(1, 1, 2, 1.0, 1.0).with_base_flow(0.4)];
        let net = Network::build(buses, lines).unwrap();
        let p = outage(&net, 0, Controller::Uc);
        let eq = uc_equilibrium(&p).unwrap();
        assert!((eq.d[0] + 0.4).abs() < 1e-12 && (eq.d[1] - 0.4).abs() < 1e-12);
        assert!((eq.objective - 0.16).abs() < 1e-12);
        assert!(verify_kkt(&p, &eq, 1e-9).passed());
    }

    #[test]
    fn fixed_island_is_infeasible_with_certificate() {
        let buses = vec![
            BusRecord::new(1, BusKind::Generator).with_injection(1.0),
            BusRecord::new(2, BusKind::Load).with_injection(-1.0),
        ];
        let lines = vec![LineRecord::new(1, 1, 2, 1.0, 2.0).with_base_flow(1.0)];
        let net = Network::build(buses, lines).unwrap();
        let p = outage(&net, 0, Controller::Uc);
        match uc_equilibrium(&p) {
            Err(EquilibriumError::Infeasible(c)) => {
                assert!(c.epsilon > 0.0);
                let (off, eps) = c.check(&StandardForm::build(&p));
                assert!(off < 1e-12 && (eps - c.epsilon).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_disturbance_gives_zero_point() {
        let net = two_triangles(5.0);
        let part = bridge_block_decomposition(&net);
        let p = EquilibriumProblem::new(net.clone(), part, vec![0.0; 6], Controller::Agc).unwrap();
        assert!(check_feasibility(&p).unwrap().is_feasible());
        let eq = agc_equilibrium(&p).unwrap();
        assert!(eq.d.iter().chain(&eq.f).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn kkt_detects_perturbation_and_missing_duals() {
        let net = two_triangles(5.0);
        let p = outage(&net, 0, Controller::Uc);
        let mut eq = uc_equilibrium(&p).unwrap();
        eq.d[0] += 1e-2;
        let rep = verify_kkt(&p, &eq, 1e-6);
        assert!(!rep.passed());
        assert!(rep.stationarity > 1e-3);
    }

    #[test]
    fn droop_closed_form_three_buses() {
        let buses: Vec<BusRecord> = (1..=3)
            .map(|i| BusRecord::new(i, BusKind::Generator).with_bounds(-1.0, 1.0).with_damping(1.0))
            .collect();
        let lines = vec![LineRecord::new(1, 1, 2, 1.0, 1.0), LineRecord::new(2, 2, 3, 1.0, 1.0)];
        let net = Network::build(buses, lines).unwrap();
        let part = bridge_block_decomposition(&net);
        let p = EquilibriumProblem::new(net, part, vec![0.6, 0.0, 0.0], Controller::Droop).unwrap();
        let eq = droop_equilibrium(&p).unwrap();
        for j in 0..3 {
            assert!((eq.d[j] + 0.1).abs() < 1e-12);
            assert!((eq.omega[j] - 0.1).abs() < 1e-12);
        }
        assert!(verify_kkt(&p, &eq, 1e-9).passed());
    }
}

//! Multi-stage cascade simulation with constraint lifting.
//!
//! Stage `n` removes the outage set `B(n)` from the original network, builds
//! the cumulative disturbance against the original base flows, solves the
//! controller equilibrium and trips every line whose absolute flow strictly
//! exceeds its limit. The loop stops once nothing trips.
//!
//! Under UC an infeasible stage is repaired by applying the actions of a
//! [`LiftingPolicy`] one at a time until a solve succeeds. AGC and droop have
//! no such ladder: a connected component that cannot balance within its
//! injection bounds is blacked out (every injection pinned to zero, its whole
//! demand counted as lost) and stays dark for the rest of the cascade.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibria::{self, Controller, Equilibrium, EquilibriumError, EquilibriumProblem, LiftAction};
use crate::netmodel::{BusId, BusKind, DisturbanceVector, LineId, Network, NetworkError};
use crate::topology::{associated_areas, Partition, TopologyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error("initial failure set is empty")]
    EmptyFailure,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("line {0} is already out of service")]
    NotInService(LineId),
    #[error("cascade did not settle within {cap} stages")]
    StageCapExceeded { cap: usize, trace: Box<CascadeTrace> },
    #[error("island containing buses {buses:?} cannot be balanced")]
    UnservableIsland { buses: Vec<BusId>, trace: Box<CascadeTrace> },
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
}

impl CascadeError {
    /// The partial trace carried by terminal errors.
    pub fn trace(&self) -> Option<&CascadeTrace> {
        match self {
            CascadeError::StageCapExceeded { trace, .. } | CascadeError::UnservableIsland { trace, .. } => {
                Some(trace)
            }
            _ => None,
        }
    }
}

/// Disturbance of removing in-service lines: `+f0` at the sending end and
/// `−f0` at the receiving end of every removed line, plus the network with
/// those lines out of service.
pub fn line_outage_disturbance(
    net: &Network,
    outage: &[LineId],
) -> Result<(DisturbanceVector, Network), CascadeError> {
    let idx = outage_indices(net, outage)?;
    let r = disturbance_dense(net, &idx);
    Ok((DisturbanceVector::from_dense(net, &r), net.with_lines_out(&idx)))
}

fn outage_indices(net: &Network, outage: &[LineId]) -> Result<Vec<usize>, CascadeError> {
    let mut idx = BTreeSet::new();
    for id in outage {
        let k = net.require_line(*id)?;
        if !net.line(k).in_service {
            return Err(CascadeError::NotInService(*id));
        }
        idx.insert(k);
    }
    Ok(idx.into_iter().collect())
}

fn disturbance_dense(net: &Network, idx: &[usize]) -> Vec<f64> {
    let mut r = vec![0.0; net.n()];
    for &k in idx {
        let (a, b) = net.ends(k);
        let f0 = net.line(k).base_flow;
        r[a] += f0;
        r[b] -= f0;
    }
    r
}

/// Lines of `eq` whose absolute flow `|f0 + f|` exceeds `limit + tol`.
pub fn trip_overloaded(eq: &Equilibrium, net: &Network, tol: f64) -> Vec<LineId> {
    net.in_service()
        .filter(|&k| {
            let l = net.line(k);
            (l.base_flow + eq.f[k]).abs() > l.limit + tol
        })
        .map(|k| net.line(k).id)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    LocalizationFirst,
    LoadLossFirst,
    Custom(Vec<LiftAction>),
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "localization-first" => Ok(PolicyKind::LocalizationFirst),
            "load-loss-first" => Ok(PolicyKind::LoadLossFirst),
            _ => Err(format!(
                "unknown lifting policy `{s}` (expected localization-first or load-loss-first)"
            )),
        }
    }
}

/// Ordered relaxation ladder for one cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftingPolicy {
    pub name: String,
    pub actions: Vec<LiftAction>,
}

impl LiftingPolicy {
    pub fn build(
        kind: &PolicyKind,
        net: &Network,
        partition: &Partition,
        failures: &[LineId],
    ) -> Result<Self, CascadeError> {
        match kind {
            PolicyKind::LocalizationFirst => Self::localization_first(net, partition, failures),
            PolicyKind::LoadLossFirst => Self::load_loss_first(net, partition, failures),
            PolicyKind::Custom(actions) => Ok(Self::custom(actions.clone())),
        }
    }

    /// Shed load in the associated areas, then merge balancing areas outward
    /// along the area graph, then shed load everywhere else.
    pub fn localization_first(
        net: &Network,
        partition: &Partition,
        failures: &[LineId],
    ) -> Result<Self, CascadeError> {
        let assoc = associated_areas(partition, net, failures)?;
        let (order, edges) = area_bfs(net, partition, &assoc);
        let mut actions: Vec<LiftAction> = assoc.iter().filter_map(|&a| shed_action(net, partition, a)).collect();
        actions.extend(edges.iter().map(|&(a, b)| LiftAction::LiftAce { a, b }));
        actions.extend(
            order
                .iter()
                .filter(|a| !assoc.contains(a))
                .filter_map(|&a| shed_action(net, partition, a)),
        );
        Ok(Self { name: "localization-first".into(), actions })
    }

    /// Merge every balancing area first, then shed load starting from the
    /// associated areas.
    pub fn load_loss_first(
        net: &Network,
        partition: &Partition,
        failures: &[LineId],
    ) -> Result<Self, CascadeError> {
        let assoc = associated_areas(partition, net, failures)?;
        let (order, edges) = area_bfs(net, partition, &assoc);
        let mut actions: Vec<LiftAction> = edges.iter().map(|&(a, b)| LiftAction::LiftAce { a, b }).collect();
        actions.extend(order.iter().filter_map(|&a| shed_action(net, partition, a)));
        Ok(Self { name: "load-loss-first".into(), actions })
    }

    pub fn custom(actions: Vec<LiftAction>) -> Self {
        Self { name: "custom".into(), actions }
    }
}

/// Breadth-first visit of the area graph from the first associated area
/// (then from any area left unreached). Returns the visit order and the
/// tree edges in discovery order.
fn area_bfs(
    net: &Network,
    partition: &Partition,
    start: &BTreeSet<usize>,
) -> (Vec<usize>, Vec<(usize, usize)>) {
    let k = partition.len();
    let mut adj = vec![Vec::new(); k];
    for (a, b) in partition.area_adjacency(net) {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; k];
    let mut order = Vec::with_capacity(k);
    let mut edges = Vec::new();
    for root in start.iter().copied().take(1).chain(0..k) {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            order.push(a);
            for &b in &adj[a] {
                if !seen[b] {
                    seen[b] = true;
                    edges.push((a, b));
                    queue.push_back(b);
                }
            }
        }
    }
    (order, edges)
}

/// Lets every load bus of an area shed down to zero consumption.
fn shed_action(net: &Network, partition: &Partition, area: usize) -> Option<LiftAction> {
    let mut buses = Vec::new();
    let mut bounds = Vec::new();
    for &j in &partition.areas()[area] {
        let b = net.bus(j);
        if b.kind == BusKind::Load && b.demand() > b.d_upper {
            buses.push(b.id);
            bounds.push((b.d_lower, b.demand()));
        }
    }
    (!buses.is_empty()).then_some(LiftAction::ExpandLoadBounds { buses, bounds })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Lifted {
    Applied { action: LiftAction, cursor: usize },
    Exhausted,
}

/// Applies the action at `cursor`. Bound expansions are merged with the
/// problem's current bounds so they can only widen.
pub fn apply_lifting(
    policy: &LiftingPolicy,
    problem: &mut EquilibriumProblem,
    cursor: usize,
) -> Result<Lifted, CascadeError> {
    let Some(action) = policy.actions.get(cursor) else {
        return Ok(Lifted::Exhausted);
    };
    let action = match action {
        LiftAction::ExpandLoadBounds { buses, bounds } => {
            let mut merged = Vec::with_capacity(bounds.len());
            for (id, &(lo, hi)) in buses.iter().zip(bounds) {
                let (l0, h0) = problem.bounds[problem.net.require_bus(*id)?];
                merged.push((lo.min(l0), hi.max(h0)));
            }
            LiftAction::ExpandLoadBounds { buses: buses.clone(), bounds: merged }
        }
        other => other.clone(),
    };
    problem.apply_lift(action.clone())?;
    Ok(Lifted::Applied { action, cursor: cursor + 1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Defaults to `m + 1`.
    pub stage_cap: Option<usize>,
    /// Absolute slack on thermal limits before a line trips.
    pub trip_tol: f64,
    /// `|d*|` above which a bus counts as adjusted.
    pub adjust_tol: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { stage_cap: None, trip_tol: 1e-8, adjust_tol: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Equilibrium,
    Critical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    IslandedUnservable,
    StageCap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// `B(n)`, sorted.
    pub outages: Vec<LineId>,
    pub disturbance: DisturbanceVector,
    pub verdict: Verdict,
    pub lifts: Vec<LiftAction>,
    /// Buses newly blacked out in this stage.
    pub blackout: Vec<BusId>,
    /// `F(n)`, sorted.
    pub tripped: Vec<LineId>,
    pub shed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrace {
    pub controller: Controller,
    pub initial: Vec<LineId>,
    pub policy: Option<String>,
    pub stages: Vec<StageRecord>,
    pub termination: Termination,
    pub total_shed: f64,
    pub total_demand: f64,
    pub llr: f64,
    /// Buses with `|d*|` above the adjustment tolerance at the last equilibrium.
    pub adjusted: Vec<BusId>,
    pub associated_areas: Vec<usize>,
    /// Associated areas plus both ends of every applied ACE lift.
    pub involved_areas: Vec<usize>,
}

impl CascadeTrace {
    pub fn lift_count(&self) -> usize {
        self.stages.iter().map(|s| s.lifts.len()).sum()
    }
}

/// Runs one cascade from `initial` on `net` with balancing areas `partition`.
pub fn run_cascade(
    net: &Network,
    partition: &Partition,
    initial: &[LineId],
    controller: Controller,
    policy: &PolicyKind,
    config: &CascadeConfig,
) -> Result<CascadeTrace, CascadeError> {
    if initial.is_empty() {
        return Err(CascadeError::EmptyFailure);
    }
    let mut outages: BTreeSet<usize> = outage_indices(net, initial)?.into_iter().collect();
    let mut init_ids: Vec<LineId> = outages.iter().map(|&k| net.line(k).id).collect();
    init_ids.dedup();
    let assoc = associated_areas(partition, net, &init_ids)?;
    let policy = match controller {
        Controller::Uc => Some(LiftingPolicy::build(policy, net, partition, &init_ids)?),
        _ => None,
    };
    let cap = config.stage_cap.unwrap_or(net.m() + 1);
    let n = net.n();
    let orig_upper: Vec<f64> = net.buses().iter().map(|b| b.d_upper).collect();
    let demand: Vec<f64> = net.buses().iter().map(|b| b.demand()).collect();
    let mut dark = vec![false; n];
    let mut lifts: Vec<LiftAction> = Vec::new();
    let mut cursor = 0;
    let mut prev_total = 0.0;

    let mut trace = CascadeTrace {
        controller,
        initial: init_ids,
        policy: policy.as_ref().map(|p| p.name.clone()),
        stages: Vec::new(),
        termination: Termination::Converged,
        total_shed: 0.0,
        total_demand: net.total_demand(),
        llr: 0.0,
        adjusted: Vec::new(),
        associated_areas: assoc.iter().copied().collect(),
        involved_areas: Vec::new(),
    };

    loop {
        let stage = trace.stages.len() + 1;
        if stage > cap {
            trace.termination = Termination::StageCap;
            return Err(CascadeError::StageCapExceeded { cap, trace: Box::new(trace) });
        }
        let idx: Vec<usize> = outages.iter().copied().collect();
        let r = disturbance_dense(net, &idx);
        let post = net.with_lines_out(&idx);
        let mut problem = EquilibriumProblem::new(post, partition.clone(), r.clone(), controller)?;
        for l in &lifts {
            problem.apply_lift(l.clone())?;
        }

        let mut blackout = Vec::new();
        if controller != Controller::Uc {
            for members in problem.net.components().members {
                if members.iter().all(|&j| dark[j]) || can_balance(&problem, &members) {
                    continue;
                }
                for &j in &members {
                    if !dark[j] {
                        dark[j] = true;
                        blackout.push(net.bus(j).id);
                    }
                }
            }
        }
        for j in (0..n).filter(|&j| dark[j]) {
            let p0 = net.bus(j).injection;
            problem.bounds[j] = (-p0, -p0);
        }

        let mut verdict = Verdict::Equilibrium;
        let mut stage_lifts = Vec::new();
        let eq = loop {
            match equilibria::solve(&problem) {
                Ok(eq) => break eq,
                Err(EquilibriumError::Infeasible(_)) => {
                    verdict = Verdict::Critical;
                    let lifted = match &policy {
                        Some(p) => apply_lifting(p, &mut problem, cursor)?,
                        None => Lifted::Exhausted,
                    };
                    match lifted {
                        Lifted::Applied { action, cursor: next } => {
                            cursor = next;
                            lifts.push(action.clone());
                            stage_lifts.push(action);
                        }
                        Lifted::Exhausted => {
                            let buses = unservable_buses(&problem);
                            trace.stages.push(StageRecord {
                                stage,
                                outages: idx.iter().map(|&k| net.line(k).id).collect(),
                                disturbance: DisturbanceVector::from_dense(net, &r),
                                verdict,
                                lifts: stage_lifts,
                                blackout,
                                tripped: Vec::new(),
                                shed: 0.0,
                            });
                            trace.termination = Termination::IslandedUnservable;
                            finish_areas(&mut trace, &lifts);
                            return Err(CascadeError::UnservableIsland { buses, trace: Box::new(trace) });
                        }
                    }
                }
                Err(e) => return Err(e.into()),
            }
        };

        let total: f64 = (0..n)
            .map(|j| {
                if dark[j] {
                    demand[j]
                } else if net.bus(j).kind == BusKind::Load {
                    (eq.d[j] - orig_upper[j]).max(0.0)
                } else {
                    0.0
                }
            })
            .sum();
        let tripped = trip_overloaded(&eq, &problem.net, config.trip_tol);
        trace.stages.push(StageRecord {
            stage,
            outages: idx.iter().map(|&k| net.line(k).id).collect(),
            disturbance: DisturbanceVector::from_dense(net, &r),
            verdict,
            lifts: stage_lifts,
            blackout,
            tripped: tripped.clone(),
            shed: total - prev_total,
        });
        prev_total = total;

        if tripped.is_empty() {
            trace.total_shed = total;
            trace.llr = if trace.total_demand > 0.0 { (total / trace.total_demand).clamp(0.0, 1.0) } else { 0.0 };
            trace.adjusted = (0..n).filter(|&j| eq.d[j].abs() > config.adjust_tol).map(|j| net.bus(j).id).collect();
            finish_areas(&mut trace, &lifts);
            return Ok(trace);
        }
        for id in tripped {
            outages.insert(net.require_line(id)?);
        }
    }
}

fn finish_areas(trace: &mut CascadeTrace, lifts: &[LiftAction]) {
    let mut areas: BTreeSet<usize> = trace.associated_areas.iter().copied().collect();
    for l in lifts {
        if let LiftAction::LiftAce { a, b } = l {
            areas.insert(*a);
            areas.insert(*b);
        }
    }
    trace.involved_areas = areas.into_iter().collect();
}

/// Whether a component can absorb its net disturbance: within the summed
/// injection bounds, or through frequency when it has damping under droop.
fn can_balance(problem: &EquilibriumProblem, members: &[usize]) -> bool {
    if problem.controller == Controller::Droop && members.iter().any(|&j| problem.net.bus(j).damping > 0.0) {
        return true;
    }
    let need: f64 = -members.iter().map(|&j| problem.disturbance[j]).sum::<f64>();
    let lo: f64 = members.iter().map(|&j| problem.bounds[j].0).sum();
    let hi: f64 = members.iter().map(|&j| problem.bounds[j].1).sum();
    let scale = members.iter().map(|&j| problem.disturbance[j].abs()).fold(1.0, f64::max);
    let tol = 1e-9 * scale;
    need >= lo - tol && need <= hi + tol
}

fn unservable_buses(problem: &EquilibriumProblem) -> Vec<BusId> {
    let mut out = Vec::new();
    for members in problem.net.components().members {
        if !can_balance(problem, &members) {
            out.extend(members.iter().map(|&j| problem.net.bus(j).id));
        }
    }
    if out.is_empty() {
        // every island balances alone: some balancing group spans islands
        let comp = problem.net.components().of_bus;
        for areas in problem.ace_groups() {
            let buses: Vec<usize> =
                (0..problem.net.n()).filter(|&j| areas.contains(&problem.partition.area_of(j))).collect();
            if buses.iter().any(|&j| comp[j] != comp[buses[0]]) {
                out.extend(buses.iter().map(|&j| problem.net.bus(j).id));
            }
        }
    }
    out.sort();
    out
}

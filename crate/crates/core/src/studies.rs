//! N−k security studies: load profiles, failure sampling, capacity and
//! reserve scaling, and aggregation of cascade outcomes.
//!
//! Randomness is drawn from ChaCha8 generators. A study seed selects the
//! key and every (profile, purpose) pair gets its own stream, so results do
//! not depend on evaluation order or on the number of worker threads.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{run_cascade, CascadeConfig, CascadeError, PolicyKind};
use crate::dcflow::{build_with_dc_flows, dc_opf_secure, FlowError, Generator, OpfError, QuadCost};
use crate::equilibria::Controller;
use crate::netmodel::{BusKind, LineId, Network, NetworkError};
use crate::topology::{bridge_block_decomposition, check_tree_partition, switch_off_lines_unchecked, Partition, TopologyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StudyError {
    #[error("invalid study configuration: {0}")]
    InvalidConfig(String),
    #[error("perturbed demand cannot be dispatched: {0}")]
    DispatchInfeasible(String),
    #[error("requested {count} distinct {k}-line failures but only {available} exist")]
    TooManyRequested { k: usize, count: usize, available: u128 },
    #[error("scaled limit of line {line} ({limit}) is below its base flow {flow}")]
    BaseFlowExceedsLimit { line: LineId, flow: f64, limit: f64 },
    #[error("reserve of {need} requested but generators only have {have} of headroom")]
    InsufficientCapacity { need: f64, have: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Generator for `(seed, profile, purpose)`.
pub fn substream(seed: u64, profile: usize, purpose: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((profile as u64) << 32) | purpose as u64);
    rng
}

/// Demand per bus with every load scaled by an independent factor drawn
/// uniformly from `[1 − magnitude, 1 + magnitude]`.
pub fn perturb_load_profile(net: &Network, magnitude: f64, seed: u64) -> Result<Vec<f64>, StudyError> {
    if !(0.0..1.0).contains(&magnitude) {
        return Err(StudyError::InvalidConfig(format!("perturbation {magnitude} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(net
        .buses()
        .iter()
        .map(|b| {
            let d = b.demand();
            if d > 0.0 && magnitude > 0.0 {
                d * rng.gen_range(1.0 - magnitude..=1.0 + magnitude)
            } else {
                d
            }
        })
        .collect())
}

/// Generators implied by the bus records: output range `p0 + [d̲, d̄]` and
/// cost `α p² / 2`.
pub fn generators(net: &Network) -> Vec<Generator> {
    net.buses()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.kind == BusKind::Generator)
        .map(|(j, b)| Generator {
            bus: j,
            pmin: b.injection + b.d_lower,
            pmax: b.injection + b.d_upper,
            cost: QuadCost { quadratic: 0.5 * b.cost, linear: 0.0 },
        })
        .collect()
}

/// Re-dispatches every topology in `nets` (same buses) for `demand`, with
/// line limits respected on all of them. Generator ranges are kept in
/// absolute terms, so deviation bounds shift with the new set points.
pub fn redispatch(nets: &[&Network], demand: &[f64]) -> Result<Vec<Network>, StudyError> {
    let gens = generators(nets[0]);
    let point = match dc_opf_secure(nets, demand, &gens) {
        Ok(p) => p,
        Err(OpfError::Infeasible(c)) => {
            return Err(StudyError::DispatchInfeasible(format!("certificate gap {:e}", c.gap)))
        }
        Err(e) => return Err(StudyError::DispatchInfeasible(e.to_string())),
    };
    let mut out = Vec::with_capacity(nets.len());
    for net in nets {
        let (mut buses, lines) = (*net).clone().into_parts();
        for g in &gens {
            let b = &mut buses[g.bus];
            let p = point.injections[g.bus];
            b.d_lower = (g.pmin - p).min(0.0);
            b.d_upper = (g.pmax - p).max(0.0);
            b.injection = p;
        }
        for (j, b) in buses.iter_mut().enumerate() {
            if b.kind == BusKind::Load {
                b.injection = -demand[j];
            }
        }
        out.push(build_with_dc_flows(buses, lines)?);
    }
    Ok(out)
}

fn binomial(m: usize, k: usize) -> u128 {
    if k > m {
        return 0;
    }
    let k = k.min(m - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((m - i) as u128) / (i as u128 + 1))
}

/// Failure sets of `k` in-service lines. `k = 1` enumerates every line;
/// larger `k` draws `count` distinct subsets uniformly (all of them when
/// `count` equals the number of subsets). Each set is sorted by line index.
pub fn sample_nk_failures(net: &Network, k: usize, count: usize, seed: u64) -> Result<Vec<Vec<LineId>>, StudyError> {
    let lines: Vec<usize> = net.in_service().collect();
    let m = lines.len();
    let ids = |set: &[usize]| set.iter().map(|&i| net.line(lines[i]).id).collect::<Vec<_>>();
    if k == 0 || k > m {
        return Err(StudyError::InvalidConfig(format!("k = {k} with {m} lines in service")));
    }
    if k == 1 {
        return Ok((0..m).map(|i| ids(&[i])).collect());
    }
    let available = binomial(m, k);
    if count as u128 > available {
        return Err(StudyError::TooManyRequested { k, count, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if 2 * count as u128 >= available {
        let all = combinations(m, k);
        let pick = index::sample(&mut rng, all.len(), count);
        return Ok(pick.iter().map(|i| ids(&all[i])).collect());
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut set = index::sample(&mut rng, m, k).into_vec();
        set.sort_unstable();
        if seen.insert(set.clone()) {
            out.push(ids(&set));
        }
    }
    Ok(out)
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < m - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Multiplies every thermal limit by `alpha`.
pub fn scale_line_capacities(net: &Network, alpha: f64) -> Result<Network, StudyError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(StudyError::InvalidConfig(format!("capacity scale {alpha} outside (0, 1]")));
    }
    for l in net.lines() {
        let limit = l.limit * alpha;
        if l.in_service && l.base_flow.abs() > limit * (1.0 + 1e-12) + 1e-12 {
            return Err(StudyError::BaseFlowExceedsLimit { line: l.id, flow: l.base_flow, limit });
        }
    }
    Ok(net.rebuild(|_| {}, |l| l.limit *= alpha)?)
}

/// Scales generator upward ranges uniformly so their sum is `target` times
/// the total demand.
pub fn scale_generation_reserve(net: &Network, target: f64) -> Result<Network, StudyError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(StudyError::InvalidConfig(format!("reserve target {target} outside (0, 1)")));
    }
    let have: f64 = net.buses().iter().filter(|b| b.kind == BusKind::Generator).map(|b| b.d_upper).sum();
    let need = target * net.total_demand();
    if need > have * (1.0 + 1e-9) {
        return Err(StudyError::InsufficientCapacity { need, have });
    }
    let factor = if have > 0.0 { need / have } else { 1.0 };
    Ok(net.rebuild(
        |b| {
            if b.kind == BusKind::Generator {
                b.d_upper *= factor;
            }
        },
        |_| {},
    )?)
}

/// Generator headroom relative to total demand.
pub fn reserve_ratio(net: &Network) -> f64 {
    let have: f64 = net.buses().iter().filter(|b| b.kind == BusKind::Generator).map(|b| b.d_upper).sum();
    have / net.total_demand()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub controllers: Vec<Controller>,
    pub ks: Vec<usize>,
    pub profiles: usize,
    /// Failure sets drawn per profile for every `k ≥ 2`.
    pub samples: usize,
    pub perturbation: f64,
    pub alphas: Vec<f64>,
    pub reserve: Option<f64>,
    /// Lines switched off before UC runs; other controllers see the
    /// original topology.
    pub switch_off: Vec<LineId>,
    pub policy: PolicyKind,
    pub seed: u64,
    /// Worker threads; all available cores when unset. Not written to
    /// reports, which are identical at any width.
    #[serde(skip_serializing)]
    pub jobs: Option<usize>,
    /// Shed above this fraction of total demand counts as load loss.
    pub loss_tol: f64,
    pub cascade: CascadeConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            controllers: vec![Controller::Uc, Controller::Agc],
            ks: vec![1],
            profiles: 10,
            samples: 100,
            perturbation: 0.25,
            alphas: vec![1.0],
            reserve: Some(0.2),
            switch_off: Vec::new(),
            policy: PolicyKind::LocalizationFirst,
            seed: 0,
            jobs: None,
            loss_tol: 1e-8,
            cascade: CascadeConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: String| Err(StudyError::InvalidConfig(m));
        if self.controllers.is_empty() || self.ks.is_empty() || self.alphas.is_empty() {
            return bad("controllers, ks and alphas must be non-empty".into());
        }
        if self.profiles == 0 || self.samples == 0 || self.ks.contains(&0) {
            return bad("counts must be positive".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return bad(format!("capacity scale {a} outside (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return bad(format!("perturbation {} outside [0, 1)", self.perturbation));
        }
        if let Some(r) = self.reserve {
            if !(r > 0.0 && r < 1.0) {
                return bad(format!("reserve target {r} outside (0, 1)"));
            }
        }
        if self.jobs == Some(0) {
            return bad("jobs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub profile: usize,
    pub k: usize,
    pub alpha: f64,
    pub controller: Controller,
    pub failure: Vec<LineId>,
    /// Zero when every failed line was already switched off.
    pub stages: usize,
    pub lifts: usize,
    pub shed: f64,
    pub llr: f64,
    /// Buses whose injection moved at the final equilibrium.
    pub adjusted: usize,
    pub associated_areas: usize,
    pub involved_areas: usize,
    pub vulnerable: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub avg: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaInvolvement {
    /// Areas in the controller's partition.
    pub areas: usize,
    pub one: usize,
    pub multiple: usize,
    pub all: usize,
}

/// Statistics of one (controller, k, α) cell over non-error scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub controller: Controller,
    pub k: usize,
    pub alpha: f64,
    pub scenarios: usize,
    pub errors: usize,
    pub vulnerable: usize,
    pub multi_stage: usize,
    pub with_loss: usize,
    /// Per-profile vulnerable fraction.
    pub vulnerable_fraction: Spread,
    pub llr_avg: f64,
    pub llr_max: f64,
    /// `(x, P(LLR > x))`.
    pub llr_ccdf: Vec<(f64, f64)>,
    /// `(x, P(adjusted buses > x))`.
    pub adjust_ccdf: Vec<(f64, f64)>,
    /// Involved-area counts over vulnerable scenarios.
    pub area_involvement: AreaInvolvement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub buses: usize,
    pub lines: usize,
    pub cells: Vec<CellReport>,
    pub records: Vec<ScenarioRecord>,
}

/// Complementary CDF of `values` at 0 and at every distinct value.
pub fn ccdf(values: &[f64]) -> Vec<(f64, f64)> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut xs: Vec<f64> = vec![0.0];
    xs.extend(v.iter().copied().filter(|x| *x > 0.0));
    xs.dedup();
    xs.iter()
        .map(|&x| {
            let above = v.len() - v.partition_point(|y| *y <= x);
            (x, above as f64 / n)
        })
        .collect()
}

/// One prepared topology for a controller family.
struct Instance {
    net: Network,
    partition: Partition,
}

struct Prepared {
    uc: Result<Instance, String>,
    other: Result<Instance, String>,
}

fn prepare(
    base: &Network,
    revised_base: &Network,
    uc_partition: &Partition,
    other_partition: &Partition,
    demand: &[f64],
    alpha: f64,
    reserve: Option<f64>,
) -> Result<Prepared, StudyError> {
    let orig = base.rebuild(|_| {}, |l| l.limit *= alpha)?;
    let revised = revised_base.rebuild(|_| {}, |l| l.limit *= alpha)?;
    let nets = redispatch(&[&orig, &revised], demand)?;
    let finish = |net: &Network| match reserve {
        Some(t) => scale_generation_reserve(net, t),
        None => Ok(net.clone()),
    };
    let uc = finish(&nets[1]).map(|net| Instance { net, partition: uc_partition.clone() });
    let other = finish(&nets[0]).map(|net| Instance { net, partition: other_partition.clone() });
    Ok(Prepared { uc: uc.map_err(|e| e.to_string()), other: other.map_err(|e| e.to_string()) })
}

/// Partitions used by UC (on the switched topology) and by the other
/// controllers (same areas on the original topology). The case's own areas
/// are used when they tree-partition the switched network, otherwise its
/// bridge blocks.
pub fn study_partitions(net: &Network, switch_off: &[LineId]) -> Result<(Network, Partition, Partition), StudyError> {
    let (revised, _) = switch_off_lines_unchecked(net, switch_off)?;
    let from_case = match Partition::from_bus_areas(net) {
        Some(p) => {
            let uc = Partition::from_labels(&revised, p?.labels())?;
            check_tree_partition(&revised, &uc).is_ok().then_some(uc)
        }
        None => None,
    };
    let uc = from_case.unwrap_or_else(|| bridge_block_decomposition(&revised));
    let other = Partition::from_labels(net, uc.labels())?;
    Ok((revised, uc, other))
}

/// Runs every (profile, k, α, controller, failure) scenario.
pub fn run_study(net: &Network, config: &StudyConfig) -> Result<StudyReport, StudyError> {
    config.validate()?;
    let (revised, uc_part, other_part) = study_partitions(net, &config.switch_off)?;
    let switched: BTreeSet<LineId> = config.switch_off.iter().copied().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.unwrap_or(0))
        .build()
        .map_err(|e| StudyError::InvalidConfig(e.to_string()))?;

    let mut failures = Vec::with_capacity(config.profiles);
    for p in 0..config.profiles {
        let mut per_k = Vec::with_capacity(config.ks.len());
        for (i, &k) in config.ks.iter().enumerate() {
            let seed = substream(config.seed, p, 1 + i).gen::<u64>();
            per_k.push(sample_nk_failures(net, k, config.samples, seed)?);
        }
        failures.push(per_k);
    }

    let cells: Vec<(usize, usize)> =
        (0..config.profiles).flat_map(|p| (0..config.alphas.len()).map(move |a| (p, a))).collect();
    let prepared: Vec<Result<Prepared, String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(p, a)| {
                let seed = substream(config.seed, p, 0).gen::<u64>();
                let demand = perturb_load_profile(net, config.perturbation, seed).map_err(|e| e.to_string())?;
                prepare(net, &revised, &uc_part, &other_part, &demand, config.alphas[a], config.reserve)
                    .map_err(|e| e.to_string())
            })
            .collect()
    });

    struct Task<'a> {
        profile: usize,
        ki: usize,
        ai: usize,
        controller: Controller,
        failure: &'a [LineId],
    }
    let mut tasks = Vec::new();
    for p in 0..config.profiles {
        for ki in 0..config.ks.len() {
            for ai in 0..config.alphas.len() {
                for &controller in &config.controllers {
                    for failure in &failures[p][ki] {
                        tasks.push(Task { profile: p, ki, ai, controller, failure });
                    }
                }
            }
        }
    }

    let records: Vec<ScenarioRecord> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| {
                let mut rec = ScenarioRecord {
                    profile: t.profile,
                    k: config.ks[t.ki],
                    alpha: config.alphas[t.ai],
                    controller: t.controller,
                    failure: t.failure.to_vec(),
                    stages: 0,
                    lifts: 0,
                    shed: 0.0,
                    llr: 0.0,
                    adjusted: 0,
                    associated_areas: 0,
                    involved_areas: 0,
                    vulnerable: false,
                    error: None,
                };
                let prep = match &prepared[t.profile * config.alphas.len() + t.ai] {
                    Ok(p) => p,
                    Err(e) => {
                        rec.error = Some(e.clone());
                        return rec;
                    }
                };
                let inst = match (t.controller, &prep.uc, &prep.other) {
                    (Controller::Uc, Ok(i), _) | (Controller::Agc | Controller::Droop, _, Ok(i)) => i,
                    (Controller::Uc, Err(e), _) | (_, _, Err(e)) => {
                        rec.error = Some(e.clone());
                        return rec;
                    }
                };
                let failure: Vec<LineId> = if t.controller == Controller::Uc {
                    t.failure.iter().copied().filter(|id| !switched.contains(id)).collect()
                } else {
                    t.failure.to_vec()
                };
                if failure.is_empty() {
                    return rec;
                }
                let policy = &config.policy;
                match run_cascade(&inst.net, &inst.partition, &failure, t.controller, policy, &config.cascade) {
                    Ok(trace) => {
                        rec.stages = trace.stages.len();
                        rec.lifts = trace.lift_count();
                        rec.shed = trace.total_shed;
                        rec.llr = trace.llr;
                        rec.adjusted = trace.adjusted.len();
                        rec.associated_areas = trace.associated_areas.len();
                        rec.involved_areas = trace.involved_areas.len();
                        rec.vulnerable =
                            rec.stages > 1 || rec.shed > config.loss_tol * trace.total_demand;
                    }
                    Err(e) => {
                        if let Some(trace) = e.trace() {
                            rec.stages = trace.stages.len();
                            rec.lifts = trace.lift_count();
                        }
                        rec.error = Some(error_label(&e));
                    }
                }
                rec
            })
            .collect()
    });

    let mut cells_out = Vec::new();
    for &controller in &config.controllers {
        for &k in &config.ks {
            for &alpha in &config.alphas {
                let areas = if controller == Controller::Uc { uc_part.len() } else { other_part.len() };
                let recs: Vec<&ScenarioRecord> = records
                    .iter()
                    .filter(|r| r.controller == controller && r.k == k && r.alpha == alpha)
                    .collect();
                cells_out.push(cell_report(controller, k, alpha, areas, config.profiles, &recs));
            }
        }
    }
    Ok(StudyReport { config: config.clone(), buses: net.n(), lines: net.m(), cells: cells_out, records })
}

fn error_label(e: &CascadeError) -> String {
    match e {
        CascadeError::StageCapExceeded { .. } => "stage-cap-exceeded".into(),
        CascadeError::UnservableIsland { .. } => "unservable-island".into(),
        other => other.to_string(),
    }
}

fn cell_report(
    controller: Controller,
    k: usize,
    alpha: f64,
    areas: usize,
    profiles: usize,
    recs: &[&ScenarioRecord],
) -> CellReport {
    let ok: Vec<&ScenarioRecord> = recs.iter().copied().filter(|r| r.error.is_none()).collect();
    let mut fractions = Vec::new();
    for p in 0..profiles {
        let of_p: Vec<_> = ok.iter().filter(|r| r.profile == p).collect();
        if !of_p.is_empty() {
            fractions.push(of_p.iter().filter(|r| r.vulnerable).count() as f64 / of_p.len() as f64);
        }
    }
    let spread = if fractions.is_empty() {
        Spread { avg: 0.0, min: 0.0, max: 0.0 }
    } else {
        Spread {
            avg: fractions.iter().sum::<f64>() / fractions.len() as f64,
            min: fractions.iter().copied().fold(f64::INFINITY, f64::min),
            max: fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    };
    let llr: Vec<f64> = ok.iter().map(|r| r.llr).collect();
    let adj: Vec<f64> = ok.iter().map(|r| r.adjusted as f64).collect();
    let mut inv = AreaInvolvement { areas, one: 0, multiple: 0, all: 0 };
    for r in ok.iter().filter(|r| r.vulnerable) {
        match r.involved_areas {
            1 if areas > 1 => inv.one += 1,
            x if x >= areas => inv.all += 1,
            _ => inv.multiple += 1,
        }
    }
    CellReport {
        controller,
        k,
        alpha,
        scenarios: ok.len(),
        errors: recs.len() - ok.len(),
        vulnerable: ok.iter().filter(|r| r.vulnerable).count(),
        multi_stage: ok.iter().filter(|r| r.stages > 1).count(),
        with_loss: ok.iter().filter(|r| r.vulnerable && r.stages <= 1).count(),
        vulnerable_fraction: spread,
        llr_avg: if llr.is_empty() { 0.0 } else { llr.iter().sum::<f64>() / llr.len() as f64 },
        llr_max: llr.iter().copied().fold(0.0, f64::max),
        llr_ccdf: ccdf(&llr),
        adjust_ccdf: ccdf(&adj),
        area_involvement: inv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{BusRecord, LineRecord};

    fn ring() -> Network {
        build_with_dc_flows(
            vec![
                BusRecord::new(1, BusKind::Generator).with_injection(1.0).with_bounds(-1.0, 1.0),
                BusRecord::new(2, BusKind::Load).with_injection(-0.5),
                BusRecord::new(3, BusKind::Generator).with_injection(0.5).with_bounds(-0.5, 1.0),
                BusRecord::new(4, BusKind::Load).with_injection(-1.0),
                BusRecord::new(5, BusKind::Passive),
            ],
            (0..5u32).map(|k| LineRecord::new(k + 1, k + 1, (k + 1) % 5 + 1, 1.0, 2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn perturbation_examples() {
        let net = ring();
        let base: Vec<f64> = net.buses().iter().map(|b| b.demand()).collect();
        assert_eq!(perturb_load_profile(&net, 0.0, 3).unwrap(), base);
        let a = perturb_load_profile(&net, 0.25, 3).unwrap();
        for (x, y) in a.iter().zip(&base) {
            assert!(*x >= 0.75 * y && *x <= 1.25 * y);
        }
        assert_ne!(a, perturb_load_profile(&net, 0.25, 4).unwrap());
        assert!(perturb_load_profile(&net, 1.0, 3).is_err());
    }

    #[test]
    fn sampling_examples() {
        let net = ring();
        let one = sample_nk_failures(&net, 1, 1, 0).unwrap();
        assert_eq!(one.len(), 5);
        let all = sample_nk_failures(&net, 2, 10, 0).unwrap();
        let set: BTreeSet<_> = all.iter().cloned().collect();
        assert_eq!(set.len(), 10);
        assert_eq!(sample_nk_failures(&net, 2, 3, 7).unwrap(), sample_nk_failures(&net, 2, 3, 7).unwrap());
        assert!(matches!(sample_nk_failures(&net, 2, 11, 0), Err(StudyError::TooManyRequested { .. })));
        let few = sample_nk_failures(&net, 3, 2, 1).unwrap();
        assert!(few.iter().all(|s| s.len() == 3 && s.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn capacity_scaling_examples() {
        let net = ring();
        assert_eq!(scale_line_capacities(&net, 1.0).unwrap(), net);
        let s = scale_line_capacities(&net, 0.7).unwrap();
        assert!((s.line(0).limit - 1.4).abs() < 1e-15);
        let flow = net.lines().iter().map(|l| l.base_flow.abs()).fold(0.0, f64::max);
        let tight = net.rebuild(|_| {}, |l| l.limit = 1.2 * flow).unwrap();
        assert!(matches!(scale_line_capacities(&tight, 0.5), Err(StudyError::BaseFlowExceedsLimit { .. })));
    }

    #[test]
    fn reserve_scaling_examples() {
        // demand 1.5; headroom 0.75 = 50 %
        let net = ring().rebuild(|b| if b.kind == BusKind::Generator { b.d_upper = 0.375 }, |_| {}).unwrap();
        assert!((reserve_ratio(&net) - 0.5).abs() < 1e-12);
        let s = scale_generation_reserve(&net, 0.2).unwrap();
        assert!((reserve_ratio(&s) - 0.2).abs() < 1e-6);
        let same = scale_generation_reserve(&s, 0.2).unwrap();
        assert!((same.bus(0).d_upper - s.bus(0).d_upper).abs() < 1e-12);
        assert!(matches!(scale_generation_reserve(&net, 0.6), Err(StudyError::InsufficientCapacity { .. })));
    }

    #[test]
    fn ccdf_shape() {
        let c = ccdf(&[0.0, 0.0, 0.1, 0.3]);
        assert_eq!(c, vec![(0.0, 0.5), (0.1, 0.25), (0.3, 0.0)]);
        assert!(ccdf(&[]).is_empty());
    }

    #[test]
    fn small_study_is_deterministic_across_widths() {
        let net = ring();
        let cfg = StudyConfig { profiles: 3, alphas: vec![1.0, 0.8], reserve: None, seed: 11, jobs: Some(1), ..Default::default() };
        let a = run_study(&net, &cfg).unwrap();
        let b = run_study(&net, &StudyConfig { jobs: Some(4), ..cfg.clone() }).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.cells, b.cells);
        assert_eq!(a.records.len(), 3 * 2 * 2 * 5);
        for c in &a.cells {
            assert!((0.0..=1.0).contains(&c.vulnerable_fraction.avg));
            assert_eq!(c.vulnerable, c.multi_stage + c.with_loss);
        }
    }
}

//! Immutable network representation.
//!
//! A [`Network`] owns bus and line records in input order. All downstream
//! modules address buses and lines by their position in these vectors
//! (the "index"); ids are only used at API boundaries and in reports.
//!
//! Quantities are per-unit on a single system base. Line limits are stored
//! as absolute thermal limits together with the base flow, and the limits on
//! flow *deviations* used by the equilibrium problems are derived from them
//! (see [`Network::deviation_bounds`]).

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for base-case balance checks.
pub const BALANCE_RTOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LineId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for LineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Generator,
    Load,
    Passive,
}

/// A bus together with its controllable-injection data.
///
/// `d_lower`/`d_upper` bound the deviation of the adjustable injection from
/// the base point `injection`. `cost` is the weight of the quadratic
/// deviation cost `cost * d^2 / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: BusId,
    pub kind: BusKind,
    pub d_lower: f64,
    pub d_upper: f64,
    pub damping: f64,
    /// Stored for completeness; no operation consumes it.
    pub inertia: f64,
    pub cost: f64,
    pub injection: f64,
    pub area: Option<u32>,
}

impl BusRecord {
    /// A bus with zero injection, no controllable range, unit cost.
    pub fn new(id: u32, kind: BusKind) -> Self {
        Self {
            id: BusId(id),
            kind,
            d_lower: 0.0,
            d_upper: 0.0,
            damping: 0.0,
            inertia: 0.0,
            cost: 1.0,
            injection: 0.0,
            area: None,
        }
    }

    pub fn with_injection(mut self, p0: f64) -> Self {
        self.injection = p0;
        self
    }

    pub fn with_bounds(mut self, lower: f64, upper: f64) -> Self {
        self.d_lower = lower;
        self.d_upper = upper;
        self
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_area(mut self, area: u32) -> Self {
        self.area = Some(area);
        self
    }

    /// Demand served at this bus in the base case (zero for net producers).
    pub fn demand(&self) -> f64 {
        if self.kind == BusKind::Load {
            (-self.injection).max(0.0)
        } else {
            0.0
        }
    }

    pub fn is_controllable(&self) -> bool {
        self.d_upper > self.d_lower
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub id: LineId,
    pub from: BusId,
    pub to: BusId,
    pub susceptance: f64,
    pub limit: f64,
    pub base_flow: f64,
    pub in_service: bool,
}

impl LineRecord {
    pub fn new(id: u32, from: u32, to: u32, susceptance: f64, limit: f64) -> Self {
        Self {
            id: LineId(id),
            from: BusId(from),
            to: BusId(to),
            susceptance,
            limit,
            base_flow: 0.0,
            in_service: true,
        }
    }

    pub fn with_base_flow(mut self, f0: f64) -> Self {
        self.base_flow = f0;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("duplicate line id {0}")]
    DuplicateLine(LineId),
    #[error("line {line} references unknown bus {bus}")]
    DanglingEndpoint { line: LineId, bus: BusId },
    #[error("line {0} has non-positive susceptance")]
    NegativeSusceptance(LineId),
    #[error("line {0} connects a bus to itself")]
    SelfLoop(LineId),
    #[error("invalid bus {id}: {reason}")]
    InvalidBus { id: BusId, reason: String },
    #[error("invalid line {id}: {reason}")]
    InvalidLine { id: LineId, reason: String },
    #[error("component containing bus {bus} has net base injection {imbalance:.3e}")]
    UnbalancedBase { bus: BusId, imbalance: f64 },
    #[error("base flows do not match injection at bus {bus} (mismatch {mismatch:.3e})")]
    BaseFlowMismatch { bus: BusId, mismatch: f64 },
    #[error("line {line} base flow {flow} exceeds thermal limit {limit}")]
    BaseFlowExceedsLimit { line: LineId, flow: f64, limit: f64 },
    #[error("unknown line {0}")]
    UnknownLine(LineId),
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
}

/// Sparse bus disturbance `r`; absent buses carry zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceVector {
    pub entries: BTreeMap<BusId, f64>,
}

impl DisturbanceVector {
    pub fn get(&self, bus: BusId) -> f64 {
        self.entries.get(&bus).copied().unwrap_or(0.0)
    }

    pub fn add(&mut self, bus: BusId, value: f64) {
        *self.entries.entry(bus).or_insert(0.0) += value;
    }

    /// Dense vector in network bus order.
    pub fn to_dense(&self, net: &Network) -> Vec<f64> {
        net.buses().iter().map(|b| self.get(b.id)).collect()
    }

    pub fn from_dense(net: &Network, values: &[f64]) -> Self {
        let mut out = Self::default();
        for (bus, &v) in net.buses().iter().zip(values) {
            if v != 0.0 {
                out.entries.insert(bus.id, v);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Connected components over in-service lines, ordered by their lowest bus index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub members: Vec<Vec<usize>>,
    pub of_bus: Vec<usize>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    buses: Vec<BusRecord>,
    lines: Vec<LineRecord>,
    bus_index: HashMap<BusId, usize>,
    line_index: HashMap<LineId, usize>,
    ends: Vec<(usize, usize)>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.buses == other.buses && self.lines == other.lines
    }
}

impl Network {
    /// Validates records and builds an immutable network.
    pub fn build(buses: Vec<BusRecord>, lines: Vec<LineRecord>) -> Result<Self, NetworkError> {
        let mut bus_index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if bus_index.insert(b.id, i).is_some() {
                return Err(NetworkError::DuplicateBus(b.id));
            }
            validate_bus(b)?;
        }
        let mut line_index = HashMap::with_capacity(lines.len());
        let mut ends = Vec::with_capacity(lines.len());
        for (k, l) in lines.iter().enumerate() {
            if line_index.insert(l.id, k).is_some() {
                return Err(NetworkError::DuplicateLine(l.id));
            }
            let from = *bus_index
                .get(&l.from)
                .ok_or(NetworkError::DanglingEndpoint { line: l.id, bus: l.from })?;
            let to = *bus_index
                .get(&l.to)
                .ok_or(NetworkError::DanglingEndpoint { line: l.id, bus: l.to })?;
            if from == to {
                return Err(NetworkError::SelfLoop(l.id));
            }
            if !(l.susceptance > 0.0) || !l.susceptance.is_finite() {
                return Err(NetworkError::NegativeSusceptance(l.id));
            }
            if !(l.limit >= 0.0) || !l.base_flow.is_finite() {
                return Err(NetworkError::InvalidLine {
                    id: l.id,
                    reason: "limit must be non-negative and base flow finite".into(),
                });
            }
            ends.push((from, to));
        }
        let net = Self { buses, lines, bus_index, line_index, ends };
        net.check_balance()?;
        net.check_kcl()?;
        Ok(net)
    }

    fn check_balance(&self) -> Result<(), NetworkError> {
        let total_abs: f64 = self.buses.iter().map(|b| b.injection.abs()).sum();
        let tol = BALANCE_RTOL * total_abs;
        let comps = self.components();
        for members in &comps.members {
            let s: f64 = members.iter().map(|&i| self.buses[i].injection).sum();
            if s.abs() > tol {
                return Err(NetworkError::UnbalancedBase {
                    bus: self.buses[members[0]].id,
                    imbalance: s,
                });
            }
        }
        Ok(())
    }

    fn check_kcl(&self) -> Result<(), NetworkError> {
        let mut net_out = vec![0.0; self.n()];
        let mut scale = 0.0f64;
        for (k, l) in self.lines.iter().enumerate() {
            if !l.in_service {
                continue;
            }
            let (a, b) = self.ends[k];
            net_out[a] += l.base_flow;
            net_out[b] -= l.base_flow;
            scale = scale.max(l.base_flow.abs());
        }
        for (i, b) in self.buses.iter().enumerate() {
            scale = scale.max(b.injection.abs());
            let mismatch = net_out[i] - b.injection;
            if mismatch.abs() > 1e-6 * scale.max(1.0) {
                return Err(NetworkError::BaseFlowMismatch { bus: b.id, mismatch });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn m(&self) -> usize {
        self.lines.len()
    }

    pub fn buses(&self) -> &[BusRecord] {
        &self.buses
    }

    pub fn lines(&self) -> &[LineRecord] {
        &self.lines
    }

    pub fn bus(&self, idx: usize) -> &BusRecord {
        &self.buses[idx]
    }

    pub fn line(&self, idx: usize) -> &LineRecord {
        &self.lines[idx]
    }

    pub fn bus_idx(&self, id: BusId) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    pub fn line_idx(&self, id: LineId) -> Option<usize> {
        self.line_index.get(&id).copied()
    }

    pub fn require_line(&self, id: LineId) -> Result<usize, NetworkError> {
        self.line_idx(id).ok_or(NetworkError::UnknownLine(id))
    }

    pub fn require_bus(&self, id: BusId) -> Result<usize, NetworkError> {
        self.bus_idx(id).ok_or(NetworkError::UnknownBus(id))
    }

    /// Bus indices `(source, destination)` of line `k`.
    pub fn ends(&self, k: usize) -> (usize, usize) {
        self.ends[k]
    }

    pub fn in_service(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.m()).filter(move |&k| self.lines[k].in_service)
    }

    pub fn in_service_count(&self) -> usize {
        self.lines.iter().filter(|l| l.in_service).count()
    }

    pub fn injections(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.injection).collect()
    }

    pub fn total_demand(&self) -> f64 {
        self.buses.iter().map(BusRecord::demand).sum()
    }

    /// Connected components over in-service lines.
    pub fn components(&self) -> Components {
        let n = self.n();
        let mut adj = vec![Vec::new(); n];
        for k in self.in_service() {
            let (a, b) = self.ends[k];
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut of_bus = vec![usize::MAX; n];
        let mut members = Vec::new();
        for start in 0..n {
            if of_bus[start] != usize::MAX {
                continue;
            }
            let c = members.len();
            let mut group = vec![start];
            of_bus[start] = c;
            let mut head = 0;
            while head < group.len() {
                let u = group[head];
                head += 1;
                for &v in &adj[u] {
                    if of_bus[v] == usize::MAX {
                        of_bus[v] = c;
                        group.push(v);
                    }
                }
            }
            group.sort_unstable();
            members.push(group);
        }
        Components { members, of_bus }
    }

    /// Signed incidence matrix over in-service lines, with the line ids of its columns.
    pub fn incidence_matrix(&self) -> (DMatrix<f64>, Vec<LineId>) {
        let cols: Vec<usize> = self.in_service().collect();
        let mut c = DMatrix::zeros(self.n(), cols.len());
        for (col, &k) in cols.iter().enumerate() {
            let (a, b) = self.ends[k];
            c[(a, col)] = 1.0;
            c[(b, col)] = -1.0;
        }
        (c, cols.iter().map(|&k| self.lines[k].id).collect())
    }

    /// Bounds `(lower, upper)` on flow deviations around the base flow, per line.
    pub fn deviation_bounds(&self) -> Result<Vec<(f64, f64)>, NetworkError> {
        self.lines
            .iter()
            .map(|l| {
                if l.base_flow.abs() > l.limit * (1.0 + 1e-12) + 1e-12 {
                    Err(NetworkError::BaseFlowExceedsLimit {
                        line: l.id,
                        flow: l.base_flow,
                        limit: l.limit,
                    })
                } else {
                    Ok((-l.limit - l.base_flow, l.limit - l.base_flow))
                }
            })
            .collect()
    }

    /// Copy with the given lines taken out of service. Base flows are kept as-is.
    pub fn with_lines_out(&self, lines: &[usize]) -> Self {
        let mut out = self.clone();
        for &k in lines {
            out.lines[k].in_service = false;
        }
        out
    }

    /// Rebuilds the network after editing bus and line records.
    pub fn rebuild(
        &self,
        edit_bus: impl FnMut(&mut BusRecord),
        edit_line: impl FnMut(&mut LineRecord),
    ) -> Result<Self, NetworkError> {
        let mut buses = self.buses.clone();
        let mut lines = self.lines.clone();
        buses.iter_mut().for_each(edit_bus);
        lines.iter_mut().for_each(edit_line);
        Self::build(buses, lines)
    }

    pub fn into_parts(self) -> (Vec<BusRecord>, Vec<LineRecord>) {
        (self.buses, self.lines)
    }
}

fn validate_bus(b: &BusRecord) -> Result<(), NetworkError> {
    let bad = |reason: &str| {
        Err(NetworkError::InvalidBus { id: b.id, reason: reason.to_string() })
    };
    let fields = [b.d_lower, b.d_upper, b.damping, b.inertia, b.cost, b.injection];
    if fields.iter().any(|v| !v.is_finite()) {
        return bad("non-finite field");
    }
    if !(b.d_lower <= 0.0 && 0.0 <= b.d_upper) {
        return bad("deviation bounds must bracket zero");
    }
    if !(b.cost > 0.0) {
        return bad("cost weight must be positive");
    }
    if b.damping < 0.0 || b.inertia < 0.0 {
        return bad("damping and inertia must be non-negative");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus() -> (Vec<BusRecord>, Vec<LineRecord>) {
        (
            vec![
                BusRecord::new(1, BusKind::Generator).with_injection(1.0),
                BusRecord::new(2, BusKind::Load).with_injection(-1.0),
            ],
            vec![LineRecord::new(1, 1, 2, 1.0, 2.0).with_base_flow(1.0)],
        )
    }

    #[test]
    fn minimal_network_builds() {
        let (b, l) = two_bus();
        let net = Network::build(b, l).unwrap();
        assert_eq!((net.n(), net.m()), (2, 1));
    }

    #[test]
    fn dangling_endpoint_rejected() {
        let (b, mut l) = two_bus();
        l[0].to = BusId(99);
        assert!(matches!(
            Network::build(b, l),
            Err(NetworkError::DanglingEndpoint { bus: BusId(99), .. })
        ));
    }

    #[test]
    fn unbalanced_base_rejected() {
        let (mut b, l) = two_bus();
        b[1].injection = -0.5;
        assert!(matches!(Network::build(b, l), Err(NetworkError::UnbalancedBase { .. })));
    }

    #[test]
    fn duplicate_and_bad_susceptance() {
        let (mut b, l) = two_bus();
        b[1].id = BusId(1);
        assert_eq!(Network::build(b, l).unwrap_err(), NetworkError::DuplicateBus(BusId(1)));
        let (b, mut l) = two_bus();
        l[0].susceptance = -1.0;
        assert_eq!(
            Network::build(b, l).unwrap_err(),
            NetworkError::NegativeSusceptance(LineId(1))
        );
    }

    #[test]
    fn bounds_must_bracket_zero() {
        let (mut b, l) = two_bus();
        b[0].d_lower = 0.1;
        b[0].d_upper = 0.5;
        assert!(matches!(Network::build(b, l), Err(NetworkError::InvalidBus { .. })));
    }

    #[test]
    fn incidence_single_line_and_triangle() {
        let (b, l) = two_bus();
        let net = Network::build(b, l).unwrap();
        let (c, ids) = net.incidence_matrix();
        assert_eq!(ids, vec![LineId(1)]);
        assert_eq!(c.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, -1.0]);

        let buses = (1..=3).map(|i| BusRecord::new(i, BusKind::Passive)).collect();
        let lines = vec![
            LineRecord::new(1, 1, 2, 1.0, 1.0),
            LineRecord::new(2, 2, 3, 1.0, 1.0),
            LineRecord::new(3, 1, 3, 1.0, 1.0),
        ];
        let net = Network::build(buses, lines).unwrap();
        let (c, _) = net.incidence_matrix();
        assert_eq!(c.shape(), (3, 3));
        for j in 0..3 {
            assert_eq!(c.column(j).sum(), 0.0);
        }
        let out = net.with_lines_out(&[1]);
        let (c, ids) = out.incidence_matrix();
        assert_eq!(c.ncols(), 2);
        assert_eq!(ids, vec![LineId(1), LineId(3)]);
    }

    #[test]
    fn deviation_bounds_convention() {
        let mk = |limit: f64, f0: f64| {
            let buses = vec![
                BusRecord::new(1, BusKind::Generator).with_injection(f0),
                BusRecord::new(2, BusKind::Load).with_injection(-f0),
            ];
            let lines = vec![LineRecord::new(1, 1, 2, 1.0, limit).with_base_flow(f0)];
            Network::build(buses, lines).unwrap().deviation_bounds()
        };
        let b = mk(1.0, 0.6).unwrap()[0];
        assert!((b.0 + 1.6).abs() < 1e-15 && (b.1 - 0.4).abs() < 1e-15);
        assert_eq!(mk(1.0, 0.0).unwrap()[0], (-1.0, 1.0));
        assert!(matches!(mk(0.5, 0.6), Err(NetworkError::BaseFlowExceedsLimit { .. })));
        // pinched to a half-line at the limit
        let b = mk(1.0, 1.0).unwrap()[0];
        assert_eq!(b.1, 0.0);
    }

    #[test]
    fn kcl_mismatch_rejected() {
        let (b, mut l) = two_bus();
        l[0].base_flow = 0.5;
        assert!(matches!(Network::build(b, l), Err(NetworkError::BaseFlowMismatch { .. })));
    }
}

//! Bridges, bridge-block decomposition, balancing-area partitions and
//! planning-phase line switching.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dcflow::{self, FlowError};
use crate::netmodel::{BusId, LineId, Network, NetworkError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("switching creates overloads on lines {0:?}")]
    CreatesOverload(Vec<LineId>),
    #[error("switching leaves the component of bus {bus} with net injection {imbalance:e}")]
    DisconnectsLoad { bus: BusId, imbalance: f64 },
    #[error("line {0} is already out of service")]
    NotInService(LineId),
    #[error("partition is invalid: {0}")]
    InvalidPartition(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Marks every in-service line that is a bridge of the multigraph.
///
/// Iterative DFS with low-links; parallel lines are told apart by line index,
/// so a doubled connection is never reported as a bridge.
pub fn bridge_mask(net: &Network) -> Vec<bool> {
    let n = net.n();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for k in net.in_service() {
        let (a, b) = net.ends(k);
        adj[a].push((b, k));
        adj[b].push((a, k));
    }
    let mut is_bridge = vec![false; net.m()];
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut time = 0;
    // (vertex, line used to enter it, next adjacency position)
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        disc[root] = time;
        low[root] = time;
        time += 1;
        stack.push((root, usize::MAX, 0));
        while let Some(top) = stack.last_mut() {
            let (u, via, pos) = *top;
            if pos < adj[u].len() {
                top.2 += 1;
                let (v, k) = adj[u][pos];
                if k == via {
                    continue;
                }
                if disc[v] == usize::MAX {
                    disc[v] = time;
                    low[v] = time;
                    time += 1;
                    stack.push((v, k, 0));
                } else {
                    low[u] = low[u].min(disc[v]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[u]);
                    if low[u] > disc[p] {
                        is_bridge[via] = true;
                    }
                }
            }
        }
    }
    is_bridge
}

pub fn find_bridges(net: &Network) -> BTreeSet<LineId> {
    bridge_mask(net)
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(k, _)| net.line(k).id)
        .collect()
}

/// Division of the buses into balancing areas.
///
/// Areas are labelled `0..len()` in order of their lowest bus index. Only
/// in-service lines are classified as tie or internal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    area_of: Vec<usize>,
    areas: Vec<Vec<usize>>,
    tie_lines: Vec<usize>,
    internal_lines: Vec<usize>,
}

impl Partition {
    /// Builds a partition from one arbitrary label per bus index.
    pub fn from_labels<T: Ord + Clone>(net: &Network, labels: &[T]) -> Result<Self, TopologyError> {
        if labels.len() != net.n() {
            return Err(TopologyError::InvalidPartition(format!(
                "{} labels for {} buses",
                labels.len(),
                net.n()
            )));
        }
        let mut seen: Vec<(T, usize)> = Vec::new();
        let mut area_of = vec![0; net.n()];
        for (j, l) in labels.iter().enumerate() {
            let a = match seen.iter().find(|(x, _)| x == l) {
                Some(&(_, a)) => a,
                None => {
                    seen.push((l.clone(), seen.len()));
                    seen.len() - 1
                }
            };
            area_of[j] = a;
        }
        Ok(Self::from_area_of(net, area_of))
    }

    /// Builds a partition from explicit bus-id sets.
    pub fn from_areas(net: &Network, areas: &[Vec<BusId>]) -> Result<Self, TopologyError> {
        let mut labels = vec![usize::MAX; net.n()];
        for (a, members) in areas.iter().enumerate() {
            if members.is_empty() {
                return Err(TopologyError::InvalidPartition(format!("area {a} is empty")));
            }
            for id in members {
                let j = net.require_bus(*id)?;
                if labels[j] != usize::MAX {
                    return Err(TopologyError::InvalidPartition(format!("bus {id} in two areas")));
                }
                labels[j] = a;
            }
        }
        if let Some(j) = labels.iter().position(|&l| l == usize::MAX) {
            return Err(TopologyError::InvalidPartition(format!(
                "bus {} is in no area",
                net.bus(j).id
            )));
        }
        Self::from_labels(net, &labels)
    }

    /// Uses the `area` labels stored on the buses, if every bus has one.
    pub fn from_bus_areas(net: &Network) -> Option<Result<Self, TopologyError>> {
        let labels: Option<Vec<u32>> = net.buses().iter().map(|b| b.area).collect();
        labels.map(|l| Self::from_labels(net, &l))
    }

    fn from_area_of(net: &Network, raw: Vec<usize>) -> Self {
        // relabel by first-seen bus order
        let mut map = vec![usize::MAX; raw.iter().max().map_or(0, |m| m + 1)];
        let mut next = 0;
        let area_of: Vec<usize> = raw
            .iter()
            .map(|&r| {
                if map[r] == usize::MAX {
                    map[r] = next;
                    next += 1;
                }
                map[r]
            })
            .collect();
        let mut areas = vec![Vec::new(); next];
        for (j, &a) in area_of.iter().enumerate() {
            areas[a].push(j);
        }
        let mut tie_lines = Vec::new();
        let mut internal_lines = Vec::new();
        for k in net.in_service() {
            let (a, b) = net.ends(k);
            if area_of[a] == area_of[b] {
                internal_lines.push(k);
            } else {
                tie_lines.push(k);
            }
        }
        Self { area_of, areas, tie_lines, internal_lines }
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    /// Area label of a bus index.
    pub fn area_of(&self, bus: usize) -> usize {
        self.area_of[bus]
    }

    pub fn labels(&self) -> &[usize] {
        &self.area_of
    }

    /// Bus indices of each area.
    pub fn areas(&self) -> &[Vec<usize>] {
        &self.areas
    }

    /// Bus ids of each area.
    pub fn area_ids(&self, net: &Network) -> Vec<Vec<BusId>> {
        self.areas.iter().map(|a| a.iter().map(|&j| net.bus(j).id).collect()).collect()
    }

    /// Line indices with endpoints in different areas.
    pub fn tie_lines(&self) -> &[usize] {
        &self.tie_lines
    }

    pub fn internal_lines(&self) -> &[usize] {
        &self.internal_lines
    }

    /// Distinct area pairs `(a, b)`, `a < b`, joined by at least one tie line.
    pub fn area_adjacency(&self, net: &Network) -> Vec<(usize, usize)> {
        let mut pairs = BTreeSet::new();
        for &k in &self.tie_lines {
            let (i, j) = net.ends(k);
            let (a, b) = (self.area_of[i], self.area_of[j]);
            pairs.insert((a.min(b), a.max(b)));
        }
        pairs.into_iter().collect()
    }

    /// Same areas as `other`, ignoring labels.
    pub fn same_areas(&self, other: &Partition) -> bool {
        // labels are canonical (first-seen order), so equality of the label
        // vectors is equality of the set partitions
        self.area_of == other.area_of
    }
}

/// Areas are the 2-edge-connected components; tie lines are exactly the bridges.
pub fn bridge_block_decomposition(net: &Network) -> Partition {
    let bridges = bridge_mask(net);
    let n = net.n();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for k in net.in_service() {
        if bridges[k] {
            continue;
        }
        let (a, b) = net.ends(k);
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let raw: Vec<usize> = (0..n).map(|j| find(&mut parent, j)).collect();
    Partition::from_area_of(net, raw)
}

/// Buses and lines on which a partition departs from the bridge-block decomposition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartitionMismatch {
    /// Buses whose area differs from their bridge block.
    pub buses: Vec<BusId>,
    /// Internal lines that are bridges, or tie lines that are not.
    pub lines: Vec<LineId>,
}

pub fn is_tree_partition(net: &Network, partition: &Partition) -> bool {
    partition.same_areas(&bridge_block_decomposition(net))
}

/// Detailed form of [`is_tree_partition`].
pub fn check_tree_partition(net: &Network, partition: &Partition) -> Result<(), PartitionMismatch> {
    let bb = bridge_block_decomposition(net);
    if partition.same_areas(&bb) {
        return Ok(());
    }
    let mut out = PartitionMismatch::default();
    let bridges = bridge_mask(net);
    for k in net.in_service() {
        let (a, b) = net.ends(k);
        let tie = partition.area_of(a) != partition.area_of(b);
        if tie != bridges[k] {
            out.lines.push(net.line(k).id);
        }
    }
    // a bus is offending when its area and its block disagree on membership
    for j in 0..net.n() {
        let pa = &partition.areas()[partition.area_of(j)];
        let ba = &bb.areas()[bb.area_of(j)];
        if pa != ba {
            out.buses.push(net.bus(j).id);
        }
    }
    Err(out)
}

/// `|P| × n` indicator matrix of area membership.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaMatrix {
    pub e: DMatrix<f64>,
}

pub fn area_membership_matrix(partition: &Partition, net: &Network) -> AreaMatrix {
    let mut e = DMatrix::zeros(partition.len(), net.n());
    for j in 0..net.n() {
        e[(partition.area_of(j), j)] = 1.0;
    }
    AreaMatrix { e }
}

/// Areas containing an endpoint of some failed line.
pub fn associated_areas(
    partition: &Partition,
    net: &Network,
    failures: &[LineId],
) -> Result<BTreeSet<usize>, TopologyError> {
    let mut out = BTreeSet::new();
    for id in failures {
        let k = net.require_line(*id)?;
        let (a, b) = net.ends(k);
        out.insert(partition.area_of(a));
        out.insert(partition.area_of(b));
    }
    Ok(out)
}

/// Takes lines out of service and recomputes base flows at the base injections.
pub fn switch_off_lines(net: &Network, ids: &[LineId]) -> Result<Network, TopologyError> {
    let (out, overloaded) = switch_off_lines_unchecked(net, ids)?;
    if overloaded.is_empty() {
        Ok(out)
    } else {
        Err(TopologyError::CreatesOverload(overloaded))
    }
}

/// As [`switch_off_lines`], returning the revised network together with the
/// lines whose recomputed flow exceeds their limit instead of failing.
pub fn switch_off_lines_unchecked(
    net: &Network,
    ids: &[LineId],
) -> Result<(Network, Vec<LineId>), TopologyError> {
    let mut idx = Vec::with_capacity(ids.len());
    for id in ids {
        let k = net.require_line(*id)?;
        if !net.line(k).in_service {
            return Err(TopologyError::NotInService(*id));
        }
        idx.push(k);
    }
    let cut = net.with_lines_out(&idx);
    let p = cut.injections();
    let sol = match dcflow::solve_dc_flow(&cut, &p) {
        Ok(s) => s,
        Err(FlowError::Unbalanced { bus, sum }) => {
            return Err(TopologyError::DisconnectsLoad { bus, imbalance: sum })
        }
        Err(e) => return Err(e.into()),
    };
    let mut flows = sol.flows.into_iter();
    let revised = cut.rebuild(|_| {}, |l| {
        let f = flows.next().unwrap_or(0.0);
        l.base_flow = if l.in_service { f } else { 0.0 };
    })?;
    let overloaded = revised
        .lines()
        .iter()
        .filter(|l| l.in_service && l.base_flow.abs() > l.limit * (1.0 + 1e-12) + 1e-12)
        .map(|l| l.id)
        .collect();
    Ok((revised, overloaded))
}

//! DC power flow: grounded Laplacian solves, flows, PTDFs and a small DC OPF.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::netmodel::{BusId, BusRecord, Components, LineId, LineRecord, Network, NetworkError};
use crate::qp::{self, Infeasibility, LinearRow, PhaseOne, QpError, QpKktReport, QuadProgram};

/// Relative tolerance on per-component injection sums.
pub const FLOW_BALANCE_RTOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("injections do not balance in the component of bus {bus} (sum {sum:e})")]
    Unbalanced { bus: BusId, sum: f64 },
    #[error("singular grounded Laplacian")]
    Singular,
    #[error("expected {expected} entries, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("pin {0} is not a bus index or pins two buses of one component")]
    BadPin(usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub fn connected_components(net: &Network) -> Components {
    net.components()
}

/// Factorized Laplacian `C B Cᵀ` over in-service lines with one bus per
/// connected component grounded (its row and column deleted).
#[derive(Clone, Debug)]
pub struct GroundedLaplacian {
    comps: Components,
    pins: Vec<usize>,
    /// position of each bus inside its component's reduced system
    local: Vec<Option<usize>>,
    factors: Vec<Option<Cholesky<f64, Dyn>>>,
}

impl GroundedLaplacian {
    /// Grounds the lowest-index bus of every component.
    pub fn new(net: &Network) -> Result<Self, FlowError> {
        let comps = net.components();
        let pins = comps.members.iter().map(|m| m[0]).collect();
        Self::assemble(net, comps, pins)
    }

    /// Grounds the given buses; exactly one per component, any order.
    pub fn with_pins(net: &Network, pins: &[usize]) -> Result<Self, FlowError> {
        let comps = net.components();
        let mut per_comp = vec![None; comps.len()];
        for &p in pins {
            if p >= net.n() {
                return Err(FlowError::BadPin(p));
            }
            let c = comps.of_bus[p];
            if per_comp[c].replace(p).is_some() {
                return Err(FlowError::BadPin(p));
            }
        }
        let pins = per_comp
            .iter()
            .zip(&comps.members)
            .map(|(p, m)| p.unwrap_or(m[0]))
            .collect();
        Self::assemble(net, comps, pins)
    }

    fn assemble(net: &Network, comps: Components, pins: Vec<usize>) -> Result<Self, FlowError> {
        let n = net.n();
        let mut local = vec![None; n];
        let mut sizes = vec![0usize; comps.len()];
        for (c, members) in comps.members.iter().enumerate() {
            for &j in members {
                if j != pins[c] {
                    local[j] = Some(sizes[c]);
                    sizes[c] += 1;
                }
            }
        }
        let mut mats: Vec<DMatrix<f64>> = sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect();
        for k in net.in_service() {
            let (a, b) = net.ends(k);
            let w = net.line(k).susceptance;
            let c = comps.of_bus[a];
            let m = &mut mats[c];
            match (local[a], local[b]) {
                (Some(i), Some(j)) => {
                    m[(i, i)] += w;
                    m[(j, j)] += w;
                    m[(i, j)] -= w;
                    m[(j, i)] -= w;
                }
                (Some(i), None) | (None, Some(i)) => m[(i, i)] += w,
                (None, None) => {}
            }
        }
        let mut factors = Vec::with_capacity(mats.len());
        for m in mats {
            if m.nrows() == 0 {
                factors.push(None);
            } else {
                factors.push(Some(Cholesky::new(m).ok_or(FlowError::Singular)?));
            }
        }
        Ok(Self { comps, pins, local, factors })
    }

    pub fn components(&self) -> &Components {
        &self.comps
    }

    pub fn pins(&self) -> &[usize] {
        &self.pins
    }

    /// Solves `L θ = b` with grounded buses at zero, after checking that `b`
    /// sums to zero on every component.
    pub fn solve(&self, net: &Network, b: &[f64]) -> Result<Vec<f64>, FlowError> {
        self.check_len(b)?;
        let scale = b.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        for members in &self.comps.members {
            let s: f64 = members.iter().map(|&j| b[j]).sum();
            if s.abs() > FLOW_BALANCE_RTOL * scale {
                return Err(FlowError::Unbalanced { bus: net.bus(members[0]).id, sum: s });
            }
        }
        Ok(self.solve_grounded(b))
    }

    /// Grounded solve without the balance check; the imbalance of each
    /// component is absorbed at its grounded bus.
    pub fn solve_grounded(&self, b: &[f64]) -> Vec<f64> {
        let mut theta = vec![0.0; b.len()];
        for (c, members) in self.comps.members.iter().enumerate() {
            let Some(f) = &self.factors[c] else { continue };
            let mut rhs = DVector::zeros(f.l_dirty().nrows());
            for &j in members {
                if let Some(i) = self.local[j] {
                    rhs[i] = b[j];
                }
            }
            let x = f.solve(&rhs);
            for &j in members {
                if let Some(i) = self.local[j] {
                    theta[j] = x[i];
                }
            }
        }
        theta
    }

    fn check_len(&self, b: &[f64]) -> Result<(), FlowError> {
        if b.len() != self.local.len() {
            return Err(FlowError::Dimension { expected: self.local.len(), got: b.len() });
        }
        Ok(())
    }
}

/// Solves `(C B Cᵀ) θ = b` with the lowest-index bus of every component pinned to 0.
pub fn laplacian_solve(net: &Network, b: &[f64]) -> Result<Vec<f64>, FlowError> {
    GroundedLaplacian::new(net)?.solve(net, b)
}

/// As [`laplacian_solve`] with caller-chosen pinned buses (bus indices).
pub fn laplacian_solve_pinned(net: &Network, b: &[f64], pins: &[usize]) -> Result<Vec<f64>, FlowError> {
    GroundedLaplacian::with_pins(net, pins)?.solve(net, b)
}

/// Angles and line flows. `flows` is indexed like the network's lines;
/// out-of-service lines carry zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSolution {
    pub theta: Vec<f64>,
    pub flows: Vec<f64>,
}

impl FlowSolution {
    pub fn flow(&self, net: &Network, id: LineId) -> Option<f64> {
        net.line_idx(id).map(|k| self.flows[k])
    }

    pub fn angle(&self, net: &Network, id: BusId) -> Option<f64> {
        net.bus_idx(id).map(|j| self.theta[j])
    }
}

pub fn flows_from_angles(net: &Network, theta: &[f64]) -> Vec<f64> {
    let mut flows = vec![0.0; net.m()];
    for k in net.in_service() {
        let (a, b) = net.ends(k);
        flows[k] = net.line(k).susceptance * (theta[a] - theta[b]);
    }
    flows
}

pub fn solve_dc_flow(net: &Network, injections: &[f64]) -> Result<FlowSolution, FlowError> {
    let theta = laplacian_solve(net, injections)?;
    let flows = flows_from_angles(net, &theta);
    Ok(FlowSolution { theta, flows })
}

/// Builds a network whose base flows are the DC flows of the bus injections
/// (out-of-service lines get zero). Any base flows in `lines` are ignored.
pub fn build_with_dc_flows(buses: Vec<BusRecord>, mut lines: Vec<LineRecord>) -> Result<Network, FlowError> {
    let p: Vec<f64> = buses.iter().map(|b| b.injection).collect();
    let skeleton: Vec<BusRecord> = buses.iter().map(|b| BusRecord { injection: 0.0, ..b.clone() }).collect();
    lines.iter_mut().for_each(|l| l.base_flow = 0.0);
    let skel = Network::build(skeleton, lines)?;
    let sol = solve_dc_flow(&skel, &p)?;
    let (_, mut lines) = skel.into_parts();
    for (l, f) in lines.iter_mut().zip(sol.flows) {
        l.base_flow = if l.in_service { f } else { 0.0 };
    }
    Ok(Network::build(buses, lines)?)
}

/// Power transfer distribution factors over in-service lines.
///
/// Row `r` gives the flow on line `lines[r]` per unit injection at each bus,
/// withdrawn at the grounded bus of its component. For injections that
/// balance per component the result does not depend on the grounding.
#[derive(Clone, Debug)]
pub struct Ptdf {
    pub matrix: DMatrix<f64>,
    pub lines: Vec<usize>,
}

impl Ptdf {
    pub fn new(net: &Network) -> Result<Self, FlowError> {
        let lap = GroundedLaplacian::new(net)?;
        Ok(Self::from_laplacian(net, &lap))
    }

    pub fn from_laplacian(net: &Network, lap: &GroundedLaplacian) -> Self {
        let n = net.n();
        let lines: Vec<usize> = net.in_service().collect();
        let mut x = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = lap.solve_grounded(&e);
            e[j] = 0.0;
            for i in 0..n {
                x[(i, j)] = col[i];
            }
        }
        let mut matrix = DMatrix::zeros(lines.len(), n);
        for (r, &k) in lines.iter().enumerate() {
            let (a, b) = net.ends(k);
            let w = net.line(k).susceptance;
            for j in 0..n {
                matrix[(r, j)] = w * (x[(a, j)] - x[(b, j)]);
            }
        }
        Self { matrix, lines }
    }

    /// Flows on every network line (zero when out of service).
    pub fn flows(&self, m: usize, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for (r, &k) in self.lines.iter().enumerate() {
            out[k] = self.matrix.row(r).iter().zip(p).map(|(h, v)| h * v).sum();
        }
        out
    }
}

/// Quadratic generation cost `a p² + b p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadCost {
    pub quadratic: f64,
    pub linear: f64,
}

impl QuadCost {
    pub fn eval(&self, p: f64) -> f64 {
        self.quadratic * p * p + self.linear * p
    }
}

/// A dispatchable unit at a bus, with output bounds in absolute power.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub pmin: f64,
    pub pmax: f64,
    pub cost: QuadCost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DispatchPoint {
    /// Net injection per bus: generation minus demand.
    pub injections: Vec<f64>,
    /// Output per generator, in input order.
    pub generation: Vec<f64>,
    /// Flows on the first network passed in.
    pub flows: Vec<f64>,
    pub cost: f64,
    pub kkt: QpKktReport,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpfError {
    #[error("dispatch is infeasible (certificate gap {:e})", .0.gap)]
    Infeasible(Infeasibility),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("solver failure: {0}")]
    Solver(QpError),
    #[error("networks must share one bus set")]
    Mismatch,
}

/// Quadratic coefficient used in place of zero so that linear costs still
/// give a strictly convex program.
const LINEAR_COST_REGULARIZATION: f64 = 1e-9;

/// Minimum-cost dispatch meeting `demand` (per bus) under line limits and
/// generator bounds.
pub fn dc_opf(net: &Network, demand: &[f64], gens: &[Generator]) -> Result<DispatchPoint, OpfError> {
    dc_opf_secure(&[net], demand, gens)
}

/// As [`dc_opf`], but the dispatch must respect line limits on every given
/// topology of the same bus set (for example before and after switching).
pub fn dc_opf_secure(
    nets: &[&Network],
    demand: &[f64],
    gens: &[Generator],
) -> Result<DispatchPoint, OpfError> {
    let net = nets[0];
    let n = net.n();
    if nets.iter().any(|t| t.n() != n) {
        return Err(OpfError::Mismatch);
    }
    if demand.len() != n {
        return Err(FlowError::Dimension { expected: n, got: demand.len() }.into());
    }
    let g = gens.len();
    let hess = gens
        .iter()
        .map(|u| (2.0 * u.cost.quadratic).max(LINEAR_COST_REGULARIZATION))
        .collect();
    let mut prob = QuadProgram::new(hess, gens.iter().map(|u| u.cost.linear).collect());
    for (i, u) in gens.iter().enumerate() {
        prob.lower[i] = u.pmin;
        prob.upper[i] = u.pmax;
    }
    // injection p = G pg − demand
    let mut ptdfs = Vec::with_capacity(nets.len());
    for t in nets {
        let comps = t.components();
        for members in &comps.members {
            let mut a = vec![0.0; g];
            for (i, u) in gens.iter().enumerate() {
                if comps.of_bus[u.bus] == comps.of_bus[members[0]] {
                    a[i] = 1.0;
                }
            }
            let rhs: f64 = members.iter().map(|&j| demand[j]).sum();
            prob.eq.push(LinearRow::new(a, rhs));
        }
        let h = Ptdf::new(t)?;
        for (r, &k) in h.lines.iter().enumerate() {
            let row = h.matrix.row(r);
            let a: Vec<f64> = gens.iter().map(|u| row[u.bus]).collect();
            let base: f64 = (0..n).map(|j| row[j] * demand[j]).sum();
            let lim = t.line(k).limit;
            // −lim ≤ a·pg − base ≤ lim
            prob.ineq.push(LinearRow::new(a.clone(), lim + base));
            prob.ineq.push(LinearRow::new(a.iter().map(|v| -v).collect(), lim - base));
        }
        ptdfs.push(h);
    }
    let sol = match qp::solve(&prob) {
        Ok(s) => s,
        Err(QpError::Infeasible(_)) => {
            return match qp::phase_one(&prob, 1e-9) {
                Ok(PhaseOne::Infeasible(c)) => Err(OpfError::Infeasible(c)),
                Ok(PhaseOne::Feasible(_)) => Err(OpfError::Solver(QpError::NumericalFailure(
                    "active-set and feasibility verdicts disagree".into(),
                ))),
                Err(e) => Err(OpfError::Solver(e)),
            };
        }
        Err(e) => return Err(OpfError::Solver(e)),
    };
    let mut injections: Vec<f64> = demand.iter().map(|d| -d).collect();
    for (i, u) in gens.iter().enumerate() {
        injections[u.bus] += sol.x[i];
    }
    let flows = ptdfs[0].flows(net.m(), &injections);
    let cost = gens.iter().zip(&sol.x).map(|(u, p)| u.cost.eval(*p)).sum();
    Ok(DispatchPoint {
        kkt: qp::kkt_residuals(&prob, &sol),
        generation: sol.x,
        injections,
        flows,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{BusKind, BusRecord, LineRecord};

    fn net(n: u32, lines: &[(u32, u32)]) -> Network {
        let buses = (1..=n).map(|i| BusRecord::new(i, BusKind::Passive)).collect();
        let lines = lines
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| LineRecord::new(k as u32 + 1, a, b, 1.0, 10.0))
            .collect();
        Network::build(buses, lines).unwrap()
    }

    fn triangle() -> Network {
        net(3, &[(1, 2), (2, 3), (1, 3)])
    }

    #[test]
    fn components_examples() {
        assert_eq!(connected_components(&net(3, &[(1, 2), (2, 3)])).len(), 1);
        assert_eq!(connected_components(&net(3, &[])).len(), 3);
        let two = net(6, &[(1, 2), (2, 3), (1, 3), (4, 5), (5, 6), (4, 6), (3, 4)]);
        assert_eq!(connected_components(&two.with_lines_out(&[6])).len(), 2);
    }

    #[test]
    fn laplacian_zero_rhs() {
        let t = triangle();
        assert_eq!(laplacian_solve(&t, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn laplacian_triangle_pinned_middle() {
        let t = triangle();
        let th = laplacian_solve_pinned(&t, &[1.0, 0.0, -1.0], &[1]).unwrap();
        assert!((th[0] - 1.0 / 3.0).abs() < 1e-14);
        assert!(th[1].abs() < 1e-15);
        assert!((th[2] + 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn laplacian_unbalanced() {
        let t = triangle();
        assert!(matches!(laplacian_solve(&t, &[1.0, 0.0, 0.0]), Err(FlowError::Unbalanced { .. })));
    }

    #[test]
    fn triangle_and_path_flows() {
        let t = triangle();
        let s = solve_dc_flow(&t, &[1.0, 0.0, -1.0]).unwrap();
        let want = [1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (f, w) in s.flows.iter().zip(want) {
            assert!((f - w).abs() < 1e-14);
        }
        let p = net(3, &[(1, 2), (2, 3)]);
        let s = solve_dc_flow(&p, &[1.0, 0.0, -1.0]).unwrap();
        assert!((s.flows[0] - 1.0).abs() < 1e-14 && (s.flows[1] - 1.0).abs() < 1e-14);
        let s = solve_dc_flow(&p, &[0.0; 3]).unwrap();
        assert!(s.flows.iter().all(|f| *f == 0.0));
    }

    #[test]
    fn ptdf_matches_flow_solve() {
        let t = net(4, &[(1, 2), (2, 3), (1, 3), (3, 4), (2, 4)]);
        let p = [0.7, -0.2, 0.4, -0.9];
        let h = Ptdf::new(&t).unwrap();
        let a = h.flows(t.m(), &p);
        let b = solve_dc_flow(&t, &p).unwrap().flows;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn gen(bus: usize, pmax: f64) -> Generator {
        Generator { bus, pmin: 0.0, pmax, cost: QuadCost { quadratic: 1.0, linear: 0.0 } }
    }

    #[test]
    fn opf_single_generator() {
        let t = net(2, &[(1, 2)]);
        let d = dc_opf(&t, &[0.0, 1.0], &[gen(0, 5.0)]).unwrap();
        assert!((d.generation[0] - 1.0).abs() < 1e-10);
        assert!((d.flows[0] - 1.0).abs() < 1e-10);
        assert!(d.kkt.max() < 1e-6);
    }

    #[test]
    fn opf_symmetric_split() {
        let t = net(3, &[(1, 3), (2, 3)]);
        let d = dc_opf(&t, &[0.0, 0.0, 1.0], &[gen(0, 5.0), gen(1, 5.0)]).unwrap();
        assert!((d.generation[0] - 0.5).abs() < 1e-10);
        assert!((d.generation[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn opf_over_capacity() {
        let t = net(2, &[(1, 2)]);
        match dc_opf(&t, &[0.0, 3.0], &[gen(0, 2.0)]) {
            Err(OpfError::Infeasible(c)) => assert!(c.gap > 0.0),
            other => panic!("{other:?}"),
        }
    }
}

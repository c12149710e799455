//! Random tree-partitioned networks and small helpers shared by the
//! integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use treegrid::dcflow::build_with_dc_flows;
use treegrid::equilibria::{Controller, EquilibriumProblem};
use treegrid::netmodel::{BusKind, BusRecord, LineRecord, Network};
use treegrid::topology::{bridge_block_decomposition, Partition};

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub buses: (usize, usize),
    pub areas: (usize, usize),
    /// Limit = `factor · |f0| + margin`.
    pub limit_factor: f64,
    pub limit_margin: f64,
    /// Generator deviation range as fractions of p0.
    pub gen_down: (f64, f64),
    pub gen_up: (f64, f64),
    /// Probability that a load bus gets a small controllable range.
    pub flexible_load: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            buses: (10, 40),
            areas: (2, 5),
            limit_factor: 3.0,
            limit_margin: 1.0,
            gen_down: (0.5, 1.0),
            gen_up: (0.3, 0.8),
            flexible_load: 0.3,
        }
    }
}

pub struct TreeNet {
    pub net: Network,
    pub partition: Partition,
    /// Area label per bus index as generated.
    pub labels: Vec<usize>,
    /// Indices of the tie lines (the bridges).
    pub ties: Vec<usize>,
}

/// Areas are rings with random chords; areas are joined in a random tree by
/// one tie line each, so the areas are exactly the bridge blocks.
pub fn tree_network(rng: &mut ChaCha8Rng, opt: &GenOptions) -> TreeNet {
    let k = rng.gen_range(opt.areas.0..=opt.areas.1);
    let n = rng.gen_range(opt.buses.0.max(3 * k)..=opt.buses.1.max(3 * k));
    let mut sizes = vec![3; k];
    for _ in 0..n - 3 * k {
        sizes[rng.gen_range(0..k)] += 1;
    }
    let mut labels = Vec::with_capacity(n);
    let mut first = Vec::with_capacity(k);
    for (a, &s) in sizes.iter().enumerate() {
        first.push(labels.len());
        labels.extend(std::iter::repeat(a).take(s));
    }

    let mut edges: Vec<(usize, usize)> = Vec::new();
    for a in 0..k {
        let (f, s) = (first[a], sizes[a]);
        for i in 0..s {
            edges.push((f + i, f + (i + 1) % s));
        }
        for _ in 0..rng.gen_range(0..=s / 2) {
            let (u, v) = (f + rng.gen_range(0..s), f + rng.gen_range(0..s));
            if u != v && !edges.contains(&(u, v)) && !edges.contains(&(v, u)) {
                edges.push((u, v));
            }
        }
    }
    let mut ties = Vec::new();
    for a in 1..k {
        let p = rng.gen_range(0..a);
        let u = first[a] + rng.gen_range(0..sizes[a]);
        let v = first[p] + rng.gen_range(0..sizes[p]);
        ties.push(edges.len());
        edges.push((u, v));
    }

    let mut kinds = vec![BusKind::Passive; n];
    for j in 0..n {
        kinds[j] = if first.contains(&j) {
            BusKind::Generator
        } else {
            match rng.gen_range(0..100) {
                0..=39 => BusKind::Load,
                40..=64 => BusKind::Generator,
                _ => BusKind::Passive,
            }
        };
    }
    let mut p0 = vec![0.0; n];
    let mut load = 0.0;
    for j in 0..n {
        if kinds[j] == BusKind::Load {
            p0[j] = -rng.gen_range(0.2..1.0);
            load -= p0[j];
        }
    }
    if load == 0.0 {
        // guarantee some demand
        let j = (0..n).find(|&j| kinds[j] == BusKind::Passive).unwrap_or(n - 1);
        kinds[j] = BusKind::Load;
        p0[j] = -0.5;
        load = 0.5;
    }
    let weights: Vec<f64> =
        (0..n).map(|j| if kinds[j] == BusKind::Generator { rng.gen_range(0.5..1.5) } else { 0.0 }).collect();
    let wsum: f64 = weights.iter().sum();
    for j in 0..n {
        if kinds[j] == BusKind::Generator {
            p0[j] = load * weights[j] / wsum;
        }
    }

    let buses: Vec<BusRecord> = (0..n)
        .map(|j| {
            let b = BusRecord::new(j as u32 + 1, kinds[j])
                .with_injection(p0[j])
                .with_cost(rng.gen_range(0.5..2.0))
                .with_area(labels[j] as u32 + 1);
            match kinds[j] {
                BusKind::Generator => b
                    .with_bounds(
                        -p0[j] * rng.gen_range(opt.gen_down.0..=opt.gen_down.1),
                        p0[j] * rng.gen_range(opt.gen_up.0..=opt.gen_up.1),
                    )
                    .with_damping(rng.gen_range(0.5..1.5)),
                BusKind::Load if rng.gen_bool(opt.flexible_load) => {
                    let w = -p0[j] * 0.2;
                    b.with_bounds(-w, w)
                }
                _ => b,
            }
        })
        .collect();
    let lines: Vec<LineRecord> = edges
        .iter()
        .enumerate()
        .map(|(i, &(u, v))| {
            LineRecord::new(i as u32 + 1, u as u32 + 1, v as u32 + 1, rng.gen_range(1.0..10.0), f64::INFINITY)
        })
        .collect();
    let free = build_with_dc_flows(buses, lines).expect("generated network");
    let net = free
        .rebuild(|_| {}, |l| l.limit = opt.limit_factor * l.base_flow.abs() + opt.limit_margin)
        .expect("limits");
    let partition = Partition::from_labels(&net, &labels).expect("labels");
    assert!(
        partition.same_areas(&bridge_block_decomposition(&net)),
        "generated areas must be the bridge blocks"
    );
    TreeNet { net, partition, labels, ties }
}

/// Post-contingency problem for outage of the given line indices.
pub fn outage_problem(t: &TreeNet, lines: &[usize], controller: Controller) -> EquilibriumProblem {
    let ids: Vec<_> = lines.iter().map(|&k| t.net.line(k).id).collect();
    let (r, post) = treegrid::cascade::line_outage_disturbance(&t.net, &ids).expect("outage");
    let r = r.to_dense(&t.net);
    EquilibriumProblem::new(post, t.partition.clone(), r, controller).expect("problem")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

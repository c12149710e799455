//! Independent reference computations: closed forms and a brute-force
//! staged cascade, sharing no solver code with the crate.
#![allow(dead_code)]

use treegrid::netmodel::Network;

/// Island label per bus over in-service lines (union-find).
pub fn islands(net: &Network, out: &[bool]) -> Vec<usize> {
    let n = net.n();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for k in 0..net.m() {
        if !net.line(k).in_service || out[k] {
            continue;
        }
        let (a, b) = net.ends(k);
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    (0..n).map(|j| find(&mut parent, j)).collect()
}

/// Unconstrained droop response: per island `ω = Σr / Σ(Z + D)` and
/// `d_j = −Z_j ω`, with `Z_j = 1/cost_j` on controllable buses.
pub fn droop_closed_form(net: &Network, r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = net.n();
    let isl = islands(net, &vec![false; net.m()]);
    let z: Vec<f64> = net
        .buses()
        .iter()
        .map(|b| if b.d_upper > b.d_lower { 1.0 / b.cost } else { 0.0 })
        .collect();
    let mut omega = vec![0.0; n];
    for j in 0..n {
        let members = (0..n).filter(|&i| isl[i] == isl[j]);
        let (sr, sz): (f64, f64) =
            members.fold((0.0, 0.0), |(a, b), i| (a + r[i], b + z[i] + net.bus(i).damping));
        omega[j] = if sz > 0.0 { sr / sz } else { 0.0 };
    }
    let d = (0..n).map(|j| -z[j] * omega[j]).collect();
    (d, omega)
}

/// One stage of the reference cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct RefStage {
    /// Removed line ids, sorted.
    pub outages: Vec<u32>,
    pub blackout: Vec<u32>,
    pub tripped: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefTrace {
    pub stages: Vec<RefStage>,
    /// Ended because balancing areas could not be met.
    pub unservable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RefController {
    Agc,
    Droop,
}

/// Staged cascade by brute force: AGC optimum by enumerating active sets,
/// droop by bisection on ω, flows from the Laplacian pseudo-inverse of
/// the injections `p0 + d − Dω`.
pub fn reference_cascade(net: &Network, initial: &[u32], ctrl: RefController) -> RefTrace {
    let (n, m) = (net.n(), net.m());
    let idx_of = |id: u32| (0..m).find(|&k| net.line(k).id.0 == id).expect("line id");
    let mut out = vec![false; m];
    for &id in initial {
        out[idx_of(id)] = true;
    }
    let p0: Vec<f64> = net.buses().iter().map(|b| b.injection).collect();
    let mut dark = vec![false; n];
    let mut stages = Vec::new();
    for _ in 0..=m {
        // disturbance of every removed line, from the original base flows
        let mut r = vec![0.0; n];
        for k in (0..m).filter(|&k| out[k] && net.line(k).in_service) {
            let (a, b) = net.ends(k);
            r[a] += net.line(k).base_flow;
            r[b] -= net.line(k).base_flow;
        }
        let isl = islands(net, &out);
        let mut lo: Vec<f64> = net.buses().iter().map(|b| b.d_lower).collect();
        let mut hi: Vec<f64> = net.buses().iter().map(|b| b.d_upper).collect();

        let mut blackout = Vec::new();
        for root in unique(&isl) {
            let members: Vec<usize> = (0..n).filter(|&j| isl[j] == root).collect();
            if members.iter().all(|&j| dark[j]) {
                continue;
            }
            let damped = members.iter().any(|&j| net.bus(j).damping > 0.0);
            let need: f64 = -members.iter().map(|&j| r[j]).sum::<f64>();
            let (l, h): (f64, f64) = members.iter().fold((0.0, 0.0), |(a, b), &j| (a + lo[j], b + hi[j]));
            let tol = 1e-9 * members.iter().fold(1.0f64, |a, &j| a.max(r[j].abs()));
            let ok = (ctrl == RefController::Droop && damped) || (need >= l - tol && need <= h + tol);
            if !ok {
                for &j in &members {
                    if !dark[j] {
                        dark[j] = true;
                        blackout.push(net.bus(j).id.0);
                    }
                }
            }
        }
        for j in (0..n).filter(|&j| dark[j]) {
            lo[j] = -p0[j];
            hi[j] = -p0[j];
        }

        let outages: Vec<u32> = {
            let mut v: Vec<u32> = (0..m).filter(|&k| out[k]).map(|k| net.line(k).id.0).collect();
            v.sort_unstable();
            v
        };
        let solved = match ctrl {
            RefController::Agc => agc_by_enumeration(net, &isl, &r, &lo, &hi).map(|d| (d, vec![0.0; n])),
            RefController::Droop => Some(droop_by_bisection(net, &isl, &r, &lo, &hi)),
        };
        let Some((d, omega)) = solved else {
            blackout.sort_unstable();
            stages.push(RefStage { outages, blackout, tripped: Vec::new() });
            return RefTrace { stages, unservable: true };
        };
        let p: Vec<f64> = (0..n).map(|j| p0[j] + d[j] - net.bus(j).damping * omega[j]).collect();
        let flows = pinv_flows(net, &out, &p);
        let mut tripped: Vec<u32> = (0..m)
            .filter(|&k| net.line(k).in_service && !out[k] && flows[k].abs() > net.line(k).limit + 1e-8)
            .map(|k| net.line(k).id.0)
            .collect();
        tripped.sort_unstable();
        blackout.sort_unstable();
        let done = tripped.is_empty();
        for &id in &tripped {
            out[idx_of(id)] = true;
        }
        stages.push(RefStage { outages, blackout, tripped });
        if done {
            return RefTrace { stages, unservable: false };
        }
    }
    RefTrace { stages, unservable: false }
}

fn unique(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// `min Σ c d²/2` subject to zero net `r + d` per island and per area, over
/// every assignment of each variable to lower bound, upper bound or free.
fn agc_by_enumeration(net: &Network, isl: &[usize], r: &[f64], lo: &[f64], hi: &[f64]) -> Option<Vec<f64>> {
    let n = net.n();
    let cost: Vec<f64> = net.buses().iter().map(|b| b.cost).collect();
    let mut rows: Vec<Vec<bool>> = unique(isl).into_iter().map(|c| (0..n).map(|j| isl[j] == c).collect()).collect();
    let areas: Vec<u32> = net.buses().iter().map(|b| b.area.expect("area")).collect();
    let mut area_ids = areas.clone();
    area_ids.sort_unstable();
    area_ids.dedup();
    rows.extend(area_ids.iter().map(|a| (0..n).map(|j| areas[j] == *a).collect()));
    let rhs: Vec<f64> = rows.iter().map(|row| -(0..n).filter(|&j| row[j]).map(|j| r[j]).sum::<f64>()).collect();

    let vars: Vec<usize> = (0..n).filter(|&j| hi[j] > lo[j]).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(vars.len() as u32) {
        let mut d: Vec<f64> = (0..n).map(|j| lo[j]).collect();
        let mut free = Vec::new();
        let mut c = code;
        for &j in &vars {
            match c % 3 {
                0 => d[j] = lo[j],
                1 => d[j] = hi[j],
                _ => free.push(j),
            }
            c /= 3;
        }
        // residual rhs after fixed values
        let b: Vec<f64> = rows
            .iter()
            .zip(&rhs)
            .map(|(row, &h)| h - (0..n).filter(|&j| row[j] && !free.contains(&j)).map(|j| d[j]).sum::<f64>())
            .collect();
        if !free.is_empty() {
            // d_F = C⁻¹ Aᵀ μ with (A C⁻¹ Aᵀ) μ = b
            let a = nalgebra::DMatrix::from_fn(rows.len(), free.len(), |i, k| if rows[i][free[k]] { 1.0 } else { 0.0 });
            let cinv = nalgebra::DMatrix::from_fn(free.len(), free.len(), |i, k| if i == k { 1.0 / cost[free[i]] } else { 0.0 });
            let g = &a * &cinv * a.transpose();
            let mu = g.pseudo_inverse(1e-12).expect("svd") * nalgebra::DVector::from_vec(b.clone());
            let x = &cinv * a.transpose() * mu;
            for (k, &j) in free.iter().enumerate() {
                d[j] = x[k];
            }
        }
        let consistent = rows.iter().zip(&rhs).all(|(row, &h)| {
            ((0..n).filter(|&j| row[j]).map(|j| d[j]).sum::<f64>() - h).abs() <= 1e-9
        });
        let inside = free.iter().all(|&j| d[j] >= lo[j] - 1e-12 && d[j] <= hi[j] + 1e-12);
        if consistent && inside {
            let obj: f64 = (0..n).map(|j| 0.5 * cost[j] * d[j] * d[j]).sum();
            if best.as_ref().map_or(true, |(o, _)| obj < *o - 1e-15) {
                best = Some((obj, d));
            }
        }
    }
    best.map(|(_, d)| d)
}

/// Per island, the ω solving `Σr + Σ clip(−Z_j ω, d̲_j, d̄_j) − ΣD ω = 0`.
fn droop_by_bisection(net: &Network, isl: &[usize], r: &[f64], lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = net.n();
    let z: Vec<f64> = (0..n).map(|j| if hi[j] > lo[j] { 1.0 / net.bus(j).cost } else { 0.0 }).collect();
    let mut d = vec![0.0; n];
    let mut omega = vec![0.0; n];
    for root in unique(isl) {
        let members: Vec<usize> = (0..n).filter(|&j| isl[j] == root).collect();
        let resp = |w: f64, j: usize| if z[j] > 0.0 { (-z[j] * w).clamp(lo[j], hi[j]) } else { lo[j] };
        let g = |w: f64| -> f64 {
            members.iter().map(|&j| r[j] + resp(w, j) - net.bus(j).damping * w).sum()
        };
        let span: f64 = members.iter().map(|&j| r[j].abs() + lo[j].abs() + hi[j].abs()).sum::<f64>();
        let damp: f64 = members.iter().map(|&j| net.bus(j).damping).sum();
        let reach = members
            .iter()
            .filter(|&&j| z[j] > 0.0)
            .map(|&j| lo[j].abs().max(hi[j].abs()) / z[j])
            .fold(0.0, f64::max);
        let w_max = if damp > 0.0 { span / damp } else { 0.0 } + reach + 1.0;
        let (mut a, mut b) = (-w_max, w_max);
        for _ in 0..300 {
            let mid = 0.5 * (a + b);
            if g(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        let w = 0.5 * (a + b);
        for &j in &members {
            d[j] = resp(w, j);
            omega[j] = w;
        }
    }
    (d, omega)
}

/// Line flows of balanced injections over the lines not removed, from the
/// Laplacian pseudo-inverse.
pub fn pinv_flows(net: &Network, out: &[bool], p: &[f64]) -> Vec<f64> {
    let n = net.n();
    let live = |k: usize| net.line(k).in_service && !out[k];
    let mut lap = nalgebra::DMatrix::<f64>::zeros(n, n);
    for k in (0..net.m()).filter(|&k| live(k)) {
        let (a, b) = net.ends(k);
        let s = net.line(k).susceptance;
        lap[(a, a)] += s;
        lap[(b, b)] += s;
        lap[(a, b)] -= s;
        lap[(b, a)] -= s;
    }
    let theta = lap.pseudo_inverse(1e-10).expect("svd") * nalgebra::DVector::from_column_slice(p);
    (0..net.m())
        .map(|k| {
            if live(k) {
                let (a, b) = net.ends(k);
                net.line(k).susceptance * (theta[a] - theta[b])
            } else {
                0.0
            }
        })
        .collect()
}

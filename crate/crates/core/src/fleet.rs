//! Semi-distributed multi-UAV coordination: a base node owning map fusion,
//! depth-oracle brokerage and one-shot workload assignment, agents running the
//! single-UAV planning loop on their assigned cells, and a deterministic
//! message bus between them. A RACER-style pairwise-reassignment mode serves
//! as the comparison baseline.

use crate::error::Result;
use crate::frontier::{
    connection_cost, EvaluationMode, Fis, FrontierConfig, MapView, SamplingMode, Viewpoint,
    ViewpointPair,
};
use crate::grid::astar_cells;
use crate::mapping::{
    compute_esdf, integrate_depth_image, Esdf, HGrid, HgridStatus, MapDelta, OccupancyParams,
    VoxelMap,
};
use crate::math::{derive_seed, digest_hex, Vec3};
use crate::metrics::{odometry_quality, path_stats, AgentMetrics};
use crate::planner::{self, plan_global, refine_local, LocalPlan};
use crate::trajectory::{
    controller_step, fit_spline, lattice_boundary_velocities, optimize_joint, snap_to_lattice,
    yaw_astar, PathPoint, SplineTrajectory, TrajectoryConfig, TrajectoryMode,
};
use crate::world::{
    motion_in_fov, synth_pair_depth_grid, CameraModel, Environment, KinematicLimits,
    PairDepthParams, Pose, TruthGrid, UavState, VelocityCommand, ViewRecord, VioSim,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

pub const BASE_ID: u32 = u32::MAX;
/// Reserved cluster-id range for the bootstrap capture pairs.
pub const BOOTSTRAP_CLUSTER_BASE: u64 = 1 << 60;

// ---------------------------------------------------------------------------
// Workload assignment
// ---------------------------------------------------------------------------

/// Base-node mapping of hgrid cells to agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub epoch: u64,
    /// Agent id -> ordered cell tour.
    pub per_agent: Vec<(u32, Vec<usize>)>,
    pub per_agent_cost: Vec<(u32, f64)>,
    pub done: bool,
}

impl Assignment {
    pub fn cells_of(&self, agent: u32) -> &[usize] {
        self.per_agent
            .iter()
            .find(|(a, _)| *a == agent)
            .map(|(_, c)| c.as_slice())
            .unwrap_or(&[])
    }

    /// Disjointness and coverage of the assigned cell lists.
    pub fn validate(&self, all_cells: &[usize]) -> bool {
        let mut seen: Vec<usize> = self.per_agent.iter().flat_map(|(_, c)| c.iter().copied()).collect();
        seen.sort_unstable();
        let mut expect = all_cells.to_vec();
        expect.sort_unstable();
        seen.dedup();
        seen == expect
            && self.per_agent.iter().flat_map(|(_, c)| c).count() == all_cells.len()
    }
}

/// Memoized allocation costs between points (symmetric).
#[derive(Default)]
pub struct CostCache {
    inner: std::collections::HashMap<(u64, u64), f64>,
}

impl CostCache {
    fn key(p: &Vec3) -> u64 {
        let mut h = crate::math::Fnv1a::new();
        h.write_f64(p.x);
        h.write_f64(p.y);
        h.write_f64(p.z);
        h.finish()
    }

    fn cost(&mut self, map: &VoxelMap, from: &Vec3, to: &Vec3, v_max: f64) -> f64 {
        let (ka, kb) = (Self::key(from), Self::key(to));
        let key = (ka.min(kb), ka.max(kb));
        if let Some(&c) = self.inner.get(&key) {
            return c;
        }
        let c = alloc_cost(map, from, to, v_max);
        self.inner.insert(key, c);
        c
    }
}

/// Optimistic travel-time lower bound between two points for allocation: path
/// through non-occupied (free or unknown) cells.
fn alloc_cost(map: &VoxelMap, from: &Vec3, to: &Vec3, v_max: f64) -> f64 {
    let mut clear = true;
    map.geom.traverse(from, to, |c, _| {
        if map.state_at(c) == crate::mapping::CellState::Occupied {
            clear = false;
            return false;
        }
        true
    });
    if clear {
        return (to - from).norm() / v_max;
    }
    match astar_cells(
        &map.geom,
        |c| map.state_at(c) != crate::mapping::CellState::Occupied,
        from,
        to,
    ) {
        Some(path) => {
            let mut len = 0.0;
            for w in path.windows(2) {
                len += (map.geom.center(w[1]) - map.geom.center(w[0])).norm();
            }
            len / v_max
        }
        None => f64::INFINITY,
    }
}

/// Tour cost of one agent over its cells (nearest start, improved open tour).
fn tour_cost_cached(
    agent_pos: &Vec3,
    cells: &[usize],
    centers: &BTreeMap<usize, Vec3>,
    map: &VoxelMap,
    v_max: f64,
    cache: &mut CostCache,
) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    let pts: Vec<Vec3> = cells.iter().map(|c| centers[c]).collect();
    let n = pts.len() + 1;
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..pts.len() {
        m[0][i + 1] = cache.cost(map, agent_pos, &pts[i], v_max);
        m[i + 1][0] = m[0][i + 1];
        for j in (i + 1)..pts.len() {
            let c = cache.cost(map, &pts[i], &pts[j], v_max);
            m[i + 1][j + 1] = c;
            m[j + 1][i + 1] = c;
        }
    }
    plan_global(&m).map(|p| p.cost).unwrap_or(f64::INFINITY)
}

#[cfg(test)]
fn tour_cost(
    agent_pos: &Vec3,
    cells: &[usize],
    centers: &BTreeMap<usize, Vec3>,
    map: &VoxelMap,
    v_max: f64,
) -> f64 {
    tour_cost_cached(agent_pos, cells, centers, map, v_max, &mut CostCache::default())
}

/// Exhaustive minimax partition for tiny instances.
#[allow(clippy::too_many_arguments)]
fn exact_partition(
    cells: &[usize],
    centers: &BTreeMap<usize, Vec3>,
    agents: &[(u32, Vec3)],
    map: &VoxelMap,
    v_max: f64,
    epoch: u64,
    capacity: usize,
    cache: &mut CostCache,
) -> Option<Assignment> {
    let k = agents.len();
    let n = cells.len();
    let total = (k as u64).checked_pow(n as u32)?;
    let mut best: Option<(f64, f64, Vec<Vec<usize>>)> = None;
    for code in 0..total {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); k];
        let mut c = code;
        for cell in cells {
            lists[(c % k as u64) as usize].push(*cell);
            c /= k as u64;
        }
        if lists.iter().any(|l| l.len() > capacity) {
            continue;
        }
        let costs: Vec<f64> = agents
            .iter()
            .enumerate()
            .map(|(ai, (_, pos))| tour_cost_cached(pos, &lists[ai], centers, map, v_max, cache))
            .collect();
        let mx = costs.iter().copied().fold(0.0f64, f64::max);
        let sm = costs.iter().sum::<f64>();
        let better = match &best {
            None => true,
            Some((bm, bs, _)) => mx < bm - 1e-12 || (mx < bm + 1e-12 && sm < bs - 1e-12),
        };
        if better {
            best = Some((mx, sm, lists));
        }
    }
    let (_, _, mut lists) = best?;
    // Order the lists as improved tours.
    let mut costs = Vec::with_capacity(k);
    for (ai, (_, pos)) in agents.iter().enumerate() {
        if lists[ai].len() > 1 {
            let pts: Vec<Vec3> = lists[ai].iter().map(|c| centers[c]).collect();
            let nn = pts.len() + 1;
            let mut m = vec![vec![0.0; nn]; nn];
            for i in 0..pts.len() {
                m[0][i + 1] = cache.cost(map, pos, &pts[i], v_max);
                m[i + 1][0] = m[0][i + 1];
                for j in (i + 1)..pts.len() {
                    let c = cache.cost(map, &pts[i], &pts[j], v_max);
                    m[i + 1][j + 1] = c;
                    m[j + 1][i + 1] = c;
                }
            }
            if let Ok(tour) = plan_global(&m) {
                let reordered: Vec<usize> = tour.order.iter().map(|&t| lists[ai][t - 1]).collect();
                if reordered.len() == lists[ai].len() {
                    lists[ai] = reordered;
                }
            }
        }
        costs.push(tour_cost_cached(pos, &lists[ai], centers, map, v_max, cache));
    }
    Some(Assignment {
        epoch,
        per_agent: agents.iter().map(|(id, _)| *id).zip(lists).collect(),
        per_agent_cost: agents.iter().map(|(id, _)| *id).zip(costs).collect(),
        done: false,
    })
}

/// One-shot workload assignment for all agents: nearest-cell seeding, greedy
/// marginal-cost insertion under a capacity cap, per-agent tour improvement,
/// then one sweep of relocations and swaps that reduce the maximum per-agent
/// cost.
pub fn assign_workload(
    cells: &[usize],
    centers: &BTreeMap<usize, Vec3>,
    agents: &[(u32, Vec3)],
    map: &VoxelMap,
    v_max: f64,
    epoch: u64,
    cap_slack: usize,
) -> Assignment {
    let k = agents.len().max(1);
    let capacity = cells.len().div_ceil(k) + cap_slack;
    let mut cache = CostCache::default();

    // Tiny instances: enumerate every capacity-feasible partition and pick the
    // minimax-optimal one outright (ties: lower total, then lexicographic).
    if k >= 2 && (k as f64).powi(cells.len() as i32) <= 4096.0 {
        if let Some(a) =
            exact_partition(cells, centers, agents, map, v_max, epoch, capacity, &mut cache)
        {
            return a;
        }
    }

    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); agents.len()];
    let mut unassigned: Vec<usize> = cells.to_vec();
    unassigned.sort_unstable();

    // Seed each agent with its nearest unassigned cell.
    for (ai, (_, pos)) in agents.iter().enumerate() {
        if unassigned.is_empty() {
            break;
        }
        let (best, _) = unassigned
            .iter()
            .enumerate()
            .map(|(k, c)| (k, cache.cost(map, pos, &centers[c], v_max)))
            .min_by(|(ka, a), (kb, b)| a.partial_cmp(b).unwrap().then(ka.cmp(kb)))
            .unwrap();
        lists[ai].push(unassigned.remove(best));
    }

    // Greedy: cheapest marginal insertion across all (agent, cell) pairs.
    while !unassigned.is_empty() {
        let mut best: Option<(f64, usize, usize, usize)> = None; // (delta, agent, cell idx, insert pos)
        for (ai, (_, pos)) in agents.iter().enumerate() {
            if lists[ai].len() >= capacity {
                continue;
            }
            let base_anchor = *pos;
            for (ci, cell) in unassigned.iter().enumerate() {
                let target = centers[cell];
                // Cheapest insertion into the ordered list.
                for ins in 0..=lists[ai].len() {
                    let before = if ins == 0 { base_anchor } else { centers[&lists[ai][ins - 1]] };
                    let after = lists[ai].get(ins).map(|c| centers[c]);
                    let added = cache.cost(map, &before, &target, v_max)
                        + after.map(|a| cache.cost(map, &target, &a, v_max)).unwrap_or(0.0)
                        - after.map(|a| cache.cost(map, &before, &a, v_max)).unwrap_or(0.0);
                    let candidate = (added, ai, ci, ins);
                    if best
                        .map(|(d, a, c, i)| {
                            added < d - 1e-12
                                || (added < d + 1e-12 && (ai, ci, ins) < (a, c, i))
                        })
                        .unwrap_or(true)
                    {
                        best = Some(candidate);
                    }
                }
            }
        }
        match best {
            Some((_, ai, ci, ins)) => {
                let cell = unassigned.remove(ci);
                lists[ai].insert(ins, cell);
            }
            None => break, // all at capacity; shouldn't happen with the slack
        }
    }

    // Improve each tour and compute costs.
    let mut costs: Vec<f64> = agents
        .iter()
        .enumerate()
        .map(|(ai, (_, pos))| tour_cost_cached(pos, &lists[ai], centers, map, v_max, &mut cache))
        .collect();

    // Single-cell relocations and pairwise swaps, iterated to a fixpoint.
    // A move is accepted when it lowers the maximum per-agent cost, or keeps
    // the maximum while lowering the sum (plateau escape).
    let max_cost = |costs: &[f64]| costs.iter().copied().fold(0.0f64, f64::max);
    let sum_cost = |costs: &[f64]| costs.iter().sum::<f64>();
    let better = |trial: &[f64], current: &[f64]| -> bool {
        let (tm, cm) = (max_cost(trial), max_cost(current));
        tm < cm - 1e-9 || (tm < cm + 1e-9 && sum_cost(trial) < sum_cost(current) - 1e-9)
    };
    for _round in 0..40 {
        let mut changed = false;
        for ai in 0..agents.len() {
            for aj in 0..agents.len() {
                if ai == aj {
                    continue;
                }
                // Relocations ai -> aj.
                let mut ci = 0;
                while ci < lists[ai].len() {
                    if lists[aj].len() >= capacity {
                        break;
                    }
                    let cell = lists[ai][ci];
                    let mut li = lists[ai].clone();
                    li.remove(ci);
                    let mut lj = lists[aj].clone();
                    lj.push(cell);
                    let new_i = tour_cost_cached(&agents[ai].1, &li, centers, map, v_max, &mut cache);
                    let new_j = tour_cost_cached(&agents[aj].1, &lj, centers, map, v_max, &mut cache);
                    let mut trial = costs.clone();
                    trial[ai] = new_i;
                    trial[aj] = new_j;
                    if better(&trial, &costs) {
                        lists[ai] = li;
                        lists[aj] = lj;
                        costs = trial;
                        changed = true;
                    } else {
                        ci += 1;
                    }
                }
                // Pairwise swaps.
                let mut improved = true;
                while improved {
                    improved = false;
                    'swap: for ci in 0..lists[ai].len() {
                        for cj in 0..lists[aj].len() {
                            let mut li = lists[ai].clone();
                            let mut lj = lists[aj].clone();
                            std::mem::swap(&mut li[ci], &mut lj[cj]);
                            let new_i = tour_cost_cached(&agents[ai].1, &li, centers, map, v_max, &mut cache);
                            let new_j = tour_cost_cached(&agents[aj].1, &lj, centers, map, v_max, &mut cache);
                            let mut trial = costs.clone();
                            trial[ai] = new_i;
                            trial[aj] = new_j;
                            if better(&trial, &costs) {
                                lists[ai] = li;
                                lists[aj] = lj;
                                costs = trial;
                                improved = true;
                                changed = true;
                                break 'swap;
                            }
                        }
                    }
                }
            }
        }
        // 2-for-1 exchanges shedding load from the most expensive agent.
        if agents.len() >= 2 {
            let am = costs
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
                .map(|(i, _)| i)
                .unwrap();
            'exchange: for aj in 0..agents.len() {
                if aj == am || lists[am].len() < 2 {
                    continue;
                }
                for ci1 in 0..lists[am].len() {
                    for ci2 in (ci1 + 1)..lists[am].len() {
                        for cj in 0..lists[aj].len() {
                            let mut lm = lists[am].clone();
                            let mut lo = lists[aj].clone();
                            let b2 = lm.remove(ci2);
                            let b1 = lm.remove(ci1);
                            let give = lo.remove(cj);
                            lm.push(give);
                            lo.push(b1);
                            lo.push(b2);
                            if lo.len() > capacity {
                                continue;
                            }
                            let new_m = tour_cost_cached(&agents[am].1, &lm, centers, map, v_max, &mut cache);
                            let new_o = tour_cost_cached(&agents[aj].1, &lo, centers, map, v_max, &mut cache);
                            let mut trial = costs.clone();
                            trial[am] = new_m;
                            trial[aj] = new_o;
                            if better(&trial, &costs) {
                                lists[am] = lm;
                                lists[aj] = lo;
                                costs = trial;
                                changed = true;
                                break 'exchange;
                            }
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Order each list as its improved tour for the coverage path.
    for (ai, (_, pos)) in agents.iter().enumerate() {
        if lists[ai].len() > 1 {
            let pts: Vec<Vec3> = lists[ai].iter().map(|c| centers[c]).collect();
            let n = pts.len() + 1;
            let mut m = vec![vec![0.0; n]; n];
            for i in 0..pts.len() {
                m[0][i + 1] = cache.cost(map, pos, &pts[i], v_max);
                m[i + 1][0] = m[0][i + 1];
                for j in (i + 1)..pts.len() {
                    let c = cache.cost(map, &pts[i], &pts[j], v_max);
                    m[i + 1][j + 1] = c;
                    m[j + 1][i + 1] = c;
                }
            }
            if let Ok(tour) = plan_global(&m) {
                let reordered: Vec<usize> = tour.order.iter().map(|&t| lists[ai][t - 1]).collect();
                if reordered.len() == lists[ai].len() {
                    lists[ai] = reordered;
                }
            }
        }
    }

    Assignment {
        epoch,
        per_agent: agents.iter().map(|(id, _)| *id).zip(lists).collect(),
        per_agent_cost: agents
            .iter()
            .map(|(id, _)| *id)
            .zip(costs.iter().copied())
            .map(|(id, c)| (id, c))
            .collect(),
        done: false,
    }
}

/// RACER-style pairwise improvement: exhaustive single-cell moves and swaps
/// between two agents, accepted while the sum of the two coverage costs
/// decreases, under the capacity cap.
pub fn pairwise_reassign(
    pos_i: &Vec3,
    pos_j: &Vec3,
    cells_i: &[usize],
    cells_j: &[usize],
    centers: &BTreeMap<usize, Vec3>,
    map: &VoxelMap,
    v_max: f64,
    capacity: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut li = cells_i.to_vec();
    let mut lj = cells_j.to_vec();
    let mut cache = CostCache::default();

    // Forced rebalancing: the capacity constraint is hard, so an overloaded
    // list sheds its cheapest-to-move cells first.
    loop {
        let (src_over, _) = (li.len() > capacity, lj.len() > capacity);
        if li.len() <= capacity && lj.len() <= capacity {
            break;
        }
        let (src, dst, dst_pos) = if src_over {
            (&mut li, &mut lj, pos_j)
        } else {
            (&mut lj, &mut li, pos_i)
        };
        let (k, _) = src
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mut trial = dst.clone();
                trial.push(*c);
                (k, tour_cost_cached(dst_pos, &trial, centers, map, v_max, &mut cache))
            })
            .min_by(|(ka, a), (kb, b)| a.partial_cmp(b).unwrap().then(ka.cmp(kb)))
            .expect("overloaded list is nonempty");
        let cell = src.remove(k);
        dst.push(cell);
    }

    let mut cost_i = tour_cost_cached(pos_i, &li, centers, map, v_max, &mut cache);
    let mut cost_j = tour_cost_cached(pos_j, &lj, centers, map, v_max, &mut cache);
    loop {
        let mut best: Option<(f64, Vec<usize>, Vec<usize>, f64, f64)> = None;
        let mut consider = |li2: Vec<usize>, lj2: Vec<usize>, cache: &mut CostCache| {
            if li2.len() > capacity || lj2.len() > capacity {
                return;
            }
            let ci = tour_cost_cached(pos_i, &li2, centers, map, v_max, cache);
            let cj = tour_cost_cached(pos_j, &lj2, centers, map, v_max, cache);
            let total = ci + cj;
            if total < cost_i + cost_j - 1e-9
                && best.as_ref().map(|(t, ..)| total < *t - 1e-12).unwrap_or(true)
            {
                best = Some((total, li2, lj2, ci, cj));
            }
        };
        for k in 0..li.len() {
            let mut a = li.clone();
            let cell = a.remove(k);
            let mut b = lj.clone();
            b.push(cell);
            consider(a, b, &mut cache);
        }
        for k in 0..lj.len() {
            let mut b = lj.clone();
            let cell = b.remove(k);
            let mut a = li.clone();
            a.push(cell);
            consider(a, b, &mut cache);
        }
        for ki in 0..li.len() {
            for kj in 0..lj.len() {
                let mut a = li.clone();
                let mut b = lj.clone();
                std::mem::swap(&mut a[ki], &mut b[kj]);
                consider(a, b, &mut cache);
            }
        }
        match best {
            Some((_, a, b, ci, cj)) => {
                li = a;
                lj = b;
                cost_i = ci;
                cost_j = cj;
            }
            None => break,
        }
    }
    (li, lj)
}

// ---------------------------------------------------------------------------
// Protocol
// ---------------------------------------------------------------------------

/// Compressed cluster description shipped from the frontier owner to planners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: u64,
    pub average: Vec3,
    /// Hgrid cell owning the cluster's unknown mass.
    pub task_cell: usize,
    /// Candidate pairs, best first.
    pub pairs: Vec<ViewpointPair>,
    pub best_single: Option<Viewpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAdvert {
    pub agent: u32,
    pub idle: bool,
    /// (time, position) samples of the remaining plan, 1 Hz.
    pub samples: Vec<(f64, Vec3)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    View(ViewRecord),
    Map(MapDelta),
    Frontiers(Vec<ClusterSummary>),
    Assign(Assignment),
    Advert(TrajectoryAdvert),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::View(_) => "ViewRecord",
            Payload::Map(_) => "MapDelta",
            Payload::Frontiers(_) => "FrontierSummary",
            Payload::Assign(_) => "Assignment",
            Payload::Advert(_) => "TrajectoryAdvert",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Message {
    pub sender: u32,
    pub recipient: Option<u32>,
    pub payload: Payload,
    pub send_time: f64,
    pub deliver_time: f64,
}

/// Deterministic store-and-forward bus: constant per-link latency plus optional
/// seeded jitter, FIFO per (sender, recipient) link.
pub struct Bus {
    latency: f64,
    jitter: f64,
    rng: ChaCha8Rng,
    queue: VecDeque<Message>,
    last_deliver: BTreeMap<(u32, u32), f64>,
    pub log: String,
    agent_count: u32,
}

impl Bus {
    pub fn new(latency: f64, jitter: f64, seed: u64, agent_count: u32) -> Self {
        Self {
            latency,
            jitter,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xb5])),
            queue: VecDeque::new(),
            last_deliver: BTreeMap::new(),
            log: String::new(),
            agent_count,
        }
    }

    fn link_deliver_time(&mut self, sender: u32, recipient: u32, send_time: f64) -> f64 {
        let mut t = send_time + self.latency;
        if self.jitter > 0.0 {
            t += self.rng.random_range(0.0..self.jitter);
        }
        let key = (sender, recipient);
        let floor = self.last_deliver.get(&key).copied().unwrap_or(0.0);
        let t = t.max(floor + 1e-9);
        self.last_deliver.insert(key, t);
        t
    }

    pub fn send(&mut self, sender: u32, recipient: Option<u32>, payload: Payload, now: f64) {
        let digest = digest_hex(
            serde_json::to_string(&payload)
                .unwrap_or_default()
                .as_bytes(),
        );
        let rec_str = recipient.map(|r| r.to_string()).unwrap_or_else(|| "*".into());
        self.log.push_str(&format!(
            "{:.3} {} {} {} {}\n",
            now,
            payload.kind(),
            sender,
            rec_str,
            digest
        ));
        match recipient {
            Some(r) => {
                let deliver_time = self.link_deliver_time(sender, r, now);
                self.queue.push_back(Message { sender, recipient: Some(r), payload, send_time: now, deliver_time });
            }
            None => {
                // Broadcast fans out to every agent (and the base) except the sender.
                let mut targets: Vec<u32> = (0..self.agent_count).collect();
                targets.push(BASE_ID);
                for r in targets {
                    if r == sender {
                        continue;
                    }
                    let deliver_time = self.link_deliver_time(sender, r, now);
                    self.queue.push_back(Message {
                        sender,
                        recipient: Some(r),
                        payload: payload.clone(),
                        send_time: now,
                        deliver_time,
                    });
                }
            }
        }
    }

    /// Messages for `recipient` due at or before `now`, in delivery order.
    pub fn drain_due(&mut self, recipient: u32, now: f64) -> Vec<Message> {
        let mut due: Vec<Message> = Vec::new();
        let mut rest = VecDeque::with_capacity(self.queue.len());
        while let Some(m) = self.queue.pop_front() {
            if m.recipient == Some(recipient) && m.deliver_time <= now {
                due.push(m);
            } else {
                rest.push_back(m);
            }
        }
        self.queue = rest;
        due.sort_by(|a, b| {
            a.deliver_time
                .partial_cmp(&b.deliver_time)
                .unwrap()
                .then(a.sender.cmp(&b.sender))
        });
        due
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

// ---------------------------------------------------------------------------
// World-side capture brokerage
// ---------------------------------------------------------------------------

/// Ground-truth side of the simulation: environment, capture registry and the
/// stand-in for the external two-view depth estimator.
pub struct SimWorld {
    pub env: Environment,
    pub grid: TruthGrid,
    pub camera: CameraModel,
    pub limits: KinematicLimits,
    pub pair_params: PairDepthParams,
    pub run_seed: u64,
    captures: BTreeMap<(u32, u64), Pose>,
}

impl SimWorld {
    pub fn new(
        env: Environment,
        camera: CameraModel,
        limits: KinematicLimits,
        pair_params: PairDepthParams,
        run_seed: u64,
    ) -> Self {
        let grid = env.voxelize();
        Self { env, grid, camera, limits, pair_params, run_seed, captures: BTreeMap::new() }
    }

    pub fn record_capture(&mut self, agent: u32, timestamp: f64, true_pose: Pose) {
        self.captures.insert((agent, timestamp.to_bits()), true_pose);
    }

    /// Run the two-view depth oracle for a completed pair of view records. The
    /// true camera poses come from the capture registry (the estimator sees
    /// images, which depend on where the UAV really was); the noisy output is
    /// later integrated at the estimated pose.
    pub fn synth_pair(&self, a: &ViewRecord, b: &ViewRecord) -> Result<crate::world::DepthImage> {
        let pose_a = self
            .captures
            .get(&(a.agent_id, a.timestamp.to_bits()))
            .copied()
            .unwrap_or_else(|| a.pose());
        let pose_b = self
            .captures
            .get(&(b.agent_id, b.timestamp.to_bits()))
            .copied()
            .unwrap_or_else(|| b.pose());
        let true_a = ViewRecord {
            position: pose_a.position,
            yaw: pose_a.yaw,
            ..a.clone()
        };
        let true_b = ViewRecord {
            position: pose_b.position,
            yaw: pose_b.yaw,
            ..b.clone()
        };
        synth_pair_depth_grid(
            &true_a,
            &true_b,
            &self.camera,
            &self.env,
            &self.grid,
            &self.pair_params,
            self.run_seed,
        )
    }
}

// ---------------------------------------------------------------------------
// Shared fleet configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetMode {
    Single,
    PairwiseBaseline,
    SemiDistributed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FleetConfig {
    pub mode: FleetMode,
    pub agent_count: usize,
    pub latency: f64,
    pub latency_jitter: f64,
    /// Baseline mode: seconds between pairwise reassignment meetings.
    pub meet_interval: f64,
    pub cap_slack: usize,
    /// Mutual exclusion radius around other agents' advertised positions.
    pub exclusion_radius: f64,
    /// Simulated seconds without progress before a run is declared stalled.
    pub stall_timeout: f64,
    /// Distance between interval captures in the no-pair evaluation mode.
    pub capture_interval: f64,
    /// Replan-on-new-cluster threshold factor.
    pub replan_rho: f64,
    /// Velocity-reading resolution for the controller.
    pub velocity_resolution: f64,
    pub controller_gain: f64,
    pub tracking_gain: f64,
    /// Radius of the known-free take-off zone around each start pose.
    pub bootstrap_clear_radius: f64,
    /// Length of the scripted forward bootstrap leg.
    pub bootstrap_leg: f64,
    /// Local refinement horizon (clusters) and hgrid cell edge.
    pub refine_horizon: usize,
    pub hgrid_edge: f64,
    pub hgrid_explored_fraction: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            mode: FleetMode::SemiDistributed,
            agent_count: 1,
            latency: 0.1,
            latency_jitter: 0.0,
            meet_interval: 10.0,
            cap_slack: 1,
            exclusion_radius: 1.0,
            stall_timeout: 90.0,
            capture_interval: 0.5,
            replan_rho: 0.5,
            velocity_resolution: 0.1,
            controller_gain: 1.0,
            tracking_gain: 1.5,
            bootstrap_clear_radius: 1.4,
            bootstrap_leg: 0.55,
            refine_horizon: 3,
            hgrid_edge: 4.0,
            hgrid_explored_fraction: 0.01,
        }
    }
}

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

const CONTROL_DT: f64 = 0.02;
const REPLAN_PERIOD_TICKS: u64 = 25;
const ADVERT_PERIOD_TICKS: u64 = 50;

struct ActiveTrajectory {
    spline: SplineTrajectory,
    /// Trajectory clock, frozen while yielding.
    tau: f64,
    /// (spline time, cluster id) capture events, ascending by time.
    captures: Vec<(f64, Option<u64>)>,
    next_capture: usize,
    goal_cluster: Option<u64>,
    planned_fov_samples: usize,
}

enum AgentPhase {
    Bootstrap,
    Explore,
    Done,
}

pub struct Agent {
    pub id: u32,
    pub true_state: UavState,
    vio: VioSim,
    pub est_position: Vec3,
    prev_cmd: VelocityCommand,
    pub map: VoxelMap,
    esdf: Option<Esdf>,
    pub hgrid: HGrid,
    /// Own frontier structure (baseline mode only).
    fis: Option<Fis>,
    /// Latest cluster summaries (semi-distributed mode).
    summaries: Vec<ClusterSummary>,
    pub assignment: Vec<usize>,
    assignment_epoch: u64,
    trajectory: Option<ActiveTrajectory>,
    phase: AgentPhase,
    /// Clusters whose trajectory generation failed, retried on summary change.
    blocked_clusters: Vec<u64>,
    travel_since_capture: f64,
    adverts: BTreeMap<u32, TrajectoryAdvert>,
    // Baseline-mode local pairing state.
    pending_pair: BTreeMap<u64, ViewRecord>,
    last_interval_record: Option<ViewRecord>,
    // Metrics accumulators.
    pub true_track: Vec<Vec3>,
    pub est_track: Vec<Vec3>,
    pub yaw_track: Vec<f64>,
    pub fov_violation_samples: usize,
    pub fov_violation_events: usize,
    fov_consecutive: usize,
    pub safety_violation_samples: usize,
    pub captures_made: usize,
    pub last_motion_time: f64,
    last_opt_note: String,
    tick: u64,
}

/// Planning facilities shared by agents and, in semi mode, the base node.
struct PlanContext<'a> {
    camera: &'a CameraModel,
    limits: &'a KinematicLimits,
    traj_cfg: &'a TrajectoryConfig,
    evaluation: EvaluationMode,
    traj_mode: TrajectoryMode,
    fleet: &'a FleetConfig,
}

impl Agent {
    #[allow(clippy::too_many_arguments)]
    fn new(
        id: u32,
        start: UavState,
        map_template: &VoxelMap,
        hgrid_template: &HGrid,
        drift: crate::world::DriftModel,
        own_fis: Option<Fis>,
    ) -> Self {
        Self {
            id,
            true_state: start,
            vio: VioSim::new(drift),
            est_position: start.position,
            prev_cmd: VelocityCommand::zero(),
            map: map_template.clone(),
            esdf: None,
            hgrid: hgrid_template.clone(),
            fis: own_fis,
            summaries: Vec::new(),
            assignment: Vec::new(),
            assignment_epoch: 0,
            trajectory: None,
            phase: AgentPhase::Bootstrap,
            blocked_clusters: Vec::new(),
            travel_since_capture: 0.0,
            adverts: BTreeMap::new(),
            pending_pair: BTreeMap::new(),
            last_interval_record: None,
            true_track: Vec::new(),
            est_track: Vec::new(),
            yaw_track: Vec::new(),
            fov_violation_samples: 0,
            fov_violation_events: 0,
            fov_consecutive: 0,
            safety_violation_samples: 0,
            captures_made: 0,
            last_motion_time: 0.0,
            last_opt_note: String::new(),
            tick: 0,
        }
    }

    fn esdf(&mut self) -> &Esdf {
        let stale = self
            .esdf
            .as_ref()
            .map(|e| e.map_version != self.map.version)
            .unwrap_or(true);
        if stale {
            self.esdf = Some(compute_esdf(&self.map));
        }
        self.esdf.as_ref().unwrap()
    }

    fn is_done(&self) -> bool {
        matches!(self.phase, AgentPhase::Done)
    }

    fn is_idle(&self) -> bool {
        self.trajectory.is_none()
    }

    /// Active clusters this agent may target: those whose task cell is in its
    /// assignment (or everything, before the first assignment arrives).
    fn targets(&self) -> Vec<&ClusterSummary> {
        self.summaries
            .iter()
            .filter(|s| !self.blocked_clusters.contains(&s.id))
            .filter(|s| self.assignment.is_empty() || self.assignment.contains(&s.task_cell))
            .collect()
    }

    fn all_assigned_explored(&self) -> bool {
        self.assignment
            .iter()
            .all(|&c| self.hgrid.status[c] == HgridStatus::Explored)
    }

    /// Build and store the trajectory for an ordered viewpoint pair (or single
    /// viewpoint in no-pair mode).
    fn build_trajectory(
        &mut self,
        goals: &[(Vec3, f64, Option<u64>)],
        ctx: &PlanContext,
    ) -> Result<()> {
        let start_pose: PathPoint = (self.est_position, self.true_state.yaw);
        let start_vel = self.true_state.velocity;
        let mut waypoints: Vec<PathPoint> = Vec::new();
        let mut capture_marks: Vec<(usize, Option<u64>)> = Vec::new();

        match ctx.traj_mode {
            TrajectoryMode::Astar => {
                let esdf = self.esdf();
                let mut from = snap_to_lattice(&start_pose, esdf, ctx.traj_cfg.n_yaw_bins);
                waypoints.push(from);
                for (pos, yaw, cluster) in goals {
                    let to = snap_to_lattice(&(*pos, *yaw), esdf, ctx.traj_cfg.n_yaw_bins);
                    let leg = yaw_astar(&from, &to, esdf, ctx.camera, ctx.limits, ctx.traj_cfg)?;
                    waypoints.extend(leg.into_iter().skip(1));
                    capture_marks.push((waypoints.len() - 1, *cluster));
                    from = to;
                }
            }
            TrajectoryMode::Baseline | TrajectoryMode::Constrained => {
                let esdf = self.esdf();
                waypoints.push(start_pose);
                let mut from = start_pose;
                for (pos, yaw, cluster) in goals {
                    let cells = astar_cells(
                        &esdf.geom,
                        |c| esdf.at(c) >= ctx.traj_cfg.d_safe,
                        &from.0,
                        &(*pos),
                    )
                    .ok_or(crate::error::SimError::NoPath)?;
                    let from_yaw = from.1;
                    let leg_pts: Vec<Vec3> = cells.iter().map(|&c| esdf.geom.center(c)).collect();
                    let n_leg = leg_pts.len().max(2);
                    for (k, p) in leg_pts.into_iter().enumerate().skip(1) {
                        // Yaw interpolates linearly toward the capture heading.
                        let t = k as f64 / (n_leg - 1) as f64;
                        let yaw_k = from_yaw + crate::math::wrap_angle(yaw - from_yaw) * t;
                        waypoints.push((p, yaw_k));
                    }
                    //替换 the final lattice point with the exact goal pose.
                    if let Some(last) = waypoints.last_mut() {
                        *last = (*pos, *yaw);
                    }
                    capture_marks.push((waypoints.len() - 1, *cluster));
                    from = (*pos, *yaw);
                }
            }
        }
        if waypoints.len() < 2 {
            return Err(crate::error::SimError::NoPath);
        }

        let (mut v0, v1) = lattice_boundary_velocities(&waypoints, ctx.limits);
        if start_vel.norm() > 0.05 {
            v0 = start_vel;
        }
        let spline = fit_spline(&waypoints, ctx.limits, v0, v1)?;
        let seed_fov = spline.fov_violation_samples(ctx.camera);
        let esdf = self.esdf();
        let (spline, report) = optimize_joint(
            &spline,
            esdf,
            ctx.camera,
            ctx.limits,
            ctx.traj_cfg,
            ctx.traj_mode,
        )?;
        let (cs, cc, cd, cf) =
            crate::trajectory::cost_breakdown(&spline, esdf, ctx.camera, ctx.limits, ctx.traj_cfg);
        self.last_opt_note = format!(
            "seed_fov {} iters {} cost {:.2}->{:.2} gnorm {:.1e} final[s {:.1} c {:.1} d {:.1} f {:.1}]",
            seed_fov, report.iterations, report.initial_cost, report.final_cost, report.grad_norm, cs, cc, cd, cf
        );
        let captures = capture_marks
            .into_iter()
            .map(|(idx, cluster)| (idx as f64 * spline.dt, cluster))
            .collect();
        let planned_fov_samples = spline.fov_violation_samples(ctx.camera);
        self.trajectory = Some(ActiveTrajectory {
            spline,
            tau: 0.0,
            captures,
            next_capture: 0,
            goal_cluster: goals.iter().find_map(|(_, _, c)| *c),
            planned_fov_samples,
        });
        Ok(())
    }

    /// Pick targets and build the next trajectory. Returns false when there is
    /// nothing to do.
    fn replan(&mut self, ctx: &PlanContext) -> bool {
        let targets: Vec<ClusterSummary> = self.targets().into_iter().cloned().collect();
        if targets.is_empty() {
            return false;
        }
        // Cost matrix over targets from the current pose.
        let pose = self.est_position;
        let yaw = self.true_state.yaw;
        let anchors: Vec<(u64, Vec3, f64)> = targets
            .iter()
            .map(|s| {
                let (p, y) = s
                    .pairs
                    .first()
                    .map(|p| (p.average_position(), p.entry_yaw()))
                    .or_else(|| s.best_single.as_ref().map(|v| (v.position, v.yaw)))
                    .unwrap_or((s.average, 0.0));
                (s.id, p, y)
            })
            .collect();
        let n = anchors.len() + 1;
        let mut matrix = vec![vec![0.0; n]; n];
        for (i, (_, p, y)) in anchors.iter().enumerate() {
            let c = connection_cost(&pose, yaw, p, *y, ctx.limits.v_max, ctx.limits.omega_max, &self.map);
            matrix[0][i + 1] = c;
            matrix[i + 1][0] = c;
        }
        for i in 0..anchors.len() {
            for j in (i + 1)..anchors.len() {
                let (_, pi, yi) = &anchors[i];
                let (_, pj, yj) = &anchors[j];
                let fwd = connection_cost(pi, *yi, pj, *yj, ctx.limits.v_max, ctx.limits.omega_max, &self.map);
                let rev = connection_cost(pj, *yj, pi, *yi, ctx.limits.v_max, ctx.limits.omega_max, &self.map);
                let c = fwd.min(rev);
                matrix[i + 1][j + 1] = c;
                matrix[j + 1][i + 1] = c;
            }
        }
        let tour = match plan_global(&matrix) {
            Ok(t) if !t.order.is_empty() => t,
            _ => return false,
        };

        let tour_ids: Vec<u64> = tour.order.iter().map(|&k| anchors[k - 1].0).collect();
        let by_id = |id: u64| targets.iter().find(|s| s.id == id);

        if ctx.evaluation == EvaluationMode::None {
            // Single-viewpoint pipeline: head to the best single viewpoint of the
            // first tour cluster; interval captures happen along the way.
            for id in &tour_ids {
                let s = match by_id(*id) {
                    Some(s) => s,
                    None => continue,
                };
                let vp = match &s.best_single {
                    Some(v) => v.clone(),
                    None => continue,
                };
                let goals = vec![(vp.position, vp.yaw, None)];
                let cluster = s.id;
                match self.build_trajectory(&goals, ctx) {
                    Ok(()) => {
                        if let Some(t) = self.trajectory.as_mut() {
                            t.goal_cluster = Some(cluster);
                        }
                        return true;
                    }
                    Err(_) => {
                        self.blocked_clusters.push(cluster);
                    }
                }
            }
            return false;
        }

        // Pair pipeline: jointly refine the first few clusters, then fly the
        // first pair (both viewpoints, captures at each).
        let horizon = ctx.fleet.refine_horizon.max(1);
        let head: Vec<(u64, Vec<ViewpointPair>)> = tour_ids
            .iter()
            .take(horizon)
            .filter_map(|id| by_id(*id).map(|s| (s.id, s.pairs.clone())))
            .filter(|(_, pairs)| !pairs.is_empty())
            .collect();
        if head.is_empty() {
            return false;
        }
        let next_avg = tour_ids
            .get(head.len())
            .and_then(|id| by_id(*id))
            .map(|s| s.average);
        let plan: LocalPlan = match refine_local(
            &pose,
            yaw,
            &head,
            next_avg.as_ref(),
            ctx.limits.v_max,
            ctx.limits.omega_max,
            &self.map,
        ) {
            Ok(p) => p,
            Err(_) => return false,
        };
        if let Some((cluster, pair)) = plan.legs.first() {
            let goals = vec![
                (pair.first.position, pair.first.yaw, Some(*cluster)),
                (pair.second.position, pair.second.yaw, Some(*cluster)),
            ];
            let cluster = *cluster;
            match self.build_trajectory(&goals, ctx) {
                Ok(()) => return true,
                Err(_) => {
                    self.blocked_clusters.push(cluster);
                    return false;
                }
            }
        }
        false
    }
}

// ---------------------------------------------------------------------------
// Base node
// ---------------------------------------------------------------------------

pub struct BaseNode {
    pub map: VoxelMap,
    esdf: Option<Esdf>,
    pub hgrid: HGrid,
    pub fis: Fis,
    pending: BTreeMap<(u32, u64), ViewRecord>,
    last_interval: BTreeMap<u32, ViewRecord>,
    agent_positions: BTreeMap<u32, Vec3>,
    agent_idle: BTreeMap<u32, bool>,
    epoch: u64,
    pub assignment: Option<Assignment>,
    pub done: bool,
    pub oracle_invocations: usize,
}

impl BaseNode {
    fn new(map: VoxelMap, hgrid: HGrid, fis: Fis) -> Self {
        Self {
            map,
            esdf: None,
            hgrid,
            fis,
            pending: BTreeMap::new(),
            last_interval: BTreeMap::new(),
            agent_positions: BTreeMap::new(),
            agent_idle: BTreeMap::new(),
            epoch: 0,
            assignment: None,
            done: false,
            oracle_invocations: 0,
        }
    }

    fn summaries(&self, camera: &CameraModel) -> Vec<ClusterSummary> {
        let _ = camera;
        self.fis
            .active_clusters()
            .map(|c| ClusterSummary {
                id: c.id,
                average: c.average,
                task_cell: task_cell_of(c, &self.hgrid, &self.map),
                pairs: c.candidate_pairs.clone(),
                best_single: c.best_single.clone(),
            })
            .collect()
    }
}

/// Hgrid cell that owns the plurality of a cluster's adjacent unknown voxels;
/// that cell is by construction not yet explored, so the cluster always maps
/// into somebody's workload.
pub fn task_cell_of(cluster: &crate::frontier::FrontierCluster, hgrid: &HGrid, map: &VoxelMap) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &u in &cluster.unknown_adjacent {
        let h = hgrid.cell_of_voxel(map.geom.coords(u as usize));
        *counts.entry(h).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
        .map(|(c, _)| c)
        .unwrap_or_else(|| hgrid.cell_of_voxel(map.geom.cell_of(&cluster.average)))
}

// ---------------------------------------------------------------------------
// Fleet simulation
// ---------------------------------------------------------------------------

/// Everything needed to execute one run.
pub struct FleetSim {
    pub world: SimWorld,
    pub agents: Vec<Agent>,
    pub base: Option<BaseNode>,
    pub bus: Bus,
    pub now: f64,
    fleet_cfg: FleetConfig,
    traj_cfg: TrajectoryConfig,
    evaluation: EvaluationMode,
    traj_mode: TrajectoryMode,
    last_progress: f64,
    next_meeting: f64,
    meeting_index: usize,
    pub plan_trace: String,
    pub complete: bool,
}

impl FleetSim {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        env: Environment,
        camera: CameraModel,
        limits: KinematicLimits,
        pair_params: PairDepthParams,
        drift_template: crate::world::DriftModel,
        occ: OccupancyParams,
        fleet_cfg: FleetConfig,
        traj_cfg: TrajectoryConfig,
        frontier_cfg: FrontierConfig,
        sampling: SamplingMode,
        evaluation: EvaluationMode,
        traj_mode: TrajectoryMode,
        run_seed: u64,
    ) -> Self {
        let world = SimWorld::new(env, camera, limits, pair_params, run_seed);
        let mut map_template = VoxelMap::covering(
            world.env.bounds.min_v(),
            world.env.bounds.max_v(),
            world.env.resolution,
            occ,
        );

        let n_agents = fleet_cfg.agent_count.max(1);
        let starts: Vec<UavState> = (0..n_agents).map(|k| world.env.start_state(k)).collect();
        // The take-off zone is known free a priori; all maps share this prior.
        for s in &starts {
            map_template.clear_sphere(&s.position, fleet_cfg.bootstrap_clear_radius);
        }
        let mut hgrid_template = HGrid::new(
            &map_template.geom,
            fleet_cfg.hgrid_edge,
            fleet_cfg.hgrid_explored_fraction,
        );
        hgrid_template.recount_from(&map_template);

        let mk_fis = || {
            Fis::new(
                &map_template.geom,
                frontier_cfg.clone(),
                sampling,
                evaluation,
                limits.v_max,
                limits.omega_max,
            )
        };

        let semi = fleet_cfg.mode != FleetMode::PairwiseBaseline;
        let agents: Vec<Agent> = starts
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let drift = crate::world::DriftModel {
                    seed: derive_seed(run_seed, &[0xd1f7, k as u64]),
                    ..drift_template
                };
                let own_fis = if semi { None } else { Some(mk_fis()) };
                Agent::new(k as u32, *s, &map_template, &hgrid_template, drift, own_fis)
            })
            .collect();

        let base = if semi {
            let mut fis = mk_fis();
            let esdf = compute_esdf(&map_template);
            let view = MapView { map: &map_template, esdf: &esdf };
            fis.rebuild_full(&view, &camera);
            Some(BaseNode::new(map_template.clone(), hgrid_template.clone(), fis))
        } else {
            None
        };

        let bus = Bus::new(
            fleet_cfg.latency,
            fleet_cfg.latency_jitter,
            run_seed,
            n_agents as u32,
        );
        let meet = fleet_cfg.meet_interval;
        Self {
            world,
            agents,
            base,
            bus,
            now: 0.0,
            fleet_cfg,
            traj_cfg,
            evaluation,
            traj_mode,
            last_progress: 0.0,
            next_meeting: meet,
            meeting_index: 0,
            plan_trace: String::new(),
            complete: false,
        }
    }

    /// Scripted take-off: one straight forward leg with captures at both ends,
    /// giving the depth oracle its first baselines.
    fn bootstrap(&mut self) {
        let leg = self.fleet_cfg.bootstrap_leg;
        for agent in &mut self.agents {
            let yaw = agent.true_state.yaw;
            let dir = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
            let start = (agent.true_state.position, yaw);
            let end = (agent.true_state.position + dir * leg, yaw);
            let path = vec![start, end];
            let spline = fit_spline(&path, &self.world.limits, Vec3::zeros(), Vec3::zeros())
                .expect("bootstrap fit");
            let duration = spline.duration();
            let cluster = Some(BOOTSTRAP_CLUSTER_BASE + agent.id as u64);
            agent.trajectory = Some(ActiveTrajectory {
                spline,
                tau: 0.0,
                captures: vec![(0.0, cluster), (duration, cluster)],
                next_capture: 0,
                goal_cluster: None,
                planned_fov_samples: 0,
            });
        }
    }

    /// Process one completed capture pair at the node owning `map`/`hgrid`/`fis`.
    #[allow(clippy::too_many_arguments)]
    fn integrate_pair(
        world: &SimWorld,
        map: &mut VoxelMap,
        hgrid: &mut HGrid,
        fis: &mut Fis,
        esdf_slot: &mut Option<Esdf>,
        a: &ViewRecord,
        b: &ViewRecord,
    ) -> Result<(MapDelta, bool)> {
        let img = world.synth_pair(a, b)?;
        let pose_b = b.pose();
        let delta = integrate_depth_image(map, &pose_b, &world.camera, &img);
        let status_changes = hgrid.update(&map.geom, &delta);
        let stale = esdf_slot
            .as_ref()
            .map(|e| e.map_version != map.version)
            .unwrap_or(true);
        if stale {
            *esdf_slot = Some(compute_esdf(map));
        }
        let view = MapView { map, esdf: esdf_slot.as_ref().unwrap() };
        fis.update(&view, &world.camera, &delta);
        Ok((delta, !status_changes.is_empty()))
    }

    fn base_tick(&mut self) {
        let Some(mut base) = self.base.take() else { return };
        let inbox = self.bus.drain_due(BASE_ID, self.now);
        let mut broadcast_frontiers = false;
        let mut need_assign = base.assignment.is_none();
        for msg in inbox {
            match msg.payload {
                Payload::View(r) => {
                    base.agent_positions.insert(r.agent_id, r.position);
                    let pair = match r.cluster_id {
                        Some(c) => {
                            let key = (r.agent_id, c);
                            match base.pending.remove(&key) {
                                Some(prev) => Some((prev, r)),
                                None => {
                                    base.pending.insert(key, r);
                                    None
                                }
                            }
                        }
                        None => {
                            let prev = base.last_interval.insert(r.agent_id, r.clone());
                            prev.map(|p| (p, r))
                        }
                    };
                    if let Some((a, b)) = pair {
                        base.oracle_invocations += 1;
                        if let Ok((delta, status_changed)) = Self::integrate_pair(
                            &self.world,
                            &mut base.map,
                            &mut base.hgrid,
                            &mut base.fis,
                            &mut base.esdf,
                            &a,
                            &b,
                        ) {
                            self.last_progress = self.now;
                            self.bus.send(BASE_ID, None, Payload::Map(delta), self.now);
                            broadcast_frontiers = true;
                            if status_changed {
                                need_assign = true;
                            }
                        }
                    }
                }
                Payload::Advert(ad) => {
                    if let Some((_, p)) = ad.samples.first() {
                        base.agent_positions.insert(ad.agent, *p);
                    }
                    let was_idle = base.agent_idle.insert(ad.agent, ad.idle);
                    if ad.idle && was_idle != Some(true) {
                        need_assign = true;
                    }
                }
                _ => {}
            }
        }

        if broadcast_frontiers {
            let summaries = base.summaries(&self.world.camera);
            self.bus.send(BASE_ID, None, Payload::Frontiers(summaries), self.now);
        }

        // Completion: no active clusters and every hgrid cell explored.
        if !base.done
            && planner::exploration_done(base.fis.active_count(), base.hgrid.all_explored())
        {
            base.done = true;
            let done_assign = Assignment {
                epoch: base.epoch + 1,
                per_agent: self.agents.iter().map(|a| (a.id, Vec::new())).collect(),
                per_agent_cost: self.agents.iter().map(|a| (a.id, 0.0)).collect(),
                done: true,
            };
            base.epoch += 1;
            self.bus.send(BASE_ID, None, Payload::Assign(done_assign.clone()), self.now);
            base.assignment = Some(done_assign);
        } else if need_assign && !base.done {
            let cells: Vec<usize> = (0..base.hgrid.len())
                .filter(|&h| base.hgrid.status[h] != HgridStatus::Explored)
                .collect();
            if !cells.is_empty() {
                let centers: BTreeMap<usize, Vec3> = cells
                    .iter()
                    .map(|&h| (h, base.hgrid.cell_center(h, &base.map.geom)))
                    .collect();
                let agent_positions: Vec<(u32, Vec3)> = self
                    .agents
                    .iter()
                    .map(|a| {
                        (
                            a.id,
                            base.agent_positions.get(&a.id).copied().unwrap_or(a.est_position),
                        )
                    })
                    .collect();
                base.epoch += 1;
                let assignment = assign_workload(
                    &cells,
                    &centers,
                    &agent_positions,
                    &base.map,
                    self.world.limits.v_max,
                    base.epoch,
                    self.fleet_cfg.cap_slack,
                );
                self.bus.send(BASE_ID, None, Payload::Assign(assignment.clone()), self.now);
                base.assignment = Some(assignment);
            }
        }
        self.base = Some(base);
    }

    fn agent_inbox(&mut self, idx: usize) {
        let inbox = self.bus.drain_due(self.agents[idx].id, self.now);
        let semi = self.fleet_cfg.mode != FleetMode::PairwiseBaseline;
        for msg in inbox {
            match msg.payload {
                Payload::Map(delta) => {
                    let agent = &mut self.agents[idx];
                    if let Ok(applied) = agent.map.fuse(&delta) {
                        agent.hgrid.update(&agent.map.geom, &applied);
                        if agent.fis.is_some() {
                            let stale = agent
                                .esdf
                                .as_ref()
                                .map(|e| e.map_version != agent.map.version)
                                .unwrap_or(true);
                            if stale {
                                agent.esdf = Some(compute_esdf(&agent.map));
                            }
                            let view = MapView { map: &agent.map, esdf: agent.esdf.as_ref().unwrap() };
                            let fis = agent.fis.as_mut().unwrap();
                            fis.update(&view, &self.world.camera, &applied);
                            agent.summaries = summaries_from_fis(fis, &agent.hgrid, &agent.map);
                            agent.blocked_clusters.clear();
                        }
                    }
                }
                Payload::Frontiers(s) => {
                    if semi {
                        let agent = &mut self.agents[idx];
                        agent.summaries = s;
                        agent.blocked_clusters.clear();
                    }
                }
                Payload::Assign(a) => {
                    let agent = &mut self.agents[idx];
                    if a.epoch > agent.assignment_epoch {
                        agent.assignment_epoch = a.epoch;
                        agent.assignment = a.cells_of(agent.id).to_vec();
                        if a.done {
                            agent.phase = AgentPhase::Done;
                            agent.trajectory = None;
                        }
                    }
                }
                Payload::Advert(ad) => {
                    self.agents[idx].adverts.insert(ad.agent, ad.clone());
                }
                Payload::View(r) => {
                    // Baseline mode: agents broker their own pairs.
                    let _ = r;
                }
            }
        }
    }

    /// Whether another agent's advertised position is within the exclusion
    /// radius; ties yield to the smaller id.
    fn must_yield(&self, idx: usize) -> bool {
        let me = &self.agents[idx];
        for (other_id, ad) in &me.adverts {
            if *other_id >= me.id || ad.samples.is_empty() {
                continue;
            }
            // Predict the other agent's position at the current time.
            let pos = ad
                .samples
                .iter()
                .min_by(|a, b| {
                    (a.0 - self.now)
                        .abs()
                        .partial_cmp(&(b.0 - self.now).abs())
                        .unwrap()
                })
                .map(|(_, p)| *p)
                .unwrap();
            if (pos - me.true_state.position).norm() < self.fleet_cfg.exclusion_radius {
                return true;
            }
        }
        false
    }

    fn fire_capture(&mut self, idx: usize, cluster: Option<u64>) {
        let semi = self.fleet_cfg.mode != FleetMode::PairwiseBaseline;
        let (record, true_pose) = {
            let agent = &mut self.agents[idx];
            let true_pose = Pose { position: agent.true_state.position, yaw: agent.true_state.yaw };
            let record = ViewRecord {
                agent_id: agent.id,
                position: agent.est_position,
                yaw: agent.true_state.yaw,
                timestamp: self.now,
                cluster_id: cluster,
            };
            agent.captures_made += 1;
            agent.travel_since_capture = 0.0;
            (record, true_pose)
        };
        if !self.world.env.is_free(&true_pose.position) {
            // Sensor in collision: the capture is lost.
            return;
        }
        self.world.record_capture(record.agent_id, record.timestamp, true_pose);
        if semi {
            self.bus.send(record.agent_id, Some(BASE_ID), Payload::View(record), self.now);
        } else {
            // Baseline: assemble the pair locally, integrate, broadcast the delta.
            let pair = {
                let agent = &mut self.agents[idx];
                match record.cluster_id {
                    Some(c) => match agent.pending_pair.remove(&c) {
                        Some(prev) => Some((prev, record.clone())),
                        None => {
                            agent.pending_pair.insert(c, record.clone());
                            None
                        }
                    },
                    None => {
                        let prev = agent.last_interval_record.replace(record.clone());
                        prev.map(|p| (p, record.clone()))
                    }
                }
            };
            if let Some((a, b)) = pair {
                let agent = &mut self.agents[idx];
                let mut fis = agent.fis.take().expect("baseline agents own a FIS");
                let result = Self::integrate_pair(
                    &self.world,
                    &mut agent.map,
                    &mut agent.hgrid,
                    &mut fis,
                    &mut agent.esdf,
                    &a,
                    &b,
                );
                agent.summaries = summaries_from_fis(&fis, &agent.hgrid, &agent.map);
                agent.fis = Some(fis);
                agent.blocked_clusters.clear();
                if let Ok((delta, _)) = result {
                    self.last_progress = self.now;
                    self.bus.send(a.agent_id, None, Payload::Map(delta), self.now);
                }
            }
        }
    }

    fn agent_tick(&mut self, idx: usize) {
        self.agent_inbox(idx);
        if self.agents[idx].is_done() {
            self.sample_agent(idx, VelocityCommand::zero());
            return;
        }

        let yielding = self.must_yield(idx);

        // Advance the active trajectory.
        let mut cmd = VelocityCommand::zero();
        let mut fire: Vec<Option<u64>> = Vec::new();
        {
            let cfg = &self.fleet_cfg;
            let limits = self.world.limits;
            let agent = &mut self.agents[idx];
            if let Some(traj) = agent.trajectory.as_mut() {
                if !yielding {
                    // Path-time governor: hold the trajectory clock while the
                    // vehicle lags, so it never cuts corners to catch up. While
                    // frozen, only the position term pulls it back to the path.
                    let lag = (traj.spline.position(traj.tau) - agent.est_position).norm();
                    let frozen = lag >= 0.25;
                    if !frozen {
                        traj.tau = (traj.tau + CONTROL_DT).min(traj.spline.duration());
                    }
                    let ref_vel = if frozen { Vec3::zeros() } else { traj.spline.velocity(traj.tau) };
                    let ref_yaw_rate = if frozen { 0.0 } else { traj.spline.yaw_rate(traj.tau) };
                    let ref_pos = traj.spline.position(traj.tau);
                    let ref_yaw = traj.spline.yaw(traj.tau);
                    let track_v = ref_vel + (ref_pos - agent.est_position) * cfg.tracking_gain;
                    let yaw_err = crate::math::wrap_angle(ref_yaw - agent.true_state.yaw);
                    let reference = VelocityCommand {
                        linear: track_v,
                        yaw_rate: ref_yaw_rate + cfg.tracking_gain * yaw_err,
                    };
                    let measured = VelocityCommand {
                        linear: agent.true_state.velocity,
                        yaw_rate: agent.true_state.yaw_rate,
                    };
                    let quantized = controller_step(
                        &reference,
                        &agent.prev_cmd,
                        &measured,
                        cfg.controller_gain,
                        cfg.velocity_resolution,
                        &limits,
                    );
                    cmd = crate::world::limit_acceleration(&agent.prev_cmd, &quantized, &limits, CONTROL_DT);
                    // Captures due at this trajectory time.
                    while traj.next_capture < traj.captures.len()
                        && traj.captures[traj.next_capture].0 <= traj.tau + 1e-9
                    {
                        fire.push(traj.captures[traj.next_capture].1);
                        traj.next_capture += 1;
                    }
                    if traj.tau >= traj.spline.duration() - 1e-9
                        && traj.next_capture >= traj.captures.len()
                    {
                        agent.trajectory = None;
                    }
                }
            }
        }

        // Integrate dynamics and odometry.
        {
            let agent = &mut self.agents[idx];
            let prev = agent.true_state;
            let next = crate::world::step_dynamics(&prev, &cmd, CONTROL_DT, &self.world.limits)
                .unwrap_or(prev);
            let fov_ok = motion_in_fov(&next.velocity, next.yaw, &self.world.camera);
            let est = agent.vio.step(&prev, &next, fov_ok);
            agent.travel_since_capture += (next.position - prev.position).norm();
            if (next.position - prev.position).norm() > 1e-6 {
                agent.last_motion_time = self.now;
            }
            agent.true_state = next;
            agent.est_position = est.position;
            agent.prev_cmd = cmd;
        }
        self.sample_agent(idx, cmd);

        // Interval captures in no-pair mode.
        if self.evaluation == EvaluationMode::None
            && matches!(self.agents[idx].phase, AgentPhase::Explore)
            && self.agents[idx].travel_since_capture >= self.fleet_cfg.capture_interval
        {
            fire.push(None);
        }
        for cluster in fire {
            self.fire_capture(idx, cluster);
        }

        // Bootstrap hand-off.
        if matches!(self.agents[idx].phase, AgentPhase::Bootstrap) && self.agents[idx].trajectory.is_none() {
            self.agents[idx].phase = AgentPhase::Explore;
        }

        // Periodic advert.
        if self.agents[idx].tick % ADVERT_PERIOD_TICKS == 0 {
            let agent = &self.agents[idx];
            let samples = match &agent.trajectory {
                Some(t) => {
                    let mut v = Vec::new();
                    let mut tau = t.tau;
                    while tau <= t.spline.duration() + 1e-9 {
                        v.push((self.now + (tau - t.tau), t.spline.position(tau)));
                        tau += 1.0;
                    }
                    v
                }
                None => vec![(self.now, agent.true_state.position)],
            };
            let ad = TrajectoryAdvert { agent: agent.id, idle: agent.is_idle(), samples };
            let id = agent.id;
            self.bus.send(id, None, Payload::Advert(ad), self.now);
        }

        // Replanning.
        let due_replan = self.agents[idx].tick % REPLAN_PERIOD_TICKS == 0;
        if matches!(self.agents[idx].phase, AgentPhase::Explore) && due_replan && !yielding {
            let goal_alive = {
                let agent = &self.agents[idx];
                match agent.trajectory.as_ref().and_then(|t| t.goal_cluster) {
                    Some(goal) => agent.summaries.iter().any(|s| s.id == goal),
                    None => true,
                }
            };
            let traj_done = self.agents[idx].trajectory.is_none();
            let decision = planner::replan_trigger(
                goal_alive,
                traj_done,
                &[],
                self.agents[idx]
                    .trajectory
                    .as_ref()
                    .map(|t| t.spline.duration() - t.tau)
                    .unwrap_or(0.0),
                self.fleet_cfg.replan_rho,
            );
            if decision != planner::ReplanDecision::Keep {
                let ctx_camera = self.world.camera;
                let ctx_limits = self.world.limits;
                let traj_cfg = self.traj_cfg.clone();
                let fleet = self.fleet_cfg.clone();
                let ctx = PlanContext {
                    camera: &ctx_camera,
                    limits: &ctx_limits,
                    traj_cfg: &traj_cfg,
                    evaluation: self.evaluation,
                    traj_mode: self.traj_mode,
                    fleet: &fleet,
                };
                let agent = &mut self.agents[idx];
                agent.trajectory = None;
                let planned = agent.replan(&ctx);
                if planned {
                    self.last_progress = self.now;
                    let a = &self.agents[idx];
                    let t = a.trajectory.as_ref().unwrap();
                    self.plan_trace.push_str(&format!(
                        "{:.2} agent {} goal {:?} duration {:.2} captures {} planned_fov {} | {}\n",
                        self.now,
                        a.id,
                        t.goal_cluster,
                        t.spline.duration(),
                        t.captures.len(),
                        t.planned_fov_samples,
                        a.last_opt_note
                    ));
                }
            }
        }
        self.agents[idx].tick += 1;
    }

    fn sample_agent(&mut self, idx: usize, _cmd: VelocityCommand) {
        let camera = self.world.camera;
        let d_safe = self.traj_cfg.d_safe;
        let env_clearance = {
            let agent = &self.agents[idx];
            self.world.env.obstacle_clearance(&agent.true_state.position)
        };
        let agent = &mut self.agents[idx];
        agent.true_track.push(agent.true_state.position);
        agent.est_track.push(agent.est_position);
        agent.yaw_track.push(agent.true_state.yaw);
        let v = agent.true_state.velocity;
        // Motion below the velocity-reading resolution is unobservable creep.
        if v.xy().norm() > self.fleet_cfg.velocity_resolution
            && !motion_in_fov(&v, agent.true_state.yaw, &camera)
        {
            agent.fov_violation_samples += 1;
            agent.fov_consecutive += 1;
            // A sustained excursion counts as one violation event; sub-half-second
            // blips are quantized-execution noise, not lost visual tracking.
            if agent.fov_consecutive == 25 {
                agent.fov_violation_events += 1;
            }
        } else {
            agent.fov_consecutive = 0;
        }
        if v.norm() > 0.02 && env_clearance < d_safe - 1e-9 {
            agent.safety_violation_samples += 1;
        }
    }

    /// Baseline-mode periodic pairwise reassignment between a rotating pair.
    fn baseline_meeting(&mut self) {
        let n = self.agents.len();
        if n < 2 {
            return;
        }
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        let (i, j) = pairs[self.meeting_index % pairs.len()];
        self.meeting_index += 1;

        // Cells both agents still consider unexplored, from the initiator's map.
        let cells_i = self.agents[i].assignment.clone();
        let cells_j = self.agents[j].assignment.clone();
        let hgrid = &self.agents[i].hgrid;
        let keep = |cells: &[usize]| -> Vec<usize> {
            cells
                .iter()
                .copied()
                .filter(|&c| hgrid.status[c] != HgridStatus::Explored)
                .collect()
        };
        let li = keep(&cells_i);
        let lj = keep(&cells_j);
        let total = li.len() + lj.len();
        if total == 0 {
            return;
        }
        let centers: BTreeMap<usize, Vec3> = li
            .iter()
            .chain(lj.iter())
            .map(|&h| (h, self.agents[i].hgrid.cell_center(h, &self.agents[i].map.geom)))
            .collect();
        let capacity = total.div_ceil(2) + self.fleet_cfg.cap_slack;
        let (new_i, new_j) = pairwise_reassign(
            &self.agents[i].est_position,
            &self.agents[j].est_position,
            &li,
            &lj,
            &centers,
            &self.agents[i].map,
            self.world.limits.v_max,
            capacity,
        );
        self.agents[i].assignment = new_i;
        self.agents[j].assignment = new_j;
    }

    fn baseline_initial_assignment(&mut self) {
        let n_cells: Vec<usize> = (0..self.agents[0].hgrid.len())
            .filter(|&h| self.agents[0].hgrid.status[h] != HgridStatus::Explored)
            .collect();
        let centers: BTreeMap<usize, Vec3> = n_cells
            .iter()
            .map(|&h| (h, self.agents[0].hgrid.cell_center(h, &self.agents[0].map.geom)))
            .collect();
        // Nearest-agent split under a capacity cap, in cell order.
        let k = self.agents.len();
        let capacity = n_cells.len().div_ceil(k) + self.fleet_cfg.cap_slack;
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); k];
        for &cell in &n_cells {
            let c = centers[&cell];
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                let da = (self.agents[a].true_state.position - c).norm();
                let db = (self.agents[b].true_state.position - c).norm();
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
            for ai in order {
                if lists[ai].len() < capacity {
                    lists[ai].push(cell);
                    break;
                }
            }
        }
        for (ai, list) in lists.into_iter().enumerate() {
            self.agents[ai].assignment = list;
            self.agents[ai].assignment_epoch = 1;
        }
    }

    /// Everything finished? Semi mode: base declared done. Baseline: all agents
    /// idle with their cells explored and the bus drained.
    fn finished(&self) -> bool {
        match self.fleet_cfg.mode {
            FleetMode::PairwiseBaseline => {
                self.bus.is_empty()
                    && self.agents.iter().all(|a| {
                        a.is_idle()
                            && a.fis.as_ref().map(|f| f.active_count() == 0).unwrap_or(true)
                            && a.all_assigned_explored()
                    })
            }
            _ => self.base.as_ref().map(|b| b.done).unwrap_or(false),
        }
    }

    /// Run to completion or timeout. Returns per-agent metrics.
    pub fn run(&mut self, timeout: f64) -> (Vec<AgentMetrics>, bool) {
        self.bootstrap();
        if self.fleet_cfg.mode == FleetMode::PairwiseBaseline {
            self.baseline_initial_assignment();
        }
        loop {
            self.now += CONTROL_DT;
            if self.base.is_some() {
                self.base_tick();
            }
            for idx in 0..self.agents.len() {
                self.agent_tick(idx);
            }
            if self.fleet_cfg.mode == FleetMode::PairwiseBaseline && self.now >= self.next_meeting {
                self.baseline_meeting();
                self.next_meeting += self.fleet_cfg.meet_interval;
            }
            if self.finished() {
                self.complete = true;
                break;
            }
            if self.now >= timeout || self.now - self.last_progress > self.fleet_cfg.stall_timeout {
                self.complete = false;
                break;
            }
        }
        let metrics = self.collect_metrics();
        (metrics, self.complete)
    }

    fn collect_metrics(&self) -> Vec<AgentMetrics> {
        self.agents
            .iter()
            .map(|a| {
                let stats = path_stats(&a.true_track, CONTROL_DT);
                let odo = odometry_quality(&a.est_track, &a.true_track, 1.0 / CONTROL_DT);
                let time = self.now;
                AgentMetrics {
                    agent_id: a.id,
                    time,
                    length: stats.length,
                    avg_velocity: if time > 0.0 { stats.length / time } else { 0.0 },
                    energy: stats.energy,
                    rpe: odo.rpe,
                    ate: odo.ate,
                    fov_violations: a.fov_violation_events,
                    fov_violation_samples: a.fov_violation_samples,
                    safety_violations: a.safety_violation_samples,
                    captures: a.captures_made,
                }
            })
            .collect()
    }

    /// The fused map for metrics: the base's map in semi modes, agent 0's in
    /// baseline mode (maps converge through delta broadcasts).
    pub fn final_map(&self) -> &VoxelMap {
        match &self.base {
            Some(b) => &b.map,
            None => &self.agents[0].map,
        }
    }

    /// Executed-trajectory CSV (50 Hz) for one agent.
    pub fn write_executed_csv(&self, idx: usize, w: &mut impl std::io::Write) -> Result<()> {
        let a = &self.agents[idx];
        writeln!(w, "t,x,y,z,yaw,vx,vy,vz,yaw_rate")?;
        for (k, p) in a.true_track.iter().enumerate() {
            let t = k as f64 * CONTROL_DT;
            let v = if k + 1 < a.true_track.len() {
                (a.true_track[k + 1] - p) / CONTROL_DT
            } else {
                Vec3::zeros()
            };
            let yaw = a.yaw_track[k];
            let yaw_rate = if k + 1 < a.yaw_track.len() {
                crate::math::wrap_angle(a.yaw_track[k + 1] - yaw) / CONTROL_DT
            } else {
                0.0
            };
            writeln!(
                w,
                "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                t, p.x, p.y, p.z, yaw, v.x, v.y, v.z, yaw_rate
            )?;
        }
        Ok(())
    }
}

/// Cluster summaries from a locally owned FIS (baseline agents).
fn summaries_from_fis(fis: &Fis, hgrid: &HGrid, map: &VoxelMap) -> Vec<ClusterSummary> {
    fis.active_clusters()
        .map(|c| ClusterSummary {
            id: c.id,
            average: c.average,
            task_cell: task_cell_of(c, hgrid, map),
            pairs: c.candidate_pairs.clone(),
            best_single: c.best_single.clone(),
        })
        .collect()
}

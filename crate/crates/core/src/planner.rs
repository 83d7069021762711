//! Hierarchical coarse-to-fine exploration planning adapted to viewpoint pairs:
//! an open-ended coverage tour over targets, pair-order substitution at the
//! tour head, and joint local refinement that never splits a pair.

use crate::error::{Result, SimError};
use crate::frontier::{connection_cost, intermediate_yaw, ViewpointPair};
use crate::mapping::VoxelMap;
use crate::math::{angle_diff, Vec3};

/// Open tour over the targets of a cost matrix whose row/column 0 is the start
/// pose. `order` holds matrix indices (1-based targets), visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPath {
    pub order: Vec<usize>,
    pub cost: f64,
    /// Targets unreachable from the start, dropped from the tour.
    pub skipped: Vec<usize>,
}

fn path_cost(matrix: &[Vec<f64>], order: &[usize]) -> f64 {
    let mut c = 0.0;
    let mut prev = 0usize;
    for &t in order {
        c += matrix[prev][t];
        prev = t;
    }
    c
}

/// Open-loop coverage tour (fixed start, free end): nearest-neighbor
/// construction improved by 2-opt segment reversals and or-opt chain moves
/// until no move helps. Deterministic tie-breaking by index.
pub fn plan_global(matrix: &[Vec<f64>]) -> Result<GlobalPath> {
    let n = matrix.len();
    if n <= 1 {
        return Err(SimError::InvalidConfig("cost matrix has no targets".into()));
    }
    let mut skipped = Vec::new();
    let mut remaining: Vec<usize> = Vec::new();
    for t in 1..n {
        if matrix[0][t].is_finite() {
            remaining.push(t);
        } else {
            skipped.push(t);
        }
    }
    if remaining.is_empty() {
        return Ok(GlobalPath { order: Vec::new(), cost: 0.0, skipped });
    }

    // Nearest-neighbor construction, multi-started over the first visit to
    // escape shallow local optima; each start is improved independently.
    let nn_from = |first: Option<usize>| -> Vec<usize> {
        let mut rem = remaining.clone();
        let mut order = Vec::with_capacity(rem.len());
        let mut prev = 0usize;
        if let Some(f) = first {
            let k = rem.iter().position(|&t| t == f).unwrap();
            prev = rem.remove(k);
            order.push(prev);
        }
        while !rem.is_empty() {
            let (k, _) = rem
                .iter()
                .enumerate()
                .min_by(|(_, &a), (_, &b)| {
                    matrix[prev][a]
                        .partial_cmp(&matrix[prev][b])
                        .unwrap()
                        .then(a.cmp(&b))
                })
                .unwrap();
            prev = rem.remove(k);
            order.push(prev);
        }
        order
    };

    let mut starts: Vec<Option<usize>> = vec![None];
    let mut by_dist = remaining.clone();
    by_dist.sort_by(|&a, &b| matrix[0][a].partial_cmp(&matrix[0][b]).unwrap().then(a.cmp(&b)));
    starts.extend(by_dist.into_iter().take(8).map(Some));

    let mut best: Option<(Vec<usize>, f64)> = None;
    for s in starts {
        let mut order = nn_from(s);
        improve_path(matrix, &mut order);
        let cost = path_cost(matrix, &order);
        if best.as_ref().map(|(_, c)| cost < *c - 1e-12).unwrap_or(true) {
            best = Some((order, cost));
        }
    }
    let (order, cost) = best.unwrap();
    Ok(GlobalPath { order, cost, skipped })
}

/// Best-improvement 2-opt + or-opt loop on an open path (node 0 fixed).
fn improve_path(matrix: &[Vec<f64>], order: &mut Vec<usize>) {
    let m = order.len();
    if m < 2 {
        return;
    }
    for _round in 0..200 {
        let mut best_gain = 1e-9;
        let mut best_move: Option<Move> = None;

        // 2-opt: reverse order[i..=j].
        for i in 0..m {
            let before = if i == 0 { 0 } else { order[i - 1] };
            for j in (i + 1)..m {
                let mut gain = matrix[before][order[i]] - matrix[before][order[j]];
                if j + 1 < m {
                    gain += matrix[order[j]][order[j + 1]] - matrix[order[i]][order[j + 1]];
                }
                if gain > best_gain {
                    best_gain = gain;
                    best_move = Some(Move::Reverse(i, j));
                }
            }
        }
        // Or-opt: relocate chains of length 1..=3, forward or reversed.
        for len in 1..=3usize.min(m) {
            for i in 0..=(m - len) {
                let before = if i == 0 { 0 } else { order[i - 1] };
                let chain_start = order[i];
                let chain_end = order[i + len - 1];
                let after = order.get(i + len).copied();
                let removal_gain = matrix[before][chain_start]
                    + after.map(|a| matrix[chain_end][a]).unwrap_or(0.0)
                    - after.map(|a| matrix[before][a]).unwrap_or(0.0);
                for k in 0..=m {
                    // Insert between positions k-1 and k of the original path;
                    // positions inside (or touching) the chain are no-ops.
                    if k >= i && k <= i + len {
                        continue;
                    }
                    let (ins_before, ins_after) = if k == 0 {
                        (0, Some(order[0]))
                    } else if k == m {
                        (order[m - 1], None)
                    } else {
                        (order[k - 1], Some(order[k]))
                    };
                    let base = ins_after.map(|a| matrix[ins_before][a]).unwrap_or(0.0);
                    for reversed in [false, true] {
                        let (head, tail) = if reversed {
                            (chain_end, chain_start)
                        } else {
                            (chain_start, chain_end)
                        };
                        let insert_cost = matrix[ins_before][head]
                            + ins_after.map(|a| matrix[tail][a]).unwrap_or(0.0)
                            - base;
                        let gain = removal_gain - insert_cost;
                        if gain > best_gain {
                            best_gain = gain;
                            best_move = Some(Move::Relocate(i, len, k, reversed));
                        }
                    }
                }
            }
        }

        match best_move {
            Some(Move::Reverse(i, j)) => order[i..=j].reverse(),
            Some(Move::Relocate(i, len, k, reversed)) => {
                let mut chain: Vec<usize> = order.drain(i..i + len).collect();
                if reversed {
                    chain.reverse();
                }
                let k = if k > i { k - len } else { k };
                for (off, v) in chain.into_iter().enumerate() {
                    order.insert(k + off, v);
                }
            }
            None => break,
        }
    }
}

enum Move {
    Reverse(usize, usize),
    Relocate(usize, usize, usize, bool),
}

/// Travel cost toward a position whose arrival yaw is left free: rotation only
/// has to reach the motion heading.
fn cost_to_position(
    from: &Vec3,
    from_yaw: f64,
    to: &Vec3,
    v_max: f64,
    omega_max: f64,
    map: &VoxelMap,
) -> f64 {
    let length = match crate::frontier::free_path_length(map, from, to) {
        Some(l) => l,
        None => return f64::INFINITY,
    };
    let rot = match intermediate_yaw(from, to) {
        Some(g) => angle_diff(from_yaw, g),
        None => 0.0,
    };
    (length / v_max).max(rot / omega_max)
}

/// Cost of visiting a pair in a given order from the current pose, optionally
/// continuing to the next tour target.
fn pair_traverse_cost(
    pose: &Vec3,
    yaw: f64,
    a: &crate::frontier::Viewpoint,
    b: &crate::frontier::Viewpoint,
    next: Option<&Vec3>,
    v_max: f64,
    omega_max: f64,
    map: &VoxelMap,
) -> f64 {
    let mut c = connection_cost(pose, yaw, &a.position, a.yaw, v_max, omega_max, map);
    c += connection_cost(&a.position, a.yaw, &b.position, b.yaw, v_max, omega_max, map);
    if let Some(n) = next {
        c += cost_to_position(&b.position, b.yaw, n, v_max, omega_max, map);
    }
    c
}

/// Decide the visiting order of a pair: compare entering at `first` versus
/// entering at `second`, ending toward the next tour position. Ties keep the
/// stored order. Errors when both directions are unreachable.
pub fn order_pair(
    pose: &Vec3,
    yaw: f64,
    pair: &ViewpointPair,
    next: Option<&Vec3>,
    v_max: f64,
    omega_max: f64,
    map: &VoxelMap,
) -> Result<(ViewpointPair, f64)> {
    let fwd = pair_traverse_cost(pose, yaw, &pair.first, &pair.second, next, v_max, omega_max, map);
    let rev = pair_traverse_cost(pose, yaw, &pair.second, &pair.first, next, v_max, omega_max, map);
    if !fwd.is_finite() && !rev.is_finite() {
        return Err(SimError::NoPath);
    }
    if rev < fwd {
        let mut p = pair.clone();
        std::mem::swap(&mut p.first, &mut p.second);
        Ok((p, rev))
    } else {
        Ok((pair.clone(), fwd))
    }
}

/// A refined local plan over the next clusters: the first cluster expanded into
/// its ordered viewpoint pair, subsequent clusters represented by the entry
/// viewpoint of their chosen pair.
#[derive(Debug, Clone)]
pub struct LocalPlan {
    /// (cluster id, chosen pair, entry-first ordering applied).
    pub legs: Vec<(u64, ViewpointPair)>,
    pub cost: f64,
}

impl LocalPlan {
    pub fn first_pair(&self) -> Option<&ViewpointPair> {
        self.legs.first().map(|(_, p)| p)
    }
}

/// Joint local refinement: pick one pair per cluster and its traversal order by
/// a layered shortest path. Within a cluster, a viewpoint connects only to its
/// partner; between consecutive clusters, exits connect to entries. This makes
/// mixing viewpoints of different pairs structurally impossible.
pub fn refine_local(
    pose: &Vec3,
    yaw: f64,
    clusters: &[(u64, Vec<ViewpointPair>)],
    next: Option<&Vec3>,
    v_max: f64,
    omega_max: f64,
    map: &VoxelMap,
) -> Result<LocalPlan> {
    if clusters.is_empty() {
        return Err(SimError::InvalidConfig("refine_local needs at least one cluster".into()));
    }
    // State per layer: (pair index, orientation). Orientation 0 = stored order.
    #[derive(Clone)]
    struct Node {
        cost: f64,
        back: Option<(usize, usize)>,
    }
    let mut layers: Vec<Vec<Node>> = Vec::with_capacity(clusters.len());

    let entry_exit = |pair: &ViewpointPair, orient: usize| {
        if orient == 0 {
            (pair.first.clone(), pair.second.clone())
        } else {
            (pair.second.clone(), pair.first.clone())
        }
    };

    for (layer, (_, pairs)) in clusters.iter().enumerate() {
        let mut nodes = Vec::with_capacity(pairs.len() * 2);
        for (_pi, pair) in pairs.iter().enumerate() {
            for orient in 0..2 {
                let (entry, exit) = entry_exit(pair, orient);
                let intra =
                    connection_cost(&entry.position, entry.yaw, &exit.position, exit.yaw, v_max, omega_max, map);
                let mut best = Node { cost: f64::INFINITY, back: None };
                if layer == 0 {
                    let c = connection_cost(pose, yaw, &entry.position, entry.yaw, v_max, omega_max, map);
                    best = Node { cost: c + intra, back: None };
                } else {
                    for (k, prev) in layers[layer - 1].iter().enumerate() {
                        if !prev.cost.is_finite() {
                            continue;
                        }
                        let (ppi, porient) = (k / 2, k % 2);
                        let (_, pexit) = entry_exit(&clusters[layer - 1].1[ppi], porient);
                        let c = connection_cost(
                            &pexit.position,
                            pexit.yaw,
                            &entry.position,
                            entry.yaw,
                            v_max,
                            omega_max,
                            map,
                        );
                        let total = prev.cost + c + intra;
                        if total < best.cost {
                            best = Node { cost: total, back: Some((ppi, porient)) };
                        }
                    }
                }
                nodes.push(best);
            }
        }
        layers.push(nodes);
    }

    // Terminal leg toward the next tour target, then pick the best end node.
    let mut best_end: Option<(usize, f64)> = None;
    for (k, node) in layers.last().unwrap().iter().enumerate() {
        if !node.cost.is_finite() {
            continue;
        }
        let (pi, orient) = (k / 2, k % 2);
        let (_, exit) = entry_exit(&clusters.last().unwrap().1[pi], orient);
        let tail = match next {
            Some(n) => cost_to_position(&exit.position, exit.yaw, n, v_max, omega_max, map),
            None => 0.0,
        };
        let total = node.cost + tail;
        if best_end.map(|(_, c)| total < c).unwrap_or(true) {
            best_end = Some((k, total));
        }
    }

    let (mut k, cost) = match best_end {
        Some(v) => v,
        None => {
            // Fall back to the stored best pair of each cluster.
            let legs: Vec<(u64, ViewpointPair)> = clusters
                .iter()
                .filter_map(|(id, pairs)| pairs.first().map(|p| (*id, p.clone())))
                .collect();
            if legs.is_empty() {
                return Err(SimError::NoPath);
            }
            return Ok(LocalPlan { legs, cost: f64::INFINITY });
        }
    };

    // Trace back through the layers.
    let mut picks = vec![(0usize, 0usize); clusters.len()];
    for layer in (0..clusters.len()).rev() {
        picks[layer] = (k / 2, k % 2);
        if layer > 0 {
            let back = layers[layer][k].back.expect("finite node has a predecessor");
            k = back.0 * 2 + back.1;
        }
    }
    let legs = clusters
        .iter()
        .zip(&picks)
        .map(|((id, pairs), &(pi, orient))| {
            let mut pair = pairs[pi].clone();
            if orient == 1 {
                std::mem::swap(&mut pair.first, &mut pair.second);
            }
            (*id, pair)
        })
        .collect();
    Ok(LocalPlan { legs, cost })
}

/// Why the planner loop should run again.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplanDecision {
    Keep,
    Replan(ReplanReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplanReason {
    GoalDissolved,
    TrajectoryDone,
    BetterClusterAppeared,
}

/// Replan when the goal cluster dissolved, the trajectory finished, or a new
/// cluster is reachable within `rho` times the remaining trajectory time.
pub fn replan_trigger(
    goal_cluster_alive: bool,
    trajectory_done: bool,
    new_cluster_costs: &[f64],
    remaining_traj_time: f64,
    rho: f64,
) -> ReplanDecision {
    if !goal_cluster_alive {
        return ReplanDecision::Replan(ReplanReason::GoalDissolved);
    }
    if trajectory_done {
        return ReplanDecision::Replan(ReplanReason::TrajectoryDone);
    }
    if new_cluster_costs
        .iter()
        .any(|&c| c < rho * remaining_traj_time)
    {
        return ReplanDecision::Replan(ReplanReason::BetterClusterAppeared);
    }
    ReplanDecision::Keep
}

/// The exploration loop is finished when no active frontier cluster remains and
/// every assigned workload cell is explored.
pub fn exploration_done(active_clusters: usize, assigned_cells_explored: bool) -> bool {
    active_clusters == 0 && assigned_cells_explored
}

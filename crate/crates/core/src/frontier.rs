//! Incremental frontier information structure extended to viewpoint pairs:
//! clustering, line-first/cylindrical pair sampling, the heuristic
//! reconstructability score, and connection costs with an intermediate yaw
//! term so rotation time is never underestimated.

use crate::error::Result;
use crate::grid::GridGeom;
use crate::mapping::{CellState, Esdf, MapDelta, VoxelMap};
use crate::math::{angle_diff, Vec3};
use crate::world::CameraModel;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::io::Write;

/// Sampling strategy for viewpoint pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Cylindrical sampling around the cluster only.
    Uniform,
    /// Line sampling only (cylindrical rescue when no line fits at all).
    Line,
    /// Line sampling first, cylindrical fallback when no line pair is good enough.
    Combined,
}

/// Pair evaluation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    /// No pairs: single best-coverage viewpoint per cluster, captures at fixed
    /// travel intervals.
    None,
    /// Rank pairs by overlap alone.
    Overlap,
    /// Full reconstructability heuristic.
    Heuristic,
}

/// Tunables for frontier clustering, sampling and scoring.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierConfig {
    /// Maximum cluster extent along any axis, meters; larger components split.
    pub cluster_max_extent: f64,
    /// Coverage floor: max(this fraction of the cluster, capped by the absolute floor).
    pub min_coverage_abs: usize,
    pub min_coverage_frac: f64,
    /// Clearance required at viewpoint positions, meters.
    pub safety_radius: f64,
    /// Lateral standoff distances for both samplers, meters.
    pub standoffs: Vec<f64>,
    /// Number of view angles sampled along each line.
    pub line_angle_count: usize,
    /// Smallest line view angle, radians.
    pub line_angle_min: f64,
    pub cyl_angle_count: usize,
    pub cyl_heights: Vec<f64>,
    /// Candidate cap per sampler (kept by coverage).
    pub max_candidates: usize,
    /// Parallax gate and optimum, radians.
    pub alpha_min: f64,
    pub alpha_star: f64,
    pub sigma_alpha: f64,
    /// View distance band, meters.
    pub d_min: f64,
    pub d_max: f64,
    /// Distance-ratio decay.
    pub lambda_d: f64,
    /// Line pairs at or above this score short-circuit cylindrical sampling.
    pub score_accept: f64,
    /// Candidate pairs kept per cluster for local refinement.
    pub top_k_pairs: usize,
}

impl Default for FrontierConfig {
    fn default() -> Self {
        Self {
            cluster_max_extent: 2.0,
            min_coverage_abs: 20,
            min_coverage_frac: 0.3,
            safety_radius: 0.4,
            standoffs: vec![1.5, 2.5, 3.5],
            line_angle_count: 6,
            line_angle_min: 10f64.to_radians(),
            cyl_angle_count: 16,
            cyl_heights: vec![-0.8, 0.0, 0.8],
            max_candidates: 20,
            alpha_min: 5f64.to_radians(),
            alpha_star: 20f64.to_radians(),
            sigma_alpha: 10f64.to_radians(),
            d_min: 1.0,
            d_max: 8.0,
            lambda_d: 0.5,
            score_accept: 0.5,
            top_k_pairs: 3,
        }
    }
}

impl FrontierConfig {
    pub fn min_coverage_for(&self, cluster_size: usize) -> usize {
        let frac = (self.min_coverage_frac * cluster_size as f64).ceil() as usize;
        frac.min(self.min_coverage_abs).max(1)
    }
}

/// A candidate camera pose for observing one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub position: Vec3,
    pub yaw: f64,
    /// Number of cluster cells visible from here.
    pub coverage: usize,
    /// Present for line-sampled candidates: (standoff index, direction index).
    /// Pairs in line mode are only formed within one line.
    pub line_key: Option<(u8, u8)>,
}

/// Two viewpoints jointly observing a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointPair {
    pub first: Viewpoint,
    pub second: Viewpoint,
    /// |cells seen by both| / |cluster cells|.
    pub overlap: f64,
    pub score: f64,
}

impl ViewpointPair {
    pub fn average_position(&self) -> Vec3 {
        0.5 * (self.first.position + self.second.position)
    }

    /// Yaw used when the pair stands in for the cluster in the cost matrix.
    pub fn entry_yaw(&self) -> f64 {
        self.first.yaw
    }
}

/// One frontier cluster with its cached observation plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierCluster {
    pub id: u64,
    /// Map cell indices of the member (free, unknown-adjacent) voxels.
    pub cells: Vec<u32>,
    pub average: Vec3,
    pub bbox: ([i64; 3], [i64; 3]),
    /// Largest-variance direction of the member cells.
    pub principal: Vec3,
    /// Smallest-variance direction oriented away from the unknown side, when
    /// the cluster is non-degenerate.
    pub normal: Option<Vec3>,
    /// Unknown voxels 6-adjacent to the members (used for workload attribution).
    pub unknown_adjacent: Vec<u32>,
    pub best_pair: Option<ViewpointPair>,
    /// Up to `top_k_pairs` alternatives (best first) for joint refinement.
    pub candidate_pairs: Vec<ViewpointPair>,
    /// Best single viewpoint, used by the no-pair evaluation mode.
    pub best_single: Option<Viewpoint>,
    /// No usable observation geometry: excluded from planning until the area
    /// changes.
    pub dormant: bool,
}

/// Outcome of one incremental frontier update.
#[derive(Debug, Clone, Default)]
pub struct FisUpdate {
    pub removed: Vec<u64>,
    pub added: Vec<u64>,
}

/// Read-only view of the map artifacts the sampler needs.
pub struct MapView<'a> {
    pub map: &'a VoxelMap,
    pub esdf: &'a Esdf,
}

/// Frontier information structure: incrementally maintained clusters plus a
/// lazily filled cluster-to-cluster connection cost cache.
#[derive(Debug, Clone)]
pub struct Fis {
    pub config: FrontierConfig,
    pub sampling: SamplingMode,
    pub evaluation: EvaluationMode,
    clusters: BTreeMap<u64, FrontierCluster>,
    frontier_flags: Vec<bool>,
    cell_cluster: Vec<u64>,
    next_id: u64,
    /// Symmetric cluster-to-cluster connection costs, keyed by ordered id pairs.
    cost_cache: BTreeMap<(u64, u64), f64>,
    limits_v_max: f64,
    limits_omega_max: f64,
}

impl Fis {
    pub fn new(
        geom: &GridGeom,
        config: FrontierConfig,
        sampling: SamplingMode,
        evaluation: EvaluationMode,
        v_max: f64,
        omega_max: f64,
    ) -> Self {
        Self {
            config,
            sampling,
            evaluation,
            clusters: BTreeMap::new(),
            frontier_flags: vec![false; geom.len()],
            cell_cluster: vec![0; geom.len()],
            next_id: 1,
            cost_cache: BTreeMap::new(),
            limits_v_max: v_max,
            limits_omega_max: omega_max,
        }
    }

    pub fn clusters(&self) -> impl Iterator<Item = &FrontierCluster> {
        self.clusters.values()
    }

    pub fn cluster(&self, id: u64) -> Option<&FrontierCluster> {
        self.clusters.get(&id)
    }

    pub fn active_clusters(&self) -> impl Iterator<Item = &FrontierCluster> {
        self.clusters.values().filter(|c| !c.dormant)
    }

    pub fn active_count(&self) -> usize {
        self.active_clusters().count()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    fn is_frontier_cell(map: &VoxelMap, c: [i64; 3]) -> bool {
        if map.state_at(c) != CellState::Free {
            return false;
        }
        map.geom
            .neighbors6(c)
            .any(|n| map.state_at(n) == CellState::Unknown)
    }

    /// Incrementally fold a map delta into the cluster set. The resulting
    /// clusters (as cell sets) are identical to a full recomputation.
    pub fn update(&mut self, view: &MapView, camera: &CameraModel, delta: &MapDelta) -> FisUpdate {
        let geom = &view.map.geom;
        let mut dirty: BTreeSet<u32> = BTreeSet::new();
        for &(idx, _, _) in &delta.changed {
            let c = geom.coords(idx as usize);
            dirty.insert(idx);
            for n in geom.neighbors6(c) {
                dirty.insert(geom.index(n) as u32);
            }
        }
        if dirty.is_empty() {
            return FisUpdate::default();
        }

        let mut seeds: BTreeSet<u32> = BTreeSet::new();
        let mut dissolved: BTreeSet<u64> = BTreeSet::new();
        for &idx in &dirty {
            let c = geom.coords(idx as usize);
            let now = Self::is_frontier_cell(view.map, c);
            let was = self.frontier_flags[idx as usize];
            if now == was {
                continue;
            }
            self.frontier_flags[idx as usize] = now;
            if now {
                seeds.insert(idx);
            } else {
                let owner = self.cell_cluster[idx as usize];
                if owner != 0 {
                    dissolved.insert(owner);
                }
            }
        }
        // Re-seed the remaining cells of every dissolved cluster.
        for id in &dissolved {
            if let Some(cl) = self.clusters.get(id) {
                for &cell in &cl.cells {
                    if self.frontier_flags[cell as usize] {
                        seeds.insert(cell);
                    }
                }
            }
        }
        if seeds.is_empty() && dissolved.is_empty() {
            return FisUpdate::default();
        }

        // Grow components over the frontier bitmap; absorb (and dissolve) any
        // existing cluster the growth touches so merges match a full recompute.
        let mut components: Vec<Vec<u32>> = Vec::new();
        let mut visited: BTreeSet<u32> = BTreeSet::new();
        for &seed in &seeds {
            if visited.contains(&seed) || !self.frontier_flags[seed as usize] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::new();
            queue.push_back(seed);
            visited.insert(seed);
            while let Some(idx) = queue.pop_front() {
                comp.push(idx);
                let owner = self.cell_cluster[idx as usize];
                if owner != 0 {
                    dissolved.insert(owner);
                }
                let c = geom.coords(idx as usize);
                for n in geom.neighbors26(c) {
                    let ni = geom.index(n) as u32;
                    if self.frontier_flags[ni as usize] && !visited.contains(&ni) {
                        // Absorbed clusters contribute their whole cell set through
                        // connectivity.
                        visited.insert(ni);
                        queue.push_back(ni);
                    }
                }
            }
            components.push(comp);
        }

        let mut out = FisUpdate::default();
        for id in &dissolved {
            if let Some(cl) = self.clusters.remove(id) {
                for &cell in &cl.cells {
                    if self.cell_cluster[cell as usize] == *id {
                        self.cell_cluster[cell as usize] = 0;
                    }
                }
                self.cost_cache.retain(|&(a, b), _| a != *id && b != *id);
                out.removed.push(*id);
            }
        }

        let max_extent_vox =
            (self.config.cluster_max_extent / geom.resolution).round().max(1.0) as i64;
        for comp in components {
            for part in split_component(geom, comp, max_extent_vox) {
                let id = self.next_id;
                self.next_id += 1;
                let cluster = self.build_cluster(id, part, view, camera);
                for &cell in &cluster.cells {
                    self.cell_cluster[cell as usize] = id;
                }
                self.clusters.insert(id, cluster);
                out.added.push(id);
            }
        }
        out
    }

    /// Rebuild everything from scratch (used by oracle tests).
    pub fn rebuild_full(&mut self, view: &MapView, camera: &CameraModel) {
        let geom = &view.map.geom;
        self.clusters.clear();
        self.cost_cache.clear();
        self.cell_cluster = vec![0; geom.len()];
        for idx in 0..geom.len() {
            self.frontier_flags[idx] = Self::is_frontier_cell(view.map, geom.coords(idx));
        }
        let mut visited = vec![false; geom.len()];
        let max_extent_vox =
            (self.config.cluster_max_extent / geom.resolution).round().max(1.0) as i64;
        for idx in 0..geom.len() {
            if !self.frontier_flags[idx] || visited[idx] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::new();
            queue.push_back(idx as u32);
            visited[idx] = true;
            while let Some(i) = queue.pop_front() {
                comp.push(i);
                for n in geom.neighbors26(geom.coords(i as usize)) {
                    let ni = geom.index(n);
                    if self.frontier_flags[ni] && !visited[ni] {
                        visited[ni] = true;
                        queue.push_back(ni as u32);
                    }
                }
            }
            for part in split_component(geom, comp, max_extent_vox) {
                let id = self.next_id;
                self.next_id += 1;
                let cluster = self.build_cluster(id, part, view, camera);
                for &cell in &cluster.cells {
                    self.cell_cluster[cell as usize] = id;
                }
                self.clusters.insert(id, cluster);
            }
        }
    }

    fn build_cluster(
        &self,
        id: u64,
        mut cells: Vec<u32>,
        view: &MapView,
        camera: &CameraModel,
    ) -> FrontierCluster {
        cells.sort_unstable();
        let geom = &view.map.geom;
        let centers: Vec<Vec3> = cells.iter().map(|&i| geom.center_of_index(i as usize)).collect();
        let average = centers.iter().sum::<Vec3>() / centers.len() as f64;
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for &i in &cells {
            let c = geom.coords(i as usize);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let (principal, normal_raw) = principal_axes(&centers, &average);

        let mut unknown_adjacent: BTreeSet<u32> = BTreeSet::new();
        let mut unknown_dir = Vec3::zeros();
        for &i in &cells {
            let c = geom.coords(i as usize);
            for n in geom.neighbors6(c) {
                if view.map.state_at(n) == CellState::Unknown {
                    unknown_adjacent.insert(geom.index(n) as u32);
                    unknown_dir += Vec3::new(
                        (n[0] - c[0]) as f64,
                        (n[1] - c[1]) as f64,
                        (n[2] - c[2]) as f64,
                    );
                }
            }
        }
        // Orient the normal away from the unknown mass (toward observed space).
        let normal = normal_raw.map(|n| {
            if unknown_dir.norm() > 1e-9 && n.dot(&unknown_dir) > 0.0 {
                -n
            } else {
                n
            }
        });

        let mut cluster = FrontierCluster {
            id,
            cells,
            average,
            bbox: (lo, hi),
            principal,
            normal,
            unknown_adjacent: unknown_adjacent.into_iter().collect(),
            best_pair: None,
            candidate_pairs: Vec::new(),
            best_single: None,
            dormant: false,
        };
        self.select_viewpoints(&mut cluster, view, camera);
        cluster
    }

    fn select_viewpoints(&self, cluster: &mut FrontierCluster, view: &MapView, camera: &CameraModel) {
        let line = match self.sampling {
            SamplingMode::Uniform => Vec::new(),
            _ => sample_line(cluster, view, camera, &self.config),
        };
        let selection = pair_select(
            &line,
            || sample_cylindrical(cluster, view, camera, &self.config),
            cluster,
            view,
            camera,
            &self.config,
            self.sampling,
            self.evaluation,
        );
        cluster.best_pair = selection.best;
        cluster.candidate_pairs = selection.top_k;
        cluster.best_single = selection.best_single;
        cluster.dormant = cluster.best_pair.is_none() && cluster.best_single.is_none();
    }

    /// Symmetric cluster-to-cluster connection cost; computed lazily against the
    /// map handed in and cached until either cluster is rebuilt.
    pub fn cluster_cost(&mut self, a: u64, b: u64, map: &VoxelMap) -> f64 {
        let key = (a.min(b), a.max(b));
        if let Some(&c) = self.cost_cache.get(&key) {
            return c;
        }
        let (pa, ya) = match self.cluster_anchor(a) {
            Some(v) => v,
            None => return f64::INFINITY,
        };
        let (pb, yb) = match self.cluster_anchor(b) {
            Some(v) => v,
            None => return f64::INFINITY,
        };
        let fwd = connection_cost(&pa, ya, &pb, yb, self.limits_v_max, self.limits_omega_max, map);
        let rev = connection_cost(&pb, yb, &pa, ya, self.limits_v_max, self.limits_omega_max, map);
        let cost = fwd.min(rev);
        self.cost_cache.insert(key, cost);
        cost
    }

    /// Representative pose of a cluster in the cost matrix: the best pair's
    /// average position and entry yaw (or the single viewpoint in no-pair mode).
    pub fn cluster_anchor(&self, id: u64) -> Option<(Vec3, f64)> {
        let c = self.clusters.get(&id)?;
        if let Some(p) = &c.best_pair {
            Some((p.average_position(), p.entry_yaw()))
        } else {
            c.best_single.as_ref().map(|v| (v.position, v.yaw))
        }
    }

    /// Assemble the (active clusters + 1) square cost matrix from the current
    /// pose. Row/column 0 is the pose; entries are seconds.
    pub fn cost_matrix(&mut self, pose: &Vec3, yaw: f64, map: &VoxelMap) -> (Vec<u64>, Vec<Vec<f64>>) {
        let ids: Vec<u64> = self.active_clusters().map(|c| c.id).collect();
        let n = ids.len() + 1;
        let mut m = vec![vec![0.0; n]; n];
        for (i, &id) in ids.iter().enumerate() {
            let (p, y) = self.cluster_anchor(id).unwrap();
            let c = connection_cost(pose, yaw, &p, y, self.limits_v_max, self.limits_omega_max, map);
            m[0][i + 1] = c;
            m[i + 1][0] = c;
        }
        for (i, &ida) in ids.iter().enumerate() {
            for (j, &idb) in ids.iter().enumerate().skip(i + 1) {
                let c = self.cluster_cost(ida, idb, map);
                m[i + 1][j + 1] = c;
                m[j + 1][i + 1] = c;
            }
        }
        (ids, m)
    }

    /// Text dump of the cluster table for debugging/regression diffs.
    pub fn write_dump(&self, w: &mut impl Write) -> Result<()> {
        for c in self.clusters.values() {
            let pair = match &c.best_pair {
                Some(p) => format!(
                    "{:.3} {:.3} {:.3} {:.3} | {:.3} {:.3} {:.3} {:.3}",
                    p.first.position.x,
                    p.first.position.y,
                    p.first.position.z,
                    p.first.yaw,
                    p.second.position.x,
                    p.second.position.y,
                    p.second.position.z,
                    p.second.yaw
                ),
                None => "-".to_string(),
            };
            let (ov, sc) = c
                .best_pair
                .as_ref()
                .map(|p| (p.overlap, p.score))
                .unwrap_or((0.0, 0.0));
            writeln!(
                w,
                "cluster {} | {} | {:.3} {:.3} {:.3} | {} | {:.3} | {:.4}{}",
                c.id,
                c.cells.len(),
                c.average.x,
                c.average.y,
                c.average.z,
                pair,
                ov,
                sc,
                if c.dormant { " dormant" } else { "" }
            )?;
        }
        Ok(())
    }
}

/// Largest- and smallest-variance unit directions of a point set. Returns
/// `(principal, Some(normal))`, or `(x-axis, None)` for degenerate sets.
fn principal_axes(points: &[Vec3], mean: &Vec3) -> (Vec3, Option<Vec3>) {
    if points.len() < 3 {
        return (Vec3::x(), None);
    }
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let axis_of = |i: usize| -> Vec3 {
        let v = eig.eigenvectors.column(order[i]).into_owned();
        // Deterministic sign: largest-magnitude component positive.
        let k = (0..3).max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap()).unwrap();
        if v[k] < 0.0 {
            -v
        } else {
            v
        }
    };
    let principal = axis_of(0);
    if eig.eigenvalues[order[0]] < 1e-12 {
        return (Vec3::x(), None);
    }
    (principal, Some(axis_of(2)))
}

/// Deterministic recursive split of one connected component at the bounding-box
/// midpoint of its longest axis, until every part fits the extent cap.
fn split_component(geom: &GridGeom, cells: Vec<u32>, max_extent: i64) -> Vec<Vec<u32>> {
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for &i in &cells {
        let c = geom.coords(i as usize);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let extent: Vec<i64> = (0..3).map(|a| hi[a] - lo[a] + 1).collect();
    let axis = (0..3).max_by_key(|&a| extent[a]).unwrap();
    if extent[axis] <= max_extent {
        return vec![cells];
    }
    let mid = (lo[axis] + hi[axis]) / 2;
    let (a, b): (Vec<u32>, Vec<u32>) = cells
        .into_iter()
        .partition(|&i| geom.coords(i as usize)[axis] <= mid);
    let mut out = Vec::new();
    if !a.is_empty() {
        out.extend(split_component(geom, a, max_extent));
    }
    if !b.is_empty() {
        out.extend(split_component(geom, b, max_extent));
    }
    out
}

/// Visibility of one map cell center from a camera pose, over known space. A
/// blocker is any non-free cell entered strictly before the target.
pub fn cell_visible(
    map: &VoxelMap,
    camera: &CameraModel,
    pos: &Vec3,
    yaw: f64,
    target_cell: [i64; 3],
) -> bool {
    let center = map.geom.center(target_cell);
    if !camera.in_frustum(pos, yaw, &center) {
        return false;
    }
    let dist = (center - pos).norm();
    let mut visible = true;
    map.geom.traverse(pos, &center, |c, t| {
        if c == target_cell || t >= dist - 1e-9 {
            return false;
        }
        if map.state_at(c) != CellState::Free {
            visible = false;
            return false;
        }
        true
    });
    visible
}

/// Visibility bitset of one candidate over the cluster cells.
fn visibility_mask(
    cluster: &FrontierCluster,
    map: &VoxelMap,
    camera: &CameraModel,
    pos: &Vec3,
    yaw: f64,
) -> (Vec<u64>, usize) {
    let words = cluster.cells.len().div_ceil(64);
    let mut mask = vec![0u64; words];
    let mut count = 0;
    for (k, &cell) in cluster.cells.iter().enumerate() {
        if cell_visible(map, camera, pos, yaw, map.geom.coords(cell as usize)) {
            mask[k / 64] |= 1 << (k % 64);
            count += 1;
        }
    }
    (mask, count)
}

fn viewpoint_position_ok(view: &MapView, cfg: &FrontierConfig, p: &Vec3) -> bool {
    let cell = view.map.geom.cell_of(p);
    if !view.map.geom.in_bounds(cell) {
        return false;
    }
    view.map.is_free_cell(cell) && view.esdf.at(cell) >= cfg.safety_radius
}

fn yaw_towards(from: &Vec3, to: &Vec3) -> f64 {
    (to.y - from.y).atan2(to.x - from.x)
}

/// Candidate viewpoints on lines parallel to the cluster's principal axis,
/// offset toward free space. Candidates on one line share a direction of
/// travel and individually keep the cluster within the horizontal FOV of that
/// direction, so a same-line pair can be flown straight without losing sight
/// of either the path or the frontier.
pub fn sample_line(
    cluster: &FrontierCluster,
    view: &MapView,
    camera: &CameraModel,
    cfg: &FrontierConfig,
) -> Vec<Viewpoint> {
    let normal = match cluster.normal {
        Some(n) => n,
        None => return Vec::new(),
    };
    let axis_h = horizontal_unit(&cluster.principal)
        .or_else(|| cluster.normal.and_then(|n| horizontal_unit(&Vec3::new(-n.y, n.x, 0.0))));
    let axis_h = match axis_h {
        Some(a) => a,
        None => return Vec::new(),
    };
    let normal_h = match horizontal_unit(&normal) {
        Some(n) => n,
        None => return Vec::new(),
    };

    let geom = &view.map.geom;
    let z_lo = geom.origin[2] + 2.0 * geom.resolution;
    let z_hi = geom.origin[2] + geom.dims[2] as f64 * geom.resolution - 2.0 * geom.resolution;
    let anchor_z = cluster.average.z.clamp(z_lo, z_hi);

    let theta_max = (0.5 * camera.horizontal_fov * 0.95).max(cfg.line_angle_min);
    let mut candidates = Vec::new();
    for (si, &s) in cfg.standoffs.iter().enumerate() {
        let anchor = Vec3::new(
            cluster.average.x + normal_h.x * s,
            cluster.average.y + normal_h.y * s,
            anchor_z,
        );
        for (di, dir) in [axis_h, -axis_h].iter().enumerate() {
            for k in 0..cfg.line_angle_count {
                let theta = cfg.line_angle_min
                    + (theta_max - cfg.line_angle_min) * k as f64
                        / (cfg.line_angle_count.max(2) - 1) as f64;
                let t = s / theta.tan();
                let p = anchor - dir * t;
                if !viewpoint_position_ok(view, cfg, &p) {
                    continue;
                }
                let d = (cluster.average - p).norm();
                if d < cfg.d_min || d > cfg.d_max {
                    continue;
                }
                let yaw = yaw_towards(&p, &cluster.average);
                let (_, coverage) = visibility_mask(cluster, view.map, camera, &p, yaw);
                if coverage < cfg.min_coverage_for(cluster.cells.len()) {
                    continue;
                }
                candidates.push(Viewpoint {
                    position: p,
                    yaw,
                    coverage,
                    line_key: Some((si as u8, di as u8)),
                });
            }
        }
    }
    trim_candidates(candidates, cfg.max_candidates)
}

/// Candidate viewpoints on cylindrical grids around the cluster average and the
/// extremal member cells along the principal axis.
pub fn sample_cylindrical(
    cluster: &FrontierCluster,
    view: &MapView,
    camera: &CameraModel,
    cfg: &FrontierConfig,
) -> Vec<Viewpoint> {
    let geom = &view.map.geom;
    let z_lo = geom.origin[2] + 2.0 * geom.resolution;
    let z_hi = geom.origin[2] + geom.dims[2] as f64 * geom.resolution - 2.0 * geom.resolution;

    let mut anchors = vec![cluster.average];
    if cluster.cells.len() > 4 {
        let proj = |i: u32| {
            let c = geom.center_of_index(i as usize);
            (c - cluster.average).dot(&cluster.principal)
        };
        let lo = cluster.cells.iter().copied().min_by(|&a, &b| proj(a).partial_cmp(&proj(b)).unwrap());
        let hi = cluster.cells.iter().copied().max_by(|&a, &b| proj(a).partial_cmp(&proj(b)).unwrap());
        for e in [lo, hi].into_iter().flatten() {
            anchors.push(geom.center_of_index(e as usize));
        }
    }

    let mut candidates = Vec::new();
    for anchor in anchors {
        for &radius in &cfg.standoffs {
            for k in 0..cfg.cyl_angle_count {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / cfg.cyl_angle_count as f64;
                for &dz in &cfg.cyl_heights {
                    let p = Vec3::new(
                        anchor.x + radius * phi.cos(),
                        anchor.y + radius * phi.sin(),
                        (anchor.z + dz).clamp(z_lo, z_hi),
                    );
                    if !viewpoint_position_ok(view, cfg, &p) {
                        continue;
                    }
                    let d = (cluster.average - p).norm();
                    if d < cfg.d_min || d > cfg.d_max {
                        continue;
                    }
                    let yaw = yaw_towards(&p, &cluster.average);
                    let (_, coverage) = visibility_mask(cluster, view.map, camera, &p, yaw);
                    if coverage < cfg.min_coverage_for(cluster.cells.len()) {
                        continue;
                    }
                    candidates.push(Viewpoint { position: p, yaw, coverage, line_key: None });
                }
            }
        }
    }
    trim_candidates(candidates, cfg.max_candidates)
}

/// Keep the strongest candidates by coverage (stable order for determinism).
fn trim_candidates(mut candidates: Vec<Viewpoint>, cap: usize) -> Vec<Viewpoint> {
    if candidates.len() <= cap {
        return candidates;
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .coverage
            .cmp(&candidates[a].coverage)
            .then(a.cmp(&b))
    });
    order.truncate(cap);
    order.sort_unstable();
    let mut out = Vec::with_capacity(cap);
    for (k, c) in candidates.drain(..).enumerate() {
        if order.binary_search(&k).is_ok() {
            out.push(c);
        }
    }
    out
}

fn horizontal_unit(v: &Vec3) -> Option<Vec3> {
    let h = Vec3::new(v.x, v.y, 0.0);
    let n = h.norm();
    if n < 0.3 {
        None
    } else {
        Some(h / n)
    }
}

/// Heuristic reconstructability score of a pair for one cluster:
/// `overlap * w_parallax * w_distance * w_angle`, all factors in [0, 1].
pub fn pair_score(
    first: &Viewpoint,
    second: &Viewpoint,
    overlap: f64,
    cluster: &FrontierCluster,
    cfg: &FrontierConfig,
) -> f64 {
    if overlap <= 0.0 {
        return 0.0;
    }
    let target = cluster.average;
    let alpha = crate::world::parallax_angle(&target, &first.position, &second.position);
    if alpha < cfg.alpha_min {
        return 0.0;
    }
    let w_par = (-((alpha - cfg.alpha_star).powi(2)) / (2.0 * cfg.sigma_alpha.powi(2))).exp();

    let d1 = (first.position - target).norm();
    let d2 = (second.position - target).norm();
    if d1 < cfg.d_min || d1 > cfg.d_max || d2 < cfg.d_min || d2 > cfg.d_max {
        return 0.0;
    }
    let ratio = d1.max(d2) / d1.min(d2).max(1e-9);
    let w_dist = (-(ratio - 1.0) / cfg.lambda_d).exp();

    let w_ang = match cluster.normal {
        Some(n) => {
            let c1 = ((first.position - target) / d1).dot(&n).max(0.0);
            let c2 = ((second.position - target) / d2).dot(&n).max(0.0);
            0.5 * (c1 + c2)
        }
        None => 1.0,
    };
    overlap * w_par * w_dist * w_ang
}

/// Result of pair selection for one cluster.
pub struct PairSelection {
    pub best: Option<ViewpointPair>,
    pub top_k: Vec<ViewpointPair>,
    pub best_single: Option<Viewpoint>,
    /// Whether the cylindrical sampler was invoked (observability for tests).
    pub used_cylindrical: bool,
}

/// Pick the best viewpoint pair for a cluster under the configured sampling and
/// evaluation modes. Line pairs are formed within one line only; the cylindrical
/// stage evaluates every unordered candidate pair. Ties break on the smaller
/// pair index (pairs are enumerated in candidate order).
pub fn pair_select(
    line_candidates: &[Viewpoint],
    cylindrical: impl FnOnce() -> Vec<Viewpoint>,
    cluster: &FrontierCluster,
    view: &MapView,
    camera: &CameraModel,
    cfg: &FrontierConfig,
    sampling: SamplingMode,
    evaluation: EvaluationMode,
) -> PairSelection {
    // No-pair mode: captures happen at travel intervals; each cluster only needs
    // its best single viewpoint.
    if evaluation == EvaluationMode::None {
        let mut cands = line_candidates.to_vec();
        let mut used_cyl = false;
        if sampling != SamplingMode::Line || cands.is_empty() {
            cands.extend(cylindrical());
            used_cyl = true;
        }
        let best_single = cands.into_iter().max_by(|a, b| a.coverage.cmp(&b.coverage));
        return PairSelection { best: None, top_k: Vec::new(), best_single, used_cylindrical: used_cyl };
    }

    let rank = |cands: &[Viewpoint], same_line_only: bool| -> Vec<ViewpointPair> {
        let masks: Vec<Vec<u64>> = cands
            .iter()
            .map(|v| visibility_mask(cluster, view.map, camera, &v.position, v.yaw).0)
            .collect();
        let total = cluster.cells.len() as f64;
        let mut pairs = Vec::new();
        for i in 0..cands.len() {
            for j in (i + 1)..cands.len() {
                if same_line_only && (cands[i].line_key != cands[j].line_key || cands[i].line_key.is_none()) {
                    continue;
                }
                if (cands[i].position - cands[j].position).norm() < 1e-6 {
                    continue;
                }
                let both = masks[i]
                    .iter()
                    .zip(&masks[j])
                    .map(|(a, b)| (a & b).count_ones() as f64)
                    .sum::<f64>();
                let overlap = both / total;
                if overlap <= 0.0 {
                    continue;
                }
                let score = match evaluation {
                    EvaluationMode::Overlap => overlap,
                    EvaluationMode::Heuristic => pair_score(&cands[i], &cands[j], overlap, cluster, cfg),
                    EvaluationMode::None => unreachable!(),
                };
                if score > 0.0 {
                    pairs.push(ViewpointPair {
                        first: cands[i].clone(),
                        second: cands[j].clone(),
                        overlap,
                        score,
                    });
                }
            }
        }
        // Stable sort keeps enumeration order on ties: smaller pair index wins.
        pairs.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        pairs
    };

    let finish = |mut pairs: Vec<ViewpointPair>, used_cyl: bool| -> PairSelection {
        pairs.truncate(cfg.top_k_pairs.max(1));
        let best = pairs.first().cloned();
        PairSelection { best, top_k: pairs, best_single: None, used_cylindrical: used_cyl }
    };

    match sampling {
        SamplingMode::Line => {
            let line_pairs = rank(line_candidates, true);
            if !line_pairs.is_empty() {
                return finish(line_pairs, false);
            }
            // No line fits this cluster at all: rescue with cylindrical sampling
            // so the frontier stays reconstructable.
            let cyl = cylindrical();
            finish(rank(&cyl, false), true)
        }
        SamplingMode::Uniform => {
            let cyl = cylindrical();
            finish(rank(&cyl, false), true)
        }
        SamplingMode::Combined => {
            let line_pairs = rank(line_candidates, true);
            if line_pairs.first().map(|p| p.score >= cfg.score_accept).unwrap_or(false) {
                return finish(line_pairs, false);
            }
            let mut all = line_candidates.to_vec();
            all.extend(cylindrical());
            finish(rank(&all, false), true)
        }
    }
}

/// Heading of the horizontal displacement from `p_i` to `p_j`, full quadrant.
/// `None` when the displacement is vertical (caller falls back to endpoint yaw).
pub fn intermediate_yaw(p_i: &Vec3, p_j: &Vec3) -> Option<f64> {
    let dx = p_j.x - p_i.x;
    let dy = p_j.y - p_i.y;
    if dx.abs() < 1e-9 && dy.abs() < 1e-9 {
        None
    } else {
        Some(dy.atan2(dx))
    }
}

/// Line-of-sight check over known free space.
pub fn line_of_sight_free(map: &VoxelMap, from: &Vec3, to: &Vec3) -> bool {
    let mut clear = true;
    map.geom.traverse(from, to, |c, _| {
        if map.state_at(c) != CellState::Free {
            clear = false;
            return false;
        }
        true
    });
    clear
}

/// Shortest collision-free path length through the free cells of the map,
/// 26-connected A*. `None` when no path exists. Straight-line distance is
/// returned without a search when the segment is already free.
pub fn free_path_length(map: &VoxelMap, from: &Vec3, to: &Vec3) -> Option<f64> {
    if line_of_sight_free(map, from, to) {
        return Some((to - from).norm());
    }
    grid_path_length(&map.geom, |c| map.is_free_cell(c), from, to)
}

/// A* shortest path length over passable cells, metric step costs.
pub fn grid_path_length(
    geom: &GridGeom,
    passable: impl Fn([i64; 3]) -> bool,
    from: &Vec3,
    to: &Vec3,
) -> Option<f64> {
    let start = geom.cell_of(from);
    let goal = geom.cell_of(to);
    if !geom.in_bounds(start) || !geom.in_bounds(goal) || !passable(start) || !passable(goal) {
        return None;
    }
    let res = geom.resolution;
    let h = |c: [i64; 3]| -> f64 {
        let dx = (c[0] - goal[0]) as f64;
        let dy = (c[1] - goal[1]) as f64;
        let dz = (c[2] - goal[2]) as f64;
        (dx * dx + dy * dy + dz * dz).sqrt() * res
    };

    #[derive(PartialEq)]
    struct Node(f64, u64, usize);
    impl Eq for Node {}
    impl Ord for Node {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            other
                .0
                .partial_cmp(&self.0)
                .unwrap()
                .then(other.1.cmp(&self.1))
        }
    }
    impl PartialOrd for Node {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let mut dist: BTreeMap<usize, f64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    let s_idx = geom.index(start);
    dist.insert(s_idx, 0.0);
    heap.push(Node(h(start), 0, s_idx));
    let mut counter = 1u64;
    while let Some(Node(_, _, idx)) = heap.pop() {
        let c = geom.coords(idx);
        let g = dist[&idx];
        if c == goal {
            return Some(g);
        }
        for n in geom.neighbors26(c) {
            if !passable(n) {
                continue;
            }
            let step = (((n[0] - c[0]).pow(2) + (n[1] - c[1]).pow(2) + (n[2] - c[2]).pow(2)) as f64)
                .sqrt()
                * res;
            let ni = geom.index(n);
            let ng = g + step;
            if dist.get(&ni).map(|&d| ng < d - 1e-12).unwrap_or(true) {
                dist.insert(ni, ng);
                heap.push(Node(ng + h(n), counter, ni));
                counter += 1;
            }
        }
    }
    None
}

/// Time lower bound for moving between two oriented poses: translation along a
/// collision-free path races rotation through the intermediate heading.
pub fn connection_cost(
    from: &Vec3,
    from_yaw: f64,
    to: &Vec3,
    to_yaw: f64,
    v_max: f64,
    omega_max: f64,
    map: &VoxelMap,
) -> f64 {
    let length = match free_path_length(map, from, to) {
        Some(l) => l,
        None => return f64::INFINITY,
    };
    let rot = match intermediate_yaw(from, to) {
        Some(gamma_k) => angle_diff(from_yaw, gamma_k) + angle_diff(gamma_k, to_yaw),
        None => angle_diff(from_yaw, to_yaw),
    };
    (length / v_max).max(rot / omega_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::{compute_esdf, OccupancyParams};
    use crate::math::Aabb;
    use crate::world::{covisible, Environment, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PI: f64 = std::f64::consts::PI;

    fn blank_map(dims: [usize; 3], res: f64) -> VoxelMap {
        VoxelMap::new(GridGeom::new(Vec3::zeros(), res, dims), OccupancyParams::default())
    }

    /// Paint cell states through the public fuse interface.
    fn paint(map: &mut VoxelMap, f: impl Fn([i64; 3]) -> Option<CellState>) -> MapDelta {
        let mut incs = Vec::new();
        for idx in 0..map.geom.len() {
            match f(map.geom.coords(idx)) {
                Some(CellState::Free) => incs.push((idx as u32, -0.4f32)),
                Some(CellState::Occupied) => incs.push((idx as u32, 3.5f32)),
                _ => {}
            }
        }
        map.fuse(&MapDelta { increments: incs, changed: vec![] }).unwrap()
    }

    fn default_cam() -> CameraModel {
        CameraModel { max_range: 6.0, ..CameraModel::default() }
    }

    fn default_fis(geom: &GridGeom) -> Fis {
        Fis::new(
            geom,
            FrontierConfig::default(),
            SamplingMode::Combined,
            EvaluationMode::Heuristic,
            0.5,
            0.9,
        )
    }

    /// Free half-space x < wall_x, unknown beyond: produces a planar frontier.
    fn half_open_map(dims: [usize; 3], res: f64, wall_x: f64) -> (VoxelMap, MapDelta) {
        let mut map = blank_map(dims, res);
        let wall_cell = (wall_x / res) as i64;
        let delta = paint(&mut map, |c| {
            if c[0] < wall_cell {
                Some(CellState::Free)
            } else {
                None
            }
        });
        (map, delta)
    }

    #[test]
    fn intermediate_yaw_quadrants() {
        let y = |a: [f64; 3], b: [f64; 3]| {
            intermediate_yaw(&Vec3::new(a[0], a[1], a[2]), &Vec3::new(b[0], b[1], b[2]))
        };
        assert!((y([0.0, 0.0, 1.0], [1.0, 0.0, 1.0]).unwrap() - 0.0).abs() < 1e-12);
        assert!((y([0.0, 0.0, 1.0], [0.0, 1.0, 1.0]).unwrap() - PI / 2.0).abs() < 1e-12);
        assert!((y([1.0, 1.0, 1.0], [0.0, 0.0, 1.0]).unwrap() - (-3.0 * PI / 4.0)).abs() < 1e-12);
        assert!(y([1.0, 1.0, 0.0], [1.0, 1.0, 5.0]).is_none());
    }

    #[test]
    fn empty_delta_changes_nothing() {
        let (map, delta) = half_open_map([40, 40, 10], 0.25, 6.0);
        let esdf = compute_esdf(&map);
        let view = MapView { map: &map, esdf: &esdf };
        let cam = default_cam();
        let mut fis = default_fis(&map.geom);
        fis.update(&view, &cam, &delta);
        let before: Vec<u64> = fis.clusters().map(|c| c.id).collect();
        let upd = fis.update(&view, &cam, &MapDelta::default());
        assert!(upd.removed.is_empty() && upd.added.is_empty());
        let after: Vec<u64> = fis.clusters().map(|c| c.id).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn fully_explored_map_has_no_frontiers() {
        let mut map = blank_map([20, 20, 8], 0.25);
        let delta = paint(&mut map, |_| Some(CellState::Free));
        let esdf = compute_esdf(&map);
        let view = MapView { map: &map, esdf: &esdf };
        let mut fis = default_fis(&map.geom);
        fis.update(&view, &cam_wide(), &delta);
        assert!(fis.is_empty());
    }

    fn cam_wide() -> CameraModel {
        default_cam()
    }

    /// Independent full recompute: scan + BFS components, then the same split
    /// rule. Compares the cell partition, not ids.
    fn full_recompute_components(map: &VoxelMap, max_extent_m: f64) -> Vec<Vec<u32>> {
        let geom = &map.geom;
        let is_frontier = |c: [i64; 3]| -> bool {
            map.state_at(c) == CellState::Free
                && geom.neighbors6(c).any(|n| map.state_at(n) == CellState::Unknown)
        };
        let mut flags = vec![false; geom.len()];
        for idx in 0..geom.len() {
            flags[idx] = is_frontier(geom.coords(idx));
        }
        let mut seen = vec![false; geom.len()];
        let mut comps = Vec::new();
        for idx in 0..geom.len() {
            if !flags[idx] || seen[idx] {
                continue;
            }
            let mut q = VecDeque::new();
            let mut comp = Vec::new();
            q.push_back(idx as u32);
            seen[idx] = true;
            while let Some(i) = q.pop_front() {
                comp.push(i);
                for n in geom.neighbors26(geom.coords(i as usize)) {
                    let ni = geom.index(n);
                    if flags[ni] && !seen[ni] {
                        seen[ni] = true;
                        q.push_back(ni as u32);
                    }
                }
            }
            let max_extent_vox = (max_extent_m / geom.resolution).round().max(1.0) as i64;
            comps.extend(split_component(geom, comp, max_extent_vox));
        }
        comps
    }

    #[test]
    fn incremental_update_equals_full_recompute() {
        let mut map = blank_map([48, 48, 12], 0.25);
        let esdf0 = compute_esdf(&map);
        let cam = default_cam();
        let mut fis = default_fis(&map.geom);
        {
            let view = MapView { map: &map, esdf: &esdf0 };
            fis.update(&view, &cam, &MapDelta::default());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for step in 0..30 {
            // Random box of cells becomes free (or occupied occasionally).
            let cx = rng.random_range(0..44i64);
            let cy = rng.random_range(0..44i64);
            let cz = rng.random_range(0..9i64);
            let ex = rng.random_range(2..8i64);
            let ey = rng.random_range(2..8i64);
            let ez = rng.random_range(1..4i64);
            let occupy = rng.random::<f64>() < 0.15;
            let delta = paint(&mut map, |c| {
                if c[0] >= cx && c[0] < cx + ex && c[1] >= cy && c[1] < cy + ey && c[2] >= cz && c[2] < cz + ez {
                    Some(if occupy { CellState::Occupied } else { CellState::Free })
                } else {
                    None
                }
            });
            let esdf = compute_esdf(&map);
            let view = MapView { map: &map, esdf: &esdf };
            fis.update(&view, &cam, &delta);

            let oracle = full_recompute_components(&map, fis.config.cluster_max_extent);
            let mut incr_cells: Vec<u32> = fis.clusters().flat_map(|c| c.cells.iter().copied()).collect();
            incr_cells.sort_unstable();
            let mut full_cells: Vec<u32> = oracle.iter().flatten().copied().collect();
            full_cells.sort_unstable();
            assert_eq!(incr_cells, full_cells, "cell union diverged at step {step}");
            assert_eq!(
                fis.clusters().count(),
                oracle.len(),
                "cluster count diverged at step {step}"
            );
        }
    }

    fn build_wall_cluster(
        dims: [usize; 3],
        res: f64,
        wall_x: f64,
    ) -> (VoxelMap, Esdf, Fis, u64) {
        let (map, delta) = half_open_map(dims, res, wall_x);
        let esdf = compute_esdf(&map);
        let cam = default_cam();
        let mut fis = default_fis(&map.geom);
        {
            let view = MapView { map: &map, esdf: &esdf };
            fis.update(&view, &cam, &delta);
        }
        // Pick the cluster closest to the map center height.
        let mid = Vec3::new(
            wall_x,
            dims[1] as f64 * res * 0.5,
            dims[2] as f64 * res * 0.5,
        );
        let id = fis
            .clusters()
            .min_by(|a, b| {
                (a.average - mid)
                    .norm()
                    .partial_cmp(&(b.average - mid).norm())
                    .unwrap()
            })
            .unwrap()
            .id;
        (map, esdf, fis, id)
    }

    #[test]
    fn planar_frontier_line_candidates_share_standoff() {
        let (map, esdf, fis, id) = build_wall_cluster([48, 48, 12], 0.25, 8.0);
        let cluster = fis.cluster(id).unwrap();
        let view = MapView { map: &map, esdf: &esdf };
        let cfg = FrontierConfig::default();
        let cands = sample_line(cluster, &view, &default_cam(), &cfg);
        assert!(!cands.is_empty(), "no line candidates on an open wall frontier");
        // The frontier plane is x = avg.x; candidates must sit at one of the
        // configured standoffs from it, within a voxel.
        for c in &cands {
            let gap = (cluster.average.x - c.position.x).abs();
            let (si, _) = c.line_key.unwrap();
            let nominal = cfg.standoffs[si as usize];
            // Lateral offset is along the wall normal; longitudinal along the wall.
            let lateral = gap;
            assert!(
                (lateral - nominal).abs() <= map.geom.resolution + 1e-9,
                "candidate at lateral {lateral}, standoff {nominal}"
            );
        }
    }

    #[test]
    fn line_pairs_keep_cluster_and_path_in_fov() {
        let (map, esdf, fis, id) = build_wall_cluster([48, 48, 12], 0.25, 8.0);
        let cluster = fis.cluster(id).unwrap();
        let view = MapView { map: &map, esdf: &esdf };
        let cfg = FrontierConfig::default();
        let cam = default_cam();
        let cands = sample_line(cluster, &view, &cam, &cfg);
        let half_fov = 0.5 * cam.horizontal_fov + 1e-9;
        let mut pairs_checked = 0;
        for i in 0..cands.len() {
            for j in (i + 1)..cands.len() {
                if cands[i].line_key != cands[j].line_key {
                    continue;
                }
                let (a, b) = (&cands[i], &cands[j]);
                let line_dir = match intermediate_yaw(&a.position, &b.position) {
                    Some(d) => d,
                    None => continue,
                };
                // Endpoint yaws face the average and stay within FOV of travel.
                assert!(angle_diff(a.yaw, line_dir) <= half_fov);
                assert!(angle_diff(b.yaw, line_dir) <= half_fov);
                // Along the straight path with interpolated yaw, both the motion
                // direction and the cluster average stay inside the horizontal FOV.
                for k in 0..=20 {
                    let t = k as f64 / 20.0;
                    let p = a.position + (b.position - a.position) * t;
                    let yaw = crate::math::wrap_angle(a.yaw + crate::math::wrap_angle(b.yaw - a.yaw) * t);
                    let bearing = yaw_towards(&p, &cluster.average);
                    assert!(
                        angle_diff(yaw, bearing) <= half_fov,
                        "cluster leaves FOV mid-traversal"
                    );
                    assert!(angle_diff(yaw, line_dir) <= half_fov, "path leaves FOV");
                }
                pairs_checked += 1;
            }
        }
        assert!(pairs_checked > 0, "no same-line pairs to check");
    }

    #[test]
    fn cylindrical_open_space_radius_and_rejection_behind_wall() {
        // Small cluster (<= 4 cells) so only the average anchor is used.
        let mut map = blank_map([60, 60, 12], 0.25);
        let delta = paint(&mut map, |c| {
            // Free everywhere except a 2x2x1 unknown patch at the center height.
            let unknown = c[0] >= 29 && c[0] <= 30 && c[1] >= 29 && c[1] <= 30 && c[2] == 6;
            if unknown {
                None
            } else {
                Some(CellState::Free)
            }
        });
        let esdf = compute_esdf(&map);
        let cam = default_cam();
        let mut fis = default_fis(&map.geom);
        let view = MapView { map: &map, esdf: &esdf };
        fis.update(&view, &cam, &delta);
        let cluster = fis.clusters().next().expect("one cluster");

        let cfg = FrontierConfig {
            standoffs: vec![3.0],
            cyl_heights: vec![0.0],
            min_coverage_abs: 1,
            min_coverage_frac: 0.05,
            max_candidates: 64,
            ..FrontierConfig::default()
        };
        let cands = sample_cylindrical(cluster, &view, &cam, &cfg);
        assert!(!cands.is_empty() && cands.len() <= 16 * 3, "{} candidates", cands.len());
        // Every candidate sits on the radius-3 cylinder of one of the anchors
        // (average or extremal member cells).
        let proj = |i: u32| {
            let c = map.geom.center_of_index(i as usize);
            (c - cluster.average).dot(&cluster.principal)
        };
        let lo = *cluster.cells.iter().min_by(|&&a, &&b| proj(a).partial_cmp(&proj(b)).unwrap()).unwrap();
        let hi = *cluster.cells.iter().max_by(|&&a, &&b| proj(a).partial_cmp(&proj(b)).unwrap()).unwrap();
        let anchors = [
            cluster.average,
            map.geom.center_of_index(lo as usize),
            map.geom.center_of_index(hi as usize),
        ];
        for c in &cands {
            let best_gap = anchors
                .iter()
                .map(|a| ((Vec3::new(c.position.x, c.position.y, a.z) - a).norm() - 3.0).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(best_gap <= 1e-9, "candidate off all sampling cylinders by {best_gap}");
        }

        // Now wall off one side completely: candidates behind the wall see
        // nothing and must be rejected by the coverage filter.
        let wall_delta = paint(&mut map, |c| {
            if c[0] == 34 {
                Some(CellState::Occupied)
            } else {
                None
            }
        });
        let esdf2 = compute_esdf(&map);
        let view2 = MapView { map: &map, esdf: &esdf2 };
        let mut fis2 = default_fis(&map.geom);
        fis2.update(&view2, &cam, &delta);
        fis2.update(&view2, &cam, &wall_delta);
        let cl2 = fis2
            .clusters()
            .min_by(|a, b| {
                (a.average - cluster.average)
                    .norm()
                    .partial_cmp(&(b.average - cluster.average).norm())
                    .unwrap()
            })
            .unwrap();
        let cands2 = sample_cylindrical(cl2, &view2, &cam, &cfg);
        assert!(!cands2.is_empty());
        for c in &cands2 {
            // The wall plane occupies x = 8.5..8.75 across the whole map.
            assert!(c.position.x < 8.5 + 1e-9, "candidate behind the wall at {:?}", c.position);
        }
    }

    /// Independent occlusion code: dense sampling along the segment.
    fn visible_oracle(map: &VoxelMap, cam: &CameraModel, pos: &Vec3, yaw: f64, cell: [i64; 3]) -> bool {
        let center = map.geom.center(cell);
        if !cam.in_frustum(pos, yaw, &center) {
            return false;
        }
        let dist = (center - pos).norm();
        let steps = (dist / (map.geom.resolution / 5.0)).ceil() as usize;
        for s in 0..steps {
            let t = dist * s as f64 / steps as f64;
            let p = pos + (center - pos) * (t / dist);
            let c = map.geom.cell_of(&p);
            if c == cell {
                break;
            }
            if map.geom.in_bounds(c) && map.state_at(c) != CellState::Free {
                return false;
            }
        }
        true
    }

    #[test]
    fn coverage_matches_bruteforce_visibility() {
        let (map, esdf, fis, id) = build_wall_cluster([40, 40, 12], 0.25, 7.0);
        let cluster = fis.cluster(id).unwrap();
        let view = MapView { map: &map, esdf: &esdf };
        let cam = default_cam();
        let cands = sample_cylindrical(cluster, &view, &cam, &FrontierConfig::default());
        assert!(!cands.is_empty());
        for c in cands.iter().take(8) {
            let oracle: usize = cluster
                .cells
                .iter()
                .filter(|&&i| visible_oracle(&map, &cam, &c.position, c.yaw, map.geom.coords(i as usize)))
                .count();
            let diff = (oracle as i64 - c.coverage as i64).abs();
            assert!(
                diff <= (cluster.cells.len() as i64 / 50).max(1),
                "coverage {} vs oracle {}",
                c.coverage,
                oracle
            );
        }
    }

    fn synthetic_cluster(normal: Option<Vec3>) -> FrontierCluster {
        FrontierCluster {
            id: 1,
            cells: vec![0],
            average: Vec3::zeros(),
            bbox: ([0, 0, 0], [0, 0, 0]),
            principal: Vec3::y(),
            normal,
            unknown_adjacent: vec![],
            best_pair: None,
            candidate_pairs: vec![],
            best_single: None,
            dormant: false,
        }
    }

    fn vp(pos: Vec3, avg: Vec3) -> Viewpoint {
        Viewpoint { position: pos, yaw: yaw_towards(&pos, &avg), coverage: 1, line_key: None }
    }

    #[test]
    fn pair_score_zero_baseline_is_zero() {
        let cfg = FrontierConfig::default();
        let cluster = synthetic_cluster(Some(Vec3::x()));
        let p = vp(Vec3::new(3.0, 0.0, 0.0), Vec3::zeros());
        assert_eq!(pair_score(&p, &p.clone(), 1.0, &cluster, &cfg), 0.0);
    }

    #[test]
    fn pair_score_ideal_symmetric_pair() {
        let cfg = FrontierConfig::default();
        let half = cfg.alpha_star / 2.0;
        let r = 3.0;
        let p1 = vp(Vec3::new(r * half.cos(), r * half.sin(), 0.0), Vec3::zeros());
        let p2 = vp(Vec3::new(r * half.cos(), -r * half.sin(), 0.0), Vec3::zeros());

        // Degenerate cluster: the angle factor drops out, so the score equals
        // overlap exactly (parallax at the optimum, equal distances).
        let degenerate = synthetic_cluster(None);
        let s = pair_score(&p1, &p2, 1.0, &degenerate, &cfg);
        assert!((s - 1.0).abs() < 1e-9, "score {s}");

        // With a normal, only the small off-normal cosine remains.
        let cluster = synthetic_cluster(Some(Vec3::x()));
        let s2 = pair_score(&p1, &p2, 1.0, &cluster, &cfg);
        assert!((s2 - half.cos()).abs() < 1e-9, "score {s2}");
        assert!(s2 > 0.95);
    }

    #[test]
    fn pair_score_respects_distance_band_and_parallax_gate() {
        let cfg = FrontierConfig::default();
        let cluster = synthetic_cluster(None);
        // Below alpha_min.
        let tiny = 0.4 * cfg.alpha_min;
        let p1 = vp(Vec3::new(3.0, 3.0 * tiny.tan(), 0.0), Vec3::zeros());
        let p2 = vp(Vec3::new(3.0, 0.0, 0.0), Vec3::zeros());
        assert_eq!(pair_score(&p1, &p2, 1.0, &cluster, &cfg), 0.0);
        // Outside the distance band.
        let far = vp(Vec3::new(cfg.d_max + 1.0, 0.0, 0.0), Vec3::zeros());
        let near = vp(Vec3::new(0.0, 2.0, 0.0), Vec3::zeros());
        assert_eq!(pair_score(&far, &near, 1.0, &cluster, &cfg), 0.0);
    }

    #[test]
    fn pair_select_short_circuits_cylindrical_on_good_line_pairs() {
        let (map, esdf, fis, id) = build_wall_cluster([48, 48, 12], 0.25, 8.0);
        let cluster = fis.cluster(id).unwrap();
        let view = MapView { map: &map, esdf: &esdf };
        let cam = default_cam();
        let cfg = FrontierConfig { score_accept: 0.01, ..FrontierConfig::default() };
        let line = sample_line(cluster, &view, &cam, &cfg);
        assert!(!line.is_empty());
        let sel = pair_select(
            &line,
            || panic!("cylindrical sampler must not run when a line pair is accepted"),
            cluster,
            &view,
            &cam,
            &cfg,
            SamplingMode::Combined,
            EvaluationMode::Heuristic,
        );
        assert!(!sel.used_cylindrical);
        let best = sel.best.expect("accepted line pair");
        assert!(best.score >= cfg.score_accept);
        assert_eq!(best.first.line_key, best.second.line_key);
    }

    #[test]
    fn pair_select_argmax_matches_bruteforce() {
        let (map, esdf, fis, id) = build_wall_cluster([48, 48, 12], 0.25, 8.0);
        let cluster = fis.cluster(id).unwrap();
        let view = MapView { map: &map, esdf: &esdf };
        let cam = default_cam();
        let cfg = FrontierConfig::default();
        let line = sample_line(cluster, &view, &cam, &cfg);
        let cyl = sample_cylindrical(cluster, &view, &cam, &cfg);
        let sel = pair_select(
            &line,
            || cyl.clone(),
            cluster,
            &view,
            &cam,
            &cfg,
            SamplingMode::Combined,
            EvaluationMode::Heuristic,
        );
        let best = sel.best.expect("pair");

        // Brute force over the same union with the same score definition.
        let mut all = line.clone();
        all.extend(cyl.clone());
        let mut best_brute = 0.0;
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                if (all[i].position - all[j].position).norm() < 1e-6 {
                    continue;
                }
                let (mi, _) = visibility_mask(cluster, &map, &cam, &all[i].position, all[i].yaw);
                let (mj, _) = visibility_mask(cluster, &map, &cam, &all[j].position, all[j].yaw);
                let both: f64 = mi.iter().zip(&mj).map(|(a, b)| (a & b).count_ones() as f64).sum();
                let overlap = both / cluster.cells.len() as f64;
                if overlap <= 0.0 {
                    continue;
                }
                let s = pair_score(&all[i], &all[j], overlap, cluster, &cfg);
                if s > best_brute {
                    best_brute = s;
                }
            }
        }
        assert!(
            (best.score - best_brute).abs() < 1e-12,
            "selected {} vs brute {}",
            best.score,
            best_brute
        );
    }

    #[test]
    fn connection_cost_basics() {
        let mut map = blank_map([40, 40, 12], 0.25);
        paint(&mut map, |_| Some(CellState::Free));
        let p = Vec3::new(2.0, 2.0, 1.0);
        assert_eq!(connection_cost(&p, 0.3, &p, 0.3, 0.5, 0.9, &map), 0.0);

        // Straight 4 m, aligned yaws: translation-dominated, 8 s at 0.5 m/s.
        let q = Vec3::new(6.0, 2.0, 1.0);
        let c = connection_cost(&p, 0.0, &q, 0.0, 0.5, 0.9, &map);
        assert!((c - 8.0).abs() < 1e-9, "cost {c}");
    }

    #[test]
    fn connection_cost_with_intermediate_yaw_never_below_fuel_style() {
        let mut map = blank_map([40, 40, 12], 0.25);
        paint(&mut map, |_| Some(CellState::Free));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let a = Vec3::new(rng.random_range(1.0..9.0), rng.random_range(1.0..9.0), rng.random_range(0.5..2.5));
            let b = Vec3::new(rng.random_range(1.0..9.0), rng.random_range(1.0..9.0), rng.random_range(0.5..2.5));
            let ya = rng.random_range(-PI..PI);
            let yb = rng.random_range(-PI..PI);
            let with_gamma = connection_cost(&a, ya, &b, yb, 0.5, 0.9, &map);
            let fuel_style = ((b - a).norm() / 0.5).max(angle_diff(ya, yb) / 0.9);
            assert!(
                with_gamma >= fuel_style - 1e-9,
                "gamma cost {with_gamma} below endpoint-only {fuel_style}"
            );
        }
    }

    #[test]
    fn connection_cost_no_path_is_infinite() {
        let mut map = blank_map([40, 40, 8], 0.25);
        // Two free rooms separated by a full occupied slab.
        paint(&mut map, |c| {
            if c[0] == 20 {
                Some(CellState::Occupied)
            } else {
                Some(CellState::Free)
            }
        });
        let a = Vec3::new(2.0, 5.0, 1.0);
        let b = Vec3::new(8.0, 5.0, 1.0);
        assert!(connection_cost(&a, 0.0, &b, 0.0, 0.5, 0.9, &map).is_infinite());
    }

    #[test]
    fn cost_matrix_is_symmetric_sized_and_bounded() {
        let (map, esdf, mut fis, _) = build_wall_cluster([48, 48, 12], 0.25, 8.0);
        let _ = esdf;
        let pose = Vec3::new(2.0, 6.0, 1.5);
        let (ids, m) = fis.cost_matrix(&pose, 0.0, &map);
        assert_eq!(m.len(), fis.active_count() + 1);
        assert_eq!(ids.len() + 1, m.len());
        for i in 0..m.len() {
            assert_eq!(m[i][i], 0.0);
            for j in 0..m.len() {
                assert!((m[i][j] - m[j][i]).abs() < 1e-12, "asymmetry at {i},{j}");
            }
        }
        for (i, &id) in ids.iter().enumerate() {
            let (p, _) = fis.cluster_anchor(id).unwrap();
            let lb = (p - pose).norm() / 0.5;
            assert!(m[0][i + 1] >= lb - 1e-9, "entry below translation lower bound");
        }
    }

    #[test]
    fn overlap_matches_monte_carlo_frustum_oracle() {
        // Wall frontier at x = 8 with a real slab partially occluding it. The
        // map-raycast overlap must agree with a Monte-Carlo oracle that samples
        // cluster cells and classifies them with the independent ground-truth
        // covisibility code (frustum + voxel occlusion).
        let env = Environment {
            bounds: Aabb::new([0.0, 0.0, 0.0], [12.0, 12.0, 3.0]),
            obstacles: vec![Aabb::new([6.5, 4.0, 0.0], [7.0, 6.5, 3.0])],
            resolution: 0.25,
            seed: 0,
        };
        let grid = env.voxelize();
        let mut map = blank_map([48, 48, 12], 0.25);
        let geom = map.geom;
        paint(&mut map, |c| {
            let p = geom.center(c);
            if c[0] >= 32 {
                None
            } else if env.point_in_obstacle(&p) {
                Some(CellState::Occupied)
            } else {
                Some(CellState::Free)
            }
        });
        let esdf = compute_esdf(&map);
        let view = MapView { map: &map, esdf: &esdf };
        let cam = default_cam();
        let mut fis = default_fis(&map.geom);
        fis.rebuild_full(&view, &cam);
        // A cluster straddling the slab's shadow as seen from the oblique view.
        let cluster = fis
            .clusters()
            .filter(|c| c.average.y > 4.5 && c.average.y < 6.2)
            .max_by_key(|c| c.cells.len())
            .expect("cluster behind the slab");

        // One oblique view partially blocked by the slab, one clear of it.
        let pa = Vec3::new(4.2, 8.8, 1.5);
        let pb = Vec3::new(6.8, 8.0, 1.5);
        let a = Viewpoint {
            position: pa,
            yaw: yaw_towards(&pa, &cluster.average),
            coverage: 0,
            line_key: None,
        };
        let b = Viewpoint {
            position: pb,
            yaw: yaw_towards(&pb, &cluster.average),
            coverage: 0,
            line_key: None,
        };
        let (ma, _) = visibility_mask(cluster, &map, &cam, &a.position, a.yaw);
        let (mb, _) = visibility_mask(cluster, &map, &cam, &b.position, b.yaw);
        let both: f64 = ma.iter().zip(&mb).map(|(x, y)| (x & y).count_ones() as f64).sum();
        let overlap = both / cluster.cells.len() as f64;
        assert!(overlap > 0.0 && overlap < 1.0, "want a partial overlap, got {overlap}");

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = 0usize;
        let n = 20000usize;
        for _ in 0..n {
            let cell = cluster.cells[rng.random_range(0..cluster.cells.len())];
            let center = map.geom.center_of_index(cell as usize);
            let pose_a = Pose { position: a.position, yaw: a.yaw };
            let pose_b = Pose { position: b.position, yaw: b.yaw };
            if covisible(&center, &pose_a, &cam, &grid) && covisible(&center, &pose_b, &cam, &grid) {
                hits += 1;
            }
        }
        let mc = hits as f64 / n as f64;
        assert!(
            (mc - overlap).abs() <= 0.02,
            "cell overlap {overlap} vs Monte-Carlo {mc}"
        );
    }

    #[test]
    fn fis_dump_and_determinism() {
        let (map, esdf, fis, _) = build_wall_cluster([48, 48, 12], 0.25, 8.0);
        let mut buf = Vec::new();
        fis.write_dump(&mut buf).unwrap();
        assert!(!buf.is_empty());

        // Rebuilding from the same map yields identical cluster tables.
        let view = MapView { map: &map, esdf: &esdf };
        let mut fis2 = default_fis(&map.geom);
        fis2.rebuild_full(&view, &default_cam());
        let mut buf2 = Vec::new();
        fis2.write_dump(&mut buf2).unwrap();
        let mut fis3 = default_fis(&map.geom);
        fis3.rebuild_full(&view, &default_cam());
        let mut buf3 = Vec::new();
        fis3.write_dump(&mut buf3).unwrap();
        assert_eq!(buf2, buf3);
    }
}


//! Volumetric occupancy mapping: log-odds voxel map, exact Euclidean signed
//! distance field, and the coarse hgrid decomposition used as workload units.

use crate::error::{Result, SimError};
use crate::grid::GridGeom;
use crate::math::Vec3;
use crate::world::{CameraModel, DepthImage, Pose};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;

/// Classification of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellState {
    Unknown,
    Free,
    Occupied,
}

/// Log-odds update parameters. Defaults: hit +0.85, miss -0.4, clamp +-3.5,
/// occupied above p = 0.7.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OccupancyParams {
    pub l_hit: f32,
    pub l_miss: f32,
    pub l_clamp: f32,
    pub p_occupied: f32,
}

impl Default for OccupancyParams {
    fn default() -> Self {
        Self { l_hit: 0.85, l_miss: -0.4, l_clamp: 3.5, p_occupied: 0.7 }
    }
}

impl OccupancyParams {
    #[inline]
    pub fn l_occupied(&self) -> f32 {
        (self.p_occupied / (1.0 - self.p_occupied)).ln()
    }
}

/// One map update: nominal log-odds increments per cell plus the state
/// transitions the application caused. Increments are kept nominal (unclamped)
/// so a delta can be fused into another map and clamped there.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapDelta {
    /// Sorted by cell index.
    pub increments: Vec<(u32, f32)>,
    /// (cell index, old state, new state), sorted by cell index.
    pub changed: Vec<(u32, CellState, CellState)>,
}

impl MapDelta {
    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// Voxel-coordinate bounding box of the state-changed cells.
    pub fn changed_bbox(&self, geom: &GridGeom) -> Option<([i64; 3], [i64; 3])> {
        if self.changed.is_empty() {
            return None;
        }
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for &(idx, _, _) in &self.changed {
            let c = geom.coords(idx as usize);
            for i in 0..3 {
                lo[i] = lo[i].min(c[i]);
                hi[i] = hi[i].max(c[i]);
            }
        }
        Some((lo, hi))
    }

    /// Newline-delimited wire form: one `idx inc` pair per line.
    pub fn to_wire(&self) -> String {
        let mut s = String::new();
        for &(idx, inc) in &self.increments {
            s.push_str(&format!("{} {}\n", idx, inc));
        }
        s
    }
}

/// Log-odds occupancy grid. Unknown cells hold exactly the prior (zero).
#[derive(Debug, Clone)]
pub struct VoxelMap {
    pub geom: GridGeom,
    pub params: OccupancyParams,
    log_odds: Vec<f32>,
    /// Bumped on every mutation; used to invalidate cached ESDFs.
    pub version: u64,
}

impl VoxelMap {
    pub fn new(geom: GridGeom, params: OccupancyParams) -> Self {
        let n = geom.len();
        Self { geom, params, log_odds: vec![0.0; n], version: 0 }
    }

    /// Map covering an axis-aligned region.
    pub fn covering(min: Vec3, max: Vec3, resolution: f64, params: OccupancyParams) -> Self {
        Self::new(GridGeom::covering(min, max, resolution), params)
    }

    #[inline]
    pub fn log_odds(&self, idx: usize) -> f32 {
        self.log_odds[idx]
    }

    #[inline]
    pub fn state(&self, idx: usize) -> CellState {
        let l = self.log_odds[idx];
        if l == 0.0 {
            CellState::Unknown
        } else if l >= self.params.l_occupied() {
            CellState::Occupied
        } else {
            CellState::Free
        }
    }

    #[inline]
    pub fn state_at(&self, cell: [i64; 3]) -> CellState {
        if self.geom.in_bounds(cell) {
            self.state(self.geom.index(cell))
        } else {
            CellState::Unknown
        }
    }

    pub fn is_free_cell(&self, cell: [i64; 3]) -> bool {
        self.state_at(cell) == CellState::Free
    }

    pub fn unknown_count(&self) -> usize {
        (0..self.geom.len()).filter(|&i| self.state(i) == CellState::Unknown).count()
    }

    pub fn occupied_centers(&self) -> Vec<Vec3> {
        (0..self.geom.len())
            .filter(|&i| self.state(i) == CellState::Occupied)
            .map(|i| self.geom.center_of_index(i))
            .collect()
    }

    /// Apply a nominal increment with clamping; returns (old, new) states.
    fn bump(&mut self, idx: usize, inc: f32) -> (CellState, CellState) {
        let old = self.state(idx);
        let l = (self.log_odds[idx] + inc).clamp(-self.params.l_clamp, self.params.l_clamp);
        self.log_odds[idx] = l;
        (old, self.state(idx))
    }

    /// Fuse a remote delta produced on a map with identical geometry.
    pub fn fuse(&mut self, delta: &MapDelta) -> Result<MapDelta> {
        let mut changed = Vec::new();
        for &(idx, inc) in &delta.increments {
            let idx = idx as usize;
            if idx >= self.geom.len() {
                return Err(SimError::GeometryMismatch(format!(
                    "delta cell {idx} outside map of {} cells",
                    self.geom.len()
                )));
            }
            let (old, new) = self.bump(idx, inc);
            if old != new {
                changed.push((idx as u32, old, new));
            }
        }
        self.version += 1;
        Ok(MapDelta { increments: delta.increments.clone(), changed })
    }

    /// Mark a sphere as free space. Used once at start-up to bootstrap planning
    /// around the take-off point.
    pub fn clear_sphere(&mut self, center: &Vec3, radius: f64) -> MapDelta {
        let mut increments = Vec::new();
        let mut changed = Vec::new();
        let lo = self.geom.cell_of(&(center - Vec3::repeat(radius)));
        let hi = self.geom.cell_of(&(center + Vec3::repeat(radius)));
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    let c = [x, y, z];
                    if !self.geom.in_bounds(c) {
                        continue;
                    }
                    if (self.geom.center(c) - center).norm() > radius {
                        continue;
                    }
                    let idx = self.geom.index(c);
                    let inc = self.params.l_miss;
                    let (old, new) = self.bump(idx, inc);
                    increments.push((idx as u32, inc));
                    if old != new {
                        changed.push((idx as u32, old, new));
                    }
                }
            }
        }
        self.version += 1;
        increments.sort_unstable_by_key(|e| e.0);
        changed.sort_unstable_by_key(|e| e.0);
        MapDelta { increments, changed }
    }

    /// Dump: text header (origin, resolution, dims) followed by one state byte
    /// per cell (0 unknown, 1 free, 2 occupied), x-major.
    pub fn write_dump(&self, w: &mut impl Write) -> Result<()> {
        writeln!(
            w,
            "origin {} {} {}",
            self.geom.origin[0], self.geom.origin[1], self.geom.origin[2]
        )?;
        writeln!(w, "resolution {}", self.geom.resolution)?;
        writeln!(w, "dims {} {} {}", self.geom.dims[0], self.geom.dims[1], self.geom.dims[2])?;
        let bytes: Vec<u8> = (0..self.geom.len())
            .map(|i| match self.state(i) {
                CellState::Unknown => 0u8,
                CellState::Free => 1,
                CellState::Occupied => 2,
            })
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }
}

/// Raycast a depth image into the map: free-space updates along each ray,
/// an occupied update at the hit cell, invalid pixels skipped. Rays are
/// truncated at the map boundary and at the camera's max range.
pub fn integrate_depth_image(
    map: &mut VoxelMap,
    pose: &Pose,
    camera: &CameraModel,
    img: &DepthImage,
) -> MapDelta {
    // true = hit cell, false = free cell; hits win over passes.
    let mut touched: HashMap<u32, bool> = HashMap::new();
    for row in 0..img.rows {
        for col in 0..img.cols {
            let d = img.at(row, col) as f64;
            if d.is_nan() {
                continue;
            }
            let dir = camera.pixel_ray(pose.yaw, row, col);
            let is_hit = d.is_finite() && d <= camera.max_range;
            let reach = if is_hit { d } else { camera.max_range };
            let end = pose.position + dir * reach;
            let end_cell = map.geom.cell_of(&end);
            map.geom.traverse(&pose.position, &end, |c, _| {
                let idx = map.geom.index(c) as u32;
                if is_hit && c == end_cell {
                    touched.insert(idx, true);
                } else {
                    touched.entry(idx).or_insert(false);
                }
                true
            });
        }
    }
    let mut cells: Vec<(u32, bool)> = touched.into_iter().collect();
    cells.sort_unstable_by_key(|e| e.0);

    let mut increments = Vec::with_capacity(cells.len());
    let mut changed = Vec::new();
    for (idx, is_hit) in cells {
        let inc = if is_hit { map.params.l_hit } else { map.params.l_miss };
        let (old, new) = map.bump(idx as usize, inc);
        increments.push((idx, inc));
        if old != new {
            changed.push((idx, old, new));
        }
    }
    map.version += 1;
    MapDelta { increments, changed }
}

/// Euclidean signed distance field over cell centers. Unknown cells are treated
/// as occupied. Positive outside obstacles, zero on the obstacle boundary,
/// negative inside; `+inf` when the map has no occupied/unknown cells at all.
#[derive(Debug, Clone)]
pub struct Esdf {
    pub geom: GridGeom,
    pub dist: Vec<f64>,
    pub map_version: u64,
}

impl Esdf {
    #[inline]
    pub fn at(&self, cell: [i64; 3]) -> f64 {
        if self.geom.in_bounds(cell) {
            self.dist[self.geom.index(cell)]
        } else {
            0.0
        }
    }

    /// Trilinear interpolation at a metric point; the gradient is with respect
    /// to the point. Outside the grid the query clamps to the border cell.
    pub fn sample_with_gradient(&self, p: &Vec3) -> (f64, Vec3) {
        let res = self.geom.resolution;
        let mut f = [0.0f64; 3];
        let mut base = [0i64; 3];
        for i in 0..3 {
            let g = (p[i] - self.geom.origin[i]) / res - 0.5;
            let fl = g.floor();
            base[i] = fl as i64;
            f[i] = g - fl;
        }
        let clamp_cell = |mut c: [i64; 3]| {
            for i in 0..3 {
                c[i] = c[i].clamp(0, self.geom.dims[i] as i64 - 1);
            }
            c
        };
        let mut vals = [0.0f64; 8];
        for k in 0..8 {
            let c = clamp_cell([
                base[0] + (k & 1) as i64,
                base[1] + ((k >> 1) & 1) as i64,
                base[2] + ((k >> 2) & 1) as i64,
            ]);
            vals[k] = self.dist[self.geom.index(c)];
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return (f64::INFINITY, Vec3::zeros());
        }
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(vals[0], vals[1], f[0]);
        let c10 = lerp(vals[2], vals[3], f[0]);
        let c01 = lerp(vals[4], vals[5], f[0]);
        let c11 = lerp(vals[6], vals[7], f[0]);
        let c0 = lerp(c00, c10, f[1]);
        let c1 = lerp(c01, c11, f[1]);
        let value = lerp(c0, c1, f[2]);

        let dx = (lerp(vals[1] - vals[0], vals[3] - vals[2], f[1])
            * (1.0 - f[2])
            + lerp(vals[5] - vals[4], vals[7] - vals[6], f[1]) * f[2])
            / res;
        let dy = ((c10 - c00) * (1.0 - f[2]) + (c11 - c01) * f[2]) / res;
        let dz = (c1 - c0) / res;
        (value, Vec3::new(dx, dy, dz))
    }
}

/// Exact 1-D squared distance transform (Felzenszwalb–Huttenlocher). Cells with
/// `+inf` input contribute no parabola; an all-inf line stays all-inf.
fn edt_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let mut v = vec![0usize; n];
    let mut zb = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = 0.0;
        while k >= 0 {
            let p = v[k as usize];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= zb[k as usize] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k as usize] = q;
        zb[k as usize] = if k == 0 { f64::NEG_INFINITY } else { s };
        zb[k as usize + 1] = f64::INFINITY;
    }
    if k < 0 {
        return;
    }
    let mut j = 0usize;
    for q in 0..n {
        while zb[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
}

/// Exact squared EDT in grid units for all cells, given `sites` (distance 0).
fn edt_3d(geom: &GridGeom, site: impl Fn(usize) -> bool) -> Vec<f64> {
    let [nx, ny, nz] = geom.dims;
    let mut d = vec![0.0f64; geom.len()];
    for i in 0..geom.len() {
        d[i] = if site(i) { 0.0 } else { f64::INFINITY };
    }
    let mut line = Vec::new();
    let mut out = Vec::new();
    // Pass along z (contiguous).
    for x in 0..nx {
        for y in 0..ny {
            let base = (x * ny + y) * nz;
            line.clear();
            line.extend_from_slice(&d[base..base + nz]);
            edt_1d(&line, &mut out);
            d[base..base + nz].copy_from_slice(&out);
        }
    }
    // Pass along y.
    for x in 0..nx {
        for z in 0..nz {
            line.clear();
            for y in 0..ny {
                line.push(d[(x * ny + y) * nz + z]);
            }
            edt_1d(&line, &mut out);
            for y in 0..ny {
                d[(x * ny + y) * nz + z] = out[y];
            }
        }
    }
    // Pass along x.
    for y in 0..ny {
        for z in 0..nz {
            line.clear();
            for x in 0..nx {
                line.push(d[(x * ny + y) * nz + z]);
            }
            edt_1d(&line, &mut out);
            for x in 0..nx {
                d[(x * ny + y) * nz + z] = out[x];
            }
        }
    }
    d
}

/// Exact signed Euclidean distance field. Sites are occupied and unknown cells.
pub fn compute_esdf(map: &VoxelMap) -> Esdf {
    let geom = map.geom;
    let is_site = |i: usize| map.state(i) != CellState::Free;
    let d_out = edt_3d(&geom, is_site);
    let d_in = edt_3d(&geom, |i| map.state(i) == CellState::Free);
    let res = geom.resolution;
    let mut dist = vec![0.0f64; geom.len()];
    for i in 0..geom.len() {
        dist[i] = if is_site(i) {
            -(d_in[i].sqrt() * res - res)
        } else {
            d_out[i].sqrt() * res
        };
    }
    Esdf { geom, dist, map_version: map.version }
}

/// Status of one hgrid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HgridStatus {
    Unexplored,
    Active,
    Explored,
}

/// Coarse decomposition of the map into workload cells. A cell is explored when
/// its unknown-voxel count drops below `explored_fraction` of its total.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HGrid {
    pub cell_edge: f64,
    pub dims: [usize; 3],
    pub unknown_counts: Vec<u32>,
    pub totals: Vec<u32>,
    pub status: Vec<HgridStatus>,
    pub explored_fraction: f64,
    /// Voxels per hgrid cell along each axis.
    stride: [usize; 3],
}

impl HGrid {
    pub fn new(map_geom: &GridGeom, cell_edge: f64, explored_fraction: f64) -> Self {
        let res = map_geom.resolution;
        let per = (cell_edge / res).round().max(1.0) as usize;
        let dims = [
            map_geom.dims[0].div_ceil(per),
            map_geom.dims[1].div_ceil(per),
            map_geom.dims[2].div_ceil(per),
        ];
        let n = dims[0] * dims[1] * dims[2];
        let mut totals = vec![0u32; n];
        for idx in 0..map_geom.len() {
            let c = map_geom.coords(idx);
            let h = Self::cell_index_for(dims, per, c);
            totals[h] += 1;
        }
        Self {
            cell_edge,
            dims,
            unknown_counts: totals.clone(),
            totals,
            status: vec![HgridStatus::Unexplored; n],
            explored_fraction,
            stride: [per, per, per],
        }
    }

    fn cell_index_for(dims: [usize; 3], per: usize, voxel: [i64; 3]) -> usize {
        let hx = (voxel[0] as usize / per).min(dims[0] - 1);
        let hy = (voxel[1] as usize / per).min(dims[1] - 1);
        let hz = (voxel[2] as usize / per).min(dims[2] - 1);
        (hx * dims[1] + hy) * dims[2] + hz
    }

    pub fn cell_of_voxel(&self, voxel: [i64; 3]) -> usize {
        Self::cell_index_for(self.dims, self.stride[0], voxel)
    }

    pub fn len(&self) -> usize {
        self.status.len()
    }

    pub fn is_empty(&self) -> bool {
        self.status.is_empty()
    }

    /// Metric center of an hgrid cell.
    pub fn cell_center(&self, h: usize, map_geom: &GridGeom) -> Vec3 {
        let hz = h % self.dims[2];
        let hy = (h / self.dims[2]) % self.dims[1];
        let hx = h / (self.dims[1] * self.dims[2]);
        let res = map_geom.resolution;
        let per = self.stride[0] as f64;
        let centered = |i: usize, dim_vox: usize| -> f64 {
            let lo = i as f64 * per;
            let hi = ((i + 1) as f64 * per).min(dim_vox as f64);
            (lo + hi) * 0.5 * res
        };
        Vec3::new(
            map_geom.origin[0] + centered(hx, map_geom.dims[0]),
            map_geom.origin[1] + centered(hy, map_geom.dims[1]),
            map_geom.origin[2] + centered(hz, map_geom.dims[2]),
        )
    }

    fn status_of(&self, h: usize) -> HgridStatus {
        let total = self.totals[h];
        if total == 0 {
            return HgridStatus::Explored;
        }
        let unknown = self.unknown_counts[h];
        if (unknown as f64) < self.explored_fraction * total as f64 {
            HgridStatus::Explored
        } else if unknown == total {
            HgridStatus::Unexplored
        } else {
            HgridStatus::Active
        }
    }

    /// Apply the state transitions of a map delta. Returns the cells whose
    /// status changed. Explored status is monotone: it never reverts.
    pub fn update(&mut self, geom: &GridGeom, delta: &MapDelta) -> Vec<(usize, HgridStatus)> {
        let mut touched = Vec::new();
        for &(idx, old, new) in &delta.changed {
            if old == CellState::Unknown && new != CellState::Unknown {
                let h = self.cell_of_voxel(geom.coords(idx as usize));
                self.unknown_counts[h] = self.unknown_counts[h].saturating_sub(1);
                touched.push(h);
            }
        }
        touched.sort_unstable();
        touched.dedup();
        let mut changes = Vec::new();
        for h in touched {
            let next = self.status_of(h);
            if next != self.status[h] && self.status[h] != HgridStatus::Explored {
                self.status[h] = next;
                changes.push((h, next));
            }
        }
        changes
    }

    /// Recount unknown voxels directly from the map. Oracle for the incremental
    /// bookkeeping and the initializer for late-joining agents.
    pub fn recount_from(&mut self, map: &VoxelMap) {
        self.unknown_counts = vec![0; self.len()];
        for idx in 0..map.geom.len() {
            if map.state(idx) == CellState::Unknown {
                let h = self.cell_of_voxel(map.geom.coords(idx));
                self.unknown_counts[h] += 1;
            }
        }
        for h in 0..self.len() {
            if self.status[h] != HgridStatus::Explored {
                self.status[h] = self.status_of(h);
            }
        }
    }

    pub fn all_explored(&self) -> bool {
        self.status.iter().all(|s| *s == HgridStatus::Explored)
    }
}

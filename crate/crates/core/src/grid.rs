//! Voxel-grid geometry shared by the ground-truth world, the occupancy map and
//! the planners: index/position conversions and exact ray traversal.

use crate::math::Vec3;
use serde::{Deserialize, Serialize};

/// Placement of a regular voxel grid in space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeom {
    pub origin: [f64; 3],
    pub resolution: f64,
    pub dims: [usize; 3],
}

impl GridGeom {
    pub fn new(origin: Vec3, resolution: f64, dims: [usize; 3]) -> Self {
        Self { origin: [origin.x, origin.y, origin.z], resolution, dims }
    }

    /// Grid covering `min..max` with the given resolution (dims rounded up).
    pub fn covering(min: Vec3, max: Vec3, resolution: f64) -> Self {
        let mut dims = [0usize; 3];
        for i in 0..3 {
            dims[i] = (((max[i] - min[i]) / resolution) - 1e-9).ceil().max(1.0) as usize;
        }
        Self::new(min, resolution, dims)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn origin_v(&self) -> Vec3 {
        Vec3::new(self.origin[0], self.origin[1], self.origin[2])
    }

    #[inline]
    pub fn in_bounds(&self, c: [i64; 3]) -> bool {
        (0..3).all(|i| c[i] >= 0 && (c[i] as usize) < self.dims[i])
    }

    #[inline]
    pub fn index(&self, c: [i64; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [i64; 3] {
        let z = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let x = idx / (self.dims[1] * self.dims[2]);
        [x as i64, y as i64, z as i64]
    }

    /// Cell containing a point (cells are half-open boxes [o + c*r, o + (c+1)*r)).
    #[inline]
    pub fn cell_of(&self, p: &Vec3) -> [i64; 3] {
        let mut c = [0i64; 3];
        for i in 0..3 {
            c[i] = ((p[i] - self.origin[i]) / self.resolution).floor() as i64;
        }
        c
    }

    #[inline]
    pub fn center(&self, c: [i64; 3]) -> Vec3 {
        Vec3::new(
            self.origin[0] + (c[0] as f64 + 0.5) * self.resolution,
            self.origin[1] + (c[1] as f64 + 0.5) * self.resolution,
            self.origin[2] + (c[2] as f64 + 0.5) * self.resolution,
        )
    }

    pub fn center_of_index(&self, idx: usize) -> Vec3 {
        self.center(self.coords(idx))
    }

    /// Walk the cells pierced by the segment `start..end` in order (Amanatides–Woo).
    /// The callback receives the cell coords and the entry distance along the ray;
    /// returning `false` stops the walk. Cells outside the grid are skipped, but the
    /// walk continues so a segment may re-enter the grid.
    pub fn traverse(&self, start: &Vec3, end: &Vec3, mut visit: impl FnMut([i64; 3], f64) -> bool) {
        let delta = end - start;
        let total = delta.norm();
        if total < 1e-12 {
            let c = self.cell_of(start);
            if self.in_bounds(c) {
                visit(c, 0.0);
            }
            return;
        }
        let dir = delta / total;
        let mut cell = self.cell_of(start);
        let end_cell = self.cell_of(end);

        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for i in 0..3 {
            if dir[i] > 1e-15 {
                step[i] = 1;
                let boundary = self.origin[i] + (cell[i] as f64 + 1.0) * self.resolution;
                t_max[i] = (boundary - start[i]) / dir[i];
                t_delta[i] = self.resolution / dir[i];
            } else if dir[i] < -1e-15 {
                step[i] = -1;
                let boundary = self.origin[i] + cell[i] as f64 * self.resolution;
                t_max[i] = (boundary - start[i]) / dir[i];
                t_delta[i] = self.resolution / -dir[i];
            }
        }

        let mut t_entry = 0.0;
        loop {
            if self.in_bounds(cell) && !visit(cell, t_entry) {
                return;
            }
            if cell == end_cell {
                return;
            }
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            t_entry = t_max[axis];
            if t_entry > total + 1e-12 {
                return;
            }
            cell[axis] += step[axis];
            t_max[axis] += t_delta[axis];
        }
    }

    /// 6-connected neighbors inside the grid.
    pub fn neighbors6(&self, c: [i64; 3]) -> impl Iterator<Item = [i64; 3]> + '_ {
        const OFFS: [[i64; 3]; 6] = [
            [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
        ];
        OFFS.iter().filter_map(move |o| {
            let n = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            if self.in_bounds(n) { Some(n) } else { None }
        })
    }

    /// 26-connected neighbors inside the grid.
    pub fn neighbors26(&self, c: [i64; 3]) -> Vec<[i64; 3]> {
        let mut out = Vec::with_capacity(26);
        for dx in -1..=1i64 {
            for dy in -1..=1i64 {
                for dz in -1..=1i64 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if self.in_bounds(n) {
                        out.push(n);
                    }
                }
            }
        }
        out
    }
}

#[derive(PartialEq)]
struct HeapNode(f64, u64, usize);
impl Eq for HeapNode {}
impl Ord for HeapNode {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .0
            .partial_cmp(&self.0)
            .unwrap()
            .then(other.1.cmp(&self.1))
    }
}
impl PartialOrd for HeapNode {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// A* over passable cells with metric step costs (26-connected). Returns the
/// cell sequence from the cell of `from` to the cell of `to`.
pub fn astar_cells(
    geom: &GridGeom,
    passable: impl Fn([i64; 3]) -> bool,
    from: &Vec3,
    to: &Vec3,
) -> Option<Vec<[i64; 3]>> {
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
    let mut dist: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    let mut parent: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut heap = std::collections::BinaryHeap::new();
    let s_idx = geom.index(start);
    dist.insert(s_idx, 0.0);
    heap.push(HeapNode(h(start), 0, s_idx));
    let mut counter = 1u64;
    while let Some(HeapNode(f, _, idx)) = heap.pop() {
        let c = geom.coords(idx);
        let g = dist[&idx];
        if f > g + h(c) + 1e-9 {
            continue;
        }
        if c == goal {
            let mut path = vec![c];
            let mut cur = idx;
            while let Some(&p) = parent.get(&cur) {
                path.push(geom.coords(p));
                cur = p;
            }
            path.reverse();
            return Some(path);
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
                parent.insert(ni, idx);
                heap.push(HeapNode(ng + h(n), counter, ni));
                counter += 1;
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traversal_covers_straight_ray() {
        let g = GridGeom::new(Vec3::zeros(), 0.5, [20, 4, 4]);
        let mut cells = Vec::new();
        g.traverse(
            &Vec3::new(0.25, 0.25, 0.25),
            &Vec3::new(5.25, 0.25, 0.25),
            |c, _| {
                cells.push(c);
                true
            },
        );
        assert_eq!(cells.len(), 11);
        assert_eq!(cells[0], [0, 0, 0]);
        assert_eq!(*cells.last().unwrap(), [10, 0, 0]);
    }

    #[test]
    fn traversal_entry_distances_monotone() {
        let g = GridGeom::new(Vec3::zeros(), 0.25, [40, 40, 40]);
        let start = Vec3::new(1.01, 2.3, 0.7);
        let end = Vec3::new(8.9, 4.2, 7.3);
        let mut last = -1.0;
        g.traverse(&start, &end, |_, t| {
            assert!(t >= last);
            last = t;
            true
        });
        assert!(last > 0.0);
    }

    #[test]
    fn degenerate_segment_visits_single_cell() {
        let g = GridGeom::new(Vec3::zeros(), 1.0, [4, 4, 4]);
        let mut count = 0;
        let p = Vec3::new(1.5, 1.5, 1.5);
        g.traverse(&p, &p, |c, _| {
            assert_eq!(c, [1, 1, 1]);
            count += 1;
            true
        });
        assert_eq!(count, 1);
    }
}

//! Trajectory generation: uniform cubic B-splines over position and yaw, a
//! yaw-aware lattice A* that forbids on-the-spot rotation and out-of-FOV
//! motion, gradient-based joint refinement, and the quantized feedback
//! velocity controller.

use crate::error::{Result, SimError};
use crate::mapping::Esdf;
use crate::math::{angle_diff, round_to_multiple, unwrap_yaws, wrap_angle, Vec3};
use crate::world::{CameraModel, KinematicLimits, VelocityCommand};
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;
use std::io::Write;

/// Which trajectory pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    /// Decoupled: optimize positions, then derive yaw from the path tangent.
    Baseline,
    /// Joint position+yaw optimization with the FOV penalty.
    Constrained,
    /// Yaw-aware A* seed followed by the joint optimization.
    Astar,
}

/// Weights and discretization for trajectory generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub n_yaw_bins: usize,
    pub d_safe: f64,
    pub lambda_smooth: f64,
    pub lambda_collision: f64,
    pub lambda_dynamics: f64,
    pub lambda_fov: f64,
    /// The soft FOV penalty activates this far inside the hard limit, so the
    /// optimizer's residual stays within the actual field of view.
    pub fov_margin: f64,
    pub max_iterations: usize,
    pub grad_tolerance: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            n_yaw_bins: 16,
            d_safe: 0.4,
            lambda_smooth: 1.0,
            lambda_collision: 100.0,
            lambda_dynamics: 10.0,
            lambda_fov: 50.0,
            // Wide enough to absorb the direction wobble that velocity-reading
            // quantization induces during execution.
            fov_margin: 0.25,
            max_iterations: 200,
            grad_tolerance: 1e-6,
        }
    }
}

/// Degree-3 uniform B-spline over positions and (unwrapped) yaw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineTrajectory {
    pub ctrl_pos: Vec<Vec3>,
    pub ctrl_yaw: Vec<f64>,
    pub dt: f64,
}

impl SplineTrajectory {
    pub fn duration(&self) -> f64 {
        (self.ctrl_pos.len().saturating_sub(3)) as f64 * self.dt
    }

    pub fn segments(&self) -> usize {
        self.ctrl_pos.len().saturating_sub(3)
    }

    fn segment_u(&self, t: f64) -> (usize, f64) {
        let segs = self.segments().max(1);
        let s = ((t / self.dt).floor() as usize).min(segs - 1);
        let u = (t / self.dt - s as f64).clamp(0.0, 1.0);
        (s, u)
    }

    fn basis3(u: f64) -> [f64; 4] {
        let u2 = u * u;
        let u3 = u2 * u;
        [
            (1.0 - u).powi(3) / 6.0,
            (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
            (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
            u3 / 6.0,
        ]
    }

    fn basis2(u: f64) -> [f64; 3] {
        [
            (1.0 - u) * (1.0 - u) / 2.0,
            (-2.0 * u * u + 2.0 * u + 1.0) / 2.0,
            u * u / 2.0,
        ]
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let (s, u) = self.segment_u(t);
        let b = Self::basis3(u);
        (0..4).map(|i| self.ctrl_pos[s + i] * b[i]).sum()
    }

    pub fn yaw(&self, t: f64) -> f64 {
        let (s, u) = self.segment_u(t);
        let b = Self::basis3(u);
        (0..4).map(|i| self.ctrl_yaw[s + i] * b[i]).sum()
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        let (s, u) = self.segment_u(t);
        let b = Self::basis2(u);
        let v = |i: usize| (self.ctrl_pos[i + 1] - self.ctrl_pos[i]) / self.dt;
        (0..3).map(|i| v(s + i) * b[i]).sum()
    }

    pub fn yaw_rate(&self, t: f64) -> f64 {
        let (s, u) = self.segment_u(t);
        let b = Self::basis2(u);
        let v = |i: usize| (self.ctrl_yaw[i + 1] - self.ctrl_yaw[i]) / self.dt;
        (0..3).map(|i| v(s + i) * b[i]).sum()
    }

    pub fn acceleration(&self, t: f64) -> Vec3 {
        let (s, u) = self.segment_u(t);
        let a = |i: usize| {
            (self.ctrl_pos[i + 2] - self.ctrl_pos[i + 1] * 2.0 + self.ctrl_pos[i]) / (self.dt * self.dt)
        };
        a(s) * (1.0 - u) + a(s + 1) * u
    }

    /// Exact integral of squared acceleration: the acceleration spline is
    /// piecewise linear, so each segment integrates in closed form.
    pub fn energy_closed_form(&self) -> f64 {
        let n = self.ctrl_pos.len();
        if n < 4 {
            return 0.0;
        }
        let acc = |i: usize| -> Vec3 {
            (self.ctrl_pos[i + 2] - self.ctrl_pos[i + 1] * 2.0 + self.ctrl_pos[i]) / (self.dt * self.dt)
        };
        let mut total = 0.0;
        for s in 0..self.segments() {
            let a0 = acc(s);
            let a1 = acc(s + 1);
            total += self.dt / 3.0 * (a0.norm_squared() + a0.dot(&a1) + a1.norm_squared());
        }
        total
    }

    /// Simpson quadrature of the squared acceleration.
    pub fn energy_simpson(&self, intervals: usize) -> f64 {
        let n = if intervals % 2 == 0 { intervals } else { intervals + 1 };
        let dur = self.duration();
        let h = dur / n as f64;
        let f = |t: f64| self.acceleration(t).norm_squared();
        let mut sum = f(0.0) + f(dur);
        for k in 1..n {
            sum += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        sum * h / 3.0
    }

    /// Fixed-rate samples for the controller, metrics and dumps.
    pub fn sample(&self, rate_hz: f64) -> Vec<TrajectorySample> {
        let dur = self.duration();
        let n = (dur * rate_hz).ceil() as usize;
        (0..=n)
            .map(|k| {
                let t = (k as f64 / rate_hz).min(dur);
                TrajectorySample {
                    t,
                    position: self.position(t),
                    yaw: wrap_angle(self.yaw(t)),
                    velocity: self.velocity(t),
                    yaw_rate: self.yaw_rate(t),
                }
            })
            .collect()
    }

    /// CSV rows `t,x,y,z,yaw,vx,vy,vz,yaw_rate` at 50 Hz.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "t,x,y,z,yaw,vx,vy,vz,yaw_rate")?;
        for s in self.sample(50.0) {
            writeln!(
                w,
                "{:.4},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.t,
                s.position.x,
                s.position.y,
                s.position.z,
                s.yaw,
                s.velocity.x,
                s.velocity.y,
                s.velocity.z,
                s.yaw_rate
            )?;
        }
        Ok(())
    }

    /// Count of 50 Hz samples whose motion direction leaves the horizontal FOV.
    /// Motion below a typical velocity-reading resolution does not count.
    pub fn fov_violation_samples(&self, camera: &CameraModel) -> usize {
        self.sample(50.0)
            .iter()
            .filter(|s| {
                let horiz = s.velocity.xy().norm();
                horiz > 0.1
                    && angle_diff(s.yaw, s.velocity.y.atan2(s.velocity.x)) > 0.5 * camera.horizontal_fov
            })
            .count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    pub t: f64,
    pub position: Vec3,
    pub yaw: f64,
    pub velocity: Vec3,
    pub yaw_rate: f64,
}

/// One waypoint of a discrete plan: position and yaw.
pub type PathPoint = (Vec3, f64);

/// Least-squares/interpolating fit of a uniform cubic B-spline through the
/// waypoints, with clamped boundary velocities. The knot interval is chosen so
/// per-segment velocity and yaw-rate stay within limits with a 20% margin.
pub fn fit_spline(
    path: &[PathPoint],
    limits: &KinematicLimits,
    v_start: Vec3,
    v_end: Vec3,
) -> Result<SplineTrajectory> {
    if path.len() < 2 {
        return Err(SimError::InvalidConfig("spline fit needs at least two waypoints".into()));
    }
    let k = path.len();
    let mut yaws: Vec<f64> = path.iter().map(|p| p.1).collect();
    unwrap_yaws(&mut yaws);

    let mut dt: f64 = 0.05;
    for i in 1..k {
        let dp = (path[i].0 - path[i - 1].0).norm();
        let dy = (yaws[i] - yaws[i - 1]).abs();
        dt = dt.max(1.2 * dp / limits.v_max).max(1.2 * dy / limits.omega_max);
    }

    // Interpolation conditions p(t_i) = w_i plus boundary velocities.
    let n = k + 2;
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..k {
        m[(i, i)] = 1.0 / 6.0;
        m[(i, i + 1)] = 4.0 / 6.0;
        m[(i, i + 2)] = 1.0 / 6.0;
    }
    m[(k, 0)] = -1.0 / (2.0 * dt);
    m[(k, 2)] = 1.0 / (2.0 * dt);
    m[(k + 1, n - 3)] = -1.0 / (2.0 * dt);
    m[(k + 1, n - 1)] = 1.0 / (2.0 * dt);

    let lu = m.lu();
    let solve_axis = |targets: Vec<f64>, b0: f64, b1: f64| -> Result<Vec<f64>> {
        let mut rhs = nalgebra::DVector::<f64>::zeros(n);
        for (i, v) in targets.iter().enumerate() {
            rhs[i] = *v;
        }
        rhs[k] = b0;
        rhs[k + 1] = b1;
        lu.solve(&rhs)
            .map(|v| v.iter().copied().collect())
            .ok_or_else(|| SimError::InvalidConfig("singular spline fit system".into()))
    };

    let xs = solve_axis(path.iter().map(|p| p.0.x).collect(), v_start.x, v_end.x)?;
    let ys = solve_axis(path.iter().map(|p| p.0.y).collect(), v_start.y, v_end.y)?;
    let zs = solve_axis(path.iter().map(|p| p.0.z).collect(), v_start.z, v_end.z)?;
    let gy = solve_axis(yaws.clone(), 0.0, 0.0)?;

    let ctrl_pos: Vec<Vec3> = (0..n).map(|i| Vec3::new(xs[i], ys[i], zs[i])).collect();
    Ok(SplineTrajectory { ctrl_pos, ctrl_yaw: gy, dt })
}

/// State of the yaw-aware lattice: map cell plus a yaw bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct YawState {
    pub cell: [i64; 3],
    pub bin: usize,
}

fn bin_angle(bin: usize, n: usize) -> f64 {
    -std::f64::consts::PI + 2.0 * std::f64::consts::PI * bin as f64 / n as f64
}

fn angle_bin(a: f64, n: usize) -> usize {
    let two_pi = 2.0 * std::f64::consts::PI;
    let x = (wrap_angle(a) + std::f64::consts::PI) / two_pi * n as f64;
    (x.round() as usize) % n
}

#[derive(PartialEq)]
struct AstarNode {
    f: f64,
    h: f64,
    seq: u64,
    state: usize,
}
impl Eq for AstarNode {}
impl Ord for AstarNode {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap by (f, h, insertion order).
        other
            .f
            .partial_cmp(&self.f)
            .unwrap()
            .then(other.h.partial_cmp(&self.h).unwrap())
            .then(other.seq.cmp(&self.seq))
    }
}
impl PartialOrd for AstarNode {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Yaw-aware A* over (cell, yaw-bin) states. Expansions must translate (no
/// rotation on the spot), keep the step direction within the horizontal FOV of
/// both the current and the next yaw, and keep every swept cell at safe ESDF
/// clearance. Yaw changes at most one bin per step.
pub fn yaw_astar(
    start: &PathPoint,
    goal: &PathPoint,
    esdf: &Esdf,
    camera: &CameraModel,
    limits: &KinematicLimits,
    cfg: &TrajectoryConfig,
) -> Result<Vec<PathPoint>> {
    let geom = &esdf.geom;
    let n_bins = cfg.n_yaw_bins;
    let start_cell = geom.cell_of(&start.0);
    let goal_cell = geom.cell_of(&goal.0);
    if !geom.in_bounds(start_cell) || !geom.in_bounds(goal_cell) {
        return Err(SimError::NoPath);
    }
    if esdf.at(start_cell) < cfg.d_safe || esdf.at(goal_cell) < cfg.d_safe {
        return Err(SimError::NoPath);
    }
    let start_bin = angle_bin(start.1, n_bins);
    let goal_bin = angle_bin(goal.1, n_bins);
    if start_cell == goal_cell && start_bin == goal_bin {
        return Ok(vec![*start]);
    }

    let half_fov = 0.5 * camera.horizontal_fov;
    let goal_pos = geom.center(goal_cell);

    let h = |cell: [i64; 3], bin: usize| -> f64 {
        let p = geom.center(cell);
        let trans = (p - goal_pos).norm() / limits.v_max;
        let rot = angle_diff(bin_angle(bin, n_bins), bin_angle(goal_bin, n_bins)) / limits.omega_max;
        trans.max(rot)
    };

    let n_states = geom.len() * n_bins;
    let mut g = vec![f64::INFINITY; n_states];
    let mut parent = vec![usize::MAX; n_states];
    let mut heap = BinaryHeap::new();
    let sidx = geom.index(start_cell) * n_bins + start_bin;
    g[sidx] = 0.0;
    let h0 = h(start_cell, start_bin);
    heap.push(AstarNode { f: h0, h: h0, seq: 0, state: sidx });
    let mut seq = 1u64;
    let goal_state = geom.index(goal_cell) * n_bins + goal_bin;

    // The 26 step offsets.
    let mut steps = Vec::with_capacity(26);
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            for dz in -1i64..=1 {
                if dx != 0 || dy != 0 || dz != 0 {
                    steps.push([dx, dy, dz]);
                }
            }
        }
    }

    // The search runs purely on lattice poses (cell centers, bin-center yaws):
    // the returned path then satisfies the expansion constraints at every step
    // with no quantization slack. Callers keep vehicles on lattice poses at
    // plan boundaries.
    while let Some(AstarNode { f, state, .. }) = heap.pop() {
        let cell_idx = state / n_bins;
        let bin = state % n_bins;
        let cell = geom.coords(cell_idx);
        if f > g[state] + h(cell, bin) + 1e-9 {
            continue;
        }
        if state == goal_state {
            let mut path = Vec::new();
            let mut cur = state;
            while cur != usize::MAX {
                let c = geom.coords(cur / n_bins);
                path.push((geom.center(c), bin_angle(cur % n_bins, n_bins)));
                cur = parent[cur];
            }
            path.reverse();
            return Ok(path);
        }
        let yaw_here = bin_angle(bin, n_bins);
        let pos_here = geom.center(cell);
        for &off in &steps {
            let ncell = [cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]];
            if !geom.in_bounds(ncell) {
                continue;
            }
            let pos_next = geom.center(ncell);
            let dp = pos_next - pos_here;
            let step_len = dp.norm();
            let heading = if dp.xy().norm() > 1e-9 {
                Some(dp.y.atan2(dp.x))
            } else {
                None
            };
            for dbin in [-1i64, 0, 1] {
                let nbin = ((bin as i64 + dbin).rem_euclid(n_bins as i64)) as usize;
                let yaw_next = bin_angle(nbin, n_bins);
                if let Some(dir) = heading {
                    if angle_diff(yaw_here, dir) > half_fov || angle_diff(yaw_next, dir) > half_fov {
                        continue;
                    }
                }
                let nstate = geom.index(ncell) * n_bins + nbin;
                if g[state] >= g[nstate] {
                    continue;
                }
                // Swept clearance along the step segment.
                let mut safe = true;
                geom.traverse(&pos_here, &pos_next, |c, _| {
                    if esdf.at(c) < cfg.d_safe {
                        safe = false;
                        return false;
                    }
                    true
                });
                if !safe {
                    continue;
                }
                let rot = angle_diff(yaw_here, yaw_next);
                let cost = (step_len / limits.v_max).max(rot / limits.omega_max);
                let ng = g[state] + cost;
                if ng < g[nstate] - 1e-12 {
                    g[nstate] = ng;
                    parent[nstate] = state;
                    let hh = h(ncell, nbin);
                    heap.push(AstarNode { f: ng + hh, h: hh, seq, state: nstate });
                    seq += 1;
                }
            }
        }
    }
    Err(SimError::NoPath)
}

/// Nearest lattice pose to an arbitrary pose (cell center, yaw-bin center).
pub fn snap_to_lattice(pose: &PathPoint, esdf: &Esdf, n_bins: usize) -> PathPoint {
    let cell = esdf.geom.cell_of(&pose.0);
    let mut clamped = cell;
    for i in 0..3 {
        clamped[i] = clamped[i].clamp(0, esdf.geom.dims[i] as i64 - 1);
    }
    (esdf.geom.center(clamped), bin_angle(angle_bin(pose.1, n_bins), n_bins))
}

/// Boundary velocities aligned with the first and last path steps, so the
/// fitted spline starts and ends moving the way the lattice plan does instead
/// of ringing around clamped rest states.
pub fn lattice_boundary_velocities(path: &[PathPoint], limits: &KinematicLimits) -> (Vec3, Vec3) {
    if path.len() < 2 {
        return (Vec3::zeros(), Vec3::zeros());
    }
    let speed = 0.6 * limits.v_max;
    let first = path[1].0 - path[0].0;
    let last = path[path.len() - 1].0 - path[path.len() - 2].0;
    let dir = |v: Vec3| {
        let n = v.norm();
        if n < 1e-9 {
            Vec3::zeros()
        } else {
            v / n
        }
    };
    (dir(first) * speed, dir(last) * speed)
}

/// Cost of the returned lattice path under the lattice metric (for oracles).
pub fn lattice_path_cost(path: &[PathPoint], limits: &KinematicLimits) -> f64 {
    path.windows(2)
        .map(|w| {
            let trans = (w[1].0 - w[0].0).norm() / limits.v_max;
            let rot = angle_diff(w[0].1, w[1].1) / limits.omega_max;
            trans.max(rot)
        })
        .sum()
}

/// Outcome flags of one optimization run.
#[derive(Debug, Clone, Copy)]
pub struct OptReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub grad_norm: f64,
    pub failed: bool,
}

struct CostContext<'a> {
    esdf: &'a Esdf,
    camera: &'a CameraModel,
    limits: &'a KinematicLimits,
    cfg: &'a TrajectoryConfig,
    with_fov: bool,
    with_yaw: bool,
}

/// Flattened view of the free variables: interior position control points
/// (3 components each) followed by interior yaw control points when enabled.
struct Variables {
    n_ctrl: usize,
    free_lo: usize,
    free_hi: usize,
}

impl Variables {
    /// The first and last three control points stay fixed: they pin endpoint
    /// position, velocity and acceleration of a cubic spline.
    fn new(n_ctrl: usize) -> Self {
        Self { n_ctrl, free_lo: 3, free_hi: n_ctrl - 3 }
    }

    fn free_count(&self) -> usize {
        self.free_hi.saturating_sub(self.free_lo)
    }

    fn pack(&self, traj: &SplineTrajectory, with_yaw: bool) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.free_count() * 4);
        for i in self.free_lo..self.free_hi {
            x.extend_from_slice(&[traj.ctrl_pos[i].x, traj.ctrl_pos[i].y, traj.ctrl_pos[i].z]);
        }
        if with_yaw {
            for i in self.free_lo..self.free_hi {
                x.push(traj.ctrl_yaw[i]);
            }
        }
        x
    }

    fn unpack(&self, x: &[f64], traj: &mut SplineTrajectory, with_yaw: bool) {
        for (k, i) in (self.free_lo..self.free_hi).enumerate() {
            traj.ctrl_pos[i] = Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
        }
        if with_yaw {
            let off = 3 * self.free_count();
            for (k, i) in (self.free_lo..self.free_hi).enumerate() {
                traj.ctrl_yaw[i] = x[off + k];
            }
        }
        let _ = self.n_ctrl;
    }
}

/// Cost and analytic gradient with respect to all control points (positions
/// and yaws); the caller masks out the fixed boundary entries.
fn cost_and_gradient(
    traj: &SplineTrajectory,
    ctx: &CostContext,
) -> (f64, Vec<Vec3>, Vec<f64>) {
    let n = traj.ctrl_pos.len();
    let dt = traj.dt;
    let mut grad_pos = vec![Vec3::zeros(); n];
    let mut grad_yaw = vec![0.0; n];
    let mut cost = 0.0;

    // Smoothness: squared second differences of control points.
    for i in 1..n - 1 {
        let d = traj.ctrl_pos[i - 1] - traj.ctrl_pos[i] * 2.0 + traj.ctrl_pos[i + 1];
        cost += ctx.cfg.lambda_smooth * d.norm_squared();
        let g = d * (2.0 * ctx.cfg.lambda_smooth);
        grad_pos[i - 1] += g;
        grad_pos[i] -= g * 2.0;
        grad_pos[i + 1] += g;
        if ctx.with_yaw {
            let dy = traj.ctrl_yaw[i - 1] - 2.0 * traj.ctrl_yaw[i] + traj.ctrl_yaw[i + 1];
            cost += ctx.cfg.lambda_smooth * dy * dy;
            let gy = 2.0 * ctx.cfg.lambda_smooth * dy;
            grad_yaw[i - 1] += gy;
            grad_yaw[i] -= 2.0 * gy;
            grad_yaw[i + 1] += gy;
        }
    }

    // Sampled terms at knot midpoints.
    const B3: [f64; 4] = [1.0 / 48.0, 23.0 / 48.0, 23.0 / 48.0, 1.0 / 48.0];
    // d(sample)/d(ctrl): velocity and acceleration stencils at u = 0.5.
    let vb: [f64; 4] = [-1.0 / (8.0 * dt), -5.0 / (8.0 * dt), 5.0 / (8.0 * dt), 1.0 / (8.0 * dt)];
    let ab: [f64; 4] = [
        1.0 / (2.0 * dt * dt),
        -1.0 / (2.0 * dt * dt),
        -1.0 / (2.0 * dt * dt),
        1.0 / (2.0 * dt * dt),
    ];

    for s in 0..traj.segments() {
        let pos: Vec3 = (0..4).map(|i| traj.ctrl_pos[s + i] * B3[i]).sum();
        let vel: Vec3 = (0..4).map(|i| traj.ctrl_pos[s + i] * vb[i]).sum();
        let acc: Vec3 = (0..4).map(|i| traj.ctrl_pos[s + i] * ab[i]).sum();

        // Collision.
        let (d, d_grad) = ctx.esdf.sample_with_gradient(&pos);
        if d.is_finite() && d < ctx.cfg.d_safe {
            let viol = ctx.cfg.d_safe - d;
            cost += ctx.cfg.lambda_collision * viol * viol;
            let g = d_grad * (-2.0 * ctx.cfg.lambda_collision * viol);
            for i in 0..4 {
                grad_pos[s + i] += g * B3[i];
            }
        }

        // Velocity limit.
        let vnorm = vel.norm();
        if vnorm > ctx.limits.v_max {
            let viol = vnorm - ctx.limits.v_max;
            cost += ctx.cfg.lambda_dynamics * viol * viol;
            let g = vel * (2.0 * ctx.cfg.lambda_dynamics * viol / vnorm.max(1e-12));
            for i in 0..4 {
                grad_pos[s + i] += g * vb[i];
            }
        }
        // Acceleration limit.
        let anorm = acc.norm();
        if anorm > ctx.limits.a_max {
            let viol = anorm - ctx.limits.a_max;
            cost += ctx.cfg.lambda_dynamics * viol * viol;
            let g = acc * (2.0 * ctx.cfg.lambda_dynamics * viol / anorm.max(1e-12));
            for i in 0..4 {
                grad_pos[s + i] += g * ab[i];
            }
        }

        if ctx.with_yaw {
            let yaw: f64 = (0..4).map(|i| traj.ctrl_yaw[s + i] * B3[i]).sum();
            let yrate: f64 = (0..4).map(|i| traj.ctrl_yaw[s + i] * vb[i]).sum();
            if yrate.abs() > ctx.limits.omega_max {
                let viol = yrate.abs() - ctx.limits.omega_max;
                cost += ctx.cfg.lambda_dynamics * viol * viol;
                let gy = 2.0 * ctx.cfg.lambda_dynamics * viol * yrate.signum();
                for i in 0..4 {
                    grad_yaw[s + i] += gy * vb[i];
                }
            }

            if ctx.with_fov {
                // The heading of near-stationary motion is meaningless (and the
                // reading resolution cannot even observe it), so the penalty
                // ramps in smoothly around that speed.
                let hxy2 = vel.x * vel.x + vel.y * vel.y;
                let speed = hxy2.sqrt();
                let (s0, s1) = (0.02, 0.08);
                if speed > s0 {
                    let h = ((speed - s0) / (s1 - s0)).clamp(0.0, 1.0);
                    let w = h * h * (3.0 - 2.0 * h);
                    let dw_ds = if h > 0.0 && h < 1.0 { 6.0 * h * (1.0 - h) / (s1 - s0) } else { 0.0 };
                    let psi = vel.y.atan2(vel.x);
                    let delta = wrap_angle(yaw - psi);
                    let excess = delta.abs() - (0.5 * ctx.camera.horizontal_fov - ctx.cfg.fov_margin);
                    if excess > 0.0 {
                        let pen = excess * excess;
                        cost += ctx.cfg.lambda_fov * w * pen;
                        let base = 2.0 * ctx.cfg.lambda_fov * w * excess * delta.signum();
                        for i in 0..4 {
                            grad_yaw[s + i] += base * B3[i];
                        }
                        let dpsi_dvx = -vel.y / hxy2;
                        let dpsi_dvy = vel.x / hxy2;
                        let ramp = ctx.cfg.lambda_fov * pen * dw_ds / speed.max(1e-12);
                        for i in 0..4 {
                            grad_pos[s + i].x += (-base * dpsi_dvx + ramp * vel.x) * vb[i];
                            grad_pos[s + i].y += (-base * dpsi_dvy + ramp * vel.y) * vb[i];
                        }
                    }
                }
            }
        }
    }
    (cost, grad_pos, grad_yaw)
}

fn flatten_grad(
    vars: &Variables,
    grad_pos: &[Vec3],
    grad_yaw: &[f64],
    with_yaw: bool,
) -> Vec<f64> {
    let mut g = Vec::with_capacity(vars.free_count() * 4);
    for i in vars.free_lo..vars.free_hi {
        g.extend_from_slice(&[grad_pos[i].x, grad_pos[i].y, grad_pos[i].z]);
    }
    if with_yaw {
        for i in vars.free_lo..vars.free_hi {
            g.push(grad_yaw[i]);
        }
    }
    g
}

/// Per-term cost decomposition (smoothness, collision, dynamics, fov) of the
/// joint objective, for diagnostics and tests.
pub fn cost_breakdown(
    traj: &SplineTrajectory,
    esdf: &Esdf,
    camera: &CameraModel,
    limits: &KinematicLimits,
    cfg: &TrajectoryConfig,
) -> (f64, f64, f64, f64) {
    let probe = |weights: [f64; 4]| -> f64 {
        let c = TrajectoryConfig {
            lambda_smooth: weights[0],
            lambda_collision: weights[1],
            lambda_dynamics: weights[2],
            lambda_fov: weights[3],
            ..cfg.clone()
        };
        let ctx = CostContext { esdf, camera, limits, cfg: &c, with_fov: true, with_yaw: true };
        cost_and_gradient(traj, &ctx).0
    };
    (
        probe([cfg.lambda_smooth, 0.0, 0.0, 0.0]),
        probe([0.0, cfg.lambda_collision, 0.0, 0.0]),
        probe([0.0, 0.0, cfg.lambda_dynamics, 0.0]),
        probe([0.0, 0.0, 0.0, cfg.lambda_fov]),
    )
}

/// L-BFGS with Armijo backtracking; monotone by construction.
fn lbfgs_minimize(
    mut x: Vec<f64>,
    mut eval: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    max_iter: usize,
    grad_tol: f64,
) -> (Vec<f64>, f64, f64, usize, bool) {
    let m = 8usize;
    let dim = x.len();
    let (mut fx, mut gx) = eval(&x);
    if !fx.is_finite() {
        return (x, fx, f64::INFINITY, 0, true);
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iter = 0;
    while iter < max_iter {
        let gnorm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < grad_tol {
            break;
        }
        // Two-loop recursion.
        let mut q = gx.clone();
        let hist = s_hist.len();
        let mut alphas = vec![0.0; hist];
        for k in (0..hist).rev() {
            let rho = 1.0
                / y_hist[k]
                    .iter()
                    .zip(&s_hist[k])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .max(1e-12);
            let alpha = rho * s_hist[k].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            alphas[k] = alpha;
            for (qi, yi) in q.iter_mut().zip(&y_hist[k]) {
                *qi -= alpha * yi;
            }
        }
        let gamma = if hist > 0 {
            let sy: f64 = s_hist[hist - 1].iter().zip(&y_hist[hist - 1]).map(|(a, b)| a * b).sum();
            let yy: f64 = y_hist[hist - 1].iter().map(|v| v * v).sum();
            (sy / yy.max(1e-12)).max(1e-6)
        } else {
            1.0 / (1.0 + gnorm)
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for k in 0..hist {
            let rho = 1.0
                / y_hist[k]
                    .iter()
                    .zip(&s_hist[k])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .max(1e-12);
            let beta = rho * y_hist[k].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            for (qi, si) in q.iter_mut().zip(&s_hist[k]) {
                *qi += (alphas[k] - beta) * si;
            }
        }
        // q is the descent direction (for -q); Armijo backtracking.
        let dir_dot_grad: f64 = q.iter().zip(&gx).map(|(a, b)| a * b).sum();
        let (dir, slope) = if dir_dot_grad > 0.0 {
            (q, -dir_dot_grad)
        } else {
            // Fall back to steepest descent.
            (gx.clone(), -gnorm * gnorm)
        };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a - step * d).collect();
            let (fn_, gn) = eval(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gn.iter().zip(&gx).map(|(a, b)| a - b).collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                if sy > 1e-12 {
                    s_hist.push(s);
                    y_hist.push(y);
                    if s_hist.len() > m {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                }
                x = xn;
                fx = fn_;
                gx = gn;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iter += 1;
        if !accepted {
            break;
        }
        let _ = dim;
    }
    let gnorm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
    (x, fx, gnorm, iter, false)
}

/// Gradient-based refinement of a spline trajectory. `Baseline` optimizes the
/// position spline and rebuilds yaw from the path tangent; `Constrained` and
/// `Astar` optimize positions and yaw jointly with the FOV penalty. Boundary
/// control points stay fixed.
pub fn optimize_joint(
    traj: &SplineTrajectory,
    esdf: &Esdf,
    camera: &CameraModel,
    limits: &KinematicLimits,
    cfg: &TrajectoryConfig,
    mode: TrajectoryMode,
) -> Result<(SplineTrajectory, OptReport)> {
    let n = traj.ctrl_pos.len();
    if n < 7 {
        return Ok((
            traj.clone(),
            OptReport { iterations: 0, initial_cost: 0.0, final_cost: 0.0, grad_norm: 0.0, failed: false },
        ));
    }
    let with_yaw = mode != TrajectoryMode::Baseline;
    let with_fov = mode != TrajectoryMode::Baseline;
    let vars = Variables::new(n);
    let ctx = CostContext { esdf, camera, limits, cfg, with_fov, with_yaw };

    let mut work = traj.clone();
    let x0 = vars.pack(&work, with_yaw);
    let (c0, _, _) = cost_and_gradient(&work, &ctx);
    if !c0.is_finite() {
        return Err(SimError::OptimizationFailed);
    }
    let (x, fx, gnorm, iters, failed) = {
        let mut probe = traj.clone();
        lbfgs_minimize(
            x0,
            |x| {
                vars.unpack(x, &mut probe, with_yaw);
                let (c, gp, gy) = cost_and_gradient(&probe, &ctx);
                (c, flatten_grad(&vars, &gp, &gy, with_yaw))
            },
            cfg.max_iterations,
            cfg.grad_tolerance,
        )
    };
    if failed || !fx.is_finite() {
        return Err(SimError::OptimizationFailed);
    }
    vars.unpack(&x, &mut work, with_yaw);

    if mode == TrajectoryMode::Baseline {
        rebuild_yaw_from_tangent(&mut work);
    }
    debug_assert!(fx <= c0 + 1e-9, "optimizer increased the cost");
    Ok((
        work,
        OptReport { iterations: iters, initial_cost: c0, final_cost: fx, grad_norm: gnorm, failed: false },
    ))
}

/// Derive interior yaw control points from the position tangent, keeping the
/// boundary yaws (capture headings) fixed.
fn rebuild_yaw_from_tangent(traj: &mut SplineTrajectory) {
    let n = traj.ctrl_yaw.len();
    if n < 7 {
        return;
    }
    let mut targets: Vec<f64> = Vec::with_capacity(n);
    for i in 0..n {
        let t = ((i as f64 - 1.0) * traj.dt).clamp(0.0, traj.duration());
        let v = traj.velocity(t);
        if v.xy().norm() > 1e-3 {
            targets.push(v.y.atan2(v.x));
        } else {
            targets.push(traj.ctrl_yaw[i.min(n - 1)]);
        }
    }
    // Keep the boundary yaws (capture headings) and unwrap.
    for i in [0, 1, 2, n - 3, n - 2, n - 1] {
        targets[i] = traj.ctrl_yaw[i];
    }
    unwrap_yaws(&mut targets);
    for i in 3..n - 3 {
        traj.ctrl_yaw[i] = targets[i];
    }
}

/// Quantized feedback controller: the reference command is corrected by the
/// last command-vs-measured error, rounded to the reading resolution (half away
/// from zero), then clamped to limits.
pub fn controller_step(
    reference: &VelocityCommand,
    prev_cmd: &VelocityCommand,
    measured: &VelocityCommand,
    k_fb: f64,
    resolution: f64,
    limits: &KinematicLimits,
) -> VelocityCommand {
    let raw = VelocityCommand {
        linear: reference.linear + (prev_cmd.linear - measured.linear) * k_fb,
        yaw_rate: reference.yaw_rate + (prev_cmd.yaw_rate - measured.yaw_rate) * k_fb,
    };
    let mut linear = Vec3::new(
        round_to_multiple(raw.linear.x, resolution),
        round_to_multiple(raw.linear.y, resolution),
        round_to_multiple(raw.linear.z, resolution),
    );
    let speed = linear.norm();
    if speed > limits.v_max {
        linear *= limits.v_max / speed;
    }
    let yaw_rate = round_to_multiple(raw.yaw_rate, resolution)
        .clamp(-limits.omega_max, limits.omega_max);
    VelocityCommand { linear, yaw_rate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridGeom;
    use crate::mapping::{compute_esdf, CellState, MapDelta, OccupancyParams, VoxelMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn limits() -> KinematicLimits {
        KinematicLimits { v_max: 0.5, omega_max: 0.9, a_max: 1.0 }
    }

    fn open_esdf(dims: [usize; 3], res: f64, obstacles: &[[i64; 3]]) -> Esdf {
        let mut map = VoxelMap::new(GridGeom::new(Vec3::zeros(), res, dims), OccupancyParams::default());
        let mut incs: Vec<(u32, f32)> = Vec::new();
        for idx in 0..map.geom.len() {
            let c = map.geom.coords(idx);
            if obstacles.contains(&c) {
                incs.push((idx as u32, 3.5));
            } else {
                incs.push((idx as u32, -0.4));
            }
        }
        map.fuse(&MapDelta { increments: incs, changed: vec![] }).unwrap();
        assert_eq!(map.state(0), if obstacles.contains(&[0, 0, 0]) { CellState::Occupied } else { CellState::Free });
        compute_esdf(&map)
    }

    /// Uniformly spaced colinear control points with yaw along the motion: a
    /// true stationary point of the joint cost in empty space.
    fn stationary_spline() -> SplineTrajectory {
        SplineTrajectory {
            ctrl_pos: (0..10).map(|i| Vec3::new(1.0 + i as f64 * 0.3, 1.0, 1.0)).collect(),
            ctrl_yaw: vec![0.0; 10],
            dt: 1.0,
        }
    }

    #[test]
    fn basis_partition_of_unity() {
        for k in 0..=10 {
            let u = k as f64 / 10.0;
            let b3 = SplineTrajectory::basis3(u);
            assert!((b3.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(b3.iter().all(|&v| v >= 0.0));
            let b2 = SplineTrajectory::basis2(u);
            assert!((b2.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_two_point_path_is_colinear() {
        let path = vec![
            (Vec3::new(1.0, 2.0, 1.0), 0.3),
            (Vec3::new(4.0, 2.0, 1.0), 0.3),
        ];
        let traj = fit_spline(&path, &limits(), Vec3::zeros(), Vec3::zeros()).unwrap();
        for k in 0..=50 {
            let t = traj.duration() * k as f64 / 50.0;
            let p = traj.position(t);
            assert!(p.y.abs() - 2.0 < 1e-9 && (p.y - 2.0).abs() < 1e-9);
            assert!((p.z - 1.0).abs() < 1e-9);
            assert!(p.x >= 1.0 - 1e-9 && p.x <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn fit_duration_covers_feasibility_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(3..12);
            let path: Vec<PathPoint> = (0..n)
                .map(|_| {
                    (
                        Vec3::new(
                            rng.random_range(0.0..8.0),
                            rng.random_range(0.0..8.0),
                            rng.random_range(0.5..2.5),
                        ),
                        rng.random_range(-3.0..3.0),
                    )
                })
                .collect();
            let traj = fit_spline(&path, &limits(), Vec3::zeros(), Vec3::zeros()).unwrap();
            let mut length = 0.0;
            let mut yaw_total = 0.0;
            let mut yaws: Vec<f64> = path.iter().map(|p| p.1).collect();
            unwrap_yaws(&mut yaws);
            for i in 1..path.len() {
                length += (path[i].0 - path[i - 1].0).norm();
                yaw_total += (yaws[i] - yaws[i - 1]).abs();
            }
            let lb = (length / limits().v_max).max(yaw_total / limits().omega_max);
            assert!(
                traj.duration() >= lb - 1e-9,
                "duration {} below feasibility bound {}",
                traj.duration(),
                lb
            );
        }
    }

    #[test]
    fn fit_interpolates_waypoints() {
        let esdf = open_esdf([40, 40, 12], 0.25, &[]);
        let start = (Vec3::new(1.0, 1.0, 1.5), 0.0);
        let goal = (Vec3::new(8.0, 8.0, 1.5), 1.2);
        let cfg = TrajectoryConfig::default();
        let cam = CameraModel::default();
        let path = yaw_astar(&start, &goal, &esdf, &cam, &limits(), &cfg).unwrap();
        let traj = fit_spline(&path, &limits(), Vec3::zeros(), Vec3::zeros()).unwrap();
        // Waypoint i sits at knot time i*dt.
        let mut worst: f64 = 0.0;
        for (i, (p, _)) in path.iter().enumerate() {
            let at = traj.position(i as f64 * traj.dt);
            worst = worst.max((at - p).norm());
        }
        assert!(worst <= 0.5 * 0.25, "max waypoint deviation {worst}");
    }

    #[test]
    fn spline_derivatives_match_numeric_differentiation() {
        let traj = {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let path: Vec<PathPoint> = (0..8)
                .map(|_| {
                    (
                        Vec3::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), 1.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect();
            fit_spline(&path, &limits(), Vec3::zeros(), Vec3::zeros()).unwrap()
        };
        let eps = 1e-6;
        for k in 1..60 {
            let t = traj.duration() * k as f64 / 60.0;
            if t - eps < 0.0 || t + eps > traj.duration() {
                continue;
            }
            let v_num = (traj.position(t + eps) - traj.position(t - eps)) / (2.0 * eps);
            assert!((traj.velocity(t) - v_num).norm() < 1e-5);
            let a_num = (traj.velocity(t + eps) - traj.velocity(t - eps)) / (2.0 * eps);
            assert!((traj.acceleration(t) - a_num).norm() < 1e-4);
            let w_num = (traj.yaw(t + eps) - traj.yaw(t - eps)) / (2.0 * eps);
            assert!((traj.yaw_rate(t) - w_num).abs() < 1e-5);
        }
    }

    #[test]
    fn energy_simpson_matches_closed_form() {
        let traj = {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let path: Vec<PathPoint> = (0..9)
                .map(|_| {
                    (
                        Vec3::new(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(0.5..2.0)),
                        0.0,
                    )
                })
                .collect();
            fit_spline(&path, &limits(), Vec3::zeros(), Vec3::zeros()).unwrap()
        };
        let exact = traj.energy_closed_form();
        let simpson = traj.energy_simpson(2000);
        assert!(exact > 0.0);
        assert!(
            ((simpson - exact) / exact).abs() < 1e-3,
            "simpson {simpson} vs closed form {exact}"
        );
    }

    #[test]
    fn yaw_astar_start_equals_goal() {
        let esdf = open_esdf([20, 20, 8], 0.25, &[]);
        let cfg = TrajectoryConfig::default();
        let s = (Vec3::new(2.0, 2.0, 1.0), 0.4);
        let path = yaw_astar(&s, &s, &esdf, &CameraModel::default(), &limits(), &cfg).unwrap();
        assert_eq!(path.len(), 1);
    }

    #[test]
    fn yaw_astar_paths_satisfy_expansion_constraints() {
        let esdf = open_esdf(
            [32, 32, 8],
            0.25,
            &(8..24).flat_map(|y| (0..4).map(move |z| [16, y, z])).collect::<Vec<_>>(),
        );
        let cfg = TrajectoryConfig::default();
        let cam = CameraModel::default();
        let lim = limits();
        let half_fov = 0.5 * cam.horizontal_fov + 1e-9;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut done = 0;
        let mut attempts = 0;
        while done < 200 && attempts < 2000 {
            attempts += 1;
            let s = (
                Vec3::new(rng.random_range(0.8..7.2), rng.random_range(0.8..7.2), rng.random_range(0.6..1.6)),
                rng.random_range(-3.1..3.1),
            );
            let g = (
                Vec3::new(rng.random_range(0.8..7.2), rng.random_range(0.8..7.2), rng.random_range(0.6..1.6)),
                rng.random_range(-3.1..3.1),
            );
            let path = match yaw_astar(&s, &g, &esdf, &cam, &lim, &cfg) {
                Ok(p) => p,
                Err(_) => continue,
            };
            for w in path.windows(2) {
                let dp = w[1].0 - w[0].0;
                assert!(dp.norm() > 1e-9, "zero-translation expansion");
                if dp.xy().norm() > 1e-9 {
                    let dir = dp.y.atan2(dp.x);
                    assert!(angle_diff(w[0].1, dir) <= half_fov, "step leaves current FOV");
                    assert!(angle_diff(w[1].1, dir) <= half_fov, "step leaves next FOV");
                }
            }
            done += 1;
        }
        assert!(done >= 150, "only {done} successful queries");
    }

    /// Plain Dijkstra over cells with the same step costs (yaw-free oracle).
    fn dijkstra_cost(esdf: &Esdf, d_safe: f64, from: &Vec3, to: &Vec3, v_max: f64) -> Option<f64> {
        let geom = &esdf.geom;
        let start = geom.cell_of(from);
        let goal = geom.cell_of(to);
        let mut dist = vec![f64::INFINITY; geom.len()];
        let mut heap = BinaryHeap::new();
        dist[geom.index(start)] = 0.0;
        heap.push(AstarNode { f: 0.0, h: 0.0, seq: 0, state: geom.index(start) });
        let mut seq = 1;
        while let Some(AstarNode { f, state, .. }) = heap.pop() {
            if f > dist[state] + 1e-12 {
                continue;
            }
            let c = geom.coords(state);
            if c == goal {
                return Some(f);
            }
            for n in geom.neighbors26(c) {
                if esdf.at(n) < d_safe {
                    continue;
                }
                // Same swept-cell rule as the lattice.
                let mut safe = true;
                geom.traverse(&geom.center(c), &geom.center(n), |cc, _| {
                    if esdf.at(cc) < d_safe {
                        safe = false;
                        return false;
                    }
                    true
                });
                if !safe {
                    continue;
                }
                let step = (((n[0] - c[0]).pow(2) + (n[1] - c[1]).pow(2) + (n[2] - c[2]).pow(2)) as f64)
                    .sqrt()
                    * geom.resolution
                    / v_max;
                let ni = geom.index(n);
                if f + step < dist[ni] - 1e-12 {
                    dist[ni] = f + step;
                    heap.push(AstarNode { f: f + step, h: 0.0, seq, state: ni });
                    seq += 1;
                }
            }
        }
        None
    }

    #[test]
    fn yaw_free_astar_equals_dijkstra() {
        let esdf = open_esdf(
            [24, 24, 8],
            0.25,
            &(4..20).flat_map(|y| (0..6).map(move |z| [12, y, z])).collect::<Vec<_>>(),
        );
        // hfov of a full turn disables the FOV checks; one yaw bin removes the
        // rotation dimension entirely.
        let cam = CameraModel { horizontal_fov: 2.0 * std::f64::consts::PI, ..CameraModel::default() };
        let cfg = TrajectoryConfig { n_yaw_bins: 1, ..TrajectoryConfig::default() };
        let lim = limits();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut done = 0;
        while done < 40 {
            // Snap queries to cell centers so both searches share endpoints.
            let snap = |v: Vec3| esdf.geom.center(esdf.geom.cell_of(&v));
            let s = (
                snap(Vec3::new(rng.random_range(0.8..5.2), rng.random_range(0.8..5.2), 1.0)),
                bin_angle(0, 1),
            );
            let g = (
                snap(Vec3::new(rng.random_range(0.8..5.2), rng.random_range(0.8..5.2), 1.0)),
                bin_angle(0, 1),
            );
            let astar = match yaw_astar(&s, &g, &esdf, &cam, &lim, &cfg) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let cost: f64 = astar
                .windows(2)
                .map(|w| (w[1].0 - w[0].0).norm() / lim.v_max)
                .sum();
            let oracle = dijkstra_cost(&esdf, cfg.d_safe, &s.0, &g.0, lim.v_max).unwrap();
            assert!(
                (cost - oracle).abs() < 1e-9,
                "lattice {cost} vs dijkstra {oracle}"
            );
            done += 1;
        }
    }

    #[test]
    fn optimizer_leaves_stationary_spline_unchanged() {
        let esdf = open_esdf([40, 40, 12], 0.25, &[]);
        let traj = stationary_spline();
        let cfg = TrajectoryConfig::default();
        let (out, report) = optimize_joint(
            &traj,
            &esdf,
            &CameraModel::default(),
            &limits(),
            &cfg,
            TrajectoryMode::Constrained,
        )
        .unwrap();
        assert!(!report.failed);
        for (a, b) in traj.ctrl_pos.iter().zip(&out.ctrl_pos) {
            assert!((a - b).norm() < 1e-6, "control point moved: {a:?} -> {b:?}");
        }
        for (a, b) in traj.ctrl_yaw.iter().zip(&out.ctrl_yaw) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let esdf = open_esdf(
            [32, 32, 10],
            0.25,
            &(6..18)
                .flat_map(|y| (2..8).map(move |z| [14, y, z]))
                .collect::<Vec<_>>(),
        );
        let cam = CameraModel::default();
        let lim = limits();
        let cfg = TrajectoryConfig::default();
        for case in 0..20 {
            let n_ctrl = rng.random_range(8..14);
            let mut traj = SplineTrajectory {
                ctrl_pos: (0..n_ctrl)
                    .map(|_| {
                        Vec3::new(
                            rng.random_range(1.0..7.0),
                            rng.random_range(1.0..7.0),
                            rng.random_range(0.8..2.0),
                        )
                    })
                    .collect(),
                ctrl_yaw: (0..n_ctrl).map(|_| rng.random_range(-2.0..2.0)).collect(),
                dt: rng.random_range(0.3..1.0),
            };
            unwrap_yaws(&mut traj.ctrl_yaw);
            let ctx = CostContext {
                esdf: &esdf,
                camera: &cam,
                limits: &lim,
                cfg: &cfg,
                with_fov: true,
                with_yaw: true,
            };
            let (c0, gp, gy) = cost_and_gradient(&traj, &ctx);
            if c0 < 1e-9 {
                continue;
            }
            let eps = 1e-6;
            let mut worst_rel: f64 = 0.0;
            for i in 0..n_ctrl {
                for axis in 0..3 {
                    let mut tp = traj.clone();
                    tp.ctrl_pos[i][axis] += eps;
                    let (cp, _, _) = cost_and_gradient(&tp, &ctx);
                    let mut tm = traj.clone();
                    tm.ctrl_pos[i][axis] -= eps;
                    let (cm, _, _) = cost_and_gradient(&tm, &ctx);
                    let numeric = (cp - cm) / (2.0 * eps);
                    let analytic = gp[i][axis];
                    let denom = numeric.abs().max(analytic.abs()).max(1e-4);
                    worst_rel = worst_rel.max((numeric - analytic).abs() / denom);
                }
                let mut tp = traj.clone();
                tp.ctrl_yaw[i] += eps;
                let (cp, _, _) = cost_and_gradient(&tp, &ctx);
                let mut tm = traj.clone();
                tm.ctrl_yaw[i] -= eps;
                let (cm, _, _) = cost_and_gradient(&tm, &ctx);
                let numeric = (cp - cm) / (2.0 * eps);
                let denom = numeric.abs().max(gy[i].abs()).max(1e-4);
                worst_rel = worst_rel.max((numeric - gy[i]).abs() / denom);
            }
            assert!(
                worst_rel <= 1e-4,
                "case {case}: gradient relative error {worst_rel}"
            );
        }
    }

    #[test]
    fn fov_violations_persist_without_penalty_and_vanish_with_astar_seed() {
        let esdf = open_esdf([48, 48, 12], 0.25, &[]);
        let cam = CameraModel::default();
        let lim = limits();
        let cfg = TrajectoryConfig::default();

        // A sideways pair traversal: motion along +y, required yaw along +x.
        let a = (Vec3::new(5.0, 3.0, 1.5), 0.0);
        let b = (Vec3::new(5.0, 7.0, 1.5), 0.0);
        let straight: Vec<PathPoint> = (0..=16)
            .map(|i| {
                let t = i as f64 / 16.0;
                (a.0 + (b.0 - a.0) * t, 0.0)
            })
            .collect();
        let seed = fit_spline(&straight, &lim, Vec3::zeros(), Vec3::zeros()).unwrap();
        let no_fov_cfg = TrajectoryConfig { lambda_fov: 0.0, ..cfg.clone() };
        let (base, _) = optimize_joint(&seed, &esdf, &cam, &lim, &no_fov_cfg, TrajectoryMode::Constrained).unwrap();
        assert!(
            base.fov_violation_samples(&cam) > 0,
            "perpendicular traversal must violate the FOV without the penalty"
        );

        let lattice = yaw_astar(&a, &b, &esdf, &cam, &lim, &cfg).unwrap();
        let (vs, ve) = lattice_boundary_velocities(&lattice, &lim);
        let seeded = fit_spline(&lattice, &lim, vs, ve).unwrap();
        let (opt, _) = optimize_joint(&seeded, &esdf, &cam, &lim, &cfg, TrajectoryMode::Astar).unwrap();
        assert_eq!(
            opt.fov_violation_samples(&cam),
            0,
            "lattice-seeded trajectory must keep motion inside the FOV"
        );
    }

    #[test]
    fn controller_rounds_and_compensates_bias() {
        let lim = limits();
        let zero = VelocityCommand::zero();
        let r = VelocityCommand { linear: Vec3::new(0.333, 0.0, 0.0), yaw_rate: 0.0 };
        let out = controller_step(&r, &zero, &zero, 1.0, 0.1, &lim);
        assert!((out.linear.x - 0.3).abs() < 1e-12);

        // measured == prev_cmd: plain rounding of the reference.
        let prev = VelocityCommand { linear: Vec3::new(0.2, 0.0, 0.0), yaw_rate: 0.1 };
        let out2 = controller_step(&r, &prev, &prev, 1.0, 0.1, &lim);
        assert!((out2.linear.x - 0.3).abs() < 1e-12);

        // Persistent execution bias of -0.05: the closed loop settles within
        // resolution/2 of the reference.
        let reference = VelocityCommand { linear: Vec3::new(0.35, 0.0, 0.0), yaw_rate: 0.0 };
        let bias = -0.05;
        let mut cmd = VelocityCommand::zero();
        let mut executed = 0.0;
        for _ in 0..100 {
            let measured = VelocityCommand { linear: Vec3::new(executed, 0.0, 0.0), yaw_rate: 0.0 };
            cmd = controller_step(&reference, &cmd, &measured, 1.0, 0.1, &lim);
            executed = cmd.linear.x + bias;
        }
        assert!(
            (executed - reference.linear.x).abs() <= 0.05 + 1e-9,
            "steady-state error {}",
            (executed - reference.linear.x).abs()
        );
    }
}

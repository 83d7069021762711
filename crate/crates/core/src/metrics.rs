//! Evaluation metrics: map quality against the ground-truth surface (AHD, ACC,
//! COV), odometry quality (RPE, ATE) and path statistics.

use crate::error::Result;
use crate::mapping::VoxelMap;
use crate::math::Vec3;
use crate::world::TruthGrid;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Map reconstruction quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapQuality {
    /// Symmetric average Hausdorff distance, meters. `None` when the
    /// reconstruction is empty.
    pub ahd: Option<f64>,
    pub acc: f64,
    pub cov: f64,
}

/// Exact nearest-neighbor distances from each query to the point set, using a
/// uniform bucket grid with expanding shell search.
fn nearest_distances(queries: &[Vec3], points: &[Vec3]) -> Vec<f64> {
    if points.is_empty() {
        return vec![f64::INFINITY; queries.len()];
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let h = ((hi - lo).norm() / (points.len() as f64).cbrt() / 2.0).max(1e-3);
    let dims: Vec<i64> = (0..3).map(|i| ((hi[i] - lo[i]) / h).floor() as i64 + 1).collect();
    let cell_of = |p: &Vec3| -> [i64; 3] {
        let mut c = [0i64; 3];
        for i in 0..3 {
            c[i] = (((p[i] - lo[i]) / h).floor() as i64).clamp(0, dims[i] - 1);
        }
        c
    };
    let key = |c: [i64; 3]| (c[0] * dims[1] + c[1]) * dims[2] + c[2];
    let mut buckets: std::collections::HashMap<i64, Vec<usize>> = std::collections::HashMap::new();
    for (k, p) in points.iter().enumerate() {
        buckets.entry(key(cell_of(p))).or_default().push(k);
    }
    let max_ring = *dims.iter().max().unwrap();

    queries
        .iter()
        .map(|q| {
            let c = cell_of(q);
            let mut best = f64::INFINITY;
            for ring in 0..=max_ring {
                // Once a candidate is found, one extra ring guarantees exactness.
                if best.is_finite() && (ring as f64 - 1.0) * h > best {
                    break;
                }
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                            if n.iter().zip(&dims).any(|(v, d)| *v < 0 || v >= d) {
                                continue;
                            }
                            if let Some(list) = buckets.get(&key(n)) {
                                for &k in list {
                                    best = best.min((points[k] - q).norm());
                                }
                            }
                        }
                    }
                }
            }
            best
        })
        .collect()
}

/// AHD / ACC / COV between the reconstructed occupied cells and the
/// ground-truth surface voxels. The inlier threshold is twice the map
/// resolution.
pub fn map_quality(reconstructed: &VoxelMap, truth: &TruthGrid) -> MapQuality {
    let r = reconstructed.occupied_centers();
    let g = truth.surface_voxels();
    let tau = 2.0 * reconstructed.geom.resolution;
    if g.is_empty() {
        return MapQuality { ahd: None, acc: 0.0, cov: 0.0 };
    }
    if r.is_empty() {
        return MapQuality { ahd: None, acc: 0.0, cov: 0.0 };
    }
    let d_rg = nearest_distances(&r, &g);
    let d_gr = nearest_distances(&g, &r);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ahd = 0.5 * (mean(&d_rg) + mean(&d_gr));
    let acc = d_rg.iter().filter(|&&d| d <= tau).count() as f64 / r.len() as f64;
    let cov = d_gr.iter().filter(|&&d| d <= tau).count() as f64 / g.len() as f64;
    MapQuality { ahd: Some(ahd), acc, cov }
}

/// Odometry quality from synchronized pose samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryQuality {
    pub rpe: f64,
    pub ate: f64,
    /// Set when the inputs had to be truncated to a common length.
    pub truncated: bool,
}

/// ATE: RMS positional error (shared start frame, no alignment). RPE: RMS of
/// relative-motion error over 1-second windows.
pub fn odometry_quality(
    estimated: &[Vec3],
    truth: &[Vec3],
    sample_hz: f64,
) -> OdometryQuality {
    let n = estimated.len().min(truth.len());
    let truncated = estimated.len() != truth.len();
    if n == 0 {
        return OdometryQuality { rpe: 0.0, ate: 0.0, truncated };
    }
    let mut sq = 0.0;
    for k in 0..n {
        sq += (estimated[k] - truth[k]).norm_squared();
    }
    let ate = (sq / n as f64).sqrt();

    let window = sample_hz.round() as usize;
    let mut rpe = 0.0;
    if window > 0 && n > window {
        let mut acc = 0.0;
        let m = n - window;
        for k in 0..m {
            let de = estimated[k + window] - estimated[k];
            let dt = truth[k + window] - truth[k];
            acc += (de - dt).norm_squared();
        }
        rpe = (acc / m as f64).sqrt();
    }
    OdometryQuality { rpe, ate, truncated }
}

/// Path statistics over fixed-rate position samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub time: f64,
    pub length: f64,
    pub avg_velocity: f64,
    pub energy: f64,
}

pub fn path_stats(positions: &[Vec3], dt: f64) -> PathStats {
    if positions.len() < 2 {
        return PathStats { time: 0.0, length: 0.0, avg_velocity: 0.0, energy: 0.0 };
    }
    let time = (positions.len() - 1) as f64 * dt;
    let length: f64 = positions.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    let mut energy = 0.0;
    for k in 1..positions.len() - 1 {
        let a = (positions[k + 1] - positions[k] * 2.0 + positions[k - 1]) / (dt * dt);
        energy += a.norm_squared() * dt;
    }
    PathStats { time, length, avg_velocity: if time > 0.0 { length / time } else { 0.0 }, energy }
}

/// Per-agent run metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent_id: u32,
    pub time: f64,
    pub length: f64,
    pub avg_velocity: f64,
    pub energy: f64,
    pub rpe: f64,
    pub ate: f64,
    /// Sustained FOV-violation events (>= 0.1 s of motion outside the FOV).
    pub fov_violations: usize,
    /// Individual 50 Hz samples with motion outside the FOV.
    pub fov_violation_samples: usize,
    pub safety_violations: usize,
    pub captures: usize,
}

/// One scenario run: per-agent and aggregate metrics plus map quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_digest: String,
    pub complete: bool,
    pub sim_time: f64,
    pub agents: Vec<AgentMetrics>,
    pub map: MapQuality,
}

impl RunReport {
    /// Exploration time: when the last agent finished (global completion).
    pub fn time(&self) -> f64 {
        self.sim_time
    }

    /// Mean per-agent path length.
    pub fn mean_length(&self) -> f64 {
        mean(self.agents.iter().map(|a| a.length))
    }

    pub fn mean_avg_velocity(&self) -> f64 {
        mean(self.agents.iter().map(|a| a.avg_velocity))
    }

    pub fn mean_energy(&self) -> f64 {
        mean(self.agents.iter().map(|a| a.energy))
    }

    pub fn mean_rpe(&self) -> f64 {
        mean(self.agents.iter().map(|a| a.rpe))
    }

    pub fn mean_ate(&self) -> f64 {
        mean(self.agents.iter().map(|a| a.ate))
    }

    pub fn total_fov_violations(&self) -> usize {
        self.agents.iter().map(|a| a.fov_violations).sum()
    }

    pub fn total_safety_violations(&self) -> usize {
        self.agents.iter().map(|a| a.safety_violations).sum()
    }

    pub const CSV_HEADER: &'static str = "seed,config,complete,time,length,avg_velocity,energy,ahd,acc,cov,rpe,ate,fov_violations,safety_violations";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.3},{:.4},{:.4},{},{:.4},{:.4},{:.5},{:.5},{},{}",
            self.seed,
            self.config_digest,
            self.complete,
            self.time(),
            self.mean_length(),
            self.mean_avg_velocity(),
            self.mean_energy(),
            self.map.ahd.map(|v| format!("{v:.4}")).unwrap_or_else(|| "nan".into()),
            self.map.acc,
            self.map.cov,
            self.mean_rpe(),
            self.mean_ate(),
            self.total_fov_violations(),
            self.total_safety_violations(),
        )
    }

    pub fn write_json(&self, w: &mut impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean and sample standard deviation across runs, for the aggregate tables.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    (m, var.sqrt())
}

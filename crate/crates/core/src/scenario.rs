//! Scenario configuration and the end-to-end runner: composes the world,
//! mapping, frontier, planning, trajectory and fleet layers into complete
//! exploration runs and reproduces the evaluation scenarios as named presets.

use crate::error::{Result, SimError};
use crate::fleet::{FleetConfig, FleetMode, FleetSim};
use crate::frontier::{EvaluationMode, FrontierConfig, SamplingMode};
use crate::mapping::OccupancyParams;
use crate::math::digest_hex;
use crate::metrics::{map_quality, mean_std, RunReport};
use crate::trajectory::{TrajectoryConfig, TrajectoryMode};
use crate::world::{
    CameraModel, DriftModel, Environment, KinematicLimits, PairDepthParams, WorldGenParams,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where the environment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSource {
    File(PathBuf),
    Generate(WorldGenParams),
}

/// Full description of one experiment row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub environment: EnvSource,
    pub seeds: Vec<u64>,
    pub uav_count: usize,
    pub sampling_mode: SamplingMode,
    pub evaluation_mode: EvaluationMode,
    pub trajectory_mode: TrajectoryMode,
    pub fleet_mode: FleetMode,
    pub timeout: f64,
    pub camera: CameraModel,
    pub limits: KinematicLimits,
    pub drift: DriftModel,
    pub pair_depth: PairDepthParams,
    pub occupancy: OccupancyParams,
    pub frontier: FrontierConfig,
    pub trajectory: TrajectoryConfig,
    pub fleet: FleetConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            environment: EnvSource::Generate(WorldGenParams::default()),
            seeds: vec![1, 2, 3, 4, 5],
            uav_count: 1,
            sampling_mode: SamplingMode::Combined,
            evaluation_mode: EvaluationMode::Heuristic,
            trajectory_mode: TrajectoryMode::Astar,
            fleet_mode: FleetMode::Single,
            timeout: 2000.0,
            camera: CameraModel::default(),
            limits: KinematicLimits::default(),
            drift: DriftModel::default(),
            pair_depth: PairDepthParams::default(),
            occupancy: OccupancyParams::default(),
            frontier: FrontierConfig::default(),
            trajectory: TrajectoryConfig::default(),
            fleet: FleetConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.uav_count == 0 {
            return Err(SimError::InvalidConfig("uav_count must be >= 1".into()));
        }
        if self.fleet_mode == FleetMode::Single && self.uav_count != 1 {
            return Err(SimError::InvalidConfig(
                "fleet_mode=single requires uav_count=1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(SimError::InvalidConfig("at least one seed required".into()));
        }
        self.camera.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        let cfg: ScenarioConfig = serde_json::from_str(&s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Stable digest identifying this configuration (seeds excluded so one
    /// digest covers every run of the row).
    pub fn digest(&self) -> String {
        let mut probe = self.clone();
        probe.seeds = Vec::new();
        digest_hex(serde_json::to_string(&probe).unwrap_or_default().as_bytes())
    }

    pub fn environment(&self) -> Result<Environment> {
        match &self.environment {
            EnvSource::File(p) => Environment::load(p),
            EnvSource::Generate(params) => Environment::generate(params),
        }
    }

    fn fleet_config(&self) -> FleetConfig {
        FleetConfig {
            mode: self.fleet_mode,
            agent_count: self.uav_count,
            ..self.fleet.clone()
        }
    }
}

/// Run one seed of a scenario, optionally writing artifacts under `run_dir`.
pub fn run_single(config: &ScenarioConfig, seed: u64, run_dir: Option<&Path>) -> Result<RunReport> {
    let env = config.environment()?;
    let mut sim = FleetSim::new(
        env,
        config.camera,
        config.limits,
        config.pair_depth,
        config.drift,
        config.occupancy,
        config.fleet_config(),
        config.trajectory.clone(),
        config.frontier.clone(),
        config.sampling_mode,
        config.evaluation_mode,
        config.trajectory_mode,
        seed,
    );
    let (agents, complete) = sim.run(config.timeout);
    let map = map_quality(sim.final_map(), &sim.world.grid);
    let report = RunReport {
        seed,
        config_digest: config.digest(),
        complete,
        sim_time: sim.now,
        agents,
        map,
    };

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("report.json"))?;
        report.write_json(&mut f)?;
        let mut m = std::fs::File::create(dir.join("map.bin"))?;
        sim.final_map().write_dump(&mut m)?;
        for idx in 0..sim.agents.len() {
            let mut t = std::fs::File::create(dir.join(format!("traj_agent{idx}.csv")))?;
            sim.write_executed_csv(idx, &mut t)?;
        }
        std::fs::write(dir.join("messages.log"), &sim.bus.log)?;
        std::fs::write(dir.join("plan_trace.log"), &sim.plan_trace)?;
        if let Some(base) = &sim.base {
            let mut fr = std::fs::File::create(dir.join("frontiers.txt"))?;
            base.fis.write_dump(&mut fr)?;
        }
    }
    Ok(report)
}

/// Run every seed of a scenario (seeds in parallel, each internally
/// deterministic). Reports come back ordered by seed.
pub fn run_scenario(config: &ScenarioConfig, out_dir: Option<&Path>) -> Result<Vec<RunReport>> {
    config.validate()?;
    let digest = config.digest();
    let results: Vec<Result<RunReport>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let run_dir = out_dir.map(|d| d.join(format!("{}-{}-s{:04}", config.name, digest, seed)));
            run_single(config, seed, run_dir.as_deref())
        })
        .collect();
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => eprintln!("run aborted: {e}"),
        }
    }
    reports.sort_by_key(|r| r.seed);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from(RunReport::CSV_HEADER);
        csv.push('\n');
        for r in &reports {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        std::fs::write(dir.join(format!("{}-summary.csv", config.name)), csv)?;
    }
    Ok(reports)
}

/// The named experiment presets. Each one varies exactly the fields its
/// comparison is about, on a shared base configuration.
pub fn named_scenario(name: &str) -> Result<Vec<ScenarioConfig>> {
    let base = ScenarioConfig::default();
    let rows = match name {
        // Pair evaluation: interval captures vs overlap-ranked vs heuristic-ranked
        // pairs, all with uniform (cylindrical) sampling.
        "table_1" => vec![
            ("no", EvaluationMode::None),
            ("overlap", EvaluationMode::Overlap),
            ("heuristic", EvaluationMode::Heuristic),
        ]
        .into_iter()
        .map(|(label, eval)| ScenarioConfig {
            name: format!("table_1_{label}"),
            sampling_mode: SamplingMode::Uniform,
            evaluation_mode: eval,
            ..base.clone()
        })
        .collect(),
        // Sampling strategy: uniform vs line vs combined. Two tables in the
        // write-up share these rows (map/odometry view and path view).
        "table_2" | "table_3" => ["uniform", "line", "combined"]
            .into_iter()
            .map(|label| ScenarioConfig {
                name: format!("{name}_{label}"),
                sampling_mode: match label {
                    "uniform" => SamplingMode::Uniform,
                    "line" => SamplingMode::Line,
                    _ => SamplingMode::Combined,
                },
                // The line-accept bar calibrated so combined mode genuinely
                // mixes line and cylindrical pairs.
                frontier: FrontierConfig { score_accept: 0.06, ..base.frontier.clone() },
                ..base.clone()
            })
            .collect(),
        // Trajectory generation variants.
        "table_4" => ["baseline", "constrained", "astar"]
            .into_iter()
            .map(|label| ScenarioConfig {
                name: format!("table_4_{label}"),
                trajectory_mode: match label {
                    "baseline" => TrajectoryMode::Baseline,
                    "constrained" => TrajectoryMode::Constrained,
                    _ => TrajectoryMode::Astar,
                },
                ..base.clone()
            })
            .collect(),
        // Multi-UAV: semi-distributed vs pairwise baseline at 1..3 agents.
        "table_5" => {
            let mut rows = vec![ScenarioConfig {
                name: "table_5_single_1".into(),
                ..base.clone()
            }];
            for count in [2usize, 3] {
                for (label, mode) in [
                    ("baseline", FleetMode::PairwiseBaseline),
                    ("our", FleetMode::SemiDistributed),
                ] {
                    rows.push(ScenarioConfig {
                        name: format!("table_5_{label}_{count}"),
                        uav_count: count,
                        fleet_mode: mode,
                        ..base.clone()
                    });
                }
            }
            rows
        }
        other => {
            return Err(SimError::InvalidConfig(format!(
                "unknown scenario '{other}' (expected table_1 .. table_5)"
            )))
        }
    };
    Ok(rows)
}

pub fn scenario_names() -> &'static [&'static str] {
    &["table_1", "table_2", "table_3", "table_4", "table_5"]
}

/// Aggregate mean +- std table over the runs of each row.
pub fn format_table(rows: &[(String, Vec<RunReport>)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>14} {:>14} {:>12} {:>14} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "row", "time,s", "length,m", "avg vel,m/s", "energy", "AHD,m", "ACC", "COV", "RPE,m", "ATE,m"
    ));
    for (label, reports) in rows {
        let col = |f: &dyn Fn(&RunReport) -> f64| -> (f64, f64) {
            mean_std(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        let (t, ts) = col(&|r| r.time());
        let (l, ls) = col(&|r| r.mean_length());
        let (v, vs) = col(&|r| r.mean_avg_velocity());
        let (e, es) = col(&|r| r.mean_energy());
        let (ahd, ahds) = col(&|r| r.map.ahd.unwrap_or(f64::NAN));
        let (acc, accs) = col(&|r| r.map.acc);
        let (cov, covs) = col(&|r| r.map.cov);
        let (rpe, rpes) = col(&|r| r.mean_rpe());
        let (ate, ates) = col(&|r| r.mean_ate());
        out.push_str(&format!(
            "{:<24} {:>8.1}±{:<5.1} {:>8.1}±{:<5.1} {:>6.2}±{:<5.2} {:>8.2}±{:<5.2} {:>6.2}±{:<5.2} {:>6.2}±{:<5.2} {:>6.2}±{:<5.2} {:>6.3}±{:<5.3} {:>6.3}±{:<5.3}\n",
            label, t, ts, l, ls, v, vs, e, es, ahd, ahds, acc, accs, cov, covs, rpe, rpes, ate, ates
        ));
    }
    out
}

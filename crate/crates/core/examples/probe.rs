use exploresim_core::scenario::*;
use exploresim_core::world::WorldGenParams;
use std::time::Instant;

fn main() {
    let mut cfg = ScenarioConfig::default();
    cfg.name = "smoke".into();
    cfg.environment = EnvSource::Generate(WorldGenParams {
        size: [10.0, 10.0, 3.0], resolution: 0.25, seed: 7,
        partition_count: 0, pillar_count: 1, ..Default::default()
    });
    cfg.camera.image_cols = 48;
    cfg.camera.image_rows = 36;
    cfg.seeds = vec![1];
    cfg.timeout = 900.0;
    let t0 = Instant::now();
    match run_single(&cfg, 1, None) {
        Ok(r) => {
            println!("complete={} sim_time={:.1} wall={:.1}s", r.complete, r.sim_time, t0.elapsed().as_secs_f64());
            println!("len={:.1} vel={:.2} energy={:.1}", r.mean_length(), r.mean_avg_velocity(), r.mean_energy());
            println!("map: ahd={:?} acc={:.2} cov={:.2}", r.map.ahd, r.map.acc, r.map.cov);
            println!("rpe={:.4} ate={:.3} fov_events={} fov_samples={} safety={} captures={}",
                r.mean_rpe(), r.mean_ate(), r.total_fov_violations(),
                r.agents[0].fov_violation_samples, r.total_safety_violations(), r.agents[0].captures);
        }
        Err(e) => println!("error: {e}"),
    }
}

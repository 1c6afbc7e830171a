use gsslam::config::{RunConfig, RunMode};
use gsslam::pipeline::run;
use gsslam::scene::{generate_scene, SceneSpec};

const ORBIT_CONFIG: &str = include_str!("../../../configs/orbit.toml");

#[test]
fn noise_free_orbit_tracks_and_maps() {
    let data = generate_scene(&SceneSpec::default(), 0).unwrap().dataset;
    let mut cfg = RunConfig::from_toml(ORBIT_CONFIG).unwrap();
    cfg.tracking.flow_noise_px = 0.0;
    let out = run(&cfg, &data).unwrap();
    let r = &out.report;
    assert!(r.ate_rmse < 1e-3, "ate {}", r.ate_rmse);
    assert!(r.mean_psnr >= 30.0, "psnr {}", r.mean_psnr);
    assert_eq!(r.keyframes, out.trajectory.len());
}

#[test]
fn concurrent_mode_run_tracks_and_maps() {
    let mut data = generate_scene(&SceneSpec::default(), 0).unwrap().dataset;
    data.clip(20);
    let mut cfg = RunConfig::from_toml(ORBIT_CONFIG).unwrap();
    cfg.mode = RunMode::Concurrent;
    cfg.mapping.post_iterations = 0;
    let out = run(&cfg, &data).unwrap();
    assert!(out.trajectory.len() >= 3);
    assert!(out.report.ate_rmse < 5e-3, "ate {}", out.report.ate_rmse);
    assert!(!out.gaussians.is_empty());
}

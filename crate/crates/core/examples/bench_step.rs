use std::time::Instant;

use raio::evaluation::{chamfer, clutter_ratio, relative_errors, DESK_SEGMENT_LENGTHS};
use raio::extractor::ExtractorConfig;
use raio::geom::Se2;
use raio::pipeline::*;
use raio::preintegration::Bias;
use raio::simulator::*;
use raio::velocity::Extrinsics;
use rand::Rng;

fn suite_radar() -> RadarConfig {
    let mut r = RadarConfig::with_geometry(64, 64, 0.4, 60f64.to_radians());
    r.speckle_sigma = 0.25;
    r.doppler_noise_sigma = 0.02;
    r.doppler_res = 0.025;
    r
}

fn suite_trajectory(i: usize, duration: f64) -> TrajectorySpec {
    let speed = SpeedProfile { cruise: 1.0, ramp_time: 0.0 };
    match i {
        0 => TrajectorySpec { kind: TrajectoryKind::Line, duration, speed, seed: 100 },
        1 => TrajectorySpec { kind: TrajectoryKind::Arc { radius: 12.0 }, duration, speed, seed: 101 },
        2 => TrajectorySpec { kind: TrajectoryKind::FigureEight, duration, speed, seed: 102 },
        _ => TrajectorySpec { kind: TrajectoryKind::RandomSmooth { wiggles: 4 }, duration, speed, seed: 103 },
    }
}

fn suite_scene(traj: &TrajectorySpec, n: usize, seed: u64) -> Scene {
    let data = simulate_trajectory(traj, 2.0, 50.0, &ImuNoise::default(), &Bias::ZERO).unwrap();
    let mut rng = raio::rng::seeded(seed);
    let mut landmarks = Vec::with_capacity(n);
    for _ in 0..n {
        let fi = rng.gen_range(0..data.poses.len());
        let r = rng.gen_range(5.0..16.0);
        let b = rng.gen_range(-0.7..0.7f64);
        let p = data.poses[fi].transform([r * b.cos(), r * b.sin()]);
        landmarks.push(Landmark { x: p[0], y: p[1], reflectivity: rng.gen_range(5e3..5e4) });
    }
    Scene { landmarks, dynamics: Vec::new(), ghost_rate: 0.0, seed }
}

fn main() {
    let t_all = Instant::now();
    let duration = 60.0;
    let ext = Extrinsics { rotation: raio::geom::MAT3_IDENTITY, lever_arm: [0.1, 0.0, 0.0] };
    let bias = Bias { accel: [0.02, -0.01, 0.0], gyro: [0.0, 0.0, 0.0003] };
    let noise = ImuNoise { accel_sigma: 0.01, gyro_sigma: 0.0005 };
    let radar = suite_radar();
    let mut seqs = Vec::new();
    for i in 0..4 {
        let traj = suite_trajectory(i, duration);
        let scene = suite_scene(&traj, 60, 200 + i as u64);
        seqs.push(simulate_sequence(&scene, &traj, &radar, &ext, 2.0, 200.0, &noise, &bias).unwrap());
    }

    let cfg = TrainConfig {
        epochs: 20,
        lr: 1e-4,
        batch_pairs: 2,
        pair_stride: 8,
        seed: 7,
        extractor: ExtractorConfig { desc_channels: 64, n_landmarks: 32, patch_size: 5, nms_radius: 8 },
        regressor_weight_decay: 2e-3,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let result = train(&seqs, &cfg, None).unwrap();
    println!("train 20 epochs: {:.1}s", t0.elapsed().as_secs_f64());
    println!("  epoch 0: {:.4}, epoch 19: {:.4}", result.log[0].total, result.log[19].total);

    let ocfg = OdometryConfig {
        extractor: cfg.extractor.clone(),
        fusion: cfg.fusion,
        ..OdometryConfig::default()
    };
    for (i, seq) in seqs.iter().enumerate() {
        let s3e = run_odometry(seq, Some(&result.model), OdometryMode::S3e, &ocfg).unwrap();
        let imu = run_odometry(seq, None, OdometryMode::ImuOnly, &ocfg).unwrap();
        let gt_last = seq.gt_poses.last().unwrap().pose;
        let err = |p: &Se2| ((p.x - gt_last.x).powi(2) + (p.y - gt_last.y).powi(2)).sqrt();
        let e_s3e = err(&s3e.poses.last().unwrap().pose);
        let e_imu = err(&imu.poses.last().unwrap().pose);
        let map = build_map(&s3e, &seq.extrinsics, Some(0.2));
        let ch = chamfer(&map, &seq.gt_map).unwrap();
        let (cl, _) = clutter_ratio(&map, &seq.gt_map, 0.65).unwrap();
        let rel = relative_errors(&s3e.poses, &seq.gt_poses, &DESK_SEGMENT_LENGTHS).unwrap();
        println!(
            "traj {i}: s3e {:.2} m / imu {:.2} m (ratio {:.2}) | chamfer {:.3} clutter {:.3} | trans {:.2}% rot {:.2} deg/100m | fb {}",
            e_s3e, e_imu, e_s3e / e_imu, ch, cl, rel.translation_pct, rel.rotation_deg_per_100m, s3e.fallback_frames.len()
        );
    }
    println!("total: {:.1}s", t_all.elapsed().as_secs_f64());
}

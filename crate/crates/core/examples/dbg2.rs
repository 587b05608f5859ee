use raio::extractor::ExtractorConfig;
use raio::pipeline::*;
use raio::preintegration::*;
use raio::simulator::*;
use raio::velocity::Extrinsics;
use rand::Rng;

fn main() {
    // Reproduce the trained model quickly: 6 epochs only, line trajectory.
    let mut radar = RadarConfig::with_geometry(64, 64, 0.4, 60f64.to_radians());
    radar.speckle_sigma = 0.25;
    radar.doppler_noise_sigma = 0.02;
    radar.doppler_res = 0.025;
    let traj = TrajectorySpec {
        kind: TrajectoryKind::Line,
        duration: 60.0,
        speed: SpeedProfile { cruise: 1.0, ramp_time: 0.0 },
        seed: 100,
    };
    let data = simulate_trajectory(&traj, 2.0, 50.0, &ImuNoise::default(), &Bias::ZERO).unwrap();
    let mut rng = raio::rng::seeded(200);
    let mut landmarks = Vec::new();
    for _ in 0..60 {
        let fi = rng.gen_range(0..data.poses.len());
        let r = rng.gen_range(5.0..16.0);
        let b = rng.gen_range(-0.7..0.7f64);
        let p = data.poses[fi].transform([r * b.cos(), r * b.sin()]);
        landmarks.push(Landmark { x: p[0], y: p[1], reflectivity: rng.gen_range(5e3..5e4) });
    }
    let scene = Scene { landmarks, dynamics: vec![], ghost_rate: 0.0, seed: 200 };
    let ext = Extrinsics { rotation: raio::geom::MAT3_IDENTITY, lever_arm: [0.1, 0.0, 0.0] };
    let true_bias = Bias { accel: [0.02, -0.01, 0.0], gyro: [0.0, 0.0, 0.0003] };
    let noise = ImuNoise { accel_sigma: 0.01, gyro_sigma: 0.0005 };
    let seq = simulate_sequence(&scene, &traj, &radar, &ext, 2.0, 200.0, &noise, &true_bias).unwrap();

    let cfg = TrainConfig {
        epochs: 6,
        lr: 1e-4,
        batch_pairs: 2,
        pair_stride: 8,
        seed: 7,
        extractor: ExtractorConfig { desc_channels: 64, n_landmarks: 32, patch_size: 5, nms_radius: 8 },
        ..TrainConfig::default()
    };
    let result = train(&[seq.clone()], &cfg, None).unwrap();

    // Inspect the inferred bias vs truth on a mid-sequence window.
    let window: Vec<ImuSample> = seq.imu.iter().filter(|s| s.t >= 30.0 && s.t <= 30.5).copied().collect();
    let stats = ImuWindowStats::from_samples(&window);
    let b = result.model.regressor.forward_f64(&stats, [1.0, 0.0, 0.0]).unwrap();
    println!("inferred bias accel {:?} gyro {:?}", b.accel, b.gyro);
    println!("true bias accel {:?} gyro {:?}", true_bias.accel, true_bias.gyro);

    // Per-pair yaw error with the inferred bias.
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    for k in 0..20 {
        let (t0, t1) = (seq.gt_poses[k].t, seq.gt_poses[k + 1].t);
        let pre = preintegrate(&seq.imu, t0, t1, &b, k).unwrap();
        let th = yaw_delta(&pre).unwrap();
        let gt = raio::geom::wrap_angle(seq.gt_poses[k + 1].pose.yaw - seq.gt_poses[k].pose.yaw);
        let e = (th - gt).abs();
        worst = worst.max(e);
        sum += e;
    }
    println!("yaw err per pair: mean {:.6} rad, worst {:.6} rad", sum / 20.0, worst);

    // Odometry with the regressor zeroed (inference bias ~ 0): isolates the
    // extractor/velocity quality from bias wandering.
    for (_, t) in result.model.regressor.params() {
        t.set_data(&vec![0.0; t.len()]).unwrap();
    }
    let ocfg = OdometryConfig {
        extractor: cfg.extractor.clone(),
        fusion: cfg.fusion,
        ..OdometryConfig::default()
    };
    let s3e = run_odometry(&seq, Some(&result.model), OdometryMode::S3e, &ocfg).unwrap();
    let gt_last = seq.gt_poses.last().unwrap().pose;
    let p = s3e.poses.last().unwrap().pose;
    println!("zero-bias odometry endpoint err: {:.2} m (gt ({:.1},{:.1}) est ({:.1},{:.1}))",
        ((p.x-gt_last.x).powi(2)+(p.y-gt_last.y).powi(2)).sqrt(), gt_last.x, gt_last.y, p.x, p.y);
    let map = build_map(&s3e, &seq.extrinsics, Some(0.2));
    let ch = raio::evaluation::chamfer(&map, &seq.gt_map).unwrap();
    let (cl, _) = raio::evaluation::clutter_ratio(&map, &seq.gt_map, 0.65).unwrap();
    let rel = raio::evaluation::relative_errors(&s3e.poses, &seq.gt_poses, &raio::evaluation::DESK_SEGMENT_LENGTHS).unwrap();
    println!("zero-bias: chamfer {:.3} clutter {:.3} trans {:.2}% rot {:.2} deg/100m", ch, cl, rel.translation_pct, rel.rotation_deg_per_100m);
}

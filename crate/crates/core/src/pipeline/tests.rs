use super::*;
use crate::preintegration::ImuSample;
use crate::simulator::{
    render_frame, simulate_sequence, ImuNoise, RadarConfig, Scene, SpeedProfile, TrajectoryKind,
    TrajectorySpec,
};
use crate::velocity::{ransac_call_count, reset_ransac_call_count, Extrinsics};
use rand::Rng;

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        lr: 1e-4,
        batch_pairs: 2,
        pair_stride: 1,
        seed: 7,
        extractor: ExtractorConfig {
            desc_channels: 8,
            n_landmarks: 6,
            patch_size: 5,
            nms_radius: 3,
        },
        ..TrainConfig::default()
    }
}

fn tiny_sequence(seed: u64, speckle: f64) -> Sequence {
    let mut radar = RadarConfig::with_geometry(32, 32, 0.4, 60f64.to_radians());
    radar.speckle_sigma = speckle;
    radar.doppler_noise_sigma = 0.0;
    radar.doppler_res = 0.0;
    let scene = Scene::random_corridor(10, 10.0, 4.0, seed);
    let traj = TrajectorySpec {
        kind: TrajectoryKind::Line,
        duration: 1.5,
        speed: SpeedProfile {
            cruise: 1.0,
            ramp_time: 0.0,
        },
        seed,
    };
    simulate_sequence(
        &scene,
        &traj,
        &radar,
        &Extrinsics::default(),
        4.0,
        100.0,
        &ImuNoise::default(),
        &Bias::ZERO,
    )
    .unwrap()
}

/// A sequence with no motion at all: identical frames, quiet IMU.
fn static_sequence(n: usize) -> Sequence {
    let mut radar = RadarConfig::with_geometry(32, 32, 0.4, 60f64.to_radians());
    radar.speckle_sigma = 0.0;
    radar.doppler_noise_sigma = 0.0;
    radar.doppler_res = 0.0;
    let scene = Scene::random_corridor(10, 10.0, 4.0, 3);
    let ext = Extrinsics::default();
    let dt = 0.25;
    let mut frames = Vec::new();
    let mut gt_poses = Vec::new();
    for k in 0..n {
        let t = k as f64 * dt;
        frames.push(
            render_frame(&scene, t, &Se2::IDENTITY, [0.0; 2], 0.0, &radar, &ext, k).unwrap(),
        );
        gt_poses.push(TimedPose {
            t,
            pose: Se2::IDENTITY,
        });
    }
    let imu: Vec<ImuSample> = (0..=(n * 25))
        .map(|i| ImuSample {
            t: i as f64 * 0.01,
            specific_force: [0.0; 3],
            angular_rate: [0.0; 3],
        })
        .collect();
    Sequence {
        radar,
        extrinsics: ext,
        radar_rate: 1.0 / dt,
        imu_rate: 100.0,
        frames,
        imu,
        gt_poses,
        gt_velocity: vec![[0.0; 3]; n],
        gt_map: scene.landmarks.iter().map(|l| [l.x, l.y]).collect(),
    }
}

#[test]
fn pose_chaining_matches_direct_composition() {
    let mut rng = crate::rng::seeded(14);
    let steps: Vec<Se2> = (0..50)
        .map(|_| {
            Se2::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.3..0.3),
            )
        })
        .collect();
    // Chained left-to-right.
    let mut chained = Se2::IDENTITY;
    for s in &steps {
        chained = chained.compose(s);
    }
    // Direct composition of two halves.
    let mut first = Se2::IDENTITY;
    for s in &steps[..25] {
        first = first.compose(s);
    }
    let mut second = Se2::IDENTITY;
    for s in &steps[25..] {
        second = second.compose(s);
    }
    let direct = first.compose(&second);
    assert!((chained.x - direct.x).abs() < 1e-12);
    assert!((chained.y - direct.y).abs() < 1e-12);
    assert!((crate::geom::wrap_angle(chained.yaw - direct.yaw)).abs() < 1e-12);
}

#[test]
fn train_smoke_one_epoch_and_checkpoint_roundtrip() {
    let seq = tiny_sequence(1, 0.2);
    let cfg = tiny_cfg();
    let result = train(&[seq], &cfg, None).unwrap();
    assert_eq!(result.log.len(), 1);
    assert!(result.log[0].total.is_finite());

    let dir = tempfile::tempdir().unwrap();
    result
        .model
        .save(dir.path(), Some(&result.adam), Some(&result.meta))
        .unwrap();
    let (loaded, meta) = Model::load(dir.path(), &cfg.extractor).unwrap();
    assert_eq!(meta.unwrap().epoch, 1);
    for ((_, a), (_, b)) in result
        .model
        .store
        .entries()
        .iter()
        .zip(loaded.store.entries())
    {
        assert_eq!(a.to_vec(), b.to_vec());
    }
}

#[test]
fn resume_continues_epoch_numbering() {
    let seq = tiny_sequence(2, 0.2);
    let mut cfg = tiny_cfg();
    cfg.epochs = 1;
    let first = train(&[seq.clone()], &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    first
        .model
        .save(dir.path(), Some(&first.adam), Some(&first.meta))
        .unwrap();

    cfg.epochs = 2;
    let ckpt = crate::params::load_checkpoint(dir.path()).unwrap();
    let resumed = train(&[seq], &cfg, Some(&ckpt)).unwrap();
    assert_eq!(resumed.log.len(), 1);
    assert_eq!(resumed.log[0].epoch, 1);
    assert_eq!(resumed.meta.epoch, 2);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let seq = tiny_sequence(5, 0.2);
        let cfg = tiny_cfg();
        let r = train(&[seq], &cfg, None).unwrap();
        (
            r.log[0].total,
            r.model.store.entries()[0].1.to_vec(),
        )
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la.to_bits(), lb.to_bits());
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn ransac_stays_cold_in_training_and_activates_at_inference() {
    reset_ransac_call_count();
    let seq = tiny_sequence(8, 0.2);
    let cfg = tiny_cfg();
    let result = train(&[seq.clone()], &cfg, None).unwrap();
    assert_eq!(ransac_call_count(), 0, "training must not run the distillation");

    let ocfg = OdometryConfig {
        extractor: cfg.extractor.clone(),
        ..OdometryConfig::default()
    };
    let _ = run_odometry(&seq, Some(&result.model), OdometryMode::S3e, &ocfg).unwrap();
    assert!(ransac_call_count() > 0, "inference must run the distillation");
    reset_ransac_call_count();
}

#[test]
fn static_sequence_stays_at_identity() {
    let seq = static_sequence(5);
    let model = Model::new(
        &ExtractorConfig {
            desc_channels: 8,
            n_landmarks: 6,
            patch_size: 5,
            nms_radius: 3,
        },
        11,
    )
    .unwrap();
    let ocfg = OdometryConfig {
        extractor: model.extractor_cfg.clone(),
        ..OdometryConfig::default()
    };
    for mode in [OdometryMode::ImuOnly, OdometryMode::S3e] {
        let traj = run_odometry(&seq, Some(&model), mode, &ocfg).unwrap();
        for p in &traj.poses {
            assert!(
                p.pose.x.abs() < 1e-6 && p.pose.y.abs() < 1e-6 && p.pose.yaw.abs() < 1e-6,
                "{mode:?}: {:?}",
                p.pose
            );
        }
    }
}

#[test]
fn imu_only_drifts_without_initial_velocity() {
    // Constant cruise from t = 0: dead reckoning assumes rest and lags the
    // true motion by roughly the full path length.
    let seq = tiny_sequence(4, 0.0);
    let traj = run_odometry(&seq, None, OdometryMode::ImuOnly, &OdometryConfig::default()).unwrap();
    let last_est = traj.poses.last().unwrap().pose;
    let last_gt = seq.gt_poses.last().unwrap().pose;
    let err = ((last_est.x - last_gt.x).powi(2) + (last_est.y - last_gt.y).powi(2)).sqrt();
    assert!(err > 1.0, "expected large dead-reckoning drift, got {err}");
}

#[test]
fn map_building_and_dedup() {
    let traj = TrajectoryEstimate {
        poses: vec![
            TimedPose { t: 0.0, pose: Se2::IDENTITY },
            TimedPose { t: 0.1, pose: Se2::new(1.0, 0.0, 0.0) },
        ],
        velocities: vec![[0.0; 3]; 2],
        landmarks: vec![
            FrameLandmarks {
                positions: vec![[5.0, 0.0]],
                weights: vec![1.0],
            },
            FrameLandmarks {
                positions: vec![[4.0, 0.0]],
                weights: vec![1.0],
            },
        ],
        fallback_frames: vec![],
    };
    let ext = Extrinsics::default();
    let map = build_map(&traj, &ext, None);
    assert_eq!(map.len(), 2);
    // Both observations land on the same world point (5, 0).
    for p in &map {
        assert!((p[0] - 5.0).abs() < 1e-12 && p[1].abs() < 1e-12);
    }
    let dedup = build_map(&traj, &ext, Some(0.2));
    assert_eq!(dedup.len(), 1);
    assert!((dedup[0][0] - 5.0).abs() < 1e-12);
}

#[test]
fn trajectory_and_map_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let traj = TrajectoryEstimate {
        poses: vec![
            TimedPose { t: 0.0, pose: Se2::IDENTITY },
            TimedPose { t: 0.5, pose: Se2::new(1.25, -0.5, 0.1) },
        ],
        velocities: vec![[0.0; 3]; 2],
        landmarks: vec![FrameLandmarks::default(); 2],
        fallback_frames: vec![],
    };
    let tpath = dir.path().join("traj.csv");
    write_trajectory(&traj, &tpath).unwrap();
    let back = read_trajectory(&tpath).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1].pose, traj.poses[1].pose);

    let mpath = dir.path().join("map.csv");
    write_map(&[[1.0, 2.0], [3.5, -0.25]], &mpath).unwrap();
    let pts = read_map(&mpath).unwrap();
    assert_eq!(pts, vec![[1.0, 2.0], [3.5, -0.25]]);
}

#[test]
fn unknown_mode_string_is_rejected() {
    assert!("s3e".parse::<OdometryMode>().is_ok());
    assert!("imu_only".parse::<OdometryMode>().is_ok());
    assert!("s3e_kabsch".parse::<OdometryMode>().is_ok());
    assert!("warp_drive".parse::<OdometryMode>().is_err());
}

#[test]
fn s3e_requires_a_model() {
    let seq = tiny_sequence(9, 0.0);
    let err = run_odometry(&seq, None, OdometryMode::S3e, &OdometryConfig::default()).unwrap_err();
    assert!(err.to_string().contains("checkpoint"));
}

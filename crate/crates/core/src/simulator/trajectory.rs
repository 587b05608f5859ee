//! Closed-form C2 planar trajectories with exact inertial streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Se2, Vec3};
use crate::preintegration::{Bias, ImuSample};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrajectoryKind {
    /// Straight line along +x.
    Line,
    /// Constant-radius left (positive) or right (negative) turn.
    Arc { radius: f64 },
    /// One loop of a lemniscate sized so the average speed is near cruise.
    FigureEight,
    /// Drifting base motion plus seeded low-frequency wiggles.
    RandomSmooth { wiggles: usize },
}

/// Cruise speed with an optional smooth startup ramp. `ramp_time = 0` starts
/// at cruise immediately (the initial velocity is then unknown to a
/// dead-reckoning observer, which is the interesting regime).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedProfile {
    pub cruise: f64,
    pub ramp_time: f64,
}

impl Default for SpeedProfile {
    fn default() -> Self {
        SpeedProfile {
            cruise: 1.0,
            ramp_time: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoise {
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
}

// `flatten` cannot coexist with `deny_unknown_fields`; the run config
// still rejects unknown top-level keys.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectorySpec {
    #[serde(flatten)]
    pub kind: TrajectoryKind,
    pub duration: f64,
    #[serde(default)]
    pub speed: SpeedProfile,
    #[serde(default)]
    pub seed: u64,
}

/// Kinematic state of the body at one instant.
#[derive(Debug, Clone, Copy)]
pub struct BodyState {
    pub pose: Se2,
    /// World-frame planar velocity.
    pub vel_world: [f64; 2],
    /// Body-frame velocity (x forward).
    pub vel_body: Vec3,
    pub yaw_rate: f64,
    /// Body-frame specific force (gravity-compensated), m/s^2.
    pub accel_body: Vec3,
}

/// Arc-length profile: s(t), ds/dt, d2s/dt2 with a quintic-smoothstep ramp.
fn arclen(profile: &SpeedProfile, t: f64) -> (f64, f64, f64) {
    let v = profile.cruise;
    let tr = profile.ramp_time;
    if tr <= 0.0 || t >= tr {
        let ramp_dist = if tr > 0.0 { v * tr * 0.5 } else { 0.0 };
        return (ramp_dist + v * (t - tr.max(0.0)), v, 0.0);
    }
    let x = t / tr;
    let q = x * x * x * (10.0 - 15.0 * x + 6.0 * x * x); // smoothstep
    let qi = x * x * x * x * (2.5 - 3.0 * x + x * x); // its integral
    let qd = 30.0 * x * x * (1.0 - x) * (1.0 - x); // its derivative
    (v * tr * qi, v * q, v * qd / tr)
}

trait Path {
    fn state(&self, t: f64) -> BodyState;
}

struct LinePath {
    speed: SpeedProfile,
}

impl Path for LinePath {
    fn state(&self, t: f64) -> BodyState {
        let (s, sd, sdd) = arclen(&self.speed, t);
        BodyState {
            pose: Se2::new(s, 0.0, 0.0),
            vel_world: [sd, 0.0],
            vel_body: [sd, 0.0, 0.0],
            yaw_rate: 0.0,
            accel_body: [sdd, 0.0, 0.0],
        }
    }
}

struct ArcPath {
    speed: SpeedProfile,
    radius: f64,
}

impl Path for ArcPath {
    fn state(&self, t: f64) -> BodyState {
        let (s, sd, sdd) = arclen(&self.speed, t);
        let r = self.radius;
        let phi = s / r;
        let (sp, cp) = phi.sin_cos();
        BodyState {
            pose: Se2::new(r * sp, r * (1.0 - cp), phi),
            vel_world: [sd * cp, sd * sp],
            vel_body: [sd, 0.0, 0.0],
            yaw_rate: sd / r,
            accel_body: [sdd, sd * sd / r, 0.0],
        }
    }
}

struct ParametricPath {
    /// Fourier terms (amplitude, angular frequency, phase) per axis plus a
    /// linear drift; covers both the lemniscate and the random-smooth kind.
    x_lin: f64,
    x_terms: Vec<(f64, f64, f64)>,
    y_lin: f64,
    y_terms: Vec<(f64, f64, f64)>,
}

impl ParametricPath {
    fn eval(lin: f64, terms: &[(f64, f64, f64)], t: f64) -> (f64, f64, f64) {
        let mut p = lin * t;
        let mut v = lin;
        let mut a = 0.0;
        for &(amp, w, ph) in terms {
            let (s, c) = (w * t + ph).sin_cos();
            p += amp * s;
            v += amp * w * c;
            a -= amp * w * w * s;
        }
        (p, v, a)
    }
}

impl Path for ParametricPath {
    fn state(&self, t: f64) -> BodyState {
        let (x, xd, xdd) = Self::eval(self.x_lin, &self.x_terms, t);
        let (y, yd, ydd) = Self::eval(self.y_lin, &self.y_terms, t);
        let speed2 = xd * xd + yd * yd;
        let yaw = yd.atan2(xd);
        let yaw_rate = (xd * ydd - yd * xdd) / speed2;
        let ab = geom::rot2(-yaw, [xdd, ydd]);
        let vb = geom::rot2(-yaw, [xd, yd]);
        BodyState {
            pose: Se2::new(x - Self::eval(self.x_lin, &self.x_terms, 0.0).0, y
                - Self::eval(self.y_lin, &self.y_terms, 0.0).0, yaw),
            vel_world: [xd, yd],
            vel_body: [vb[0], vb[1], 0.0],
            yaw_rate,
            accel_body: [ab[0], ab[1], 0.0],
        }
    }
}

fn build_path(spec: &TrajectorySpec) -> Result<Box<dyn Path>> {
    if spec.duration <= 0.0 {
        return Err(Error::config("trajectory.duration", "must be > 0"));
    }
    if spec.speed.cruise <= 0.0 {
        return Err(Error::config("trajectory.speed.cruise", "must be > 0"));
    }
    match &spec.kind {
        TrajectoryKind::Line => Ok(Box::new(LinePath { speed: spec.speed })),
        TrajectoryKind::Arc { radius } => {
            if *radius == 0.0 || !radius.is_finite() {
                return Err(Error::config("trajectory.radius", "must be nonzero"));
            }
            Ok(Box::new(ArcPath {
                speed: spec.speed,
                radius: *radius,
            }))
        }
        TrajectoryKind::FigureEight => {
            // Gerono lemniscate x = A sin(wt), y = (A/4) sin(2wt); speed never
            // vanishes since cos(wt) and cos(2wt) have no common zero.
            let w = geom::TAU / spec.duration;
            let a = spec.speed.cruise / w * 0.85;
            Ok(Box::new(ParametricPath {
                x_lin: 0.0,
                x_terms: vec![(a, w, 0.0)],
                y_lin: 0.0,
                y_terms: vec![(a / 4.0, 2.0 * w, 0.0)],
            }))
        }
        TrajectoryKind::RandomSmooth { wiggles } => {
            let k = (*wiggles).clamp(1, 8);
            let mut rng = ChaCha12Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
            let v = spec.speed.cruise;
            // Slope budget keeps speed bounded away from zero.
            let budget = 0.35 * v;
            let terms = |rng: &mut ChaCha12Rng| -> Vec<(f64, f64, f64)> {
                (0..k)
                    .map(|i| {
                        let w = geom::TAU / spec.duration * (i as f64 + 1.0)
                            * rng.gen_range(0.8..1.2);
                        let amp = budget / k as f64 / w * rng.gen_range(0.4..1.0);
                        (amp, w, rng.gen_range(0.0..geom::TAU))
                    })
                    .collect()
            };
            Ok(Box::new(ParametricPath {
                x_lin: v,
                x_terms: terms(&mut rng),
                y_lin: 0.0,
                y_terms: terms(&mut rng),
            }))
        }
    }
}

/// Trajectory sampled at the radar rate plus the exact high-rate IMU stream
/// (analytic values, optional Gaussian noise, constant bias).
#[derive(Debug, Clone)]
pub struct TrajectoryData {
    pub frame_times: Vec<f64>,
    pub poses: Vec<Se2>,
    /// Body-frame velocity per frame.
    pub body_velocity: Vec<Vec3>,
    pub yaw_rates: Vec<f64>,
    /// World-frame planar velocity per frame (rendering convenience).
    pub world_velocity: Vec<[f64; 2]>,
    pub imu: Vec<ImuSample>,
}

pub fn simulate_trajectory(
    spec: &TrajectorySpec,
    radar_rate: f64,
    imu_rate: f64,
    noise: &ImuNoise,
    bias: &Bias,
) -> Result<TrajectoryData> {
    if radar_rate <= 0.0 || imu_rate <= 0.0 {
        return Err(Error::config("rates", "must be > 0"));
    }
    let path = build_path(spec)?;
    let n_frames = (spec.duration * radar_rate).floor() as usize + 1;
    let mut frame_times = Vec::with_capacity(n_frames);
    let mut poses = Vec::with_capacity(n_frames);
    let mut body_velocity = Vec::with_capacity(n_frames);
    let mut world_velocity = Vec::with_capacity(n_frames);
    let mut yaw_rates = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let t = k as f64 / radar_rate;
        let st = path.state(t);
        frame_times.push(t);
        poses.push(st.pose);
        body_velocity.push(st.vel_body);
        world_velocity.push(st.vel_world);
        yaw_rates.push(st.yaw_rate);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed.wrapping_add(0xA5A5_5A5A));
    let gauss = |sigma: f64, rng: &mut ChaCha12Rng| -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        sigma * (-2.0 * u1.ln()).sqrt() * (geom::TAU * u2).cos()
    };
    let t_end = frame_times[n_frames - 1];
    let n_imu = (t_end * imu_rate).ceil() as usize;
    let mut imu = Vec::with_capacity(n_imu + 1);
    for k in 0..=n_imu {
        let t = (k as f64 / imu_rate).min(t_end);
        let st = path.state(t);
        let sample = ImuSample {
            t,
            specific_force: [
                st.accel_body[0] + bias.accel[0] + gauss(noise.accel_sigma, &mut rng),
                st.accel_body[1] + bias.accel[1] + gauss(noise.accel_sigma, &mut rng),
                st.accel_body[2] + bias.accel[2] + gauss(noise.accel_sigma, &mut rng),
            ],
            angular_rate: [
                bias.gyro[0] + gauss(noise.gyro_sigma, &mut rng),
                bias.gyro[1] + gauss(noise.gyro_sigma, &mut rng),
                st.yaw_rate + bias.gyro[2] + gauss(noise.gyro_sigma, &mut rng),
            ],
        };
        sample.validate()?;
        imu.push(sample);
    }
    Ok(TrajectoryData {
        frame_times,
        poses,
        body_velocity,
        yaw_rates,
        world_velocity,
        imu,
    })
}

//! Synthetic radar-inertial sequences: range-azimuth power spectra with
//! per-pixel Doppler, IMU streams, ground-truth poses and landmark maps.
//!
//! Rendering model: every visible target deposits a separable Gaussian
//! point-spread splat at its fractional (range, azimuth) bin with peak power
//! `reflectivity / (r / r0)^4` (r0 = 1 m). Each pixel's Doppler is the radial
//! velocity of its dominant contributor projected on the pixel's own bearing;
//! pixels without any contribution stay at zero Doppler and the additive
//! noise floor. Multipath ghosts mirror targets through the strongest
//! reflector at 0.3x power and carry the source target's Doppler, which makes
//! them spatially inconsistent for the velocity consensus.

pub mod io;
mod trajectory;

pub use io::{read_sequence, write_sequence};

pub use trajectory::{
    simulate_trajectory, BodyState, ImuNoise, SpeedProfile, TrajectoryData, TrajectoryKind,
    TrajectorySpec,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Se2, Vec3};
use crate::mat::Mat;
use crate::preintegration::{Bias, ImuSample};
use crate::velocity::Extrinsics;

/// Reference range for the r^-4 power law, meters.
pub const POWER_REF_RANGE: f64 = 1.0;
/// Ghost splats carry this fraction of the source target's power.
pub const GHOST_POWER_SCALE: f64 = 0.3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RadarConfig {
    /// Number of native range bins (rows).
    pub range_bins: usize,
    /// Number of native azimuth bins (columns).
    pub azimuth_bins: usize,
    /// Meters per native range bin.
    pub range_res: f64,
    /// Azimuth bin centers, radians, strictly increasing. Empty = uniform
    /// over [-60 deg, +60 deg].
    pub eta: Vec<f64>,
    /// Must equal `range_bins * range_res`.
    pub max_range: f64,
    /// Point-spread sigma along range, in bins.
    pub psf_width_range: f64,
    /// Point-spread sigma along azimuth, in bins.
    pub psf_width_azimuth: f64,
    /// Additive power pedestal on every pixel.
    pub noise_floor: f64,
    /// Log-normal speckle sigma (multiplicative, 0 disables).
    pub speckle_sigma: f64,
    /// Doppler quantization step, m/s (0 disables).
    pub doppler_res: f64,
    /// Gaussian noise on signal-pixel Doppler, m/s (0 disables).
    pub doppler_noise_sigma: f64,
}

pub fn uniform_fov_bins(n: usize, half_fov: f64) -> Vec<f64> {
    (0..n)
        .map(|i| -half_fov + 2.0 * half_fov * i as f64 / (n - 1) as f64)
        .collect()
}

impl Default for RadarConfig {
    fn default() -> Self {
        RadarConfig {
            range_bins: 128,
            azimuth_bins: 128,
            range_res: 0.2,
            eta: uniform_fov_bins(128, 60f64.to_radians()),
            max_range: 128.0 * 0.2,
            psf_width_range: 1.2,
            psf_width_azimuth: 1.2,
            noise_floor: 1e-3,
            speckle_sigma: 0.3,
            doppler_res: 0.025,
            doppler_noise_sigma: 0.05,
        }
    }
}

impl RadarConfig {
    /// Uniform-FOV constructor; `half_fov` in radians.
    pub fn with_geometry(range_bins: usize, azimuth_bins: usize, range_res: f64, half_fov: f64) -> Self {
        RadarConfig {
            range_bins,
            azimuth_bins,
            range_res,
            eta: uniform_fov_bins(azimuth_bins, half_fov),
            max_range: range_bins as f64 * range_res,
            ..RadarConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.range_bins < 8 || self.azimuth_bins < 8 {
            return Err(Error::config("radar.bins", "need at least 8 bins per axis"));
        }
        if self.eta.len() != self.azimuth_bins {
            return Err(Error::config(
                "radar.eta",
                format!("{} entries for {} azimuth bins", self.eta.len(), self.azimuth_bins),
            ));
        }
        for w in self.eta.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config("radar.eta", "azimuth bins must be strictly increasing"));
            }
        }
        if self
            .eta
            .iter()
            .any(|a| a.abs() >= std::f64::consts::FRAC_PI_2)
        {
            return Err(Error::config("radar.eta", "azimuth bins must lie inside (-90, 90) deg"));
        }
        if self.range_res <= 0.0 {
            return Err(Error::config("radar.range_res", "must be > 0"));
        }
        if (self.max_range - self.range_bins as f64 * self.range_res).abs() > 1e-9 {
            return Err(Error::config(
                "radar.max_range",
                "must equal range_bins * range_res",
            ));
        }
        if self.psf_width_range <= 0.0 || self.psf_width_azimuth <= 0.0 {
            return Err(Error::config("radar.psf_width", "must be > 0"));
        }
        if self.noise_floor < 0.0
            || self.speckle_sigma < 0.0
            || self.doppler_res < 0.0
            || self.doppler_noise_sigma < 0.0
        {
            return Err(Error::config("radar.noise", "noise settings must be >= 0"));
        }
        Ok(())
    }

    /// Fractional azimuth bin for an angle, by inverting the bin-center
    /// table (linear between centers).
    pub fn azimuth_to_bin(&self, az: f64) -> f64 {
        let eta = &self.eta;
        let n = eta.len();
        if az <= eta[0] {
            return (az - eta[0]) / (eta[1] - eta[0]);
        }
        if az >= eta[n - 1] {
            return (n - 1) as f64 + (az - eta[n - 1]) / (eta[n - 1] - eta[n - 2]);
        }
        let i = eta.partition_point(|&e| e <= az).min(n - 1);
        let (lo, hi) = (eta[i - 1], eta[i]);
        (i - 1) as f64 + (az - lo) / (hi - lo)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub reflectivity: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DynamicObject {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub reflectivity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Scene {
    pub landmarks: Vec<Landmark>,
    pub dynamics: Vec<DynamicObject>,
    /// Probability per static landmark per frame of spawning a multipath
    /// ghost.
    pub ghost_rate: f64,
    pub seed: u64,
}

impl Default for Scene {
    fn default() -> Self {
        Scene {
            landmarks: Vec::new(),
            dynamics: Vec::new(),
            ghost_rate: 0.0,
            seed: 0,
        }
    }
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.landmarks.len() < 4 {
            return Err(Error::config(
                "scene.landmarks",
                "need at least 4 static landmarks for velocity solvability",
            ));
        }
        if self
            .landmarks
            .iter()
            .map(|l| l.reflectivity)
            .chain(self.dynamics.iter().map(|d| d.reflectivity))
            .any(|r| !(r > 0.0))
        {
            return Err(Error::config("scene.reflectivity", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.ghost_rate) {
            return Err(Error::config("scene.ghost_rate", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Seeded landmark field scattered over a corridor ahead of the origin.
    pub fn random_corridor(
        n_landmarks: usize,
        length: f64,
        half_width: f64,
        seed: u64,
    ) -> Scene {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let landmarks = (0..n_landmarks)
            .map(|_| Landmark {
                x: rng.gen_range(-2.0..length),
                y: rng.gen_range(-half_width..half_width),
                reflectivity: rng.gen_range(5e3..5e4),
            })
            .collect();
        Scene {
            landmarks,
            dynamics: Vec::new(),
            ghost_rate: 0.0,
            seed,
        }
    }
}

/// One rendered radar observation.
#[derive(Debug, Clone)]
pub struct Frame {
    pub t: f64,
    /// Range-azimuth power, nonnegative.
    pub ras: Mat,
    /// Per-pixel radial velocity of the dominant contributor, m/s.
    pub doppler: Mat,
    /// Azimuth bin centers (copy of the config table).
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Se2,
}

/// A full simulated recording: frames, IMU, ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub radar: RadarConfig,
    pub extrinsics: Extrinsics,
    pub radar_rate: f64,
    pub imu_rate: f64,
    pub frames: Vec<Frame>,
    pub imu: Vec<ImuSample>,
    pub gt_poses: Vec<TimedPose>,
    /// Body-frame velocity per frame.
    pub gt_velocity: Vec<Vec3>,
    /// Static landmark positions, world frame.
    pub gt_map: Vec<[f64; 2]>,
}

struct RenderTarget {
    pos_w: [f64; 2],
    vel_w: [f64; 2],
    reflectivity: f64,
    doppler_override: Option<f64>,
}

/// Pose/velocity of the radar sensor in the world frame.
struct SensorState {
    pos: [f64; 2],
    yaw: f64,
    vel: [f64; 2],
}

fn sensor_state(pose: &Se2, world_vel: [f64; 2], yaw_rate: f64, ext: &Extrinsics) -> SensorState {
    let lever = [ext.lever_arm[0], ext.lever_arm[1]];
    let lever_w = geom::rot2(pose.yaw, lever);
    let mount_yaw = ext.rotation[1][0].atan2(ext.rotation[0][0]);
    SensorState {
        pos: [pose.x + lever_w[0], pose.y + lever_w[1]],
        yaw: geom::wrap_angle(pose.yaw + mount_yaw),
        vel: [
            world_vel[0] - yaw_rate * lever_w[1],
            world_vel[1] + yaw_rate * lever_w[0],
        ],
    }
}

fn radial_velocity(az: f64, target_vel_w: [f64; 2], sensor: &SensorState) -> f64 {
    let rel_w = [target_vel_w[0] - sensor.vel[0], target_vel_w[1] - sensor.vel[1]];
    let rel_r = geom::rot2(-sensor.yaw, rel_w);
    az.cos() * rel_r[0] + az.sin() * rel_r[1]
}

/// Render one frame of the scene as seen from `pose` (body frame pose; the
/// sensor offset comes from the extrinsics).
#[allow(clippy::too_many_arguments)]
pub fn render_frame(
    scene: &Scene,
    t: f64,
    pose: &Se2,
    world_vel: [f64; 2],
    yaw_rate: f64,
    cfg: &RadarConfig,
    ext: &Extrinsics,
    frame_index: usize,
) -> Result<Frame> {
    if !(pose.x.is_finite() && pose.y.is_finite() && pose.yaw.is_finite()) {
        return Err(Error::invalid("render_frame", "non-finite pose"));
    }
    let (h, w) = (cfg.range_bins, cfg.azimuth_bins);
    let sensor = sensor_state(pose, world_vel, yaw_rate, ext);
    let mut rng =
        ChaCha12Rng::seed_from_u64(scene.seed ^ (frame_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));

    // Assemble world-frame targets.
    let mut targets: Vec<RenderTarget> = Vec::with_capacity(scene.landmarks.len() + scene.dynamics.len());
    for l in &scene.landmarks {
        targets.push(RenderTarget {
            pos_w: [l.x, l.y],
            vel_w: [0.0, 0.0],
            reflectivity: l.reflectivity,
            doppler_override: None,
        });
    }
    for d in &scene.dynamics {
        targets.push(RenderTarget {
            pos_w: [d.x + d.vx * t, d.y + d.vy * t],
            vel_w: [d.vx, d.vy],
            reflectivity: d.reflectivity,
            doppler_override: None,
        });
    }

    // Multipath ghosts: point-mirror static landmarks through the strongest
    // visible reflector, carrying the source's radial velocity.
    if scene.ghost_rate > 0.0 {
        let visible = |p: [f64; 2]| -> Option<(f64, f64)> {
            let rel = geom::rot2(-sensor.yaw, [p[0] - sensor.pos[0], p[1] - sensor.pos[1]]);
            let r = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
            let az = rel[1].atan2(rel[0]);
            if r > 1e-6 && r < cfg.max_range && az >= cfg.eta[0] && az <= cfg.eta[w - 1] {
                Some((r, az))
            } else {
                None
            }
        };
        let strongest = targets
            .iter()
            .filter(|tg| visible(tg.pos_w).is_some())
            .max_by(|a, b| a.reflectivity.total_cmp(&b.reflectivity))
            .map(|tg| tg.pos_w);
        if let Some(mirror) = strongest {
            let mut ghosts = Vec::new();
            for l in &scene.landmarks {
                if rng.gen_range(0.0..1.0) < scene.ghost_rate {
                    let gp = [2.0 * mirror[0] - l.x, 2.0 * mirror[1] - l.y];
                    let src_doppler = visible([l.x, l.y])
                        .map(|(_, az)| radial_velocity(az, [0.0, 0.0], &sensor))
                        .unwrap_or(0.0);
                    ghosts.push(RenderTarget {
                        pos_w: gp,
                        vel_w: [0.0, 0.0],
                        reflectivity: l.reflectivity * GHOST_POWER_SCALE,
                        doppler_override: Some(src_doppler),
                    });
                }
            }
            targets.extend(ghosts);
        }
    }

    let mut ras = Mat::zeros(h, w);
    let mut dom_contrib = vec![0.0f64; h * w];
    let mut dom_target: Vec<i32> = vec![-1; h * w];

    let rr = (4.0 * cfg.psf_width_range).ceil() as isize;
    let ra = (4.0 * cfg.psf_width_azimuth).ceil() as isize;
    for (ti, tg) in targets.iter().enumerate() {
        let rel = geom::rot2(
            -sensor.yaw,
            [tg.pos_w[0] - sensor.pos[0], tg.pos_w[1] - sensor.pos[1]],
        );
        let r = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
        let az = rel[1].atan2(rel[0]);
        if r < 1e-6 || r >= cfg.max_range || az < cfg.eta[0] || az > cfg.eta[w - 1] {
            continue;
        }
        let peak = tg.reflectivity / (r / POWER_REF_RANGE).powi(4);
        let rb = r / cfg.range_res;
        let ab = cfg.azimuth_to_bin(az);
        let (ri0, ri1) = (
            ((rb.floor() as isize) - rr).max(0),
            ((rb.floor() as isize) + rr + 1).min(h as isize - 1),
        );
        let (ai0, ai1) = (
            ((ab.floor() as isize) - ra).max(0),
            ((ab.floor() as isize) + ra + 1).min(w as isize - 1),
        );
        for ri in ri0..=ri1 {
            let dr = ri as f64 - rb;
            let wr = (-dr * dr / (2.0 * cfg.psf_width_range * cfg.psf_width_range)).exp();
            for ai in ai0..=ai1 {
                let da = ai as f64 - ab;
                let wa = (-da * da / (2.0 * cfg.psf_width_azimuth * cfg.psf_width_azimuth)).exp();
                let c = peak * wr * wa;
                if c <= 0.0 {
                    continue;
                }
                ras.add_at(ri as usize, ai as usize, c);
                let px = ri as usize * w + ai as usize;
                if c > dom_contrib[px] {
                    dom_contrib[px] = c;
                    dom_target[px] = ti as i32;
                }
            }
        }
    }

    // Multiplicative log-normal speckle on the signal component.
    if cfg.speckle_sigma > 0.0 {
        for v in ras.data_mut() {
            if *v > 0.0 {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (geom::TAU * u2).cos();
                *v *= (cfg.speckle_sigma * z).exp();
            }
        }
    }

    // Per-pixel Doppler: dominant contributor's relative velocity projected
    // on the pixel's own bearing; zero where only the noise floor remains.
    let mut doppler = Mat::zeros(h, w);
    for px in 0..h * w {
        if dom_target[px] < 0 {
            continue;
        }
        let tg = &targets[dom_target[px] as usize];
        let col = px % w;
        let mut v = match tg.doppler_override {
            Some(d) => d,
            None => radial_velocity(cfg.eta[col], tg.vel_w, &sensor),
        };
        if cfg.doppler_noise_sigma > 0.0 {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            v += cfg.doppler_noise_sigma
                * (-2.0 * u1.ln()).sqrt()
                * (geom::TAU * u2).cos();
        }
        if cfg.doppler_res > 0.0 {
            v = (v / cfg.doppler_res).round() * cfg.doppler_res;
        }
        doppler.data_mut()[px] = v;
    }

    for v in ras.data_mut() {
        *v += cfg.noise_floor;
    }

    Ok(Frame {
        t,
        ras,
        doppler,
        eta: cfg.eta.clone(),
    })
}

/// Simulate a full sequence: trajectory, IMU stream and rendered frames.
pub fn simulate_sequence(
    scene: &Scene,
    traj: &TrajectorySpec,
    cfg: &RadarConfig,
    ext: &Extrinsics,
    radar_rate: f64,
    imu_rate: f64,
    imu_noise: &ImuNoise,
    imu_bias: &Bias,
) -> Result<Sequence> {
    cfg.validate()?;
    scene.validate()?;
    ext.validate()?;
    imu_bias.validate()?;
    if (ext.rotation[2][2] - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "extrinsics.rotation",
            "planar rendering requires a yaw-only mounting rotation",
        ));
    }
    let data = simulate_trajectory(traj, radar_rate, imu_rate, imu_noise, imu_bias)?;
    let mut frames = Vec::with_capacity(data.frame_times.len());
    for k in 0..data.frame_times.len() {
        frames.push(render_frame(
            scene,
            data.frame_times[k],
            &data.poses[k],
            data.world_velocity[k],
            data.yaw_rates[k],
            cfg,
            ext,
            k,
        )?);
    }
    let gt_poses = data
        .frame_times
        .iter()
        .zip(&data.poses)
        .map(|(&t, &pose)| TimedPose { t, pose })
        .collect();
    Ok(Sequence {
        radar: cfg.clone(),
        extrinsics: ext.clone(),
        radar_rate,
        imu_rate,
        frames,
        imu: data.imu,
        gt_poses,
        gt_velocity: data.body_velocity,
        gt_map: scene.landmarks.iter().map(|l| [l.x, l.y]).collect(),
    })
}

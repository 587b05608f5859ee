//! Mid-point IMU pre-integration between consecutive radar frames.
//!
//! Produces the position/velocity/orientation increments used for frame
//! synchronization, plus the time-quadrature of the incremental rotation
//! needed to propagate an initial body velocity across the interval. A plain
//! f64 path serves inference and oracles; a tensor path makes the increments
//! differentiable with respect to the accelerometer/gyroscope biases.
//!
//! Specific force is gravity-compensated upstream (the simulator emits it
//! that way), so no gravity term appears here.

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Quat, Vec3};
use crate::tensor::{ops, Tensor};

/// One inertial sample in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Gravity-compensated specific force, m/s^2.
    pub specific_force: Vec3,
    /// Angular rate, rad/s.
    pub angular_rate: Vec3,
}

pub const MAX_ANGULAR_RATE: f64 = 50.0;

impl ImuSample {
    pub fn validate(&self) -> Result<()> {
        let finite = self.t.is_finite()
            && self.specific_force.iter().all(|v| v.is_finite())
            && self.angular_rate.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("ImuSample", "non-finite sample"));
        }
        if geom::v3_norm(self.angular_rate) >= MAX_ANGULAR_RATE {
            return Err(Error::invalid(
                "ImuSample",
                format!(
                    "angular rate {:.1} rad/s exceeds the {MAX_ANGULAR_RATE} rad/s sanity bound",
                    geom::v3_norm(self.angular_rate)
                ),
            ));
        }
        Ok(())
    }
}

/// Accelerometer/gyroscope biases.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bias {
    pub accel: Vec3,
    pub gyro: Vec3,
}

impl Bias {
    pub const ZERO: Bias = Bias {
        accel: [0.0; 3],
        gyro: [0.0; 3],
    };

    pub fn validate(&self) -> Result<()> {
        let finite = self.accel.iter().chain(self.gyro.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("Bias", "non-finite bias"));
        }
        if geom::v3_norm(self.accel) >= 1.0 || geom::v3_norm(self.gyro) >= 1.0 {
            return Err(Error::invalid("Bias", "bias exceeds the sanity bound of 1"));
        }
        Ok(())
    }
}

/// Increments accumulated over one inter-frame interval, expressed in the
/// body frame at the start of the interval.
#[derive(Debug, Clone)]
pub struct Preintegrated {
    pub delta_p: Vec3,
    pub delta_v: Vec3,
    pub delta_q: Quat,
    /// Quadrature of the incremental rotation over the interval,
    /// `J = sum R(t) dt`; `J * v0` propagates a constant initial body
    /// velocity expressed at the interval start.
    pub vel_quad: Mat3,
    pub dt_total: f64,
    pub frame_k: usize,
    pub frame_k1: usize,
}

impl Preintegrated {
    pub fn identity(dt: f64) -> Preintegrated {
        Preintegrated {
            delta_p: [0.0; 3],
            delta_v: [0.0; 3],
            delta_q: Quat::IDENTITY,
            vel_quad: geom::MAT3_IDENTITY.map(|r| r.map(|v| v * dt)),
            dt_total: dt,
            frame_k: 0,
            frame_k1: 0,
        }
    }
}

/// Linear interpolation of the IMU stream at time `t` between two samples.
fn lerp_sample(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let f = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
    let mix = |x: Vec3, y: Vec3| {
        [
            x[0] + (y[0] - x[0]) * f,
            x[1] + (y[1] - x[1]) * f,
            x[2] + (y[2] - x[2]) * f,
        ]
    };
    ImuSample {
        t,
        specific_force: mix(a.specific_force, b.specific_force),
        angular_rate: mix(a.angular_rate, b.angular_rate),
    }
}

/// Resample the stream onto integration nodes covering exactly `[t0, t1]`:
/// interpolated boundary samples plus every raw sample strictly inside.
fn integration_nodes(samples: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    if samples.len() < 2 {
        return Err(Error::invalid(
            "preintegrate",
            format!("need at least 2 samples, got {}", samples.len()),
        ));
    }
    for w in samples.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::invalid(
                "preintegrate",
                format!("non-monotone timestamps at t={}", w[1].t),
            ));
        }
    }
    if t1 <= t0 {
        return Err(Error::invalid("preintegrate", "empty interval"));
    }
    if samples[0].t > t0 || samples[samples.len() - 1].t < t1 {
        return Err(Error::invalid(
            "preintegrate",
            format!(
                "samples [{:.6}, {:.6}] do not bracket [{t0:.6}, {t1:.6}]",
                samples[0].t,
                samples[samples.len() - 1].t
            ),
        ));
    }
    for s in samples {
        s.validate()?;
    }
    let mut nodes = Vec::new();
    let bracket = |t: f64| {
        let i = samples.partition_point(|s| s.t <= t);
        let hi = i.clamp(1, samples.len() - 1);
        lerp_sample(&samples[hi - 1], &samples[hi], t)
    };
    nodes.push(bracket(t0));
    for s in samples {
        if s.t > t0 && s.t < t1 {
            nodes.push(*s);
        }
    }
    nodes.push(bracket(t1));
    Ok(nodes)
}

/// Linearly interpolated sample at time `t` (stream must bracket `t`).
pub fn sample_at(samples: &[ImuSample], t: f64) -> Result<ImuSample> {
    if samples.len() < 2 || samples[0].t > t || samples[samples.len() - 1].t < t {
        return Err(Error::invalid(
            "sample_at",
            format!("time {t:.6} outside the sampled stream"),
        ));
    }
    let i = samples.partition_point(|s| s.t <= t).clamp(1, samples.len() - 1);
    Ok(lerp_sample(&samples[i - 1], &samples[i], t))
}

/// Mid-point pre-integration of the samples spanning `[t0, t1]`.
pub fn preintegrate(
    samples: &[ImuSample],
    t0: f64,
    t1: f64,
    bias: &Bias,
    frame_k: usize,
) -> Result<Preintegrated> {
    bias.validate()?;
    let nodes = integration_nodes(samples, t0, t1)?;
    let mut q = Quat::IDENTITY;
    let mut v = [0.0; 3];
    let mut p = [0.0; 3];
    let mut quad = [[0.0; 3]; 3];
    for w in nodes.windows(2) {
        let dt = w[1].t - w[0].t;
        let w_mid = geom::v3_sub(
            geom::v3_scale(geom::v3_add(w[0].angular_rate, w[1].angular_rate), 0.5),
            bias.gyro,
        );
        let dq = Quat {
            w: 1.0,
            x: 0.5 * w_mid[0] * dt,
            y: 0.5 * w_mid[1] * dt,
            z: 0.5 * w_mid[2] * dt,
        };
        let q_next = q.mul(&dq).normalized();
        let q_mid = Quat {
            w: q.w + q_next.w,
            x: q.x + q_next.x,
            y: q.y + q_next.y,
            z: q.z + q_next.z,
        }
        .normalized();
        let a_mean = geom::v3_sub(
            geom::v3_scale(geom::v3_add(w[0].specific_force, w[1].specific_force), 0.5),
            bias.accel,
        );
        let a_mid = q_mid.rotate(a_mean);
        let r_mid = q_mid.to_matrix();
        for i in 0..3 {
            for j in 0..3 {
                quad[i][j] += r_mid[i][j] * dt;
            }
        }
        for i in 0..3 {
            p[i] += v[i] * dt + 0.5 * a_mid[i] * dt * dt;
            v[i] += a_mid[i] * dt;
        }
        q = q_next;
    }
    Ok(Preintegrated {
        delta_p: p,
        delta_v: v,
        delta_q: q,
        vel_quad: quad,
        dt_total: t1 - t0,
        frame_k,
        frame_k1: frame_k + 1,
    })
}

/// Planar heading change of the increment, as the z-axis Euler angle.
/// Positive values are counter-clockwise vehicle rotation, which shifts
/// scene content toward decreasing azimuth in the next spectrum.
pub fn yaw_delta(pre: &Preintegrated) -> Result<f64> {
    let pitch = pre.delta_q.pitch();
    if pitch.abs() > 1.55 {
        return Err(Error::Numeric(format!(
            "yaw extraction degenerate near +/-90 deg pitch (pitch = {pitch:.3} rad)"
        )));
    }
    Ok(pre.delta_q.yaw())
}

// ---- differentiable path ---------------------------------------------------

/// Increments as tensors, differentiable with respect to the bias inputs.
pub struct PreintegratedTape {
    pub delta_p: Tensor,
    pub delta_v: Tensor,
    pub delta_q: Tensor,
    /// `[3,3]` quadrature of the incremental rotation (see
    /// [`Preintegrated::vel_quad`]).
    pub vel_quad: Tensor,
    pub dt_total: f64,
}

/// Quaternion conjugate of a `[4]` tensor.
pub fn quat_conj_taped(q: &Tensor) -> Result<Tensor> {
    q.mul(&Tensor::vector(&[1.0, -1.0, -1.0, -1.0]))
}

/// Normalize a `[4]` quaternion tensor to unit norm.
pub fn quat_normalize_taped(q: &Tensor) -> Result<Tensor> {
    let n = q.square().sum().sqrt()?;
    q.div(&n)
}

/// Rotate a `[3]` vector tensor by a unit quaternion tensor.
pub fn quat_rotate_taped(q: &Tensor, v: &Tensor) -> Result<Tensor> {
    let qv = ops::concat(&[&Tensor::vector(&[0.0]), v], 0)?;
    let r = q.quat_mul(&qv)?.quat_mul(&quat_conj_taped(q)?)?;
    r.narrow(0, 1, 3)
}

/// Rotation matrix `[3,3]` of a unit quaternion tensor.
pub fn quat_to_matrix_taped(q: &Tensor) -> Result<Tensor> {
    let w = q.narrow(0, 0, 1)?;
    let x = q.narrow(0, 1, 1)?;
    let y = q.narrow(0, 2, 1)?;
    let z = q.narrow(0, 3, 1)?;
    let one = Tensor::scalar(1.0);
    let two = 2.0;
    let xx = x.square();
    let yy = y.square();
    let zz = z.square();
    let xy = x.mul(&y)?;
    let xz = x.mul(&z)?;
    let yz = y.mul(&z)?;
    let wx = w.mul(&x)?;
    let wy = w.mul(&y)?;
    let wz = w.mul(&z)?;
    let m00 = one.sub(&yy.add(&zz)?.mul_scalar(two))?;
    let m01 = xy.sub(&wz)?.mul_scalar(two);
    let m02 = xz.add(&wy)?.mul_scalar(two);
    let m10 = xy.add(&wz)?.mul_scalar(two);
    let m11 = one.sub(&xx.add(&zz)?.mul_scalar(two))?;
    let m12 = yz.sub(&wx)?.mul_scalar(two);
    let m20 = xz.sub(&wy)?.mul_scalar(two);
    let m21 = yz.add(&wx)?.mul_scalar(two);
    let m22 = one.sub(&xx.add(&yy)?.mul_scalar(two))?;
    ops::concat(
        &[&m00, &m01, &m02, &m10, &m11, &m12, &m20, &m21, &m22],
        0,
    )?
    .reshape(&[3, 3])
}

/// Planar heading of a unit quaternion tensor (z-axis Euler angle).
pub fn quat_yaw_taped(q: &Tensor) -> Result<Tensor> {
    let w = q.narrow(0, 0, 1)?;
    let x = q.narrow(0, 1, 1)?;
    let y = q.narrow(0, 2, 1)?;
    let z = q.narrow(0, 3, 1)?;
    let num = w.mul(&z)?.add(&x.mul(&y)?)?.mul_scalar(2.0);
    let den = Tensor::scalar(1.0).sub(&y.square().add(&z.square())?.mul_scalar(2.0))?;
    num.atan2(&den)
}

/// Mid-point pre-integration on the tape: identical scheme to
/// [`preintegrate`], with the biases as differentiable `[3]` tensors.
pub fn preintegrate_taped(
    samples: &[ImuSample],
    t0: f64,
    t1: f64,
    bias_accel: &Tensor,
    bias_gyro: &Tensor,
) -> Result<PreintegratedTape> {
    if bias_accel.shape() != [3] || bias_gyro.shape() != [3] {
        return Err(Error::invalid("preintegrate_taped", "biases must be [3]"));
    }
    let nodes = integration_nodes(samples, t0, t1)?;
    let mut q = Tensor::vector(&[1.0, 0.0, 0.0, 0.0]);
    let mut v = Tensor::zeros(&[3]);
    let mut p = Tensor::zeros(&[3]);
    let mut quad = Tensor::zeros(&[3, 3]);
    for w in nodes.windows(2) {
        let dt = w[1].t - w[0].t;
        let w_mean = Tensor::vector(&[
            0.5 * (w[0].angular_rate[0] + w[1].angular_rate[0]),
            0.5 * (w[0].angular_rate[1] + w[1].angular_rate[1]),
            0.5 * (w[0].angular_rate[2] + w[1].angular_rate[2]),
        ]);
        let w_mid = w_mean.sub(bias_gyro)?;
        let dq = ops::concat(
            &[&Tensor::vector(&[1.0]), &w_mid.mul_scalar(0.5 * dt)],
            0,
        )?;
        let q_next = quat_normalize_taped(&q.quat_mul(&dq)?)?;
        let q_mid = quat_normalize_taped(&q.add(&q_next)?)?;
        let a_mean = Tensor::vector(&[
            0.5 * (w[0].specific_force[0] + w[1].specific_force[0]),
            0.5 * (w[0].specific_force[1] + w[1].specific_force[1]),
            0.5 * (w[0].specific_force[2] + w[1].specific_force[2]),
        ]);
        let a_mid = quat_rotate_taped(&q_mid, &a_mean.sub(bias_accel)?)?;
        let r_mid = quat_to_matrix_taped(&q_mid)?;
        quad = quad.add(&r_mid.mul_scalar(dt))?;
        p = p.add(&v.mul_scalar(dt))?
            .add(&a_mid.mul_scalar(0.5 * dt * dt))?;
        v = v.add(&a_mid.mul_scalar(dt))?;
        q = q_next;
    }
    Ok(PreintegratedTape {
        delta_p: p,
        delta_v: v,
        delta_q: q,
        vel_quad: quad,
        dt_total: t1 - t0,
    })
}

// ---- bias regressor --------------------------------------------------------

/// Summary statistics of an IMU window, the regressor's input featurization:
/// per-axis mean and variance of specific force and angular rate.
#[derive(Debug, Clone, Copy, Default)]
pub struct ImuWindowStats {
    pub mean_force: Vec3,
    pub var_force: Vec3,
    pub mean_rate: Vec3,
    pub var_rate: Vec3,
}

impl ImuWindowStats {
    pub fn from_samples(samples: &[ImuSample]) -> ImuWindowStats {
        if samples.is_empty() {
            return ImuWindowStats::default();
        }
        let n = samples.len() as f64;
        let mut s = ImuWindowStats::default();
        for smp in samples {
            for i in 0..3 {
                s.mean_force[i] += smp.specific_force[i];
                s.mean_rate[i] += smp.angular_rate[i];
            }
        }
        for i in 0..3 {
            s.mean_force[i] /= n;
            s.mean_rate[i] /= n;
        }
        for smp in samples {
            for i in 0..3 {
                s.var_force[i] += (smp.specific_force[i] - s.mean_force[i]).powi(2);
                s.var_rate[i] += (smp.angular_rate[i] - s.mean_rate[i]).powi(2);
            }
        }
        for i in 0..3 {
            s.var_force[i] /= n;
            s.var_rate[i] /= n;
        }
        s
    }

    fn features(&self, ego_velocity: Vec3) -> Vec<f64> {
        let mut f = Vec::with_capacity(15);
        f.extend_from_slice(&self.mean_force);
        f.extend_from_slice(&self.var_force);
        f.extend_from_slice(&self.mean_rate);
        f.extend_from_slice(&self.var_rate);
        f.extend_from_slice(&ego_velocity);
        f
    }
}

pub const BIAS_REGRESSOR_INPUTS: usize = 15;
const HIDDEN: usize = 32;
/// Output clamp scales; tanh keeps each bias component strictly inside.
pub const ACCEL_BIAS_BOUND: f64 = 0.5;
pub const GYRO_BIAS_BOUND: f64 = 0.2;

/// Three-layer fully connected bias regressor (15 -> 32 -> 32 -> 6, ReLU),
/// final layer zero-initialized so the bias estimate starts at exactly zero.
/// Outputs are tanh-clamped to the sanity bounds.
pub struct BiasRegressor {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

impl BiasRegressor {
    pub fn new(rng: &mut impl FnMut() -> f64) -> Result<BiasRegressor> {
        let he = |fan_in: usize, n: usize, rng: &mut dyn FnMut() -> f64| -> Vec<f64> {
            let s = (2.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng() * s).collect()
        };
        Ok(BiasRegressor {
            w1: Tensor::param(
                he(BIAS_REGRESSOR_INPUTS, HIDDEN * BIAS_REGRESSOR_INPUTS, rng),
                &[HIDDEN, BIAS_REGRESSOR_INPUTS],
            )?,
            b1: Tensor::param(vec![0.0; HIDDEN], &[HIDDEN])?,
            w2: Tensor::param(he(HIDDEN, HIDDEN * HIDDEN, rng), &[HIDDEN, HIDDEN])?,
            b2: Tensor::param(vec![0.0; HIDDEN], &[HIDDEN])?,
            w3: Tensor::param(vec![0.0; 6 * HIDDEN], &[6, HIDDEN])?,
            b3: Tensor::param(vec![0.0; 6], &[6])?,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("bias_reg.w1".into(), self.w1.clone()),
            ("bias_reg.b1".into(), self.b1.clone()),
            ("bias_reg.w2".into(), self.w2.clone()),
            ("bias_reg.b2".into(), self.b2.clone()),
            ("bias_reg.w3".into(), self.w3.clone()),
            ("bias_reg.b3".into(), self.b3.clone()),
        ]
    }

    /// Regress (accel bias, gyro bias) from window statistics and the
    /// current ego-velocity estimate.
    pub fn forward(&self, stats: &ImuWindowStats, ego_velocity: Vec3) -> Result<(Tensor, Tensor)> {
        let x = Tensor::vector(&stats.features(ego_velocity));
        let h1 = self.w1.matvec(&x)?.add(&self.b1)?.relu();
        let h2 = self.w2.matvec(&h1)?.add(&self.b2)?.relu();
        let out = self.w3.matvec(&h2)?.add(&self.b3)?.tanh();
        let accel = out.narrow(0, 0, 3)?.mul_scalar(ACCEL_BIAS_BOUND);
        let gyro = out.narrow(0, 3, 3)?.mul_scalar(GYRO_BIAS_BOUND);
        Ok((accel, gyro))
    }

    /// Plain-f64 evaluation for inference.
    pub fn forward_f64(&self, stats: &ImuWindowStats, ego_velocity: Vec3) -> Result<Bias> {
        let (a, g) = self.forward(stats, ego_velocity)?;
        let (a, g) = (a.to_vec(), g.to_vec());
        Ok(Bias {
            accel: [a[0], a[1], a[2]],
            gyro: [g[0], g[1], g[2]],
        })
    }
}

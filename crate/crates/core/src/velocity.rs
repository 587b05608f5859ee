//! Differentiable velocity estimation: sub-pixel Doppler lookup, planar
//! ego-velocity least squares over landmark bearings, body/radar velocity
//! transfer through the mounting extrinsics, and RANSAC distillation of
//! static landmarks.
//!
//! Sign convention: a static landmark at bearing `a` observed while the radar
//! moves with planar velocity `v` has Doppler `v_r = -(v . (cos a, sin a))`,
//! i.e. closing targets measure negative. The least-squares system is
//! `G X = B` with `B = -v_r` stacked and `X` the radar-frame velocity.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::mat::Mat;
use crate::tensor::{ops, Tensor};

/// Radar mounting: rotation radar->body and lever arm (radar position in the
/// body/IMU frame).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Extrinsics {
    /// Rotation taking radar-frame vectors into the body frame, row-major.
    pub rotation: Mat3,
    /// Radar position in the body frame, meters.
    pub lever_arm: Vec3,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Extrinsics {
            rotation: geom::MAT3_IDENTITY,
            lever_arm: [0.0; 3],
        }
    }
}

impl Extrinsics {
    pub fn validate(&self) -> Result<()> {
        // Orthonormality with det +1.
        let r = &self.rotation;
        let mut rrt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, _) in r.iter().enumerate() {
                    rrt[i][j] += r[i][k] * r[j][k];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rrt[i][j] - want).abs() > 1e-9 {
                    return Err(Error::config("extrinsics.rotation", "not orthonormal"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::config("extrinsics.rotation", "determinant must be +1"));
        }
        if self.lever_arm.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("extrinsics.lever_arm", "non-finite"));
        }
        Ok(())
    }

    pub fn from_yaw(yaw: f64, lever_arm: Vec3) -> Extrinsics {
        let (s, c) = yaw.sin_cos();
        Extrinsics {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            lever_arm,
        }
    }
}

/// Radar-frame velocity of the radar given the body velocity and angular
/// rate: the lever arm sweeps an extra `omega x l` term.
pub fn body_to_radar_velocity(v_body: Vec3, omega: Vec3, ext: &Extrinsics) -> Vec3 {
    let swept = geom::v3_add(v_body, geom::v3_cross(omega, ext.lever_arm));
    geom::mat3_transpose_mul_vec(&ext.rotation, swept)
}

/// Inverse of [`body_to_radar_velocity`].
pub fn radar_to_body_velocity(v_radar: Vec3, omega: Vec3, ext: &Extrinsics) -> Vec3 {
    geom::v3_sub(
        geom::mat3_mul_vec(&ext.rotation, v_radar),
        geom::v3_cross(omega, ext.lever_arm),
    )
}

/// Tensor version of [`radar_to_body_velocity`] for a planar radar-frame
/// velocity `[2]`; the angular rate and extrinsics are constants.
pub fn radar_to_body_velocity_taped(
    v_radar_planar: &Tensor,
    omega: Vec3,
    ext: &Extrinsics,
) -> Result<Tensor> {
    if v_radar_planar.len() != 2 {
        return Err(Error::invalid("radar_to_body_velocity_taped", "expected [2]"));
    }
    let v3 = ops::concat(&[v_radar_planar, &Tensor::vector(&[0.0])], 0)?;
    let rot = Tensor::from_vec(
        ext.rotation.iter().flatten().copied().collect(),
        &[3, 3],
    )?;
    let sweep = geom::v3_cross(omega, ext.lever_arm);
    rot.matvec(&v3)?.sub(&Tensor::vector(&sweep))
}

/// Ego-velocity least-squares result over one frame's landmarks.
#[derive(Debug, Clone)]
pub struct VelocitySolution {
    /// Planar radar-frame velocity.
    pub v: [f64; 2],
    pub speed: f64,
    /// Velocity direction (heading) in the radar frame, radians.
    pub heading: f64,
    pub inlier_mask: Vec<bool>,
    /// Per-landmark residuals of `G X - B`, m/s.
    pub residuals: Vec<f64>,
}

fn build_normal_eqs(bearings: &[f64], dopplers: &[f64]) -> ([f64; 3], [f64; 2]) {
    // Returns (gtg as [a, b, c] for [[a,b],[b,c]], gtb).
    let mut gtg = [0.0; 3];
    let mut gtb = [0.0; 2];
    for (&a, &d) in bearings.iter().zip(dopplers) {
        let (s, c) = a.sin_cos();
        let b = -d;
        gtg[0] += c * c;
        gtg[1] += c * s;
        gtg[2] += s * s;
        gtb[0] += c * b;
        gtb[1] += s * b;
    }
    (gtg, gtb)
}

fn condition_of(gtg: &[f64; 3]) -> f64 {
    // Symmetric 2x2 eigenvalues.
    let tr = gtg[0] + gtg[2];
    let det = gtg[0] * gtg[2] - gtg[1] * gtg[1];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = tr / 2.0 - disc;
    if l2 <= 0.0 {
        f64::INFINITY
    } else {
        l1 / l2
    }
}

pub const CONDITION_LIMIT: f64 = 1e8;

/// Solve the planar ego velocity from landmark bearings and Doppler readings
/// by least squares over the cosine constraints.
pub fn solve_ego_velocity(bearings: &[f64], dopplers: &[f64]) -> Result<VelocitySolution> {
    if bearings.len() != dopplers.len() {
        return Err(Error::invalid("solve_ego_velocity", "length mismatch"));
    }
    if bearings.len() < 2 {
        return Err(Error::invalid(
            "solve_ego_velocity",
            format!("need >= 2 observations, got {}", bearings.len()),
        ));
    }
    let (gtg, gtb) = build_normal_eqs(bearings, dopplers);
    let cond = condition_of(&gtg);
    if cond > CONDITION_LIMIT {
        return Err(Error::DegenerateGeometry(format!(
            "bearing geometry condition number {cond:.2e} exceeds {CONDITION_LIMIT:.0e}"
        )));
    }
    let det = gtg[0] * gtg[2] - gtg[1] * gtg[1];
    let x = [
        (gtg[2] * gtb[0] - gtg[1] * gtb[1]) / det,
        (-gtg[1] * gtb[0] + gtg[0] * gtb[1]) / det,
    ];
    let residuals: Vec<f64> = bearings
        .iter()
        .zip(dopplers)
        .map(|(&a, &d)| {
            let (s, c) = a.sin_cos();
            c * x[0] + s * x[1] - (-d)
        })
        .collect();
    Ok(VelocitySolution {
        v: x,
        speed: (x[0] * x[0] + x[1] * x[1]).sqrt(),
        heading: x[1].atan2(x[0]),
        inlier_mask: vec![true; bearings.len()],
        residuals,
    })
}

/// Differentiable least squares through the closed-form 2x2 inverse.
/// `g` is `[N,2]` of (cos, sin) rows, `b` is `[N,1]`.
/// Returns `(x, residuals)` with `x` shaped `[2,1]` and residuals `[N,1]`.
pub fn solve_ego_velocity_taped(g: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    if g.shape().len() != 2 || g.shape()[1] != 2 || b.shape() != [g.shape()[0], 1] {
        return Err(Error::invalid(
            "solve_ego_velocity_taped",
            format!("G {:?} and B {:?} must be [N,2] and [N,1]", g.shape(), b.shape()),
        ));
    }
    let gt = g.transpose()?;
    let gtg = gt.matmul(g)?;
    {
        let d = gtg.data_ref();
        let cond = condition_of(&[d[0], d[1], d[3]]);
        if cond > CONDITION_LIMIT {
            return Err(Error::DegenerateGeometry(format!(
                "bearing geometry condition number {cond:.2e} exceeds {CONDITION_LIMIT:.0e}"
            )));
        }
    }
    let x = gtg.inv2x2()?.matmul(&gt.matmul(b)?)?;
    let residuals = g.matmul(&x)?.sub(b)?;
    Ok((x, residuals))
}

/// Bearing matrix `G = [cos a, sin a]` (`[N,2]`) from a `[N]` bearing tensor.
pub fn bearing_matrix_taped(bearings: &Tensor) -> Result<Tensor> {
    let n = bearings.len();
    let c = bearings.cos().reshape(&[n, 1])?;
    let s = bearings.sin().reshape(&[n, 1])?;
    ops::concat(&[&c, &s], 1)
}

/// Sub-pixel Doppler at fractional pixel (`u`, `v`), as a distance-tempered
/// softmax over the Doppler map. The support is truncated to a 9x9 window
/// around the nearest pixel: at kappa = 0.01 the weight of any farther pixel
/// is below 1e-30, which brute-force comparison tests confirm.
pub fn subpixel_doppler(doppler: &Mat, u: &Tensor, v: &Tensor, kappa: f64) -> Result<Tensor> {
    if kappa <= 0.0 {
        return Err(Error::NonPositiveTemperature(kappa));
    }
    let (h, w) = (doppler.rows(), doppler.cols());
    let half = 4usize;
    let size = 2 * half + 1;
    let cu = u.item().round().max(0.0) as usize;
    let cv = v.item().round().max(0.0) as usize;
    let r0 = cu.saturating_sub(half).min(h.saturating_sub(size));
    let c0 = cv.saturating_sub(half).min(w.saturating_sub(size));
    let rows = size.min(h);
    let cols = size.min(w);
    let mut vals = Vec::with_capacity(rows * cols);
    let mut rcoord = Vec::with_capacity(rows * cols);
    let mut ccoord = Vec::with_capacity(rows * cols);
    for i in r0..r0 + rows {
        for j in c0..c0 + cols {
            vals.push(doppler.get(i, j));
            rcoord.push(i as f64);
            ccoord.push(j as f64);
        }
    }
    let du = u.sub(&Tensor::vector(&rcoord))?;
    let dv = v.sub(&Tensor::vector(&ccoord))?;
    let neg_d2 = du.square().add(&dv.square())?.neg();
    let weights = neg_d2.softmax(0, kappa)?;
    weights.mul(&Tensor::vector(&vals))?.sum().reshape(&[1])
}

/// RANSAC parameters for static-landmark distillation. The inlier tolerance
/// defaults to roughly 3x the simulator Doppler noise sigma.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub iters: usize,
    pub inlier_tol: f64,
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            iters: 200,
            inlier_tol: 0.15,
            min_inliers: 4,
        }
    }
}

static RANSAC_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`ransac_static`] invocations since the last reset. Training
/// must leave this untouched; odometry inference drives it up.
pub fn ransac_call_count() -> usize {
    RANSAC_CALLS.load(Ordering::Relaxed)
}

pub fn reset_ransac_call_count() {
    RANSAC_CALLS.store(0, Ordering::Relaxed);
}

fn solve_subset(bearings: &[f64], dopplers: &[f64], mask: &[bool]) -> Result<VelocitySolution> {
    let (bs, ds): (Vec<f64>, Vec<f64>) = bearings
        .iter()
        .zip(dopplers)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((b, d), _)| (*b, *d))
        .unzip();
    let mut sol = solve_ego_velocity(&bs, &ds)?;
    // Re-express residuals and mask over the full set.
    sol.residuals = bearings
        .iter()
        .zip(dopplers)
        .map(|(&a, &d)| {
            let (s, c) = a.sin_cos();
            c * sol.v[0] + s * sol.v[1] + d
        })
        .collect();
    sol.inlier_mask = mask.to_vec();
    Ok(sol)
}

/// Two-point RANSAC over the ego-velocity system: filters dynamic targets,
/// multipath ghosts and mismatched pairs. Inference-only; it never joins the
/// differentiable graph (kept cold during training).
pub fn ransac_static(
    bearings: &[f64],
    dopplers: &[f64],
    params: &RansacParams,
    seed: u64,
) -> Result<(Vec<bool>, VelocitySolution)> {
    RANSAC_CALLS.fetch_add(1, Ordering::Relaxed);
    let n = bearings.len();
    if n < params.min_inliers {
        return Err(Error::invalid(
            "ransac_static",
            format!("{n} observations < min_inliers {}", params.min_inliers),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best_count = 0usize;
    let mut best_mask = vec![false; n];
    for _ in 0..params.iters {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let det = (bearings[j] - bearings[i]).sin();
        if det.abs() < 1e-9 {
            continue;
        }
        // Exact 2-point solve of [cos a, sin a] x = -d.
        let (si, ci) = bearings[i].sin_cos();
        let (sj, cj) = bearings[j].sin_cos();
        let (bi, bj) = (-dopplers[i], -dopplers[j]);
        let x0 = (bi * sj - bj * si) / det;
        let x1 = (bj * ci - bi * cj) / det;
        let mut count = 0usize;
        let mut mask = vec![false; n];
        for k in 0..n {
            let (sk, ck) = bearings[k].sin_cos();
            let r = ck * x0 + sk * x1 + dopplers[k];
            if r.abs() < params.inlier_tol {
                mask[k] = true;
                count += 1;
            }
        }
        if count > best_count {
            best_count = count;
            best_mask = mask;
        }
    }
    if best_count < params.min_inliers {
        return Err(Error::NoConsensus {
            best: best_count,
            required: params.min_inliers,
        });
    }
    // Refit on the consensus set, re-classify once, refit again.
    let sol = solve_subset(bearings, dopplers, &best_mask)?;
    let refined: Vec<bool> = sol.residuals.iter().map(|r| r.abs() < params.inlier_tol).collect();
    let refined_count = refined.iter().filter(|&&m| m).count();
    let final_mask = if refined_count >= params.min_inliers {
        refined
    } else {
        best_mask
    };
    let sol = solve_subset(bearings, dopplers, &final_mask)?;
    Ok((final_mask, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape;
    use crate::tensor::testutil::{finite_diff, rel_err};
    use rand::Rng;

    fn static_doppler(v: [f64; 2], bearing: f64) -> f64 {
        -(v[0] * bearing.cos() + v[1] * bearing.sin())
    }

    #[test]
    fn two_orthogonal_bearings_recover_velocity() {
        // Landmarks dead ahead and at 90 degrees, radar moving +x at 2 m/s.
        let bearings = [0.0, std::f64::consts::FRAC_PI_2];
        let dopplers = [-2.0, 0.0];
        let sol = solve_ego_velocity(&bearings, &dopplers).unwrap();
        assert!((sol.v[0] - 2.0).abs() < 1e-12);
        assert!(sol.v[1].abs() < 1e-12);
        assert!((sol.speed - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_doppler_means_zero_velocity() {
        let bearings = [0.1, 0.9, -0.4, 1.2];
        let dopplers = [0.0; 4];
        let sol = solve_ego_velocity(&bearings, &dopplers).unwrap();
        assert!(sol.speed < 1e-15);
    }

    #[test]
    fn eight_noiseless_bearings_recover_exactly() {
        let v = [1.3, -0.7];
        let bearings: Vec<f64> = (0..8).map(|i| -1.0 + 0.25 * i as f64).collect();
        let dopplers: Vec<f64> = bearings.iter().map(|&a| static_doppler(v, a)).collect();
        let sol = solve_ego_velocity(&bearings, &dopplers).unwrap();
        assert!((sol.v[0] - v[0]).abs() < 1e-12);
        assert!((sol.v[1] - v[1]).abs() < 1e-12);
        for r in sol.residuals {
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_bearings_are_degenerate() {
        let bearings = [0.5, 0.5, 0.5];
        let dopplers = [-1.0, -1.0, -1.0];
        assert!(matches!(
            solve_ego_velocity(&bearings, &dopplers),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let v = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let bearings: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dopplers: Vec<f64> = bearings.iter().map(|&a| static_doppler(v, a)).collect();
            let gamma: f64 = rng.gen_range(-1.0..1.0);
            let rotated: Vec<f64> = bearings.iter().map(|a| a + gamma).collect();
            let sol = solve_ego_velocity(&bearings, &dopplers).unwrap();
            let sol_rot = solve_ego_velocity(&rotated, &dopplers).unwrap();
            let want = crate::geom::rot2(gamma, sol.v);
            assert!((sol_rot.v[0] - want[0]).abs() < 1e-10);
            assert!((sol_rot.v[1] - want[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn least_squares_is_locally_optimal() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = 8;
            let bearings: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dopplers: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sol = solve_ego_velocity(&bearings, &dopplers).unwrap();
            let cost = |x: [f64; 2]| -> f64 {
                bearings
                    .iter()
                    .zip(&dopplers)
                    .map(|(&a, &d)| {
                        let r = a.cos() * x[0] + a.sin() * x[1] + d;
                        r * r
                    })
                    .sum()
            };
            let base = cost(sol.v);
            for k in 0..16 {
                let ang = k as f64 * std::f64::consts::PI / 8.0;
                let x = [sol.v[0] + 1e-3 * ang.cos(), sol.v[1] + 1e-3 * ang.sin()];
                assert!(cost(x) >= base - 1e-15);
            }
        }
    }

    #[test]
    fn taped_solve_matches_f64_and_gradients_check() {
        tape::clear();
        let bearings = [0.2, -0.5, 0.9, 1.4, -1.1];
        let v = [0.8, 0.4];
        let dopplers: Vec<f64> = bearings.iter().map(|&a| static_doppler(v, a) + 0.05).collect();
        let sol = solve_ego_velocity(&bearings, &dopplers).unwrap();

        let bt = Tensor::vector(&bearings);
        let g = bearing_matrix_taped(&bt).unwrap();
        let b = Tensor::param(dopplers.iter().map(|d| -d).collect(), &[5, 1]).unwrap();
        let (x, residuals) = solve_ego_velocity_taped(&g, &b).unwrap();
        assert!((x.to_vec()[0] - sol.v[0]).abs() < 1e-12);
        assert!((x.to_vec()[1] - sol.v[1]).abs() < 1e-12);
        for (a, bb) in residuals.to_vec().iter().zip(&sol.residuals) {
            assert!((a - bb).abs() < 1e-12);
        }

        // Gradient of the squared residual norm with respect to B (the
        // negated Doppler vector).
        let loss = residuals.square().sum();
        loss.backward().unwrap();
        let gb = b.grad().unwrap();
        tape::clear();
        for idx in 0..5 {
            let fd = finite_diff(&b, idx, 1e-6, || {
                let (_, r) = solve_ego_velocity_taped(&g, &b).unwrap();
                let v = r.square().sum().item();
                tape::clear();
                v
            });
            assert!(rel_err(gb[idx], fd) < 1e-6, "[{idx}] {} vs {fd}", gb[idx]);
        }
    }

    #[test]
    fn lever_arm_transfer() {
        // Pure rotation about z with a 1 m forward lever arm sweeps +y.
        let ext = Extrinsics {
            rotation: geom::MAT3_IDENTITY,
            lever_arm: [1.0, 0.0, 0.0],
        };
        let v = body_to_radar_velocity([0.0; 3], [0.0, 0.0, 1.0], &ext);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);

        // Identity transfer.
        let ext0 = Extrinsics::default();
        let v = body_to_radar_velocity([1.0, 2.0, 0.0], [0.0; 3], &ext0);
        assert_eq!(v, [1.0, 2.0, 0.0]);
    }

    #[test]
    fn velocity_transfer_roundtrip() {
        let ext = Extrinsics::from_yaw(0.3, [0.5, -0.2, 0.1]);
        ext.validate().unwrap();
        let omega = [0.02, -0.01, 0.4];
        let v_body = [1.2, -0.3, 0.05];
        let v_radar = body_to_radar_velocity(v_body, omega, &ext);
        let back = radar_to_body_velocity(v_radar, omega, &ext);
        for i in 0..3 {
            assert!((back[i] - v_body[i]).abs() < 1e-12);
        }

        // Taped version agrees on the planar part.
        let planar = Tensor::vector(&[v_radar[0], v_radar[1]]);
        let ext_planar = Extrinsics::from_yaw(0.0, [0.5, -0.2, 0.1]);
        let v_radar_p = body_to_radar_velocity(v_body, omega, &ext_planar);
        let planar_t = Tensor::vector(&[v_radar_p[0], v_radar_p[1]]);
        let vb = radar_to_body_velocity_taped(&planar_t, omega, &ext_planar).unwrap();
        let want = radar_to_body_velocity([v_radar_p[0], v_radar_p[1], 0.0], omega, &ext_planar);
        for (a, b) in vb.to_vec().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let _ = planar;
    }

    #[test]
    fn subpixel_doppler_on_pixel_and_midpoint() {
        let mut m = Mat::zeros(20, 20);
        for i in 0..20 {
            for j in 0..20 {
                m.set(i, j, (i * 20 + j) as f64 * 0.01);
            }
        }
        // Exactly on a pixel with a sharp temperature: that pixel's value.
        let u = Tensor::scalar(7.0);
        let v = Tensor::scalar(11.0);
        let d = subpixel_doppler(&m, &u, &v, 1e-4).unwrap();
        assert!((d.item() - m.get(7, 11)).abs() < 1e-12);

        // Midway between two pixels valued 1 and 3 (all others far away):
        // equal weights, result 2.
        let mut m2 = Mat::zeros(9, 9);
        m2.set(4, 4, 1.0);
        m2.set(4, 5, 3.0);
        let u = Tensor::scalar(4.0);
        let v = Tensor::scalar(4.5);
        let d = subpixel_doppler(&m2, &u, &v, 1e-4).unwrap();
        assert!((d.item() - 2.0).abs() < 1e-9, "got {}", d.item());
    }

    #[test]
    fn truncated_window_matches_full_support() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let (h, w) = (40, 30);
        let mut m = Mat::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                m.set(i, j, rng.gen_range(-3.0..3.0));
            }
        }
        for _ in 0..10 {
            let uu: f64 = rng.gen_range(5.0..(h as f64 - 6.0));
            let vv: f64 = rng.gen_range(5.0..(w as f64 - 6.0));
            let kappa = 0.01;
            let got = subpixel_doppler(&m, &Tensor::scalar(uu), &Tensor::scalar(vv), kappa)
                .unwrap()
                .item();
            // Full-support brute force.
            let mut logits = Vec::with_capacity(h * w);
            for i in 0..h {
                for j in 0..w {
                    let d2 = (uu - i as f64).powi(2) + (vv - j as f64).powi(2);
                    logits.push(-d2 / kappa);
                }
            }
            let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let mut num = 0.0;
            for (idx, l) in logits.iter().enumerate() {
                let e = (l - maxv).exp();
                denom += e;
                num += e * m.data()[idx];
            }
            let want = num / denom;
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn subpixel_doppler_gradient_wrt_location() {
        tape::clear();
        let mut m = Mat::zeros(15, 15);
        for i in 0..15 {
            for j in 0..15 {
                m.set(i, j, ((i as f64 * 0.7).sin() + (j as f64 * 0.4).cos()) * 0.5);
            }
        }
        let u = Tensor::param(vec![7.3], &[1]).unwrap();
        let v = Tensor::param(vec![6.8], &[1]).unwrap();
        let d = subpixel_doppler(&m, &u, &v, 0.5).unwrap();
        d.backward().unwrap();
        let (gu, gv) = (u.grad().unwrap()[0], v.grad().unwrap()[0]);
        tape::clear();
        let fu = finite_diff(&u, 0, 1e-6, || {
            let x = subpixel_doppler(&m, &u, &v, 0.5).unwrap().item();
            tape::clear();
            x
        });
        let fv = finite_diff(&v, 0, 1e-6, || {
            let x = subpixel_doppler(&m, &u, &v, 0.5).unwrap().item();
            tape::clear();
            x
        });
        assert!(rel_err(gu, fu) < 1e-6);
        assert!(rel_err(gv, fv) < 1e-6);
    }

    #[test]
    fn ransac_all_static_noiseless() {
        let v = [1.5, 0.5];
        let bearings: Vec<f64> = (0..12).map(|i| -1.0 + 0.18 * i as f64).collect();
        let dopplers: Vec<f64> = bearings.iter().map(|&a| static_doppler(v, a)).collect();
        let (mask, sol) = ransac_static(&bearings, &dopplers, &RansacParams::default(), 7).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert!((sol.v[0] - v[0]).abs() < 1e-9);
        assert!((sol.v[1] - v[1]).abs() < 1e-9);
    }

    #[test]
    fn ransac_rejects_gross_outliers() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for trial in 0..100 {
            let v = [rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)];
            let n = 30;
            let n_out = 12; // 40% gross outliers
            let mut bearings = Vec::with_capacity(n);
            let mut dopplers = Vec::with_capacity(n);
            let mut is_static = Vec::with_capacity(n);
            for k in 0..n {
                let a = -1.0 + 2.0 * (k as f64 + 0.5) / n as f64;
                bearings.push(a);
                let noise: f64 = {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    0.05 * (-2.0 * u1.ln()).sqrt() * (crate::geom::TAU * u2).cos()
                };
                let mut d = static_doppler(v, a) + noise;
                if k < n_out {
                    d += if rng.gen_bool(0.5) { 3.0 } else { -3.0 };
                    is_static.push(false);
                } else {
                    is_static.push(true);
                }
                dopplers.push(d);
            }
            let (mask, _) =
                ransac_static(&bearings, &dopplers, &RansacParams::default(), trial as u64)
                    .unwrap();
            for k in 0..n {
                match (mask[k], is_static[k]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        assert!(precision >= 0.99, "precision {precision}");
        assert!(recall >= 0.99, "recall {recall}");
    }

    #[test]
    fn ransac_too_few_observations() {
        let bearings = [0.0, 0.5, 1.0];
        let dopplers = [0.0, 0.0, 0.0];
        assert!(ransac_static(&bearings, &dopplers, &RansacParams::default(), 1).is_err());
    }

    #[test]
    fn ransac_no_consensus_error() {
        // Bearing-incompatible dopplers spread far beyond tolerance; two
        // points always fit, but no hypothesis reaches min_inliers = 4.
        let bearings = [0.0, 0.7, 1.4, -0.7];
        let dopplers = [10.0, -8.0, 3.0, -20.0];
        let err = ransac_static(&bearings, &dopplers, &RansacParams::default(), 5).unwrap_err();
        assert!(matches!(err, Error::NoConsensus { .. }));
    }

    #[test]
    fn call_counter_probe() {
        reset_ransac_call_count();
        let bearings = [0.0, 0.5, 1.0, -0.5];
        let dopplers = [0.0; 4];
        let _ = ransac_static(&bearings, &dopplers, &RansacParams::default(), 2);
        let _ = ransac_static(&bearings, &dopplers, &RansacParams::default(), 3);
        assert_eq!(ransac_call_count(), 2);
        reset_ransac_call_count();
    }
}

//! Self-supervised losses tying the radar observations to the inertial
//! increments, plus the Doppler-patched translation that supplies the
//! missing initial velocity of dead reckoning.
//!
//! Conventions: for a frame pair (k, k+1), `rotation_of_next_in_prev` is the
//! planar rotation of frame k+1 expressed in frame k (the pre-integrated
//! heading change), and the patched translation is the body displacement
//! over the interval expressed in frame k. A landmark seen at `p` in frame k
//! and matched at `q` in frame k+1 then satisfies `R q + t - p = 0`; the
//! geometry loss accumulates credibility-weighted squared norms of these
//! residuals (radar uncertainty is treated as isotropic, so the Mahalanobis
//! weighting reduces to the credibility factor).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preintegration::{quat_to_matrix_taped, quat_yaw_taped, PreintegratedTape};
use crate::tensor::{ops, Tensor};
use crate::velocity::solve_ego_velocity_taped;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the kinematic (Doppler projection) loss.
    pub lambda1: f64,
    /// Weight of the velocity alignment loss.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.05,
            lambda2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::config("loss_weights", "must be nonnegative"));
        }
        Ok(())
    }
}

/// One matched landmark pair across adjacent frames.
pub struct MatchedPair {
    /// Position in frame k, `[2]` meters.
    pub p: Tensor,
    /// Matched position in frame k+1, `[2]` meters.
    pub q: Tensor,
    /// Credibility weight, scalar.
    pub credibility: Tensor,
}

/// Everything one frame pair contributes to the joint loss. Optional parts
/// are skipped (with a count) when their prerequisites failed upstream.
pub struct PairObservation {
    pub matched: Vec<MatchedPair>,
    /// Bearing matrix of frame k's landmarks, `[N,2]`.
    pub bearing_g: Option<Tensor>,
    /// Negated Doppler column of frame k's landmarks, `[N,1]`.
    pub doppler_b: Option<Tensor>,
    pub pre: PreintegratedTape,
    /// Body-frame velocity at frame k, `[3]`.
    pub v_k: Option<Tensor>,
    /// Body-frame velocity at frame k+1, `[3]`.
    pub v_next: Option<Tensor>,
}

/// A batch of frame pairs.
pub struct FramePairBatch {
    pub pairs: Vec<PairObservation>,
}

/// Planar rotation matrix `[2,2]` from a heading tensor.
pub fn rot2_taped(theta: &Tensor) -> Result<Tensor> {
    let c = theta.cos();
    let s = theta.sin();
    ops::concat(&[&c, &s.neg(), &s, &c], 0)?.reshape(&[2, 2])
}

/// Planar rotation of frame k+1 in frame k from the pre-integrated
/// quaternion.
pub fn rotation_of_next_in_prev(pre: &PreintegratedTape) -> Result<Tensor> {
    rot2_taped(&quat_yaw_taped(&pre.delta_q)?)
}

/// Body displacement over the interval, expressed in frame k: the rotation
/// quadrature applied to the initial body velocity plus the accelerometer
/// double integral. Differentiable with respect to the velocity and, through
/// the pre-integration, the biases.
pub fn patched_translation(pre: &PreintegratedTape, v_k_body: &Tensor) -> Result<Tensor> {
    if v_k_body.shape() != [3] {
        return Err(Error::invalid("patched_translation", "velocity must be [3]"));
    }
    pre.vel_quad.matvec(v_k_body)?.add(&pre.delta_p)
}

/// Relative displacement between the two radar frames, given the body
/// displacement: the mounting lever arm sweeps an extra `(R - I) l` term and
/// the mounting rotation re-expresses the result in radar axes. With an
/// identity mounting this is the body displacement itself.
pub fn radar_frame_displacement(
    rot_next_in_prev: &Tensor,
    body_displacement: &Tensor,
    ext: &crate::velocity::Extrinsics,
) -> Result<Tensor> {
    let d2 = if body_displacement.len() == 2 {
        body_displacement.clone()
    } else {
        body_displacement.narrow(0, 0, 2)?
    };
    let lever = Tensor::vector(&[ext.lever_arm[0], ext.lever_arm[1]]);
    let rot_m = Tensor::from_vec(
        vec![
            ext.rotation[0][0],
            ext.rotation[0][1],
            ext.rotation[1][0],
            ext.rotation[1][1],
        ],
        &[2, 2],
    )?;
    let swept = rot_next_in_prev.matvec(&lever)?.sub(&lever)?.add(&d2)?;
    rot_m.transpose()?.matvec(&swept)
}

/// Credibility-weighted geometric consistency over matched pairs:
/// `1/2 sum_i c_i ||R q_i + t - p_i||^2`. Returns zero for an empty list
/// (the caller counts that as a warning).
pub fn geometry_loss(
    pairs: &[MatchedPair],
    rot_next_in_prev: &Tensor,
    displacement: &Tensor,
) -> Result<Tensor> {
    if displacement.len() < 2 {
        return Err(Error::invalid("geometry_loss", "displacement must be planar"));
    }
    let t2 = if displacement.len() == 2 {
        displacement.clone()
    } else {
        displacement.narrow(0, 0, 2)?
    };
    let mut total = Tensor::scalar(0.0);
    for pair in pairs {
        let e = rot_next_in_prev
            .matvec(&pair.q)?
            .add(&t2)?
            .sub(&pair.p)?;
        let term = e.square().sum().mul(&pair.credibility)?;
        total = total.add(&term.reshape(&[1])?)?;
    }
    Ok(total.mul_scalar(0.5))
}

/// Norm of the least-squares projection residual of the Doppler system:
/// zero exactly when the Doppler column lies in the bearing span.
pub fn kinematic_loss(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, residuals) = solve_ego_velocity_taped(g, b)?;
    residuals.square().sum().sqrt()
}

/// Velocity consistency between the two frames' radar-derived velocities
/// and the pre-integrated velocity increment:
/// `||v_k + dv - R_{k+1->k} v_{k+1}||`.
pub fn velocity_alignment_loss(
    v_k: &Tensor,
    delta_v: &Tensor,
    rot_next_in_prev3: &Tensor,
    v_next: &Tensor,
) -> Result<Tensor> {
    if v_k.shape() != [3] || v_next.shape() != [3] {
        return Err(Error::invalid("velocity_alignment_loss", "velocities must be [3]"));
    }
    let rotated = rot_next_in_prev3.matvec(v_next)?;
    v_k.add(delta_v)?.sub(&rotated)?.square().sum().sqrt()
}

/// Weighted total: `L1 + lambda1 * L2 + lambda2 * L3`.
pub fn total_loss(l1: &Tensor, l2: &Tensor, l3: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    l1.add(&l2.mul_scalar(weights.lambda1))?
        .add(&l3.mul_scalar(weights.lambda2))
}

/// Loss components of a batch, plus counts of pairs skipped per component.
pub struct BatchLosses {
    pub l1: Tensor,
    pub l2: Tensor,
    pub l3: Tensor,
    pub total: Tensor,
    pub empty_geometry_pairs: usize,
    pub skipped_kinematic: usize,
    pub skipped_velocity: usize,
}

/// Accumulate all three losses over a batch. Pairs missing a solvable
/// velocity or a well-conditioned bearing system contribute zero to the
/// affected component instead of aborting the batch. Matched landmark
/// residuals are evaluated in the radar frame, so the mounting extrinsics
/// enter through [`radar_frame_displacement`].
pub fn batch_losses(
    batch: &FramePairBatch,
    weights: &LossWeights,
    ext: &crate::velocity::Extrinsics,
) -> Result<BatchLosses> {
    weights.validate()?;
    let mut l1 = Tensor::scalar(0.0);
    let mut l2 = Tensor::scalar(0.0);
    let mut l3 = Tensor::scalar(0.0);
    let mut empty_geometry_pairs = 0;
    let mut skipped_kinematic = 0;
    let mut skipped_velocity = 0;
    for pair in &batch.pairs {
        if let Some(v_k) = &pair.v_k {
            if pair.matched.is_empty() {
                empty_geometry_pairs += 1;
            } else {
                let rot = rotation_of_next_in_prev(&pair.pre)?;
                let t_body = patched_translation(&pair.pre, v_k)?;
                let t_radar = radar_frame_displacement(&rot, &t_body, ext)?;
                l1 = l1.add(&geometry_loss(&pair.matched, &rot, &t_radar)?)?;
            }
        } else {
            empty_geometry_pairs += 1;
        }
        match (&pair.bearing_g, &pair.doppler_b) {
            (Some(g), Some(b)) => match kinematic_loss(g, b) {
                Ok(term) => l2 = l2.add(&term)?,
                Err(Error::DegenerateGeometry(_)) => skipped_kinematic += 1,
                Err(e) => return Err(e),
            },
            _ => skipped_kinematic += 1,
        }
        match (&pair.v_k, &pair.v_next) {
            (Some(vk), Some(vn)) => {
                let rot3 = quat_to_matrix_taped(&pair.pre.delta_q)?;
                l3 = l3.add(&velocity_alignment_loss(vk, &pair.pre.delta_v, &rot3, vn)?)?;
            }
            _ => skipped_velocity += 1,
        }
    }
    let total = total_loss(&l1, &l2, &l3, weights)?;
    Ok(BatchLosses {
        l1,
        l2,
        l3,
        total,
        empty_geometry_pairs,
        skipped_kinematic,
        skipped_velocity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom;
    use crate::preintegration::{preintegrate_taped, ImuSample};
    use crate::tensor::tape;
    use crate::tensor::testutil::{finite_diff, rel_err};

    fn quiet_pre(duration: f64, rate: f64) -> PreintegratedTape {
        let n = (duration * rate) as usize;
        let samples: Vec<ImuSample> = (0..=n)
            .map(|i| ImuSample {
                t: i as f64 / rate,
                specific_force: [0.0; 3],
                angular_rate: [0.0; 3],
            })
            .collect();
        preintegrate_taped(
            &samples,
            0.0,
            duration,
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[3]),
        )
        .unwrap()
    }

    fn rotating_pre(duration: f64, rate: f64, omega: f64) -> PreintegratedTape {
        let n = (duration * rate) as usize;
        let samples: Vec<ImuSample> = (0..=n)
            .map(|i| ImuSample {
                t: i as f64 / rate,
                specific_force: [0.0; 3],
                angular_rate: [0.0, 0.0, omega],
            })
            .collect();
        preintegrate_taped(
            &samples,
            0.0,
            duration,
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[3]),
        )
        .unwrap()
    }

    #[test]
    fn patched_translation_zero_velocity_is_delta_p() {
        tape::clear();
        let pre = quiet_pre(0.1, 100.0);
        let t = patched_translation(&pre, &Tensor::zeros(&[3])).unwrap();
        for v in t.to_vec() {
            assert!(v.abs() < 1e-15);
        }
        tape::clear();
    }

    #[test]
    fn patched_translation_straight_line() {
        tape::clear();
        let pre = quiet_pre(0.1, 100.0);
        let t = patched_translation(&pre, &Tensor::vector(&[1.0, 0.0, 0.0])).unwrap();
        let tv = t.to_vec();
        assert!((tv[0] - 0.1).abs() < 1e-12);
        assert!(tv[1].abs() < 1e-15 && tv[2].abs() < 1e-15);
        tape::clear();
    }

    #[test]
    fn patched_translation_rotating_frame_matches_quadrature() {
        tape::clear();
        let (omega, dt) = (1.0, 0.1);
        let pre = rotating_pre(dt, 1000.0, omega);
        let t = patched_translation(&pre, &Tensor::vector(&[1.0, 0.0, 0.0])).unwrap();
        // Closed form of the quadrature for constant omega and v = (1,0):
        // [sin(w t)/w, (1 - cos(w t))/w].
        let want = [
            (omega * dt).sin() / omega,
            (1.0 - (omega * dt).cos()) / omega,
        ];
        let tv = t.to_vec();
        assert!((tv[0] - want[0]).abs() < 1e-6, "{tv:?} vs {want:?}");
        assert!((tv[1] - want[1]).abs() < 1e-6);
        tape::clear();
    }

    #[test]
    fn geometry_loss_zero_on_exact_correspondence() {
        tape::clear();
        let theta = 0.17;
        let disp = [0.4, -0.2];
        let rot = rot2_taped(&Tensor::scalar(theta)).unwrap();
        let mut pairs = Vec::new();
        for (px, py) in [(3.0, 1.0), (5.0, -2.0), (8.0, 0.5)] {
            // q = R(-theta) (p - d): the landmark observed from the moved frame.
            let q = geom::rot2(-theta, [px - disp[0], py - disp[1]]);
            pairs.push(MatchedPair {
                p: Tensor::vector(&[px, py]),
                q: Tensor::vector(&q),
                credibility: Tensor::scalar(1.0),
            });
        }
        let loss = geometry_loss(&pairs, &rot, &Tensor::vector(&disp)).unwrap();
        assert!(loss.item() < 1e-24);
        tape::clear();
    }

    #[test]
    fn geometry_loss_unit_offset_is_half() {
        tape::clear();
        let rot = rot2_taped(&Tensor::scalar(0.0)).unwrap();
        let pairs = vec![MatchedPair {
            p: Tensor::vector(&[1.0, 0.0]),
            q: Tensor::vector(&[0.0, 0.0]),
            credibility: Tensor::scalar(1.0),
        }];
        let loss = geometry_loss(&pairs, &rot, &Tensor::vector(&[0.0, 0.0])).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-15);
        tape::clear();
    }

    #[test]
    fn geometry_loss_empty_list_is_zero() {
        tape::clear();
        let rot = rot2_taped(&Tensor::scalar(0.0)).unwrap();
        let loss = geometry_loss(&[], &rot, &Tensor::vector(&[0.0, 0.0])).unwrap();
        assert_eq!(loss.item(), 0.0);
        tape::clear();
    }

    #[test]
    fn geometry_loss_gradient_matches_finite_differences() {
        tape::clear();
        let p = Tensor::param(vec![2.0, -1.0], &[2]).unwrap();
        let rot = rot2_taped(&Tensor::scalar(0.3)).unwrap();
        let disp = Tensor::vector(&[0.5, 0.1]);
        let eval = |p: &Tensor| {
            let pairs = vec![MatchedPair {
                p: p.clone(),
                q: Tensor::vector(&[1.4, -0.8]),
                credibility: Tensor::scalar(0.7),
            }];
            geometry_loss(&pairs, &rot, &disp).unwrap()
        };
        let loss = eval(&p);
        loss.backward().unwrap();
        let g = p.grad().unwrap();
        tape::clear();
        for idx in 0..2 {
            let fd = finite_diff(&p, idx, 1e-6, || {
                let v = eval(&p).item();
                tape::clear();
                v
            });
            assert!(rel_err(g[idx], fd) < 1e-6, "[{idx}] {} vs {fd}", g[idx]);
        }
    }

    #[test]
    fn kinematic_loss_zero_in_column_space() {
        tape::clear();
        let bearings = Tensor::vector(&[0.1, 0.5, -0.7, 1.1]);
        let g = crate::velocity::bearing_matrix_taped(&bearings).unwrap();
        let x = Tensor::from_vec(vec![1.2, -0.4], &[2, 1]).unwrap();
        let b = g.matmul(&x).unwrap();
        let loss = kinematic_loss(&g, &b).unwrap();
        assert!(loss.item() < 1e-12);
        tape::clear();
    }

    #[test]
    fn kinematic_loss_projection_leaves_orthogonal_component() {
        tape::clear();
        let g = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[3, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0, 1.0], &[3, 1]).unwrap();
        let loss = kinematic_loss(&g, &b).unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-12);

        // Homogeneity: doubling B doubles the residual norm.
        let b2 = Tensor::from_vec(vec![0.0, 0.0, 2.0], &[3, 1]).unwrap();
        let loss2 = kinematic_loss(&g, &b2).unwrap();
        assert!((loss2.item() - 2.0).abs() < 1e-12);
        tape::clear();
    }

    #[test]
    fn kinematic_loss_rotation_invariance() {
        tape::clear();
        let mut rng = crate::rng::seeded(5);
        use rand::Rng;
        for _ in 0..10 {
            let bearings: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.2..1.2)).collect();
            let dop: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gamma: f64 = rng.gen_range(-1.0..1.0);
            let g1 = crate::velocity::bearing_matrix_taped(&Tensor::vector(&bearings)).unwrap();
            let rotated: Vec<f64> = bearings.iter().map(|a| a + gamma).collect();
            let g2 = crate::velocity::bearing_matrix_taped(&Tensor::vector(&rotated)).unwrap();
            let b = Tensor::from_vec(dop.clone(), &[6, 1]).unwrap();
            let l1 = kinematic_loss(&g1, &b).unwrap().item();
            let l2 = kinematic_loss(&g2, &b).unwrap().item();
            assert!((l1 - l2).abs() < 1e-10, "{l1} vs {l2}");
        }
        tape::clear();
    }

    #[test]
    fn velocity_alignment_zero_cases_and_perturbation() {
        tape::clear();
        // Constant velocity, no rotation, zero increment.
        let v = Tensor::vector(&[1.0, 0.2, 0.0]);
        let rot3 = quat_to_matrix_taped(&Tensor::vector(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        let loss =
            velocity_alignment_loss(&v, &Tensor::zeros(&[3]), &rot3, &v).unwrap();
        assert!(loss.item() < 1e-15);

        // Quarter-turn with ground-truth increments: still exactly zero.
        let (yaw0, dyaw) = (0.3, std::f64::consts::FRAC_PI_2);
        let v_world = [1.2, -0.4];
        let v_k = geom::rot2(-yaw0, v_world);
        let v_n = geom::rot2(-(yaw0 + dyaw), v_world);
        let q = geom::Quat::from_yaw(dyaw);
        let rot3 = quat_to_matrix_taped(&Tensor::vector(&[q.w, q.x, q.y, q.z])).unwrap();
        // Constant world velocity: the body-frame increment is
        // R_k^T (v_w - v_w) = 0.
        let loss = velocity_alignment_loss(
            &Tensor::vector(&[v_k[0], v_k[1], 0.0]),
            &Tensor::zeros(&[3]),
            &rot3,
            &Tensor::vector(&[v_n[0], v_n[1], 0.0]),
        )
        .unwrap();
        assert!(loss.item() < 1e-9, "loss {}", loss.item());

        // Perturbing the next velocity by (eps, 0) moves the loss to eps.
        let eps = 1e-3;
        let rot0 = quat_to_matrix_taped(&Tensor::vector(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        let loss = velocity_alignment_loss(
            &v,
            &Tensor::zeros(&[3]),
            &rot0,
            &v.add(&Tensor::vector(&[eps, 0.0, 0.0])).unwrap(),
        )
        .unwrap();
        assert!((loss.item() - eps).abs() < 1e-12);
        tape::clear();
    }

    #[test]
    fn total_loss_paper_weights() {
        tape::clear();
        let one = Tensor::scalar(1.0);
        let t = total_loss(&one, &one, &one, &LossWeights::default()).unwrap();
        assert!((t.item() - 1.15).abs() < 1e-12);

        // Zero components give zero.
        let zero = Tensor::scalar(0.0);
        let t = total_loss(&zero, &zero, &zero, &LossWeights::default()).unwrap();
        assert_eq!(t.item(), 0.0);
        tape::clear();
    }

    #[test]
    fn total_gradient_is_weighted_sum() {
        tape::clear();
        let x = Tensor::param(vec![0.7], &[1]).unwrap();
        // L1 = x^2, L2 = 2x, L3 = -x: d(total)/dx = 2x + 0.05*2 - 0.1
        let l1 = x.square().sum();
        let l2 = x.mul_scalar(2.0).sum();
        let l3 = x.neg().sum();
        let t = total_loss(&l1, &l2, &l3, &LossWeights::default()).unwrap();
        t.backward().unwrap();
        let want = 2.0 * 0.7 + 0.05 * 2.0 - 0.1;
        assert!((x.grad().unwrap()[0] - want).abs() < 1e-12);
        tape::clear();
    }

    #[test]
    fn losses_are_nonnegative() {
        tape::clear();
        let mut rng = crate::rng::seeded(8);
        use rand::Rng;
        for _ in 0..10 {
            let rot = rot2_taped(&Tensor::scalar(rng.gen_range(-1.0..1.0))).unwrap();
            let pairs = vec![MatchedPair {
                p: Tensor::vector(&[rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]),
                q: Tensor::vector(&[rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]),
                credibility: Tensor::scalar(rng.gen_range(0.0..1.0)),
            }];
            let disp = Tensor::vector(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            assert!(geometry_loss(&pairs, &rot, &disp).unwrap().item() >= 0.0);
        }
        tape::clear();
    }
}

//! Training loop, odometry inference and map accumulation.
//!
//! Training is self-supervised: no pose labels enter the loss. Per frame
//! pair the flow is preprocess -> cross-fuse (rotation from the current bias
//! estimate) -> extract/refine -> associate -> sub-pixel Doppler ->
//! differentiable full-set velocity solve -> losses -> optimizer step.
//! Static-landmark RANSAC stays cold during training and is activated only
//! by odometry inference, which chains poses from the pre-integrated
//! rotation and the Doppler-patched translation.

mod model;

pub use model::Model;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{
    associate, extract_landmarks, pixel_coord_matrix, pixel_to_cartesian, ExtractedLandmark,
    ExtractorConfig, FrameFeatures, PixelGeometry,
};
use crate::fusion::{cross_fuse, preprocess_frame, FusionParams, SoftMask};
use crate::geom::{self, Se2, Vec3};
use crate::losses::{batch_losses, FramePairBatch, LossWeights, MatchedPair, PairObservation};
use crate::mat::Mat;
use crate::params::TrainMeta;
use crate::preintegration::{
    preintegrate, preintegrate_taped, sample_at, yaw_delta, Bias, ImuWindowStats,
};
use crate::simulator::{Sequence, TimedPose};
use crate::tensor::{ops, optim::Adam, tape, Tensor};
use crate::velocity::{
    bearing_matrix_taped, radar_to_body_velocity, radar_to_body_velocity_taped, ransac_static,
    solve_ego_velocity_taped, subpixel_doppler, RansacParams,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub scheduler: PlateauConfig,
    /// Frame pairs folded into one optimizer step.
    pub batch_pairs: usize,
    /// Epoch subsampling: every `pair_stride`-th pair of each sequence.
    pub pair_stride: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub fusion: FusionParams,
    pub extractor: ExtractorConfig,
    /// Decoupled per-step weight decay on the bias regressor. The bias
    /// gradients are weak relative to association noise, so without a pull
    /// toward zero the regressed biases random-walk on the flat directions
    /// of the loss. Zero disables.
    pub regressor_weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            lr: 1e-4,
            scheduler: PlateauConfig::default(),
            batch_pairs: 2,
            pair_stride: 1,
            seed: 0,
            weights: LossWeights::default(),
            fusion: FusionParams::default(),
            extractor: ExtractorConfig::default(),
            regressor_weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if self.batch_pairs == 0 || self.pair_stride == 0 {
            return Err(Error::config("train.batch", "batch_pairs and pair_stride must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.regressor_weight_decay) {
            return Err(Error::config("train.regressor_weight_decay", "must be in [0, 1)"));
        }
        self.weights.validate()?;
        self.fusion.validate()?;
        self.extractor.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainResult {
    pub model: Model,
    pub adam: Adam,
    pub log: Vec<EpochLoss>,
    pub meta: TrainMeta,
}

/// Per-sequence caches that do not depend on the parameters.
struct SequenceCache {
    masks: Vec<SoftMask>,
    doppler_up: Vec<Mat>,
    geom: PixelGeometry,
}

fn build_cache(seq: &Sequence, fusion: &FusionParams) -> Result<SequenceCache> {
    let mut masks = Vec::with_capacity(seq.frames.len());
    let mut doppler_up = Vec::with_capacity(seq.frames.len());
    for (k, frame) in seq.frames.iter().enumerate() {
        masks.push(preprocess_frame(frame, fusion, k)?);
        doppler_up.push(upsample_nearest(&frame.doppler, crate::fusion::UPSAMPLE_FACTOR));
    }
    Ok(SequenceCache {
        masks,
        doppler_up,
        geom: PixelGeometry::from_radar(&seq.radar),
    })
}

/// Nearest-neighbor upsampling aligned with the bilinear corner-aligned
/// grid; keeps Doppler readings exact instead of blending them with empty
/// neighbors.
fn upsample_nearest(m: &Mat, factor: usize) -> Mat {
    let (h, w) = (m.rows(), m.cols());
    let (th, tw) = (h * factor, w * factor);
    let mut out = Mat::zeros(th, tw);
    let sr = (h - 1) as f64 / (th - 1) as f64;
    let sc = (w - 1) as f64 / (tw - 1) as f64;
    for i in 0..th {
        let si = (i as f64 * sr).round() as usize;
        for j in 0..tw {
            let sj = (j as f64 * sc).round() as usize;
            out.set(i, j, m.get(si.min(h - 1), sj.min(w - 1)));
        }
    }
    out
}

/// Everything produced while processing one frame pair on the tape.
struct PairProcessing {
    observation: PairObservation,
    /// f64 body velocity at frame k, for lagging into the next regressor input.
    v_k_body: Option<Vec3>,
    /// Landmarks extracted on the k side (inference wants them).
    landmarks_k: Vec<ExtractedLandmark>,
    features_k1: FrameFeatures,
    mask_k1_enhanced: SoftMask,
}

struct PairContext<'a> {
    seq: &'a Sequence,
    cache: &'a SequenceCache,
    fusion: &'a FusionParams,
    extractor_cfg: &'a ExtractorConfig,
}

/// Run the differentiable pipeline over the pair (k, k+1).
fn process_pair(
    ctx: &PairContext<'_>,
    model: &Model,
    k: usize,
    prev_velocity: Vec3,
) -> Result<PairProcessing> {
    let seq = ctx.seq;
    let (t0, t1) = (seq.gt_poses[k].t, seq.gt_poses[k + 1].t);
    let window: Vec<_> = seq
        .imu
        .iter()
        .filter(|s| s.t >= t0 - 0.2 && s.t <= t1 + 0.2)
        .copied()
        .collect();
    let stats = ImuWindowStats::from_samples(&window);
    let (bias_a, bias_g) = model.regressor.forward(&stats, prev_velocity)?;
    let bias_f64 = Bias {
        accel: {
            let v = bias_a.to_vec();
            [v[0], v[1], v[2]]
        },
        gyro: {
            let v = bias_g.to_vec();
            [v[0], v[1], v[2]]
        },
    };

    // Rotation for fusion comes from the detached bias estimate; gradients
    // reach the regressor through the losses, not through the attention
    // geometry.
    let pre_plain = preintegrate(&seq.imu, t0, t1, &bias_f64, k)?;
    let theta = yaw_delta(&pre_plain)?;
    let (mk_enh, mk1_enh) = cross_fuse(&ctx.cache.masks[k], &ctx.cache.masks[k + 1], theta, ctx.fusion)?;

    let feats_k = model.net.forward(&mk_enh.m)?;
    let feats_k1 = model.net.forward(&mk1_enh.m)?;
    let set_k = extract_landmarks(&feats_k, &mk_enh, ctx.extractor_cfg, &ctx.cache.geom, ctx.fusion.kappa)?;

    let pre = preintegrate_taped(&seq.imu, t0, t1, &bias_a, &bias_g)?;

    if set_k.landmarks.len() < 2 {
        return Ok(PairProcessing {
            observation: PairObservation {
                matched: Vec::new(),
                bearing_g: None,
                doppler_b: None,
                pre,
                v_k: None,
                v_next: None,
            },
            v_k_body: None,
            landmarks_k: set_k.landmarks,
            features_k1: feats_k1,
            mask_k1_enhanced: mk1_enh,
        });
    }

    // Frame k observations: bearings and Doppler readings per landmark.
    let (g_k, b_k) = landmark_system(&set_k.landmarks, &ctx.cache.doppler_up[k], ctx.fusion.kappa)?;
    let omega_k = body_rate_at(seq, t0, &bias_f64)?;
    let v_k = match solve_ego_velocity_taped(&g_k, &b_k) {
        Ok((x, _)) => Some(radar_to_body_velocity_taped(
            &x.reshape(&[2])?,
            omega_k,
            &seq.extrinsics,
        )?),
        Err(Error::DegenerateGeometry(_)) => None,
        Err(e) => return Err(e),
    };
    let v_k_body = v_k.as_ref().map(|v| {
        let d = v.to_vec();
        [d[0], d[1], d[2]]
    });

    // Associate frame k landmarks into frame k+1.
    let q_rows: Vec<Tensor> = set_k
        .landmarks
        .iter()
        .map(|l| l.descriptor.clone())
        .collect();
    let q = ops::stack_rows(&q_rows)?;
    let coords = pixel_coord_matrix(feats_k1.h, feats_k1.w);
    let (matched_px, _) = associate(&q, &feats_k1.descriptors_flat, &coords, ctx.fusion.kappa)?;

    let mut matched = Vec::with_capacity(set_k.landmarks.len());
    let mut next_positions = Vec::with_capacity(set_k.landmarks.len());
    let mut next_dopplers = Vec::with_capacity(set_k.landmarks.len());
    for (i, lm) in set_k.landmarks.iter().enumerate() {
        let u = matched_px.narrow(0, i, 1)?.narrow(1, 0, 1)?.reshape(&[1])?;
        let v = matched_px.narrow(0, i, 1)?.narrow(1, 1, 1)?.reshape(&[1])?;
        let q_pos = pixel_to_cartesian(&u, &v, &ctx.cache.geom)?;
        next_dopplers.push(subpixel_doppler(
            &ctx.cache.doppler_up[k + 1],
            &u,
            &v,
            ctx.fusion.kappa,
        )?);
        next_positions.push(q_pos.clone());
        matched.push(MatchedPair {
            p: lm.position.clone(),
            q: q_pos,
            credibility: lm.credibility.clone(),
        });
    }

    // Frame k+1 velocity from the matched observations.
    let (g_n, b_n) = system_from_positions(&next_positions, &next_dopplers)?;
    let omega_n = body_rate_at(seq, t1, &bias_f64)?;
    let v_next = match solve_ego_velocity_taped(&g_n, &b_n) {
        Ok((x, _)) => Some(radar_to_body_velocity_taped(
            &x.reshape(&[2])?,
            omega_n,
            &seq.extrinsics,
        )?),
        Err(Error::DegenerateGeometry(_)) => None,
        Err(e) => return Err(e),
    };

    Ok(PairProcessing {
        observation: PairObservation {
            matched,
            bearing_g: Some(g_k),
            doppler_b: Some(b_k),
            pre,
            v_k,
            v_next,
        },
        v_k_body,
        landmarks_k: set_k.landmarks,
        features_k1: feats_k1,
        mask_k1_enhanced: mk1_enh,
    })
}

/// Bearings and Doppler column for a landmark set on its own frame.
fn landmark_system(
    landmarks: &[ExtractedLandmark],
    doppler_up: &Mat,
    kappa: f64,
) -> Result<(Tensor, Tensor)> {
    let positions: Vec<Tensor> = landmarks.iter().map(|l| l.position.clone()).collect();
    let dopplers: Vec<Tensor> = landmarks
        .iter()
        .map(|l| subpixel_doppler(doppler_up, &l.u, &l.v, kappa))
        .collect::<Result<_>>()?;
    system_from_positions(&positions, &dopplers)
}

fn system_from_positions(positions: &[Tensor], dopplers: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let n = positions.len();
    let pos = ops::stack_rows(positions)?;
    let xs = pos.narrow(1, 0, 1)?.reshape(&[n])?;
    let ys = pos.narrow(1, 1, 1)?.reshape(&[n])?;
    let bearings = ys.atan2(&xs)?;
    let g = bearing_matrix_taped(&bearings)?;
    let b = ops::stack_rows(dopplers)?.neg();
    Ok((g, b))
}

/// Bias-corrected body angular rate at a frame time.
fn body_rate_at(seq: &Sequence, t: f64, bias: &Bias) -> Result<Vec3> {
    let s = sample_at(&seq.imu, t)?;
    Ok(geom::v3_sub(s.angular_rate, bias.gyro))
}

/// Self-supervised training over one or more sequences.
pub fn train(
    sequences: &[Sequence],
    cfg: &TrainConfig,
    resume: Option<&crate::params::Checkpoint>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::invalid("train", "need at least one training sequence"));
    }
    let model = Model::new(&cfg.extractor, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr)?;
    let mut start_epoch = 0usize;
    let mut best = f64::INFINITY;
    let mut bad_epochs = 0usize;
    if let Some(ckpt) = resume {
        model.store.load_values(ckpt)?;
        if let Some((t, m, v)) = &ckpt.adam {
            if !m.is_empty() {
                adam.restore_state(*t, m.clone(), v.clone());
            }
        }
        if let Some(meta) = &ckpt.training {
            start_epoch = meta.epoch;
            adam.set_lr(meta.lr);
            best = meta.plateau_best;
            bad_epochs = meta.plateau_bad_epochs;
        }
    }

    let caches: Vec<SequenceCache> = sequences
        .iter()
        .map(|s| build_cache(s, &cfg.fusion))
        .collect::<Result<_>>()?;
    let mut pair_index: Vec<(usize, usize)> = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        if seq.frames.len() < 2 {
            return Err(Error::invalid("train", format!("sequence {si} has fewer than 2 frames")));
        }
        for k in (0..seq.frames.len() - 1).step_by(cfg.pair_stride) {
            pair_index.push((si, k));
        }
    }

    let params = model.store.tensors();
    let regressor_params: Vec<_> = model
        .store
        .entries()
        .iter()
        .filter(|(name, _)| name.starts_with("bias_reg."))
        .map(|(_, t)| t.clone())
        .collect();
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut sums = [0.0f64; 4];
        let mut pairs_done = 0usize;
        let mut prev_velocity: Vec<Vec3> = vec![[0.0; 3]; sequences.len()];
        for chunk in pair_index.chunks(cfg.batch_pairs) {
            tape::clear();
            let mut batch = FramePairBatch { pairs: Vec::new() };
            for &(si, k) in chunk {
                let ctx = PairContext {
                    seq: &sequences[si],
                    cache: &caches[si],
                    fusion: &cfg.fusion,
                    extractor_cfg: &cfg.extractor,
                };
                let out = process_pair(&ctx, &model, k, prev_velocity[si])?;
                if let Some(v) = out.v_k_body {
                    prev_velocity[si] = v;
                }
                batch.pairs.push(out.observation);
            }
            let losses = batch_losses(&batch, &cfg.weights, &sequences[chunk[0].0].extrinsics)?;
            let total = losses.total.item();
            if !total.is_finite() {
                let (si, k) = chunk[0];
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, sequence {si}, pair {k}"
                )));
            }
            sums[0] += losses.l1.item();
            sums[1] += losses.l2.item();
            sums[2] += losses.l3.item();
            sums[3] += total;
            pairs_done += chunk.len();

            model.store.zero_grads();
            losses.total.backward()?;
            adam.step(&params)?;
            if cfg.regressor_weight_decay > 0.0 {
                let keep = 1.0 - cfg.regressor_weight_decay;
                for p in &regressor_params {
                    let decayed: Vec<f64> = p.to_vec().iter().map(|v| v * keep).collect();
                    p.set_data(&decayed)?;
                }
            }
            tape::clear();
        }
        let n = pairs_done.max(1) as f64;
        let mean_total = sums[3] / n;
        log.push(EpochLoss {
            epoch,
            l1: sums[0] / n,
            l2: sums[1] / n,
            l3: sums[2] / n,
            total: mean_total,
            lr: adam.lr(),
        });
        // Plateau schedule on the epoch-mean total loss.
        if mean_total < best - 1e-12 {
            best = mean_total;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.scheduler.patience {
                let lr = (adam.lr() * cfg.scheduler.factor).max(cfg.scheduler.min_lr);
                adam.set_lr(lr);
                bad_epochs = 0;
            }
        }
    }
    let meta = TrainMeta {
        epoch: cfg.epochs,
        lr: adam.lr(),
        plateau_best: best,
        plateau_bad_epochs: bad_epochs,
    };
    Ok(TrainResult {
        model,
        adam,
        log,
        meta,
    })
}

// ---- odometry ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdometryMode {
    ImuOnly,
    S3e,
    S3eKabsch,
}

impl std::str::FromStr for OdometryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<OdometryMode> {
        match s {
            "imu_only" => Ok(OdometryMode::ImuOnly),
            "s3e" => Ok(OdometryMode::S3e),
            "s3e_kabsch" => Ok(OdometryMode::S3eKabsch),
            other => Err(Error::config(
                "mode",
                format!("unknown mode `{other}` (expected imu_only, s3e or s3e_kabsch)"),
            )),
        }
    }
}

/// Landmarks kept for one frame after static distillation, radar frame.
#[derive(Debug, Clone, Default)]
pub struct FrameLandmarks {
    pub positions: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryEstimate {
    /// Body poses in the initial body frame; the first pose is the identity.
    pub poses: Vec<TimedPose>,
    /// Body-frame velocity estimate per frame.
    pub velocities: Vec<Vec3>,
    /// Static (inlier) landmarks per frame, radar frame.
    pub landmarks: Vec<FrameLandmarks>,
    /// Frames where no static consensus was found (IMU-only propagation).
    pub fallback_frames: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryConfig {
    pub fusion: FusionParams,
    pub extractor: ExtractorConfig,
    pub ransac: RansacParams,
    pub seed: u64,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        OdometryConfig {
            fusion: FusionParams::default(),
            extractor: ExtractorConfig::default(),
            ransac: RansacParams::default(),
            seed: 0,
        }
    }
}

/// Odometry inference over a sequence. `imu_only` dead-reckons from a zero
/// initial velocity; `s3e` patches the translation with the RANSAC-distilled
/// Doppler velocity; `s3e_kabsch` additionally refines each relative pose by
/// weighted rigid alignment of the matched inlier landmarks.
pub fn run_odometry(
    seq: &Sequence,
    model: Option<&Model>,
    mode: OdometryMode,
    cfg: &OdometryConfig,
) -> Result<TrajectoryEstimate> {
    if seq.frames.len() < 2 {
        return Err(Error::invalid("run_odometry", "need at least 2 frames"));
    }
    let n = seq.frames.len();
    let mut poses = vec![TimedPose {
        t: seq.gt_poses[0].t,
        pose: Se2::IDENTITY,
    }];
    let mut velocities = vec![[0.0; 3]; n];
    let mut landmarks = vec![FrameLandmarks::default(); n];
    let mut fallback_frames = Vec::new();

    match mode {
        OdometryMode::ImuOnly => {
            let mut v_body: Vec3 = [0.0; 3];
            let mut prev_vel: Vec3 = [0.0; 3];
            for k in 0..n - 1 {
                let (t0, t1) = (seq.gt_poses[k].t, seq.gt_poses[k + 1].t);
                let bias = infer_bias(seq, model, t0, t1, prev_vel)?;
                let pre = preintegrate(&seq.imu, t0, t1, &bias, k)?;
                let theta = yaw_delta(&pre)?;
                velocities[k] = v_body;
                let d = displacement(&pre, v_body);
                let pose = poses[k].pose.compose(&Se2::new(d[0], d[1], theta));
                poses.push(TimedPose { t: t1, pose });
                // Rotate the propagated velocity into the new body frame.
                let v_next_prev_frame = geom::v3_add(v_body, pre.delta_v);
                let r = geom::rot2(-theta, [v_next_prev_frame[0], v_next_prev_frame[1]]);
                v_body = [r[0], r[1], v_next_prev_frame[2]];
                prev_vel = v_body;
            }
            velocities[n - 1] = v_body;
        }
        OdometryMode::S3e | OdometryMode::S3eKabsch => {
            let model = model.ok_or_else(|| {
                Error::invalid("run_odometry", "this mode requires a trained checkpoint")
            })?;
            let cache = build_cache(seq, &cfg.fusion)?;
            let mut prev_vel: Vec3 = [0.0; 3];
            let mut v_dead: Vec3 = [0.0; 3];
            for k in 0..n - 1 {
                tape::clear();
                let (t0, t1) = (seq.gt_poses[k].t, seq.gt_poses[k + 1].t);
                let ctx = PairContext {
                    seq,
                    cache: &cache,
                    fusion: &cfg.fusion,
                    extractor_cfg: &cfg.extractor,
                };
                let out = process_pair(&ctx, model, k, prev_vel)?;
                let bias = infer_bias(seq, Some(model), t0, t1, prev_vel)?;
                let pre = preintegrate(&seq.imu, t0, t1, &bias, k)?;
                let mut theta = yaw_delta(&pre)?;

                // Static distillation over frame k's landmarks.
                let obs: Vec<([f64; 2], f64, f64)> = out
                    .landmarks_k
                    .iter()
                    .map(|lm| {
                        let p = lm.position.to_vec();
                        let d = subpixel_doppler(&cache.doppler_up[k], &lm.u, &lm.v, cfg.fusion.kappa)
                            .map(|t| t.item())
                            .unwrap_or(0.0);
                        (([p[0], p[1]]), p[1].atan2(p[0]), d)
                    })
                    .collect();
                let bearings: Vec<f64> = obs.iter().map(|o| o.1).collect();
                let dopplers: Vec<f64> = obs.iter().map(|o| o.2).collect();
                let ransac_seed = cfg.seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let v_body = match ransac_static(&bearings, &dopplers, &cfg.ransac, ransac_seed) {
                    Ok((mask, sol)) => {
                        let omega = body_rate_at(seq, t0, &bias)?;
                        let vb = radar_to_body_velocity([sol.v[0], sol.v[1], 0.0], omega, &seq.extrinsics);
                        let mut fl = FrameLandmarks::default();
                        for (i, keep) in mask.iter().enumerate() {
                            if *keep {
                                fl.positions.push(obs[i].0);
                                fl.weights
                                    .push(out.landmarks_k[i].credibility.item().max(0.0));
                            }
                        }
                        landmarks[k] = fl;
                        vb
                    }
                    Err(Error::NoConsensus { .. }) | Err(Error::InvalidArgument { .. }) => {
                        fallback_frames.push(k);
                        v_dead
                    }
                    Err(e) => return Err(e),
                };
                velocities[k] = v_body;

                let mut d = displacement(&pre, v_body);
                if mode == OdometryMode::S3eKabsch {
                    if let Some((phi, t_f)) = kabsch_refinement(&out, &landmarks[k], &cache.geom)? {
                        // q = R(phi) p + t maps frame k radar coords to k+1:
                        // the relative pose of k+1 in k is the inverse.
                        let theta_radar = -phi;
                        let d_radar = geom::rot2(-phi, [-t_f[0], -t_f[1]]);
                        // Convert the radar-frame relative transform to the body frame.
                        let ext = &seq.extrinsics;
                        let l = [ext.lever_arm[0], ext.lever_arm[1]];
                        let rm_yaw = ext.rotation[1][0].atan2(ext.rotation[0][0]);
                        let rd = geom::rot2(rm_yaw, d_radar);
                        let rl = geom::rot2(theta_radar, l);
                        d = [
                            rd[0] - rl[0] + l[0],
                            rd[1] - rl[1] + l[1],
                            d[2],
                        ];
                        theta = theta_radar;
                    }
                }
                let pose = poses[k].pose.compose(&Se2::new(d[0], d[1], theta));
                poses.push(TimedPose { t: t1, pose });

                // Propagate a dead-reckoned velocity for fallback frames.
                let v_next = geom::v3_add(v_body, pre.delta_v);
                let r = geom::rot2(-theta, [v_next[0], v_next[1]]);
                v_dead = [r[0], r[1], v_next[2]];
                prev_vel = v_body;

                // Final frame: keep its own landmark set from the k+1 side.
                if k == n - 2 {
                    let set = extract_landmarks(
                        &out.features_k1,
                        &out.mask_k1_enhanced,
                        &cfg.extractor,
                        &cache.geom,
                        cfg.fusion.kappa,
                    )?;
                    let obs_n: Vec<([f64; 2], f64, f64)> = set
                        .landmarks
                        .iter()
                        .map(|lm| {
                            let p = lm.position.to_vec();
                            let d = subpixel_doppler(
                                &cache.doppler_up[k + 1],
                                &lm.u,
                                &lm.v,
                                cfg.fusion.kappa,
                            )
                            .map(|t| t.item())
                            .unwrap_or(0.0);
                            ([p[0], p[1]], p[1].atan2(p[0]), d)
                        })
                        .collect();
                    let bearings: Vec<f64> = obs_n.iter().map(|o| o.1).collect();
                    let dopplers: Vec<f64> = obs_n.iter().map(|o| o.2).collect();
                    let seed_n = cfg.seed ^ ((k + 1) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                    if let Ok((mask, sol)) = ransac_static(&bearings, &dopplers, &cfg.ransac, seed_n)
                    {
                        let omega = body_rate_at(seq, t1, &bias)?;
                        velocities[k + 1] =
                            radar_to_body_velocity([sol.v[0], sol.v[1], 0.0], omega, &seq.extrinsics);
                        let mut fl = FrameLandmarks::default();
                        for (i, keep) in mask.iter().enumerate() {
                            if *keep {
                                fl.positions.push(obs_n[i].0);
                                fl.weights.push(set.landmarks[i].credibility.item().max(0.0));
                            }
                        }
                        landmarks[k + 1] = fl;
                    } else {
                        velocities[k + 1] = v_dead;
                        fallback_frames.push(k + 1);
                    }
                }
                tape::clear();
            }
        }
    }
    Ok(TrajectoryEstimate {
        poses,
        velocities,
        landmarks,
        fallback_frames,
    })
}

/// Weighted rigid alignment over matched inlier pairs, in radar-frame
/// coordinates. Returns `None` with fewer than three usable pairs.
fn kabsch_refinement(
    out: &PairProcessing,
    inliers: &FrameLandmarks,
    _geom: &PixelGeometry,
) -> Result<Option<(f64, [f64; 2])>> {
    let mut pairs = Vec::new();
    for (lm, m) in out.landmarks_k.iter().zip(&out.observation.matched) {
        let p = lm.position.to_vec();
        // Keep only pairs whose source landmark survived distillation.
        let is_inlier = inliers
            .positions
            .iter()
            .any(|q| (q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
        if !is_inlier {
            continue;
        }
        let q = m.q.to_vec();
        let w = m.credibility.item().max(0.0);
        pairs.push(([p[0], p[1]], [q[0], q[1]], w));
    }
    if pairs.len() < 3 {
        return Ok(None);
    }
    Ok(geom::kabsch_2d(&pairs))
}

fn infer_bias(
    seq: &Sequence,
    model: Option<&Model>,
    t0: f64,
    t1: f64,
    prev_vel: Vec3,
) -> Result<Bias> {
    match model {
        Some(m) => {
            let window: Vec<_> = seq
                .imu
                .iter()
                .filter(|s| s.t >= t0 - 0.2 && s.t <= t1 + 0.2)
                .copied()
                .collect();
            let stats = ImuWindowStats::from_samples(&window);
            m.regressor.forward_f64(&stats, prev_vel)
        }
        None => Ok(Bias::ZERO),
    }
}

/// Body displacement over the interval from the velocity quadrature.
fn displacement(pre: &crate::preintegration::Preintegrated, v_body: Vec3) -> Vec3 {
    geom::v3_add(geom::mat3_mul_vec(&pre.vel_quad, v_body), pre.delta_p)
}

// ---- mapping ----------------------------------------------------------------

/// Accumulate per-frame static landmarks into the initial body frame.
/// `voxel` enables centroid deduplication on a grid of that pitch.
pub fn build_map(
    traj: &TrajectoryEstimate,
    ext: &crate::velocity::Extrinsics,
    voxel: Option<f64>,
) -> Vec<[f64; 2]> {
    let mut points = Vec::new();
    let mount_yaw = ext.rotation[1][0].atan2(ext.rotation[0][0]);
    for (pose, frame) in traj.poses.iter().zip(&traj.landmarks) {
        for p in &frame.positions {
            let body = geom::rot2(mount_yaw, *p);
            let body = [body[0] + ext.lever_arm[0], body[1] + ext.lever_arm[1]];
            points.push(pose.pose.transform(body));
        }
    }
    match voxel {
        None => points,
        Some(pitch) if pitch > 0.0 => {
            let mut cells: BTreeMap<(i64, i64), ([f64; 2], usize)> = BTreeMap::new();
            for p in points {
                let key = (
                    (p[0] / pitch).floor() as i64,
                    (p[1] / pitch).floor() as i64,
                );
                let e = cells.entry(key).or_insert(([0.0, 0.0], 0));
                e.0[0] += p[0];
                e.0[1] += p[1];
                e.1 += 1;
            }
            cells
                .values()
                .map(|(sum, n)| [sum[0] / *n as f64, sum[1] / *n as f64])
                .collect()
        }
        Some(_) => points,
    }
}

/// Write a trajectory as `traj.csv` (t,x,y,yaw).
pub fn write_trajectory(traj: &TrajectoryEstimate, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("t,x,y,yaw\n");
    for p in &traj.poses {
        out.push_str(&format!("{},{},{},{}\n", p.t, p.pose.x, p.pose.y, p.pose.yaw));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write a point map as `map.csv` (x,y).
pub fn write_map(points: &[[f64; 2]], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("x,y\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p[0], p[1]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a trajectory CSV (t,x,y,yaw) back as timed poses.
pub fn read_trajectory(path: &std::path::Path) -> Result<Vec<TimedPose>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("line {}: expected 4 columns", lineno + 1),
            });
        }
        let mut vals = [0.0; 4];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.trim().parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                msg: format!("line {}: cannot parse `{f}`", lineno + 1),
            })?;
        }
        out.push(TimedPose {
            t: vals[0],
            pose: Se2::new(vals[1], vals[2], vals[3]),
        });
    }
    Ok(out)
}

/// Read a map CSV (x,y).
pub fn read_map(path: &std::path::Path) -> Result<Vec<[f64; 2]>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("line {}: expected 2 columns", lineno + 1),
            });
        }
        let x = fields[0].trim().parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            msg: format!("line {}: bad x", lineno + 1),
        })?;
        let y = fields[1].trim().parse().map_err(|_| Error::Format {
            path: path.display().to_string(),
            msg: format!("line {}: bad y", lineno + 1),
        })?;
        out.push([x, y]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

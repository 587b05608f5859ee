//! Soft-mask preprocessing and rotation-based cross fusion.
//!
//! Preprocessing zeroes the first six native range bins (fixed installations
//! near the antenna), bilinearly upsamples the spectrum 2x, and suppresses
//! speckle below 0.8 of each azimuth column's nonzero mean; suppressed cells
//! are exactly zero. Cross fusion transports one frame's mask along the
//! azimuth axis by the IMU-derived rotation and attaches it to the adjacent
//! frame's mask at scale `rho`: `M' = M + rho * transport(M_other)`.
//!
//! The attachment is additive. With the temperature near zero the transport
//! collapses to a pure column shift, so the attachment degenerates to the
//! intuitive "shifted overlay" reading. No circular wrap is applied at the
//! field-of-view edges; the softmax renormalizes over in-view bins.
//!
//! With the default temperature (0.01 rad^2) and the default upsampled bin
//! spacing (~0.47 deg) the attention mass spans roughly 24 bins; retune the
//! temperature when changing the field of view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{resample_table, Mat};
use crate::simulator::{Frame, RadarConfig};

/// Native range bins blanked before upsampling.
pub const ZEROED_NATIVE_RANGE_BINS: usize = 6;
/// Spatial upsampling factor applied before filtering (128 -> 256 default).
pub const UPSAMPLE_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    /// Attention temperature shared by the softmax sites.
    pub kappa: f64,
    /// Enhancement scale of the transported mask.
    pub rho: f64,
    /// Per-column speckle threshold as a fraction of the nonzero mean.
    pub threshold_ratio: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            kappa: 0.01,
            rho: 0.3,
            threshold_ratio: 0.8,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if self.kappa <= 0.0 {
            return Err(Error::config("fusion.kappa", "must be > 0"));
        }
        if self.rho < 0.0 {
            return Err(Error::config("fusion.rho", "must be >= 0"));
        }
        if self.threshold_ratio <= 0.0 || self.threshold_ratio >= 2.0 {
            return Err(Error::config("fusion.threshold_ratio", "must be in (0, 2)"));
        }
        Ok(())
    }
}

/// Thresholded, upsampled spectrum; suppressed cells are exactly zero.
#[derive(Debug, Clone)]
pub struct SoftMask {
    pub m: Mat,
    /// Azimuth bin centers after upsampling.
    pub eta: Vec<f64>,
    pub frame_id: usize,
}

/// Range resolution of the upsampled grid (corner-aligned resampling).
pub fn upsampled_range_res(cfg: &RadarConfig) -> f64 {
    let h = cfg.range_bins;
    cfg.range_res * (h - 1) as f64 / (UPSAMPLE_FACTOR * h - 1) as f64
}

/// Per-column speckle filter: entries below `ratio` times the column's
/// nonzero mean are set to zero. All-zero columns stay zero.
pub fn speckle_filter(m: &mut Mat, ratio: f64) {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..rows {
            let v = m.get(i, j);
            if v != 0.0 {
                sum += v;
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        let threshold = ratio * sum / count as f64;
        for i in 0..rows {
            if m.get(i, j) < threshold {
                m.set(i, j, 0.0);
            }
        }
    }
}

/// Preprocess a native spectrum into a soft mask: blank the first six native
/// range bins, upsample 2x, blank the corresponding twelve upsampled rows,
/// then speckle-filter per azimuth column.
pub fn preprocess(ras: &Mat, eta: &[f64], params: &FusionParams, frame_id: usize) -> Result<SoftMask> {
    params.validate()?;
    if ras.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("preprocess", "spectrum must be nonnegative"));
    }
    if eta.len() != ras.cols() {
        return Err(Error::invalid(
            "preprocess",
            format!("{} azimuth bins for {} columns", eta.len(), ras.cols()),
        ));
    }
    let mut native = ras.clone();
    for i in 0..ZEROED_NATIVE_RANGE_BINS.min(native.rows()) {
        for j in 0..native.cols() {
            native.set(i, j, 0.0);
        }
    }
    let (th, tw) = (
        native.rows() * UPSAMPLE_FACTOR,
        native.cols() * UPSAMPLE_FACTOR,
    );
    let mut up = native.resize_bilinear(th, tw);
    // Re-blank the blend zone so the zeroed region stays exactly zero.
    for i in 0..(ZEROED_NATIVE_RANGE_BINS * UPSAMPLE_FACTOR).min(up.rows()) {
        for j in 0..up.cols() {
            up.set(i, j, 0.0);
        }
    }
    speckle_filter(&mut up, params.threshold_ratio);
    Ok(SoftMask {
        m: up,
        eta: resample_table(eta, tw),
        frame_id,
    })
}

pub fn preprocess_frame(frame: &Frame, params: &FusionParams, frame_id: usize) -> Result<SoftMask> {
    preprocess(&frame.ras, &frame.eta, params, frame_id)
}

/// Azimuth attention matrix `A[m][j] = softmax_j(-(eta_j - theta - eta_m)^2 / kappa)`.
/// Every row sums to one.
pub fn attention_matrix(eta: &[f64], theta: f64, kappa: f64) -> Result<Mat> {
    if kappa <= 0.0 {
        return Err(Error::NonPositiveTemperature(kappa));
    }
    if !theta.is_finite() {
        return Err(Error::invalid("rotation_transport", "non-finite rotation"));
    }
    let n = eta.len();
    let mut a = Mat::zeros(n, n);
    for m in 0..n {
        let target = eta[m] + theta;
        let mut best = f64::NEG_INFINITY;
        let row = a.data_mut();
        for j in 0..n {
            let d = eta[j] - target;
            let logit = -(d * d) / kappa;
            row[m * n + j] = logit;
            if logit > best {
                best = logit;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[m * n + j] - best).exp();
            row[m * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            row[m * n + j] /= sum;
        }
    }
    Ok(a)
}

/// Expected mask after rotating the radar by `theta`: each output column is
/// the attention-weighted combination of input columns (`M * A^T`).
pub fn rotation_transport(mask: &SoftMask, theta: f64, kappa: f64) -> Result<Mat> {
    let fov = mask.eta[mask.eta.len() - 1] - mask.eta[0];
    if theta.abs() >= fov {
        return Err(Error::invalid(
            "rotation_transport",
            format!("rotation {theta:.3} rad exceeds the field of view {fov:.3} rad"),
        ));
    }
    let a = attention_matrix(&mask.eta, theta, kappa)?;
    mask.m.matmul_transpose(&a)
}

/// Rotation-based cross fusion of two adjacent masks. `theta` is the heading
/// change from frame k to frame k+1 (counter-clockwise positive). Returns
/// the enhanced pair `(M_k', M_{k+1}')`.
pub fn cross_fuse(
    mk: &SoftMask,
    mk1: &SoftMask,
    theta: f64,
    params: &FusionParams,
) -> Result<(SoftMask, SoftMask)> {
    params.validate()?;
    if mk.m.rows() != mk1.m.rows() || mk.m.cols() != mk1.m.cols() {
        return Err(Error::ShapeMismatch {
            op: "cross_fuse",
            lhs: vec![mk.m.rows(), mk.m.cols()],
            rhs: vec![mk1.m.rows(), mk1.m.cols()],
        });
    }
    if mk
        .eta
        .iter()
        .zip(&mk1.eta)
        .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(Error::invalid("cross_fuse", "azimuth tables differ"));
    }
    // Prediction of frame k+1 from frame k uses the forward rotation; the
    // symmetric enhancement of frame k uses the reverse rotation.
    let forward = rotation_transport(mk, theta, params.kappa)?;
    let backward = rotation_transport(mk1, -theta, params.kappa)?;
    let enhanced_k1 = mk1.m.add_scaled(&forward, params.rho)?;
    let enhanced_k = mk.m.add_scaled(&backward, params.rho)?;
    Ok((
        SoftMask {
            m: enhanced_k,
            eta: mk.eta.clone(),
            frame_id: mk.frame_id,
        },
        SoftMask {
            m: enhanced_k1,
            eta: mk1.eta.clone(),
            frame_id: mk1.frame_id,
        },
    ))
}

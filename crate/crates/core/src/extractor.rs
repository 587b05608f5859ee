//! Landmark extractor: a compact encoder-decoder with skip connections and
//! three heads.
//!
//! - location: detection scores over the full spectrum;
//! - score: normalized credibility weights (softplus, sums to one), used to
//!   down-weight unpairable returns such as multipath ghosts;
//! - descriptor: the encoder stages bilinearly upsampled, concatenated and
//!   projected to 248 channels by a 1x1 convolution, L2-normalized per pixel.
//!
//! Selection is greedy non-maximum suppression over the location head;
//! locations are refined to sub-pixel precision by a tempered softmax over a
//! local patch, so they stay differentiable. Cross-frame association matches
//! previous-frame landmark descriptors against all current-frame pixel
//! descriptors with dot-product attention and reads out expected pixel
//! coordinates.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{upsampled_range_res, SoftMask, UPSAMPLE_FACTOR, ZEROED_NATIVE_RANGE_BINS};
use crate::mat::{resample_table, Mat};
use crate::rng::standard_normal;
use crate::simulator::RadarConfig;
use crate::tensor::{ops, Tensor};

const ENC1: usize = 8;
const ENC2: usize = 16;
const ENC3: usize = 32;
const SKIP_CHANNELS: usize = ENC1 + ENC2 + ENC3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Descriptor channel count after the 1x1 projection.
    pub desc_channels: usize,
    /// Landmarks selected per frame.
    pub n_landmarks: usize,
    /// Odd patch size for sub-pixel refinement.
    pub patch_size: usize,
    /// Non-maximum-suppression radius in pixels.
    pub nms_radius: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            desc_channels: 248,
            n_landmarks: 64,
            patch_size: 5,
            nms_radius: 4,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.desc_channels == 0 {
            return Err(Error::config("extractor.desc_channels", "must be > 0"));
        }
        if self.n_landmarks < 4 {
            return Err(Error::config(
                "extractor.n_landmarks",
                "need at least 4 landmarks for velocity solvability",
            ));
        }
        if self.patch_size % 2 == 0 || self.patch_size < 3 {
            return Err(Error::config("extractor.patch_size", "must be odd and >= 3"));
        }
        if self.nms_radius < 1 {
            return Err(Error::config("extractor.nms_radius", "must be >= 1"));
        }
        Ok(())
    }
}

/// Head outputs for one frame.
pub struct FrameFeatures {
    /// Detection scores, `[H,W]`.
    pub location: Tensor,
    /// Credibility weights, `[H,W]`, nonnegative, sums to 1.
    pub score: Tensor,
    /// Per-pixel descriptors `[C, H*W]` (one column per pixel), L2-normalized.
    pub descriptors_flat: Tensor,
    pub h: usize,
    pub w: usize,
}

pub struct ExtractorNet {
    enc1: Tensor,
    enc2: Tensor,
    enc3: Tensor,
    dec3: Tensor,
    dec2: Tensor,
    dec1: Tensor,
    head_loc: Tensor,
    head_score: Tensor,
    head_desc: Tensor,
}

fn he_kernel(rng: &mut ChaCha12Rng, shape: &[usize]) -> Result<Tensor> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| standard_normal(rng) * std).collect();
    Tensor::param(data, shape)
}

/// Overwrite one 3x3 sub-kernel with a centered identity tap, routing input
/// channel `cin` of the layer straight into output channel `cout`.
fn seed_identity_tap(kernel: &Tensor, cout: usize, cin: usize, gain: f64) -> Result<()> {
    let shape = kernel.shape().to_vec();
    let (ci, k) = (shape[1], shape[2]);
    let mut data = kernel.to_vec();
    let base = (cout * ci + cin) * k * k;
    for v in data[base..base + k * k].iter_mut() {
        *v = 0.0;
    }
    data[base + (k * k) / 2] = gain;
    kernel.set_data(&data)
}

impl ExtractorNet {
    /// Seeded initialization. Channel 0 of every stage starts as an identity
    /// route of the (log-compressed) input power, so the location and score
    /// heads initially rank pixels by returned energy; training reshapes the
    /// ranking from there. This replaces the large-scale pre-training the
    /// full-size system relies on for convergence.
    pub fn new(cfg: &ExtractorConfig, rng: &mut ChaCha12Rng) -> Result<ExtractorNet> {
        cfg.validate()?;
        let net = ExtractorNet {
            enc1: he_kernel(rng, &[ENC1, 1, 3, 3])?,
            enc2: he_kernel(rng, &[ENC2, ENC1, 3, 3])?,
            enc3: he_kernel(rng, &[ENC3, ENC2, 3, 3])?,
            dec3: he_kernel(rng, &[ENC2, ENC3 + ENC3, 3, 3])?,
            dec2: he_kernel(rng, &[ENC1, ENC2 + ENC2, 3, 3])?,
            dec1: he_kernel(rng, &[ENC1, ENC1 + ENC1, 3, 3])?,
            head_loc: he_kernel(rng, &[1, ENC1, 3, 3])?,
            head_score: he_kernel(rng, &[1, ENC1, 3, 3])?,
            head_desc: he_kernel(rng, &[cfg.desc_channels, SKIP_CHANNELS, 1, 1])?,
        };
        // Power route: encoder channel 0 copies the input down the pyramid,
        // decoder channel 0 carries it back up (channel 0 of each decoder
        // input is the upsampled deeper stage), and both heads tap it.
        seed_identity_tap(&net.enc1, 0, 0, 1.0)?;
        seed_identity_tap(&net.enc2, 0, 0, 1.0)?;
        seed_identity_tap(&net.enc3, 0, 0, 1.0)?;
        seed_identity_tap(&net.dec3, 0, 0, 1.0)?;
        seed_identity_tap(&net.dec2, 0, 0, 1.0)?;
        seed_identity_tap(&net.dec1, 0, 0, 1.0)?;
        seed_identity_tap(&net.head_loc, 0, 0, 1.0)?;
        seed_identity_tap(&net.head_score, 0, 0, 1.0)?;
        Ok(net)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("extractor.enc1".into(), self.enc1.clone()),
            ("extractor.enc2".into(), self.enc2.clone()),
            ("extractor.enc3".into(), self.enc3.clone()),
            ("extractor.dec3".into(), self.dec3.clone()),
            ("extractor.dec2".into(), self.dec2.clone()),
            ("extractor.dec1".into(), self.dec1.clone()),
            ("extractor.head_loc".into(), self.head_loc.clone()),
            ("extractor.head_score".into(), self.head_score.clone()),
            ("extractor.head_desc".into(), self.head_desc.clone()),
        ]
    }

    /// Forward pass over an enhanced soft mask.
    pub fn forward(&self, mask: &Mat) -> Result<FrameFeatures> {
        let (h, w) = (mask.rows(), mask.cols());
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(
                "ExtractorNet::forward",
                format!("extents {h}x{w} must be divisible by 8"),
            ));
        }
        // Log compression tames the r^-4 dynamic range of the spectrum;
        // suppressed mask cells stay exactly zero.
        let compressed: Vec<f64> = mask.data().iter().map(|&v| v.max(0.0).ln_1p()).collect();
        let input = Tensor::from_vec(compressed, &[1, h, w])?;
        let e1 = input.conv2d(&self.enc1, 1, 1)?.relu();
        let p1 = e1.avg_pool2()?;
        let e2 = p1.conv2d(&self.enc2, 1, 1)?.relu();
        let p2 = e2.avg_pool2()?;
        let e3 = p2.conv2d(&self.enc3, 1, 1)?.relu();
        let p3 = e3.avg_pool2()?;

        let u3 = p3.upsample_bilinear(h / 4, w / 4)?;
        let d3 = ops::concat(&[&u3, &e3], 0)?
            .conv2d(&self.dec3, 1, 1)?
            .relu();
        let u2 = d3.upsample_bilinear(h / 2, w / 2)?;
        let d2 = ops::concat(&[&u2, &e2], 0)?
            .conv2d(&self.dec2, 1, 1)?
            .relu();
        let u1 = d2.upsample_bilinear(h, w)?;
        let d1 = ops::concat(&[&u1, &e1], 0)?
            .conv2d(&self.dec1, 1, 1)?
            .relu();

        let location = d1.conv2d(&self.head_loc, 1, 1)?.reshape(&[h, w])?;
        let raw_score = d1.conv2d(&self.head_score, 1, 1)?.softplus();
        let score = raw_score.div(&raw_score.sum())?.reshape(&[h, w])?;

        let skip = ops::concat(
            &[
                &e1,
                &e2.upsample_bilinear(h, w)?,
                &e3.upsample_bilinear(h, w)?,
            ],
            0,
        )?;
        let projected = skip.conv2d(&self.head_desc, 1, 0)?;
        let c = projected.shape()[0];
        let descriptors_flat = projected.reshape(&[c, h * w])?.l2_normalize_cols()?;

        Ok(FrameFeatures {
            location,
            score,
            descriptors_flat,
            h,
            w,
        })
    }
}

/// Greedy non-maximum suppression over a detection map. Repeatedly takes the
/// highest-scoring pixel outside the excluded disks of already-selected
/// peaks; ties break toward the lower row-major index. Rows `0..exclude_rows`
/// (the blanked close-range region) are never selected, and neither are
/// cells suppressed to zero in `allowed` (landmarks live on retained
/// spectrum cells). Returns the picks and whether the requested count was
/// reached.
pub fn select_topn(
    location: &Mat,
    n: usize,
    nms_radius: usize,
    exclude_rows: usize,
    allowed: Option<&Mat>,
) -> (Vec<(usize, usize)>, bool) {
    let (h, w) = (location.rows(), location.cols());
    let mut excluded = vec![false; h * w];
    for i in 0..exclude_rows.min(h) {
        for j in 0..w {
            excluded[i * w + j] = true;
        }
    }
    if let Some(mask) = allowed {
        for (e, &v) in excluded.iter_mut().zip(mask.data()) {
            if v == 0.0 {
                *e = true;
            }
        }
    }
    let mut picks = Vec::with_capacity(n);
    let r2 = (nms_radius * nms_radius) as isize;
    while picks.len() < n {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..h {
            for j in 0..w {
                if excluded[i * w + j] {
                    continue;
                }
                let v = location.get(i, j);
                if best.map_or(true, |(_, _, bv)| v > bv) {
                    best = Some((i, j, v));
                }
            }
        }
        let Some((bi, bj, _)) = best else { break };
        picks.push((bi, bj));
        let (bi, bj) = (bi as isize, bj as isize);
        let rad = nms_radius as isize;
        for di in -rad..=rad {
            for dj in -rad..=rad {
                if di * di + dj * dj > r2 {
                    continue;
                }
                let (ii, jj) = (bi + di, bj + dj);
                if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                    excluded[ii as usize * w + jj as usize] = true;
                }
            }
        }
    }
    let complete = picks.len() == n;
    (picks, complete)
}

/// Sub-pixel refinement: the expected coordinate under a tempered softmax
/// over the location patch around each candidate. Patches near the border
/// are shifted inside, keeping their full size. Differentiable with respect
/// to the location map.
pub fn subpixel_refine(
    location: &Tensor,
    candidates: &[(usize, usize)],
    patch_size: usize,
    kappa: f64,
) -> Result<Vec<(Tensor, Tensor)>> {
    if patch_size % 2 == 0 {
        return Err(Error::invalid("subpixel_refine", "patch size must be odd"));
    }
    let (h, w) = (location.shape()[0], location.shape()[1]);
    if patch_size > h || patch_size > w {
        return Err(Error::invalid("subpixel_refine", "patch larger than the map"));
    }
    let half = patch_size / 2;
    let mut out = Vec::with_capacity(candidates.len());
    for &(ci, cj) in candidates {
        let r0 = ci.saturating_sub(half).min(h - patch_size);
        let c0 = cj.saturating_sub(half).min(w - patch_size);
        let patch = location
            .narrow(0, r0, patch_size)?
            .narrow(1, c0, patch_size)?
            .reshape(&[patch_size * patch_size])?;
        let weights = patch.softmax(0, kappa)?;
        let mut rows = Vec::with_capacity(patch_size * patch_size);
        let mut cols = Vec::with_capacity(patch_size * patch_size);
        for i in 0..patch_size {
            for j in 0..patch_size {
                rows.push((r0 + i) as f64);
                cols.push((c0 + j) as f64);
            }
        }
        let u = weights.mul(&Tensor::vector(&rows))?.sum();
        let v = weights.mul(&Tensor::vector(&cols))?.sum();
        out.push((u, v));
    }
    Ok(out)
}

/// Pixel-grid geometry of the upsampled spectrum.
#[derive(Debug, Clone)]
pub struct PixelGeometry {
    /// Meters per upsampled range row.
    pub range_res: f64,
    /// Azimuth bin centers of the upsampled grid.
    pub eta: Vec<f64>,
    pub max_range: f64,
    /// Rows excluded by the close-range blanking.
    pub min_range: f64,
}

impl PixelGeometry {
    pub fn from_radar(cfg: &RadarConfig) -> PixelGeometry {
        PixelGeometry {
            range_res: upsampled_range_res(cfg),
            eta: resample_table(&cfg.eta, cfg.azimuth_bins * UPSAMPLE_FACTOR),
            max_range: cfg.max_range,
            min_range: ZEROED_NATIVE_RANGE_BINS as f64 * cfg.range_res,
        }
    }

    /// Inverse mapping, for tests and ground-truth construction.
    pub fn cartesian_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let range = (x * x + y * y).sqrt();
        let az = y.atan2(x);
        let n = self.eta.len();
        let col = if az <= self.eta[0] {
            0.0
        } else if az >= self.eta[n - 1] {
            (n - 1) as f64
        } else {
            let i = self.eta.partition_point(|&e| e <= az);
            (i - 1) as f64 + (az - self.eta[i - 1]) / (self.eta[i] - self.eta[i - 1])
        };
        (range / self.range_res, col)
    }
}

/// Sub-pixel location -> planar position in the radar frame: linear range
/// along rows, interpolated azimuth table along columns.
pub fn pixel_to_cartesian(u: &Tensor, v: &Tensor, geom: &PixelGeometry) -> Result<Tensor> {
    let range = u.mul_scalar(geom.range_res);
    let az = v.interp_table(&geom.eta)?;
    let x = range.mul(&az.cos())?;
    let y = range.mul(&az.sin())?;
    ops::concat(&[&x, &y], 0)
}

/// Dot-product attention association: previous-frame landmark descriptors
/// `q` (`[N,C]`) against current-frame pixel descriptors `k_flat`
/// (`[C, H*W]`, one column per pixel). `coords` is the flattened pixel
/// coordinate matrix (`[H*W, 2]`, rows of (u, v)). Returns the expected
/// coordinates (`[N,2]`) and the attention matrix (`[N, H*W]`).
pub fn associate(
    q: &Tensor,
    k_flat: &Tensor,
    coords: &Tensor,
    kappa: f64,
) -> Result<(Tensor, Tensor)> {
    if q.shape().len() != 2 || k_flat.shape().len() != 2 || q.shape()[1] != k_flat.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "associate",
            lhs: q.shape().to_vec(),
            rhs: k_flat.shape().to_vec(),
        });
    }
    if coords.shape() != [k_flat.shape()[1], 2] {
        return Err(Error::ShapeMismatch {
            op: "associate",
            lhs: coords.shape().to_vec(),
            rhs: vec![k_flat.shape()[1], 2],
        });
    }
    let attention = q.matmul(k_flat)?.softmax(1, kappa)?;
    let matched = attention.matmul(coords)?;
    Ok((matched, attention))
}

/// Flattened pixel coordinate matrix `[H*W, 2]` with rows (row, col).
pub fn pixel_coord_matrix(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(i as f64);
            data.push(j as f64);
        }
    }
    Tensor::from_vec(data, &[h * w, 2]).expect("coordinate matrix construction")
}

/// One extracted landmark, all quantities on the tape.
pub struct ExtractedLandmark {
    pub u: Tensor,
    pub v: Tensor,
    /// Planar position in the radar frame, `[2]` meters.
    pub position: Tensor,
    /// Credibility weight (bilinear sample of the score head).
    pub credibility: Tensor,
    /// L2-normalized descriptor, `[C]`.
    pub descriptor: Tensor,
}

pub struct LandmarkSet {
    pub landmarks: Vec<ExtractedLandmark>,
    /// False when fewer than the requested landmarks were available.
    pub complete: bool,
}

/// Full landmark extraction for one frame: select, refine, localize, score
/// and describe. Landmarks whose refined range leaves the valid interval
/// (blanked close range, max range] are dropped.
pub fn extract_landmarks(
    features: &FrameFeatures,
    mask: &SoftMask,
    cfg: &ExtractorConfig,
    geom: &PixelGeometry,
    kappa: f64,
) -> Result<LandmarkSet> {
    let loc_mat = Mat::from_vec(
        features.h,
        features.w,
        features.location.to_vec(),
    )?;
    let exclude = ZEROED_NATIVE_RANGE_BINS * UPSAMPLE_FACTOR;
    let (picks, complete) = select_topn(
        &loc_mat,
        cfg.n_landmarks,
        cfg.nms_radius,
        exclude,
        Some(&mask.m),
    );
    let refined = subpixel_refine(&features.location, &picks, cfg.patch_size, kappa)?;
    let mut landmarks = Vec::with_capacity(refined.len());
    for (u, v) in refined {
        let position = pixel_to_cartesian(&u, &v, geom)?;
        let range = {
            let p = position.data_ref();
            (p[0] * p[0] + p[1] * p[1]).sqrt()
        };
        if range <= geom.min_range || range > geom.max_range {
            continue;
        }
        let credibility = features
            .score
            .bilinear_sample(&u, &v)?
            .reshape(&[1])?;
        let descriptor =
            features
                .descriptors_flat
                .bilinear_sample_flat(features.h, features.w, &u, &v)?;
        let c = descriptor.len();
        let descriptor = descriptor
            .reshape(&[c, 1])?
            .l2_normalize_cols()?
            .reshape(&[c])?;
        landmarks.push(ExtractedLandmark {
            u,
            v,
            position,
            credibility,
            descriptor,
        });
    }
    let complete = complete && landmarks.len() == cfg.n_landmarks;
    Ok(LandmarkSet {
        landmarks,
        complete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::tape;

    fn tiny_net(desc: usize) -> ExtractorNet {
        let cfg = ExtractorConfig {
            desc_channels: desc,
            n_landmarks: 4,
            patch_size: 5,
            nms_radius: 2,
        };
        ExtractorNet::new(&cfg, &mut seeded(42)).unwrap()
    }

    #[test]
    fn zero_input_gives_constant_location_and_uniform_score() {
        tape::clear();
        let net = tiny_net(16);
        let f = net.forward(&Mat::zeros(32, 32)).unwrap();
        let loc = f.location.to_vec();
        assert!(loc.iter().all(|&v| v == loc[0]));
        let score = f.score.to_vec();
        let want = 1.0 / (32.0 * 32.0);
        assert!(score.iter().all(|&v| (v - want).abs() < 1e-12));
        tape::clear();
    }

    #[test]
    fn score_sums_to_one_and_descriptors_unit_norm() {
        tape::clear();
        let net = tiny_net(12);
        let mut m = Mat::zeros(32, 32);
        for i in 0..32 {
            for j in 0..32 {
                m.set(i, j, ((i * 7 + j * 3) % 13) as f64 * 0.3);
            }
        }
        let f = net.forward(&m).unwrap();
        let s: f64 = f.score.to_vec().iter().sum();
        assert!((s - 1.0).abs() < 1e-10);
        assert!(f.score.to_vec().iter().all(|&v| v >= 0.0));
        let d = f.descriptors_flat.to_vec();
        for j in (0..32 * 32).step_by(97) {
            let n: f64 = (0..12).map(|c| d[c * 1024 + j] * d[c * 1024 + j]).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
        tape::clear();
    }

    #[test]
    fn forward_is_deterministic() {
        tape::clear();
        let net = tiny_net(8);
        let mut m = Mat::zeros(32, 32);
        m.set(10, 20, 5.0);
        let a = net.forward(&m).unwrap().location.to_vec();
        let b = net.forward(&m).unwrap().location.to_vec();
        assert_eq!(a, b);
        tape::clear();
    }

    #[test]
    fn gradient_reaches_first_encoder_kernel() {
        tape::clear();
        let net = tiny_net(8);
        let mut m = Mat::zeros(32, 32);
        for i in 0..32 {
            for j in 0..32 {
                m.set(i, j, ((i + j) % 5) as f64);
            }
        }
        let f = net.forward(&m).unwrap();
        f.location.sum().backward().unwrap();
        let g = net.enc1.grad().unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
        tape::clear();
    }

    #[test]
    fn select_single_bright_pixel() {
        let mut m = Mat::zeros(16, 16);
        m.set(9, 4, 3.0);
        let (picks, complete) = select_topn(&m, 1, 2, 0, None);
        assert_eq!(picks, vec![(9, 4)]);
        assert!(complete);
    }

    #[test]
    fn select_tie_breaks_to_lower_row_major_index() {
        let mut m = Mat::zeros(16, 16);
        m.set(5, 10, 2.0);
        m.set(11, 3, 2.0);
        let (picks, _) = select_topn(&m, 2, 2, 0, None);
        assert_eq!(picks[0], (5, 10));
        assert_eq!(picks[1], (11, 3));
    }

    #[test]
    fn select_recovers_separated_grid() {
        let mut m = Mat::zeros(32, 32);
        let mut want = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                let (r, c) = (4 + i * 10, 4 + j * 10);
                m.set(r, c, 5.0 + (i * 3 + j) as f64 * 0.1);
                want.push((r, c));
            }
        }
        let (picks, complete) = select_topn(&m, 9, 4, 0, None);
        assert!(complete);
        let mut got = picks.clone();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn select_respects_exclusion_rows_and_shortage() {
        let mut m = Mat::zeros(8, 8);
        m.set(2, 4, 10.0); // inside the excluded close-range band
        m.set(5, 4, 1.0);
        let (picks, complete) = select_topn(&m, 3, 8, 4, None);
        assert!(!picks.iter().any(|&(r, _)| r < 4));
        assert_eq!(picks[0], (5, 4));
        // Radius 8 around (5,4) covers every remaining valid pixel: shortage.
        assert_eq!(picks.len(), 1);
        assert!(!complete);
    }

    #[test]
    fn refine_one_hot_peak_is_exact() {
        tape::clear();
        let mut data = vec![-1e9; 15 * 15];
        data[7 * 15 + 9] = 10.0;
        let l = Tensor::from_vec(data, &[15, 15]).unwrap();
        let r = subpixel_refine(&l, &[(7, 9)], 5, 0.5).unwrap();
        assert!((r[0].0.item() - 7.0).abs() < 1e-12);
        assert!((r[0].1.item() - 9.0).abs() < 1e-12);
        tape::clear();
    }

    #[test]
    fn refine_two_equal_peaks_average() {
        tape::clear();
        let mut data = vec![-1e9; 20 * 20];
        data[6 * 20 + 10] = 4.0;
        data[6 * 20 + 11] = 4.0;
        let l = Tensor::from_vec(data, &[20, 20]).unwrap();
        let r = subpixel_refine(&l, &[(6, 10)], 5, 1.0).unwrap();
        assert!((r[0].0.item() - 6.0).abs() < 1e-9);
        assert!((r[0].1.item() - 10.5).abs() < 1e-9);
        tape::clear();
    }

    #[test]
    fn refine_matches_direct_softmax_centroid() {
        tape::clear();
        // Linear ramp patch, temperature 1: brute-force the 25-cell centroid.
        let mut data = vec![0.0; 11 * 11];
        for (idx, v) in data.iter_mut().enumerate() {
            let (i, j) = (idx / 11, idx % 11);
            *v = 0.3 * i as f64 - 0.2 * j as f64;
        }
        let l = Tensor::from_vec(data.clone(), &[11, 11]).unwrap();
        let r = subpixel_refine(&l, &[(5, 5)], 5, 1.0).unwrap();
        let mut denom = 0.0;
        let mut nu = 0.0;
        let mut nv = 0.0;
        let mut maxv = f64::NEG_INFINITY;
        for i in 3..8 {
            for j in 3..8 {
                maxv = maxv.max(data[i * 11 + j]);
            }
        }
        for i in 3..8 {
            for j in 3..8 {
                let e = (data[i * 11 + j] - maxv).exp();
                denom += e;
                nu += e * i as f64;
                nv += e * j as f64;
            }
        }
        assert!((r[0].0.item() - nu / denom).abs() < 1e-12);
        assert!((r[0].1.item() - nv / denom).abs() < 1e-12);
        tape::clear();
    }

    #[test]
    fn refinement_stays_in_patch_hull() {
        tape::clear();
        let mut rng = seeded(3);
        let data: Vec<f64> = (0..16 * 16)
            .map(|_| crate::rng::standard_normal(&mut rng))
            .collect();
        let l = Tensor::from_vec(data, &[16, 16]).unwrap();
        let cands = vec![(0, 0), (2, 13), (15, 15), (8, 8), (15, 0)];
        for (idx, (u, v)) in subpixel_refine(&l, &cands, 5, 0.1)
            .unwrap()
            .iter()
            .enumerate()
        {
            let (ci, cj) = cands[idx];
            let r0 = ci.saturating_sub(2).min(16 - 5) as f64;
            let c0 = cj.saturating_sub(2).min(16 - 5) as f64;
            assert!(u.item() >= r0 && u.item() <= r0 + 4.0);
            assert!(v.item() >= c0 && v.item() <= c0 + 4.0);
        }
        tape::clear();
    }

    #[test]
    fn associate_one_hot_by_construction() {
        tape::clear();
        // 4 pixels, 4-d descriptors: rows of the identity; query matches
        // pixel 2 exactly and is orthogonal to the rest.
        let k = Tensor::from_vec(
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
            &[4, 4],
        )
        .unwrap(); // [C=4, HW=4]
        let q = Tensor::from_vec(vec![0.0, 0.0, 1.0, 0.0], &[1, 4]).unwrap();
        let coords = pixel_coord_matrix(2, 2);
        let (matched, attention) = associate(&q, &k, &coords, 1e-3).unwrap();
        let m = matched.to_vec();
        assert!((m[0] - 1.0).abs() < 1e-6); // pixel 2 = (1, 0)
        assert!((m[1] - 0.0).abs() < 1e-6);
        let a: f64 = attention.to_vec().iter().sum();
        assert!((a - 1.0).abs() < 1e-12);
        tape::clear();
    }

    #[test]
    fn associate_uniform_keys_give_centroid() {
        tape::clear();
        let k = Tensor::from_vec(vec![1.0; 3 * 6], &[3, 6]).unwrap();
        let q = Tensor::from_vec(vec![0.3, -0.2, 0.9], &[1, 3]).unwrap();
        let coords = pixel_coord_matrix(2, 3);
        let (matched, _) = associate(&q, &k, &coords, 0.01).unwrap();
        let m = matched.to_vec();
        assert!((m[0] - 0.5).abs() < 1e-12);
        assert!((m[1] - 1.0).abs() < 1e-12);
        tape::clear();
    }

    #[test]
    fn associate_is_permutation_equivariant() {
        tape::clear();
        let mut rng = seeded(9);
        let kd: Vec<f64> = (0..5 * 8).map(|_| crate::rng::standard_normal(&mut rng)).collect();
        let k = Tensor::from_vec(kd.clone(), &[5, 8]).unwrap();
        let qd: Vec<f64> = (0..2 * 5).map(|_| crate::rng::standard_normal(&mut rng)).collect();
        let q = Tensor::from_vec(qd, &[2, 5]).unwrap();
        let coords = pixel_coord_matrix(2, 4);
        let (m1, _) = associate(&q, &k, &coords, 0.1).unwrap();

        // Reverse the pixel order in both K columns and coordinate rows.
        let mut kd_perm = vec![0.0; 5 * 8];
        for c in 0..5 {
            for j in 0..8 {
                kd_perm[c * 8 + j] = kd[c * 8 + (7 - j)];
            }
        }
        let cd = coords.to_vec();
        let mut cd_perm = vec![0.0; 8 * 2];
        for j in 0..8 {
            cd_perm[j * 2] = cd[(7 - j) * 2];
            cd_perm[j * 2 + 1] = cd[(7 - j) * 2 + 1];
        }
        let k2 = Tensor::from_vec(kd_perm, &[5, 8]).unwrap();
        let c2 = Tensor::from_vec(cd_perm, &[8, 2]).unwrap();
        let (m2, _) = associate(&q, &k2, &c2, 0.1).unwrap();
        for (a, b) in m1.to_vec().iter().zip(m2.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
        tape::clear();
    }

    fn test_geometry() -> PixelGeometry {
        let cfg = RadarConfig::with_geometry(128, 128, 0.2, 60f64.to_radians());
        PixelGeometry::from_radar(&cfg)
    }

    #[test]
    fn pixel_to_cartesian_axis_and_30_degrees() {
        tape::clear();
        let geom = test_geometry();
        // Row at exactly 10 m, column at exactly 0 degrees.
        let u = Tensor::scalar(10.0 / geom.range_res);
        let mid = (geom.eta.len() - 1) as f64 / 2.0;
        let v = Tensor::scalar(mid);
        let d = pixel_to_cartesian(&u, &v, &geom).unwrap().to_vec();
        assert!((d[0] - 10.0).abs() < 1e-9);
        assert!(d[1].abs() < 1e-9);

        // 30 degrees at 10 m.
        let (pu, pv) = geom.cartesian_to_pixel(10.0 * 0.866025403784, 10.0 * 0.5);
        let d = pixel_to_cartesian(&Tensor::scalar(pu), &Tensor::scalar(pv), &geom)
            .unwrap()
            .to_vec();
        assert!((d[0] - 8.660).abs() < 1e-3, "{d:?}");
        assert!((d[1] - 5.0).abs() < 1e-3);
        tape::clear();
    }

    #[test]
    fn cartesian_pixel_roundtrip_within_half_bin() {
        tape::clear();
        let geom = test_geometry();
        let mut rng = seeded(11);
        for _ in 0..30 {
            use rand::Rng;
            let r: f64 = rng.gen_range(2.0..24.0);
            let az: f64 = rng.gen_range(-0.9..0.9);
            let (x, y) = (r * az.cos(), r * az.sin());
            let (pu, pv) = geom.cartesian_to_pixel(x, y);
            let d = pixel_to_cartesian(&Tensor::scalar(pu), &Tensor::scalar(pv), &geom)
                .unwrap()
                .to_vec();
            let err = ((d[0] - x).powi(2) + (d[1] - y).powi(2)).sqrt();
            // Half a bin in range plus azimuth curvature tolerance.
            let half_bin = geom.range_res / 2.0 + r * (geom.eta[1] - geom.eta[0]) / 2.0;
            assert!(err < half_bin, "err {err} at r {r}");
        }
        tape::clear();
    }
}

//! Run configuration: one versioned JSON document shared by every
//! subcommand. Unknown keys are rejected; omitted keys take the defaults
//! below (temperature 0.01, enhancement scale 0.3, loss weights 0.05/0.1,
//! learning rate 1e-4, 120 epochs, 248 descriptor channels, 0.65 m clutter
//! threshold).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::fusion::FusionParams;
use crate::losses::LossWeights;
use crate::pipeline::{OdometryConfig, PlateauConfig, TrainConfig};
use crate::preintegration::Bias;
use crate::simulator::{DynamicObject, ImuNoise, Landmark, RadarConfig, Scene, TrajectorySpec};
use crate::velocity::{Extrinsics, RansacParams};

pub const CONFIG_VERSION: u32 = 1;

/// Scene description: explicit landmarks/dynamics plus an optional seeded
/// corridor generator whose landmarks are appended.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub landmarks: Vec<Landmark>,
    pub dynamics: Vec<DynamicObject>,
    pub ghost_rate: f64,
    pub corridor: Option<CorridorSpec>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorSpec {
    pub count: usize,
    pub length: f64,
    pub half_width: f64,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        CorridorSpec {
            count: 40,
            length: 30.0,
            half_width: 8.0,
        }
    }
}

impl SceneConfig {
    pub fn build(&self, seed: u64) -> Scene {
        let mut scene = Scene {
            landmarks: self.landmarks.clone(),
            dynamics: self.dynamics.clone(),
            ghost_rate: self.ghost_rate,
            seed,
        };
        if let Some(c) = &self.corridor {
            let generated = Scene::random_corridor(c.count, c.length, c.half_width, seed);
            scene.landmarks.extend(generated.landmarks);
        }
        scene
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub scheduler: PlateauConfig,
    pub batch_pairs: usize,
    pub pair_stride: usize,
    /// Decoupled per-step weight decay on the bias regressor (0 disables).
    pub regressor_weight_decay: f64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 120,
            lr: 1e-4,
            scheduler: PlateauConfig::default(),
            batch_pairs: 2,
            pair_stride: 1,
            regressor_weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOpts {
    /// Relative-error segment lengths, meters.
    pub segment_lengths: Vec<f64>,
    pub clutter_threshold: f64,
    /// Voxel pitch for map deduplication; null disables.
    pub map_voxel: Option<f64>,
}

impl Default for EvalOpts {
    fn default() -> Self {
        EvalOpts {
            segment_lengths: crate::evaluation::DESK_SEGMENT_LENGTHS.to_vec(),
            clutter_threshold: crate::evaluation::CLUTTER_THRESHOLD,
            map_voxel: Some(0.2),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub radar: RadarConfig,
    pub scene: SceneConfig,
    pub trajectory: TrajectorySpec,
    pub extrinsics: Extrinsics,
    pub radar_rate: f64,
    pub imu_rate: f64,
    pub imu_noise: ImuNoise,
    pub imu_bias: Bias,
    pub fusion: FusionParams,
    pub extractor: ExtractorConfig,
    pub ransac: RansacParams,
    pub loss_weights: LossWeights,
    pub train: TrainOpts,
    pub eval: EvalOpts,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            radar: RadarConfig::default(),
            scene: SceneConfig {
                corridor: Some(CorridorSpec::default()),
                ..SceneConfig::default()
            },
            trajectory: TrajectorySpec {
                kind: crate::simulator::TrajectoryKind::Line,
                duration: 30.0,
                speed: crate::simulator::SpeedProfile::default(),
                seed: 0,
            },
            extrinsics: Extrinsics::default(),
            radar_rate: 10.0,
            imu_rate: 400.0,
            imu_noise: ImuNoise::default(),
            imu_bias: Bias::ZERO,
            fusion: FusionParams::default(),
            extractor: ExtractorConfig::default(),
            ransac: RansacParams::default(),
            loss_weights: LossWeights::default(),
            train: TrainOpts::default(),
            eval: EvalOpts::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported config version {}", self.version),
            ));
        }
        self.radar.validate()?;
        self.extrinsics.validate()?;
        if self.radar_rate <= 0.0 || self.imu_rate <= 0.0 {
            return Err(Error::config("rates", "must be > 0"));
        }
        self.imu_bias.validate().map_err(|e| match e {
            Error::InvalidArgument { msg, .. } => Error::config("imu_bias", msg),
            other => other,
        })?;
        self.fusion.validate()?;
        self.extractor.validate()?;
        self.loss_weights.validate()?;
        if self.ransac.iters == 0 || self.ransac.min_inliers < 2 || self.ransac.inlier_tol <= 0.0 {
            return Err(Error::config("ransac", "iters >= 1, min_inliers >= 2, tol > 0"));
        }
        if self.eval.segment_lengths.is_empty()
            || self.eval.segment_lengths.iter().any(|&l| l <= 0.0)
        {
            return Err(Error::config("eval.segment_lengths", "must be positive"));
        }
        if self.eval.clutter_threshold <= 0.0 {
            return Err(Error::config("eval.clutter_threshold", "must be > 0"));
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            scheduler: self.train.scheduler,
            batch_pairs: self.train.batch_pairs,
            pair_stride: self.train.pair_stride,
            regressor_weight_decay: self.train.regressor_weight_decay,
            seed: self.seed,
            weights: self.loss_weights,
            fusion: self.fusion,
            extractor: self.extractor.clone(),
        }
    }

    pub fn odometry_config(&self) -> OdometryConfig {
        OdometryConfig {
            fusion: self.fusion,
            extractor: self.extractor.clone(),
            ransac: self.ransac.clone(),
            seed: self.seed,
        }
    }

    /// Pretty-printed defaults, shown in the command-line help.
    pub fn default_json() -> String {
        serde_json::to_string_pretty(&RunConfig::default()).expect("default config serializes")
    }
}

//! The trainable model bundle: extractor network plus bias regressor,
//! registered in a single parameter store for optimization and checkpoints.

use std::path::Path;

use crate::error::Result;
use crate::extractor::{ExtractorConfig, ExtractorNet};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore, TrainMeta};
use crate::preintegration::BiasRegressor;
use crate::rng::{seeded, standard_normal};
use crate::tensor::optim::Adam;

pub struct Model {
    pub net: ExtractorNet,
    pub regressor: BiasRegressor,
    pub store: ParamStore,
    pub extractor_cfg: ExtractorConfig,
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: &ExtractorConfig, seed: u64) -> Result<Model> {
        let mut rng = seeded(seed.wrapping_add(0x6d0de1));
        let net = ExtractorNet::new(cfg, &mut rng)?;
        let mut gauss = move || standard_normal(&mut rng);
        let regressor = BiasRegressor::new(&mut gauss)?;
        let mut store = ParamStore::new();
        store.register_all(net.params());
        store.register_all(regressor.params());
        Ok(Model {
            net,
            regressor,
            store,
            extractor_cfg: cfg.clone(),
        })
    }

    /// Load parameters from a checkpoint directory. The configuration must
    /// match the stored shapes (descriptor width in particular).
    pub fn load(dir: &Path, cfg: &ExtractorConfig) -> Result<(Model, Option<TrainMeta>)> {
        let model = Model::new(cfg, 0)?;
        let ckpt = load_checkpoint(dir)?;
        model.store.load_values(&ckpt)?;
        Ok((model, ckpt.training))
    }

    pub fn save(
        &self,
        dir: &Path,
        adam: Option<&Adam>,
        training: Option<&TrainMeta>,
    ) -> Result<()> {
        save_checkpoint(dir, &self.store, adam, training)
    }
}

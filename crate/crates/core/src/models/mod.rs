//! The four gaze regressors and their checkpoints.

mod config;
mod families;

pub use config::{scaled_width, Family, FamilyParams, ModelConfig, MAX_INPUT, MIN_INPUT};
pub use families::{BotNet, HrNet, ITracker, ResNeSt, EYE_SAMPLES_PER_BIN};

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::param::{Param, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vision::RoiBox;

/// Model input: raw 8-bit-range pixels `[B, 3, S, S]` plus, for
/// ITRACKER_MHSA, one `[left, right]` eye box pair per image in pixel
/// coordinates of that image.
pub struct Batch<T: Real> {
    pub images: Tensor<T>,
    pub eye_boxes: Option<Vec<[RoiBox; 2]>>,
}

/// `(x / 255 − 0.5) / 0.5`, applied to every channel.
pub fn normalize_pixels<T: Real>(images: &Tensor<T>) -> Tensor<T> {
    images.scale(2.0 / 255.0).add_scalar(-1.0)
}

enum Net<T: Real> {
    ITracker(ITracker<T>),
    Bot(BotNet<T>),
    Hr(HrNet<T>),
    ResNeSt(ResNeSt<T>),
}

pub struct GazeModel<T: Real> {
    pub config: ModelConfig,
    store: ParamStore<T>,
    net: Net<T>,
}

impl<T: Real> GazeModel<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let net = match config.family {
            Family::ItrackerMhsa => Net::ITracker(ITracker::new(&mut store, config)?),
            Family::Botnet => Net::Bot(BotNet::new(&mut store, config)?),
            Family::Hrnet => Net::Hr(HrNet::new(&mut store, config)?),
            Family::Resnest => Net::ResNeSt(ResNeSt::new(&mut store, config)?),
        };
        Ok(GazeModel {
            config: config.clone(),
            store,
            net,
        })
    }

    pub fn params(&self) -> &[Param<T>] {
        self.store.params()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        families::check_image(&batch.images, self.config.input_size)?;
        if let Some(boxes) = &batch.eye_boxes {
            let b = batch.images.shape()[0];
            if boxes.len() != b {
                return Err(Error::Input(format!("{} eye box pairs for a batch of {b}", boxes.len())));
            }
        }
        Ok(())
    }

    fn boxes<'a>(&self, batch: &'a Batch<T>) -> Result<&'a [[RoiBox; 2]]> {
        batch.eye_boxes.as_deref().ok_or_else(|| {
            Error::Input("ITRACKER_MHSA needs left/right eye boxes for every sample".into())
        })
    }

    /// `[B, 2]` predictions (pitch, yaw) in radians.
    pub fn forward(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        let x = normalize_pixels(&batch.images);
        match &self.net {
            Net::ITracker(m) => m.forward(&x, self.boxes(batch)?),
            Net::Bot(m) => m.forward(&x),
            Net::Hr(m) => m.forward(&x),
            Net::ResNeSt(m) => m.forward(&x),
        }
    }

    /// Projected eye tokens `[B, 2, d_model]` (ITRACKER_MHSA only).
    pub fn eye_tokens(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        match &self.net {
            Net::ITracker(m) => m.eye_tokens(&normalize_pixels(&batch.images), self.boxes(batch)?),
            _ => Err(Error::Input(format!("{} has no eye branch", self.config.family))),
        }
    }

    /// Eye-branch backbone features `[B, 2, F]` (ITRACKER_MHSA only).
    pub fn eye_features(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        self.check_batch(batch)?;
        match &self.net {
            Net::ITracker(m) => m.eye_features(&normalize_pixels(&batch.images), self.boxes(batch)?),
            _ => Err(Error::Input(format!("{} has no eye branch", self.config.family))),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.config.to_json(), self.params())
    }

    /// Rebuilds the architecture from the embedded config and loads every
    /// tensor, checking names and shapes.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config_json.is_empty() {
            return Err(Error::Corrupt("checkpoint has no model config section".into()));
        }
        let cfg = ModelConfig::from_json(&ck.config_json)?;
        let model = Self::build(&cfg)?;
        if ck.tensors.len() != model.params().len() {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {} tensors, {} needs {}",
                ck.tensors.len(),
                cfg.family,
                model.params().len()
            )));
        }
        for p in model.params() {
            let rec = ck
                .get(&p.name)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks tensor {}", p.name)))?;
            if rec.dims != p.tensor.shape() {
                return Err(Error::Corrupt(format!(
                    "shape mismatch for {}: file {:?}, config implies {:?}",
                    p.name,
                    rec.dims,
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(&rec.values::<T>());
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

use opaseg_core::phantom::AnnotatorModel;
use opaseg_core::segnet::{NetConfig, Preprocess, TrainConfig};
use opaseg_core::volume::{NormStats, Window};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contents of the `--config` file for `train`. Schedule keys sit at the top
/// level under their `TrainConfig` names; everything is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFileConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub net: NetConfig,
    pub val_fraction: f64,
    pub test_ids: Vec<String>,
    /// Epsilon of the disagreement-based pixel weight.
    pub confidence_epsilon: f64,
    pub preprocess: Preprocess,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            train: TrainConfig::DESK,
            net: NetConfig::default(),
            val_fraction: 0.2,
            test_ids: Vec::new(),
            confidence_epsilon: 0.05,
            preprocess: Preprocess::default(),
        }
    }
}

impl TrainFileConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(Error::validation)?;
        validate_preprocess(&self.preprocess)?;
        if !(self.confidence_epsilon.is_finite() && self.confidence_epsilon > 0.0) {
            return Err(Error::validation("confidence_epsilon must be > 0"));
        }
        Ok(())
    }
}

pub fn validate_preprocess(p: &Preprocess) -> Result<()> {
    Window::new(p.window.low, p.window.high)?;
    NormStats::new(p.stats.mean, p.stats.std)?;
    Ok(())
}

/// Annotator model used by `phantom` when none is given: 2 px jitter and mild
/// group confusion, no omissions.
pub fn default_annotator_model() -> AnnotatorModel {
    AnnotatorModel::noiseless(0)
        .with_jitter(2.0)
        .with_confusion(0.1)
}

/// Mixes a base seed with indices into an independent-looking stream seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z =
        base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

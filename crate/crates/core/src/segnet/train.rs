use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamConfig};
use super::loss::{kl_loss, LossTarget, Reduction};
use super::net::SegNet;
use super::weights::ClassWeights;
use super::NetError;
use crate::metrics::{iou, ConfusionAccumulator, OPACITY};
use crate::opacity::{opacity_from_labels, OpacityGroups};
use crate::taxonomy::LabelKind;
use crate::volume::NormalizedSlice;

/// Optimization schedule. Field names double as the JSON config keys.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// The learning rate is divided by this every `decay_every_epochs` epochs.
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub seed: u64,
    /// Added to predicted probabilities inside the KL logarithm.
    pub epsilon_kl: f64,
}

impl TrainConfig {
    /// The published recipe: 30 epochs, batch 64, lr 0.1 divided by 10 every 10 epochs.
    pub const REFERENCE: TrainConfig = TrainConfig {
        epochs: 30,
        batch_size: 64,
        initial_lr: 0.1,
        decay_factor: 10.0,
        decay_every_epochs: 10,
        seed: 0,
        epsilon_kl: 1e-7,
    };

    /// CPU-sized defaults: batch 8 at lr 1e-2.
    pub const DESK: TrainConfig = TrainConfig {
        epochs: 30,
        batch_size: 8,
        initial_lr: 1e-2,
        decay_factor: 10.0,
        decay_every_epochs: 10,
        seed: 0,
        epsilon_kl: 1e-7,
    };

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.batch_size > 0
            && self.initial_lr > 0.0
            && self.initial_lr.is_finite()
            && self.decay_factor > 0.0
            && self.decay_factor.is_finite()
            && self.decay_every_epochs > 0
            && self.epsilon_kl > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig)
        }
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = (epoch.max(1) - 1) / self.decay_every_epochs;
        self.initial_lr / libm::pow(self.decay_factor, decays as f64)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::DESK
    }
}

/// One training slice with its soft target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: NormalizedSlice,
    /// `classes x height x width` target planes.
    pub target: Vec<f64>,
    pub pixel_weight: Vec<f64>,
    pub supported: Vec<bool>,
}

/// One validation slice with its hard group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ValSample {
    pub input: NormalizedSlice,
    pub truth: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: Vec<TrainSample>,
    pub val: Vec<ValSample>,
    pub class_weights: ClassWeights,
    pub opacity_groups: OpacityGroups,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the batch losses (mean reduction, class- and pixel-weighted).
    pub train_loss: f64,
    /// Binary opacity IOU on the validation set; `None` when undefined.
    pub val_opacity_iou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch (the initial net if no epoch ran).
    pub net: SegNet,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch the returned net comes from.
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration")]
    InvalidConfig,
    #[error("no training samples")]
    EmptyTrain,
    #[error("no validation samples")]
    EmptyValidation,
    #[error("training and validation slices must share one geometry")]
    Geometry,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("non-finite {what} in epoch {epoch}; returning the last finite parameters")]
    NonFinite {
        epoch: usize,
        what: &'static str,
        last_good: Box<SegNet>,
    },
}

/// Index of the log entry with the highest validation opacity IOU.
/// Undefined scores rank lowest; ties keep the earliest epoch.
pub fn select_best(log: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, rec) in log.iter().enumerate() {
        let score = rec.val_opacity_iou.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

fn check_geometry(data: &TrainData, n_classes: usize) -> Result<(), TrainError> {
    let first = &data.train.first().ok_or(TrainError::EmptyTrain)?.input;
    let (h, w) = (first.height, first.width);
    let hw = h * w;
    for s in &data.train {
        if s.input.height != h
            || s.input.width != w
            || s.target.len() != n_classes * hw
            || s.pixel_weight.len() != hw
            || s.supported.len() != hw
        {
            return Err(TrainError::Geometry);
        }
    }
    for s in &data.val {
        if s.input.height != h || s.input.width != w || s.truth.len() != hw {
            return Err(TrainError::Geometry);
        }
    }
    Ok(())
}

/// Binary opacity IOU of the net over the validation slices, pooled over all of them.
pub fn validation_opacity_iou(
    net: &SegNet,
    val: &[ValSample],
    groups: OpacityGroups,
    batch_size: usize,
) -> Result<Option<f64>, NetError> {
    let mut acc = ConfusionAccumulator::binary();
    for chunk in val.chunks(batch_size.max(1)) {
        let inputs: Vec<NormalizedSlice> = chunk.iter().map(|s| s.input.clone()).collect();
        let probs = net.forward(&inputs)?;
        let pred = probs.opacity_by_mass(groups);
        let hw = probs.shape().slice_len();
        for (i, s) in chunk.iter().enumerate() {
            let truth = opacity_from_labels(&s.truth, LabelKind::Group, groups);
            acc.accumulate_binary(&pred[i * hw..(i + 1) * hw], &truth)
                .expect("binary labels");
        }
    }
    Ok(iou(&acc, OPACITY).expect("binary accumulator tracks opacity"))
}

/// Trains with ADAM on the weighted KL loss under a step-decay schedule and
/// returns the parameters of the best validation epoch.
pub fn train(
    net: SegNet,
    data: &TrainData,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_observed(net, data, config, &mut |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_observed(
    mut net: SegNet,
    data: &TrainData,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            net,
            log: Vec::new(),
            best_epoch: None,
        });
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let n_classes = net.config().n_classes;
    check_geometry(data, n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(net.n_params(), AdamConfig::default());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, SegNet)> = None;
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<NormalizedSlice> =
                chunk.iter().map(|&i| data.train[i].input.clone()).collect();
            let mut target = Vec::new();
            let mut pixel_weight = Vec::new();
            let mut supported = Vec::new();
            for &i in chunk {
                let s = &data.train[i];
                target.extend_from_slice(&s.target);
                pixel_weight.extend_from_slice(&s.pixel_weight);
                supported.extend_from_slice(&s.supported);
            }
            let probs = net.forward_train(&inputs)?;
            let out = kl_loss(
                &probs,
                LossTarget {
                    probs: &target,
                    pixel_weight: &pixel_weight,
                    supported: &supported,
                },
                &data.class_weights,
                config.epsilon_kl,
                Reduction::Mean,
            )?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    what: "loss",
                    last_good: Box::new(net),
                });
            }
            let grads = net.backward(&out.grad_logits)?;
            match adam.step(net.params_mut(), &grads, lr) {
                Ok(()) => {}
                Err(NetError::NonFiniteGradient { .. }) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        what: "gradient",
                        last_good: Box::new(net),
                    });
                }
                Err(e) => return Err(e.into()),
            }
            loss_sum += out.loss;
            batches += 1;
        }
        let val_opacity_iou =
            validation_opacity_iou(&net, &data.val, data.opacity_groups, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_opacity_iou,
        };
        observer(&record);
        log.push(record);
        let score = val_opacity_iou.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, net.clone()));
        }
    }
    let best_epoch = select_best(&log).map(|i| log[i].epoch);
    let net = best.map(|(_, n)| n).unwrap_or(net);
    Ok(TrainOutcome {
        net,
        log,
        best_epoch,
    })
}

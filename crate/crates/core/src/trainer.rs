//! Losses, per-update dataset assembly and the incremental training
//! schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::local_sdf::{SampleSource, SdfSample};
use crate::siren::real::Real;
use crate::siren::{AdamConfig, AdamState, LossBreakdown, LossWeights, SirenError, SirenNetwork};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("non-finite training sample at index {0}")]
    NonFiniteSample(usize),
    #[error(transparent)]
    Network(#[from] SirenError),
    #[error("loss trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_sdf: f64,
    pub lambda_eikonal: f64,
    pub epochs_per_update: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub minibatch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_sdf: 5.0,
            lambda_eikonal: 2.0,
            epochs_per_update: 10,
            learning_rate: 4e-4,
            weight_decay: 0.012,
            decoupled_weight_decay: true,
            minibatch_size: 10_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lambda_sdf > 0.0 && self.lambda_sdf.is_finite()) {
            return bad("lambda_sdf must be positive");
        }
        if !(self.lambda_eikonal > 0.0 && self.lambda_eikonal.is_finite()) {
            return bad("lambda_eikonal must be positive");
        }
        if self.epochs_per_update == 0 {
            return bad("epochs_per_update must be at least 1");
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { sdf: self.lambda_sdf, eikonal: self.lambda_eikonal }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            decoupled_weight_decay: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }
}

pub fn sdf_loss(prediction: f64, target: f64) -> f64 {
    (prediction - target).abs()
}

pub fn eikonal_loss(gradient: Vec3) -> f64 {
    (gradient.norm() - 1.0).abs()
}

/// `λ_sdf·mean|f − s| + λ_eik·mean|‖∇f‖ − 1|` over the batch.
pub fn total_loss<T: Real>(net: &SirenNetwork<T>, batch: &[SdfSample], config: &TrainConfig) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(net.loss(batch, config.loss_weights())?.total)
}

/// Samples for one incremental update, rebuilt from scratch every time.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateDataset {
    samples: Vec<SdfSample>,
}

impl UpdateDataset {
    pub fn samples(&self) -> &[SdfSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, source: SampleSource) -> usize {
        self.samples.iter().filter(|s| s.source == source).count()
    }
}

pub fn assemble_dataset(coarse: Vec<SdfSample>, local: Vec<SdfSample>) -> Result<UpdateDataset, TrainError> {
    let mut samples = coarse;
    samples.extend(local);
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(i) = samples.iter().position(|s| !s.position.is_finite() || !s.sdf.is_finite()) {
        return Err(TrainError::NonFiniteSample(i));
    }
    Ok(UpdateDataset { samples })
}

/// Sample-weighted mean of the minibatch losses seen during one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub update_index: u64,
    pub epoch: usize,
    pub total: f64,
    pub sdf_term: f64,
    pub eikonal_term: f64,
}

pub const LOSS_TRACE_HEADER: &str = "update_index,epoch,total,sdf_term,eikonal_term";

pub fn write_loss_trace(records: &[LossRecord], out: &mut impl Write) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{},{},{},{},{}", r.update_index, r.epoch, r.total, r.sdf_term, r.eikonal_term)?;
    }
    Ok(())
}

fn shuffle_seed(seed: u64, update_index: u64) -> u64 {
    seed ^ update_index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `epochs_per_update` shuffled passes over the dataset, one Adam
/// step per minibatch, and returns one loss record per epoch.
pub fn incremental_update<T: Real>(
    net: &mut SirenNetwork<T>,
    state: &mut AdamState,
    dataset: &UpdateDataset,
    config: &TrainConfig,
    update_index: u64,
) -> Result<Vec<LossRecord>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let weights = config.loss_weights();
    let adam = config.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(config.seed, update_index));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch = Vec::with_capacity(config.minibatch_size.min(dataset.len()));
    let mut trace = Vec::with_capacity(config.epochs_per_update);
    for epoch in 0..config.epochs_per_update {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for idx in order.chunks(config.minibatch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| dataset.samples[i]));
            let (loss, grad) = net.loss_and_gradient(&batch, weights)?;
            state.step(&adam, net.params_mut(), &grad)?;
            let n = batch.len() as f64;
            sums.total += loss.total * n;
            sums.sdf += loss.sdf * n;
            sums.eikonal += loss.eikonal * n;
        }
        let n = dataset.len() as f64;
        trace.push(LossRecord {
            update_index,
            epoch,
            total: sums.total / n,
            sdf_term: sums.sdf / n,
            eikonal_term: sums.eikonal / n,
        });
    }
    Ok(trace)
}

/// Optimizer steps taken by one update.
pub fn steps_per_update(n_samples: usize, config: &TrainConfig) -> usize {
    n_samples.div_ceil(config.minibatch_size) * config.epochs_per_update
}

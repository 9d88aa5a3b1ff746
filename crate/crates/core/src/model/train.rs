use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{sample_inputs, Architecture, LossWeights, ModelParams, QuantileLevels};
use crate::error::{check_open_unit, Error, Result};
use crate::rng::CounterRng;
use crate::volume::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Target risk; sets the default quantile levels `alpha/2` and `1 - alpha/2`.
    pub alpha: f64,
    /// Overrides the quantile levels derived from `alpha`.
    pub quantile_levels: Option<QuantileLevels>,
    pub learning_rate: f64,
    /// Heavy-ball momentum; 0 gives plain mini-batch gradient descent.
    pub momentum: f64,
    pub epochs: usize,
    /// Voxels per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            quantile_levels: None,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 20,
            batch_size: 256,
            seed: 0,
            loss_weights: LossWeights::default(),
            hidden: vec![32, 32],
        }
    }
}

impl TrainConfig {
    pub fn levels(&self) -> Result<QuantileLevels> {
        match self.quantile_levels {
            Some(q) => {
                q.validate()?;
                Ok(q)
            }
            None => QuantileLevels::from_alpha(self.alpha),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_open_unit("alpha", self.alpha)?;
        self.levels()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "learning_rate",
                value: self.learning_rate,
                reason: "must be positive",
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter {
                name: "momentum",
                value: self.momentum,
                reason: "must lie in [0, 1)",
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let w = self.loss_weights;
        if [w.lower, w.upper, w.point].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    /// Training objective before the first epoch, then after each epoch.
    pub loss_trace: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initialisation).
    pub best_epoch: usize,
}

pub fn train(dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainedModel> {
    let channels = dataset.first().map(|s| s.features.len()).unwrap_or(0);
    let init = ModelParams::init(Architecture::new(channels, cfg.hidden.clone())?, cfg.seed);
    train_with(dataset, cfg, init)
}

/// Mini-batch gradient descent from `init`. The parameters with the lowest
/// full-dataset objective seen at an epoch boundary are returned.
pub fn train_with(dataset: &[Sample], cfg: &TrainConfig, init: ModelParams) -> Result<TrainedModel> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    for s in dataset {
        if s.features.len() != init.architecture.channels {
            return Err(Error::ChannelMismatch {
                expected: init.architecture.channels,
                actual: s.features.len(),
            });
        }
    }
    let levels = cfg.levels()?;
    let weights = cfg.loss_weights;

    let blocks: Vec<Array2<f64>> = dataset.iter().map(sample_inputs).collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let inputs = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Config(e.to_string()))?;
    let targets: Vec<f64> = dataset.iter().flat_map(|s| s.dose.values().iter().copied()).collect();

    let mut params = init;
    let mut flat = params.to_flat();
    let mut velocity = vec![0.0; flat.len()];
    let initial = params.objective(&inputs, &targets, levels, weights);
    let mut loss_trace = vec![initial];
    let mut best = (initial, 0, params.clone());

    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut rng = CounterRng::substream(cfg.seed, 0x7ea1);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let x = inputs.select(Axis(0), batch);
            let y: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let (_, grad) = params.objective_and_gradient(&x, &y, levels, weights);
            for ((p, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
            params.set_flat(&flat);
        }
        let loss = params.objective(&inputs, &targets, levels, weights);
        if !loss.is_finite() || flat.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss,
                learning_rate: cfg.learning_rate,
            });
        }
        loss_trace.push(loss);
        if loss < best.0 {
            best = (loss, epoch, params.clone());
        }
    }
    Ok(TrainedModel {
        params: best.2,
        loss_trace,
        best_epoch: best.1,
    })
}

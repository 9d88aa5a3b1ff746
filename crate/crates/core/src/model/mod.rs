//! Per-voxel fully connected regressor with a point head and two offset heads.
//!
//! Each voxel's input is its `C` feature channel values followed by three
//! spatial encodings (coordinates mapped to `[-1, 1]`). Hidden layers use
//! `tanh`. Output 0 is the point prediction; outputs 1 and 2 pass through
//! [`OffsetTransform`] to give strictly positive lower and upper offsets.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use loss::{combined_objective, combined_objective_with, pinball_loss, LossWeights, QuantileLevels};
pub use train::{train, train_with, TrainConfig, TrainedModel};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng::CounterRng;
use crate::volume::{HeuristicPrediction, Sample, VoxelVolume};

pub const SPATIAL_ENCODINGS: usize = 3;
pub const OUTPUTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(channels: usize, hidden: Vec<usize>) -> Result<Self> {
        if hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(Self { channels, hidden })
    }

    pub fn input_width(&self) -> usize {
        self.channels + SPATIAL_ENCODINGS
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(OUTPUTS);
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Strictly positive map applied to the offset heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetTransform {
    /// `ln(1 + e^x) + 1e-6`.
    #[default]
    Softplus,
}

impl OffsetTransform {
    pub const FLOOR: f64 = 1e-6;

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            OffsetTransform::Softplus => softplus(x) + Self::FLOOR,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            OffsetTransform::Softplus => sigmoid(x),
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub transform: OffsetTransform,
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(architecture: Architecture, seed: u64) -> Self {
        let mut rng = CounterRng::substream(seed, 0x1417);
        let layers = architecture
            .widths()
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.uniform_range(-limit, limit));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self {
            architecture,
            transform: OffsetTransform::default(),
            layers,
        }
    }

    pub fn zeros(architecture: Architecture) -> Self {
        let layers = architecture
            .widths()
            .windows(2)
            .map(|p| Layer {
                weights: Array2::zeros((p[1], p[0])),
                bias: Array1::zeros(p[1]),
            })
            .collect();
        Self {
            architecture,
            transform: OffsetTransform::default(),
            layers,
        }
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.architecture.parameter_count());
        for layer in &self.layers {
            flat.extend(layer.weights.iter());
            flat.extend(layer.bias.iter());
        }
        flat
    }

    pub fn from_flat(architecture: Architecture, transform: OffsetTransform, flat: &[f64]) -> Result<Self> {
        if flat.len() != architecture.parameter_count() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                architecture.parameter_count(),
                flat.len()
            )));
        }
        if let Some((index, &value)) = flat.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "model parameters",
                index,
                value,
            });
        }
        let mut params = Self::zeros(architecture);
        params.transform = transform;
        params.set_flat(flat);
        Ok(params)
    }

    pub(crate) fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = flat[at];
                at += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[at];
                at += 1;
            }
        }
    }

    /// Raw network outputs (`N x 3`) for a batch of input rows.
    pub fn forward(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let mut act = inputs.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weights.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            act = z;
        }
        act
    }

    /// Forward pass keeping every layer activation (input first).
    fn forward_trace(&self, inputs: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![inputs.clone()];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    /// Flat gradient of the mean loss given `d loss / d raw output` rows.
    fn backward(&self, acts: &[Array2<f64>], mut delta: Array2<f64>) -> Vec<f64> {
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let gw = delta.t().dot(&acts[i]);
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                back.zip_mut_with(&acts[i], |d, &h| *d *= 1.0 - h * h);
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.architecture.parameter_count());
        for (gw, gb) in grads {
            flat.extend(gw.iter());
            flat.extend(gb.iter());
        }
        flat
    }

    /// Loss and its gradient on a batch, each loss term reaching only its own head:
    /// the pinball terms treat the point prediction as a constant.
    pub fn objective_and_gradient(
        &self,
        inputs: &Array2<f64>,
        targets: &[f64],
        levels: QuantileLevels,
        weights: LossWeights,
    ) -> (f64, Vec<f64>) {
        let acts = self.forward_trace(inputs);
        let raw = acts.last().expect("network has layers");
        let n = targets.len() as f64;
        let mut delta = Array2::zeros(raw.raw_dim());
        let mut total = 0.0;
        for (row, (out, &y)) in raw.rows().into_iter().zip(targets).enumerate() {
            let point = out[0];
            let lower = self.transform.apply(out[1]);
            let upper = self.transform.apply(out[2]);
            total += loss::voxel_objective(point, lower, upper, y, levels, weights);
            delta[[row, 0]] = weights.point * -2.0 * (y - point) / n;
            delta[[row, 1]] =
                weights.lower * loss::pinball_grad(point - lower, y, levels.lower) * -self.transform.derivative(out[1])
                    / n;
            delta[[row, 2]] =
                weights.upper * loss::pinball_grad(point + upper, y, levels.upper) * self.transform.derivative(out[2])
                    / n;
        }
        (total / n, self.backward(&acts, delta))
    }

    pub fn objective(
        &self,
        inputs: &Array2<f64>,
        targets: &[f64],
        levels: QuantileLevels,
        weights: LossWeights,
    ) -> f64 {
        let raw = self.forward(inputs);
        let total: f64 = raw
            .rows()
            .into_iter()
            .zip(targets)
            .map(|(out, &y)| {
                loss::voxel_objective(
                    out[0],
                    self.transform.apply(out[1]),
                    self.transform.apply(out[2]),
                    y,
                    levels,
                    weights,
                )
            })
            .sum();
        total / targets.len() as f64
    }
}

/// Input rows for every voxel of a sample: channels, then spatial encodings.
pub fn sample_inputs(sample: &Sample) -> Array2<f64> {
    let dims = sample.dims();
    let channels = sample.features.len();
    let encode = |c: usize, extent: usize| {
        if extent > 1 {
            2.0 * c as f64 / (extent - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    Array2::from_shape_fn((dims.len(), channels + SPATIAL_ENCODINGS), |(i, j)| {
        if j < channels {
            sample.features[j].values()[i]
        } else {
            let (x, y, z) = dims.coords(i);
            match j - channels {
                0 => encode(x, dims.w),
                1 => encode(y, dims.h),
                _ => encode(z, dims.d),
            }
        }
    })
}

pub fn predict(params: &ModelParams, sample: &Sample) -> Result<HeuristicPrediction> {
    if sample.features.len() != params.architecture.channels {
        return Err(Error::ChannelMismatch {
            expected: params.architecture.channels,
            actual: sample.features.len(),
        });
    }
    let raw = params.forward(&sample_inputs(sample));
    let dims = sample.dims();
    let t = params.transform;
    let column =
        |j: usize, f: &dyn Fn(f64) -> f64| VoxelVolume::new(dims, raw.column(j).iter().map(|&v| f(v)).collect());
    HeuristicPrediction::new(
        column(0, &|v| v)?,
        column(1, &|v| t.apply(v))?,
        column(2, &|v| t.apply(v))?,
    )
}

pub fn predict_all(params: &ModelParams, samples: &[Sample], execution: Execution) -> Result<Vec<HeuristicPrediction>> {
    execution
        .map_slice(samples, |s| predict(params, s))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn sample(channels: usize, dims: Dims, fill: f64) -> Sample {
        let features = (0..channels)
            .map(|c| VoxelVolume::filled(dims, fill * (c + 1) as f64).unwrap())
            .collect();
        let dose = VoxelVolume::filled(dims, 1.0).unwrap();
        Sample::new(features, dose, vec![]).unwrap()
    }

    #[test]
    fn parameter_count() {
        let arch = Architecture::new(3, vec![32, 32]).unwrap();
        assert_eq!(arch.widths(), vec![6, 32, 32, 3]);
        assert_eq!(arch.parameter_count(), 6 * 32 + 32 + 32 * 32 + 32 + 32 * 3 + 3);
    }

    #[test]
    fn zero_weight_model_is_constant() {
        let arch = Architecture::new(2, vec![4]).unwrap();
        let mut params = ModelParams::zeros(arch);
        let out_bias = [0.7, -1.3, 2.1];
        params.layers[1].bias = Array1::from(out_bias.to_vec());
        let s = sample(2, Dims::new(3, 2, 2).unwrap(), 5.0);
        let pred = predict(&params, &s).unwrap();
        let t = params.transform;
        assert!(pred.point().values().iter().all(|&v| v == 0.7));
        assert!(pred.lower_offset().values().iter().all(|&v| v == t.apply(-1.3)));
        assert!(pred.upper_offset().values().iter().all(|&v| v == t.apply(2.1)));
    }

    #[test]
    fn channel_mismatch() {
        let params = ModelParams::init(Architecture::new(3, vec![4]).unwrap(), 1);
        let s = sample(2, Dims::new(2, 2, 1).unwrap(), 1.0);
        assert!(matches!(
            predict(&params, &s),
            Err(Error::ChannelMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn prediction_is_deterministic_and_positive() {
        let params = ModelParams::init(Architecture::new(2, vec![8, 8]).unwrap(), 9);
        let s = sample(2, Dims::new(4, 3, 2).unwrap(), 0.3);
        let a = predict(&params, &s).unwrap();
        let b = predict(&params, &s).unwrap();
        assert_eq!(a, b);
        assert!(a.lower_offset().values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn transform_is_positive_for_extreme_inputs() {
        let t = OffsetTransform::Softplus;
        for x in [-1e308, -745.0, -40.0, 0.0, 40.0, 1e300] {
            let v = t.apply(x);
            assert!(v > 0.0 && v.is_finite(), "{x} -> {v}");
        }
        assert!((t.apply(0.0) - (2f64.ln() + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn flat_roundtrip() {
        let params = ModelParams::init(Architecture::new(3, vec![5, 4]).unwrap(), 4);
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.architecture.parameter_count());
        let back = ModelParams::from_flat(params.architecture.clone(), params.transform, &flat).unwrap();
        assert_eq!(back, params);
        assert!(ModelParams::from_flat(params.architecture.clone(), params.transform, &flat[1..]).is_err());
    }

    #[test]
    fn spatial_encodings_span_unit_box() {
        let s = sample(1, Dims::new(3, 2, 1).unwrap(), 0.0);
        let x = sample_inputs(&s);
        assert_eq!(x.shape(), &[6, 4]);
        assert_eq!(x.row(0).to_vec(), vec![0.0, -1.0, -1.0, 0.0]);
        assert_eq!(x.row(5).to_vec(), vec![0.0, 1.0, 1.0, 0.0]);
    }
}

use serde::{Deserialize, Serialize};

use super::{Gradients, MlpModel, Tensor};
use crate::error::{Error, Result};

/// Velocity buffers for classical (heavy-ball) momentum.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    momentum: f64,
    weight_velocity: Vec<Tensor>,
    bias_velocity: Vec<Tensor>,
    pub epoch: usize,
}

impl OptimizerState {
    pub fn new(model: &MlpModel, momentum: f64) -> Self {
        OptimizerState {
            momentum,
            weight_velocity: model
                .layers()
                .iter()
                .map(|l| Tensor::zeros(l.weights.shape()))
                .collect(),
            bias_velocity: model
                .layers()
                .iter()
                .map(|l| Tensor::zeros(l.bias.shape()))
                .collect(),
            epoch: 0,
        }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}

/// `v <- μ v - lr g; θ <- θ + v` for every parameter tensor.
pub fn sgd_momentum_step(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let count = model.layers().len();
    if grads.weights.len() != count
        || grads.biases.len() != count
        || state.weight_velocity.len() != count
    {
        return Err(Error::Shape(format!(
            "{} weight / {} bias gradients for {count} layers",
            grads.weights.len(),
            grads.biases.len()
        )));
    }
    for (l, layer) in model.layers().iter().enumerate() {
        if grads.weights[l].shape() != layer.weights.shape()
            || grads.biases[l].shape() != layer.bias.shape()
            || state.weight_velocity[l].shape() != layer.weights.shape()
        {
            return Err(Error::Shape(format!(
                "layer {}: gradient shapes {:?}/{:?} vs parameters {:?}/{:?}",
                l + 1,
                grads.weights[l].shape(),
                grads.biases[l].shape(),
                layer.weights.shape(),
                layer.bias.shape()
            )));
        }
    }

    let mu = state.momentum;
    for (l, layer) in model.layers_mut().iter_mut().enumerate() {
        update(
            layer.weights.data_mut(),
            state.weight_velocity[l].data_mut(),
            grads.weights[l].data(),
            mu,
            lr,
        );
        update(
            layer.bias.data_mut(),
            state.bias_velocity[l].data_mut(),
            grads.biases[l].data(),
            mu,
            lr,
        );
    }
    Ok(())
}

fn update(params: &mut [f64], velocity: &mut [f64], grad: &[f64], mu: f64, lr: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v - lr * g;
        *p += *v;
    }
}

/// Step-decay learning rate: `initial`, multiplied by `factor` at each
/// milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    /// 0.01, multiplied by 0.2 at epochs 30, 60 and 80.
    pub fn mnist_default() -> Self {
        LrSchedule {
            initial: 0.01,
            factor: 0.2,
            milestones: vec![30, 60, 80],
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|&&m| epoch >= m)
            .fold(self.initial, |lr, _| lr * self.factor)
    }
}

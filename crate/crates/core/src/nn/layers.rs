use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{kaiming_uniform, lecun_uniform, ParamId, ParamStore};
use super::tensor::{Float, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weight init family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Followed by a rectifier.
    Relu,
    /// Followed by a normalization or used as an output layer.
    Linear,
}

fn init_weight<T: Float, R: Rng + ?Sized>(init: Init, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Relu => kaiming_uniform(shape, fan_in, rng),
        Init::Linear => lecun_uniform(shape, fan_in, rng),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            groups: channels,
            bias: false,
            ..Self::new(channels, channels, kernel, stride)
        }
    }

    pub fn without_bias(self) -> Self {
        ConvSpec { bias: false, ..self }
    }
}

/// Same-padded 2-d convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    spec: ConvSpec,
}

impl Conv2d {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let cin_g = spec.c_in / spec.groups;
        let fan_in = cin_g * spec.kernel * spec.kernel;
        let weight = store.add_param(
            format!("{prefix}.weight"),
            init_weight(init, &[spec.c_out, cin_g, spec.kernel, spec.kernel], fan_in, rng),
        );
        let bias = spec
            .bias
            .then(|| store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[spec.c_out])));
        Conv2d { weight, bias, spec }
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.spec.stride, self.spec.kernel / 2, self.spec.groups)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add_param(format!("{prefix}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add_param(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::full(&[channels], T::one())),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let eps = T::from_f64_lossy(BN_EPS);
        match mode {
            Mode::Train => {
                let (out, mean, var) = g.batch_norm_train(x, gamma, beta, eps)?;
                let shape = g.value(x).shape().to_vec();
                let count = shape[0] * shape[2] * shape[3];
                let unbias = if count > 1 {
                    T::from_usize(count).expect("count") / T::from_usize(count - 1).expect("count")
                } else {
                    T::one()
                };
                let m = T::from_f64_lossy(BN_MOMENTUM);
                let keep = T::one() - m;
                let rm = store.get(self.running_mean).data();
                let rv = store.get(self.running_var).data();
                let new_mean = Tensor::from_fn(&[mean.len()], |i| keep * rm[i] + m * mean[i]);
                let new_var = Tensor::from_fn(&[var.len()], |i| keep * rv[i] + m * var[i] * unbias);
                g.record_buffer_update(self.running_mean, new_mean);
                g.record_buffer_update(self.running_var, new_var);
                Ok(out)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
                eps,
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add_param(format!("{prefix}.weight"), init_weight(init, &[d_out, d_in], d_in, rng)),
            bias: store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

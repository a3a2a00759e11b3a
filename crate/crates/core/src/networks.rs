//! Generator, critic and encoder head.
//!
//! DCGAN-style stacks without normalization layers. The encoder head reads
//! the critic's flattened trunk features, InfoGAN style.

use ndarray::{Array2, ArrayD, IxDyn};
use obe_autodiff::{conv2d, conv_transpose2d, linear, Tensor, Var, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ObeError, Result};

const WINDOW: Window = Window {
    kernel: 4,
    stride: 2,
    padding: 1,
};
const LEAK: f64 = 0.2;

/// Shape contract shared by the three networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub side: usize,
    pub channels: usize,
    pub width: usize,
    pub noise_dim: usize,
    pub code_dim: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 || !self.side.is_power_of_two() {
            return Err(ObeError::config("model.side", format!("side must be a power of two >= 8, got {}", self.side)));
        }
        if self.channels == 0 || self.width == 0 {
            return Err(ObeError::config("model.width", "channels and width must be positive"));
        }
        if self.code_dim == 0 {
            return Err(ObeError::config("model.code_dim", "need at least one latent code"));
        }
        Ok(())
    }

    /// Number of stride-2 blocks between the 4x4 bottleneck and the image.
    pub fn blocks(&self) -> usize {
        (self.side / 4).trailing_zeros() as usize
    }

    /// Channels at the 4x4 bottleneck.
    pub fn top_channels(&self) -> usize {
        self.width << (self.blocks() - 1)
    }

    pub fn feature_len(&self) -> usize {
        self.top_channels() * 16
    }

    pub fn encoder_hidden(&self) -> usize {
        8 * self.width
    }
}

/// Paired generator inputs: `z ~ N(0, I)` of shape `[B, d]` and `c ~ U(-1, 1)` of shape `[B, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Array2<f64>,
    pub c: Array2<f64>,
}

impl LatentSample {
    pub fn batch(&self) -> usize {
        self.z.nrows()
    }

    /// Generator input `[z, c]` as one `[B, d + k]` matrix.
    pub fn joined(&self) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(1), &[self.z.view(), self.c.view()]).expect("batch sizes agree")
    }
}

pub fn sample_latent_with<R: Rng>(batch: usize, d: usize, k: usize, rng: &mut R) -> LatentSample {
    let z = Array2::from_shape_fn((batch, d), |_| rng.sample::<f64, _>(StandardNormal));
    let c = Array2::from_shape_fn((batch, k), |_| rng.random_range(-1.0..1.0));
    LatentSample { z, c }
}

pub fn sample_latent(batch: usize, d: usize, k: usize, seed: u64) -> Result<LatentSample> {
    if batch == 0 {
        return Err(ObeError::config("batch", "latent batch must be non-empty"));
    }
    Ok(sample_latent_with(batch, d, k, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Var {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Var::param(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
}

/// Ordered, named parameter tensors of one network.
#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet { names: Vec::new(), vars: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, var: Var) {
        self.names.push(name.into());
        self.vars.push(var);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn vars_mut(&mut self) -> impl Iterator<Item = &mut Var> {
        self.vars.iter_mut()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.vars.iter().map(|v| v.value().clone()).collect()
    }

    pub fn count(&self) -> usize {
        self.vars.iter().map(Var::len).sum()
    }

    /// Replaces every tensor, checking shapes against the current ones.
    pub fn load(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.vars.len() {
            return Err(ObeError::shape(format!("expected {} tensors, got {}", self.vars.len(), values.len())));
        }
        for ((var, value), name) in self.vars.iter_mut().zip(values).zip(&self.names) {
            if var.shape() != value.shape() {
                return Err(ObeError::shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    var.shape(),
                    value.shape()
                )));
            }
            *var = Var::param(value);
        }
        Ok(())
    }

    fn zeroed(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            vars: self.vars.iter().map(|v| Var::param(Tensor::zeros(v.value().raw_dim()))).collect(),
        }
    }
}

fn check_images(spec: &NetworkSpec, x: &Var) -> Result<()> {
    let expected = [spec.channels, spec.side, spec.side];
    if x.ndim() != 4 || x.shape()[1..] != expected {
        return Err(ObeError::shape(format!(
            "expected images [B, {}, {}, {}], got {:?}",
            spec.channels,
            spec.side,
            spec.side,
            x.shape()
        )));
    }
    Ok(())
}

/// `G(z, c)`: linear projection to a 4x4 map, then transposed convolutions up to the image side.
#[derive(Clone)]
pub struct Generator {
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

impl Generator {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let input = spec.noise_dim + spec.code_dim;
        let top = spec.top_channels();
        params.push("fc.weight", uniform(&[top * 16, input], input, &mut rng));
        params.push("fc.bias", uniform(&[top * 16], input, &mut rng));
        let mut ch = top;
        for i in 0..spec.blocks() {
            let out = if i + 1 == spec.blocks() { spec.channels } else { ch / 2 };
            let fan_in = ch * 16;
            params.push(format!("up{i}.weight"), uniform(&[ch, out, 4, 4], fan_in, &mut rng));
            params.push(format!("up{i}.bias"), uniform(&[out], fan_in, &mut rng));
            ch = out;
        }
        Ok(Generator { spec, params })
    }

    pub fn forward(&self, input: &Var) -> Result<Var> {
        let s = &self.spec;
        if input.ndim() != 2 || input.shape()[1] != s.noise_dim + s.code_dim {
            return Err(ObeError::shape(format!(
                "generator expects [B, {}] inputs, got {:?}",
                s.noise_dim + s.code_dim,
                input.shape()
            )));
        }
        let p = self.params.vars();
        let b = input.shape()[0];
        let mut h = linear(input, &p[0], Some(&p[1])).relu().reshape(&[b, s.top_channels(), 4, 4]);
        for i in 0..s.blocks() {
            h = conv_transpose2d(&h, &p[2 + 2 * i], Some(&p[3 + 2 * i]), WINDOW);
            h = if i + 1 == s.blocks() { h.tanh() } else { h.relu() };
        }
        Ok(h)
    }

    /// Images `[B, C, n, n]` in `[-1, 1]` for a latent batch.
    pub fn generate(&self, sample: &LatentSample) -> Result<Var> {
        if sample.z.ncols() != self.spec.noise_dim || sample.c.ncols() != self.spec.code_dim {
            return Err(ObeError::shape(format!(
                "latent dims ({}, {}) do not match generator ({}, {})",
                sample.z.ncols(),
                sample.c.ncols(),
                self.spec.noise_dim,
                self.spec.code_dim
            )));
        }
        self.forward(&Var::constant(sample.joined().into_dyn()))
    }
}

/// Wasserstein critic: strided convolutions to a 4x4 map, then a linear score with no squashing.
#[derive(Clone)]
pub struct Critic {
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

impl Critic {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut ch = spec.channels;
        for i in 0..spec.blocks() {
            let out = spec.width << i;
            let fan_in = ch * 16;
            params.push(format!("down{i}.weight"), uniform(&[out, ch, 4, 4], fan_in, &mut rng));
            params.push(format!("down{i}.bias"), uniform(&[out], fan_in, &mut rng));
            ch = out;
        }
        let features = spec.feature_len();
        params.push("score.weight", uniform(&[1, features], features, &mut rng));
        params.push("score.bias", uniform(&[1], features, &mut rng));
        Ok(Critic { spec, params })
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(spec: NetworkSpec) -> Result<Self> {
        let critic = Critic::new(spec, 0)?;
        Ok(Critic {
            params: critic.params.zeroed(),
            spec,
        })
    }

    /// Flattened trunk features `[B, top_channels * 16]`.
    pub fn features(&self, x: &Var) -> Result<Var> {
        check_images(&self.spec, x)?;
        let p = self.params.vars();
        let mut h = x.clone();
        for i in 0..self.spec.blocks() {
            h = conv2d(&h, &p[2 * i], Some(&p[2 * i + 1]), WINDOW).leaky_relu(LEAK);
        }
        let b = x.shape()[0];
        Ok(h.reshape(&[b, self.spec.feature_len()]))
    }

    pub fn score_features(&self, features: &Var) -> Var {
        let p = self.params.vars();
        let n = p.len();
        let b = features.shape()[0];
        linear(features, &p[n - 2], Some(&p[n - 1])).reshape(&[b])
    }

    /// Per-sample critic scores `[B]`.
    pub fn discriminate(&self, x: &Var) -> Result<Var> {
        Ok(self.score_features(&self.features(x)?))
    }
}

/// Two-layer head on the critic trunk predicting the mean of `q(c | X)`.
#[derive(Clone)]
pub struct EncoderHead {
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

impl EncoderHead {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (f, h) = (spec.feature_len(), spec.encoder_hidden());
        params.push("hidden.weight", uniform(&[h, f], f, &mut rng));
        params.push("hidden.bias", uniform(&[h], f, &mut rng));
        params.push("mean.weight", uniform(&[spec.code_dim, h], h, &mut rng));
        params.push("mean.bias", uniform(&[spec.code_dim], h, &mut rng));
        Ok(EncoderHead { spec, params })
    }

    pub fn forward(&self, features: &Var) -> Var {
        let p = self.params.vars();
        let h = linear(features, &p[0], Some(&p[1])).leaky_relu(LEAK);
        linear(&h, &p[2], Some(&p[3]))
    }

    /// `Q(X)`: code means `[B, k]` through the critic's trunk.
    pub fn encode(&self, critic: &Critic, x: &Var) -> Result<Var> {
        Ok(self.forward(&critic.features(x)?))
    }
}

/// Sum over codes of the unit-variance Gaussian log-density `log N(c; mean, I)`, per sample.
pub fn gaussian_log_likelihood(c: &Array2<f64>, mean: &Array2<f64>) -> Vec<f64> {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    c.rows()
        .into_iter()
        .zip(mean.rows())
        .map(|(c, m)| {
            c.iter()
                .zip(m.iter())
                .map(|(c, m)| -0.5 * (c - m).powi(2) - half_log_2pi)
                .sum()
        })
        .collect()
}

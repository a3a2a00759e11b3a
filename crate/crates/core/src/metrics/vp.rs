use ndarray::{concatenate, s, Array2, ArrayD, Axis, IxDyn};
use obe_autodiff::{conv2d, gradients, linear, no_grad, Adam, Var, Window};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ImageGenerator;
use crate::error::{ObeError, Result};

const WINDOW: Window = Window {
    kernel: 4,
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpSettings {
    pub pairs: usize,
    pub train_ratio: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for VpSettings {
    fn default() -> Self {
        VpSettings {
            pairs: 10_000,
            train_ratio: 0.1,
            epochs: 200,
            batch: 32,
            lr: 1e-3,
        }
    }
}

impl VpSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(ObeError::config("metrics.vp.train_ratio", "must lie in (0, 1)"));
        }
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(ObeError::config("metrics.vp", "epochs, batch and lr must be positive"));
        }
        let train = self.train_count();
        if train == 0 || train >= self.pairs {
            return Err(ObeError::config("metrics.vp.pairs", "too few pairs for a train/test split"));
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        (self.pairs as f64 * self.train_ratio).round() as usize
    }
}

/// Latent pairs differing in exactly one code dimension, named by `labels`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLatents {
    pub z: Array2<f64>,
    pub c: Array2<f64>,
    pub c_prime: Array2<f64>,
    pub labels: Vec<usize>,
}

pub fn pair_latents<R: Rng>(pairs: usize, d: usize, k: usize, rng: &mut R) -> PairLatents {
    let z = Array2::from_shape_fn((pairs, d), |_| rng.sample::<f64, _>(StandardNormal));
    let c = Array2::from_shape_fn((pairs, k), |_| rng.random_range(-1.0..1.0));
    let mut c_prime = c.clone();
    let labels: Vec<usize> = (0..pairs)
        .map(|i| {
            let l = rng.random_range(0..k);
            c_prime[[i, l]] = rng.random_range(-1.0..1.0);
            l
        })
        .collect();
    PairLatents { z, c, c_prime, labels }
}

/// Rendered pairs stacked on the channel axis, `[P, 2C, n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VpPairs {
    pub inputs: ArrayD<f64>,
    pub labels: Vec<usize>,
}

pub fn vp_pairs(generator: &dyn ImageGenerator, pairs: usize, seed: u64) -> Result<VpPairs> {
    let k = generator.code_dim();
    if k < 2 || pairs == 0 {
        return Err(ObeError::Metric("variation predictability needs k >= 2 and at least one pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let lat = pair_latents(pairs, generator.noise_dim(), k, &mut rng);
    let mut parts = Vec::new();
    for start in (0..pairs).step_by(256) {
        let end = (start + 256).min(pairs);
        let z = lat.z.slice(s![start..end, ..]).to_owned();
        let a = generator.render(&z, &lat.c.slice(s![start..end, ..]).to_owned())?;
        let b = generator.render(&z, &lat.c_prime.slice(s![start..end, ..]).to_owned())?;
        parts.push(concatenate(Axis(1), &[a.view(), b.view()]).map_err(|e| ObeError::shape(e.to_string()))?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let inputs = concatenate(Axis(0), &views).map_err(|e| ObeError::shape(e.to_string()))?;
    Ok(VpPairs {
        inputs,
        labels: lat.labels,
    })
}

/// Two strided convolutions and a linear read-out over the concatenated pair.
pub struct VpClassifier {
    params: Vec<Var>,
    classes: usize,
}

impl VpClassifier {
    pub fn new(in_channels: usize, side: usize, classes: usize, seed: u64) -> Result<Self> {
        if side < 4 || side % 4 != 0 {
            return Err(ObeError::shape(format!("classifier needs a side divisible by 4, got {side}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = 16 * (side / 4) * (side / 4);
        let shapes: [(&[usize], usize); 6] = [
            (&[8, in_channels, 4, 4], in_channels * 16),
            (&[8], in_channels * 16),
            (&[16, 8, 4, 4], 8 * 16),
            (&[16], 8 * 16),
            (&[classes, flat], flat),
            (&[classes], flat),
        ];
        let params = shapes
            .iter()
            .map(|(shape, fan_in)| {
                let bound = 1.0 / (*fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Var::param(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
            })
            .collect();
        Ok(VpClassifier { params, classes })
    }

    pub fn logits(&self, x: &Var) -> Var {
        let p = &self.params;
        let b = x.shape()[0];
        let h = conv2d(x, &p[0], Some(&p[1]), WINDOW).leaky_relu(0.2);
        let h = conv2d(&h, &p[2], Some(&p[3]), WINDOW).leaky_relu(0.2);
        let flat = h.len() / b;
        linear(&h.reshape(&[b, flat]), &p[4], Some(&p[5]))
    }

    pub fn predict(&self, x: &ArrayD<f64>) -> Vec<usize> {
        let _guard = no_grad();
        let logits = self.logits(&Var::constant(x.clone()));
        logits
            .value()
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for j in 1..self.classes {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpOutcome {
    pub score: f64,
    pub best_epoch: usize,
    pub lr: f64,
    pub retried: bool,
    pub test_accuracy: Vec<f64>,
}

/// Highest held-out accuracy of a classifier that names the changed code dimension.
pub fn vp_score(generator: &dyn ImageGenerator, settings: &VpSettings, seed: u64) -> Result<VpOutcome> {
    settings.validate()?;
    let pairs = vp_pairs(generator, settings.pairs, seed)?;
    match fit(&pairs, generator.code_dim(), settings, settings.lr, seed)? {
        Some(mut out) => Ok({
            out.retried = false;
            out
        }),
        None => {
            log::warn!("vp: classifier diverged at lr {}, retrying at half", settings.lr);
            match fit(&pairs, generator.code_dim(), settings, settings.lr / 2.0, seed)? {
                Some(mut out) => {
                    out.retried = true;
                    Ok(out)
                }
                None => Err(ObeError::Metric(format!(
                    "vp classifier diverged at lr {} and {}",
                    settings.lr,
                    settings.lr / 2.0
                ))),
            }
        }
    }
}

/// `None` when the training loss stops being finite.
fn fit(pairs: &VpPairs, k: usize, settings: &VpSettings, lr: f64, seed: u64) -> Result<Option<VpOutcome>> {
    let shape = pairs.inputs.shape().to_vec();
    let total = shape[0];
    let mut model = VpClassifier::new(shape[1], shape[2], k, seed ^ 0x5650)?;
    let train = settings.train_count();
    let test_idx: Vec<usize> = (train..total).collect();
    let test_x = pairs.inputs.select(Axis(0), &test_idx);
    let test_y = &pairs.labels[train..];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let mut opt = Adam::new(lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..train).collect();
    let mut history = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch) {
            let x = Var::constant(pairs.inputs.select(Axis(0), chunk));
            let mut onehot = ArrayD::zeros(IxDyn(&[chunk.len(), k]));
            for (r, &i) in chunk.iter().enumerate() {
                onehot[[r, pairs.labels[i]]] = 1.0;
            }
            let loss = model
                .logits(&x)
                .log_softmax()
                .mul(&Var::constant(onehot))
                .sum()
                .scale(-1.0 / chunk.len() as f64);
            if !loss.item().is_finite() {
                return Ok(None);
            }
            let refs: Vec<&Var> = model.params.iter().collect();
            let grads = gradients(&loss, &refs);
            let mut params: Vec<&mut Var> = model.params.iter_mut().collect();
            opt.step(&mut params, &grads);
        }
        let mut correct = 0;
        for (start, chunk) in test_y.chunks(512).enumerate() {
            let x = test_x.slice_axis(Axis(0), (start * 512..start * 512 + chunk.len()).into()).to_owned();
            correct += model.predict(&x).iter().zip(chunk).filter(|(p, y)| p == y).count();
        }
        history.push(correct as f64 / test_y.len() as f64);
    }
    let (best_epoch, score) = history
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (e, a)| if a > acc.1 { (e, a) } else { acc });
    Ok(Some(VpOutcome {
        score,
        best_epoch,
        lr,
        retried: false,
        test_accuracy: history,
    }))
}

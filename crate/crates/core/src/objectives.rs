//! Losses for the critic and the generator side, and a tabular check of the
//! variational bound behind the inference loss.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use obe_autodiff::{grad, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ObeError, Result};
use crate::networks::{Critic, EncoderHead, Generator, LatentSample};
use crate::obe::{
    combine_var, expand_var, orthogonality_loss_var, select_var, BasisMatrix, BasisMode, ChannelCombiner,
    CoefficientAssignment,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub k_gp: f64,
    pub p_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.9,
            gamma: 1.1,
            alpha: 1.0,
            k_gp: 2.0,
            p_gp: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("k_gp", self.k_gp)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ObeError::config(format!("weights.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.p_gp > 0.0) || !self.p_gp.is_finite() {
            return Err(ObeError::config("weights.p_gp", format!("must be positive, got {}", self.p_gp)));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(ObeError::config("weights.lambda", format!("lambda must lie in (0, 1), got {lambda}")));
    }
    Ok(())
}

/// `X_hat_j = mu_j X_real_j + (1 - mu_j) X_fake_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatedBatch {
    pub images: Tensor,
    pub mu: Vec<f64>,
}

impl InterpolatedBatch {
    pub fn new(real: &Tensor, fake: &Tensor, mu: Vec<f64>) -> Result<Self> {
        if real.shape() != fake.shape() || real.shape().first() != Some(&mu.len()) {
            return Err(ObeError::shape(format!(
                "real {:?}, fake {:?} and {} mixing weights do not align",
                real.shape(),
                fake.shape(),
                mu.len()
            )));
        }
        if mu.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(ObeError::config("mu", "mixing weights must lie in [0, 1]"));
        }
        let mut images = fake.clone();
        for (j, &m) in mu.iter().enumerate() {
            let r = real.index_axis(ndarray::Axis(0), j);
            images
                .index_axis_mut(ndarray::Axis(0), j)
                .zip_mut_with(&r, |f, &r| *f = m * r + (1.0 - m) * *f);
        }
        Ok(InterpolatedBatch { images, mu })
    }
}

/// Trainable pieces of the inference path `c ~ a * select(combine(P^T X P)) + b`.
#[derive(Clone)]
pub struct ObeModule {
    pub basis: Var,
    pub mode: BasisMode,
    pub combiner_weights: Var,
    pub combiner_bias: Var,
    pub scale: Var,
    pub shift: Var,
    pub assignment: CoefficientAssignment,
    gather: Var,
}

impl ObeModule {
    pub fn new(basis: BasisMatrix, channels: usize, assignment: CoefficientAssignment) -> Result<Self> {
        if assignment.side != basis.side() {
            return Err(ObeError::shape(format!(
                "assignment side {} does not match basis side {}",
                assignment.side,
                basis.side()
            )));
        }
        assignment.validate()?;
        let combiner = ChannelCombiner::identity(channels);
        let k = assignment.len();
        let mode = basis.mode();
        let basis = basis.into_entries().into_dyn();
        Ok(ObeModule {
            basis: match mode {
                BasisMode::Learned => Var::param(basis),
                BasisMode::Dct => Var::constant(basis),
            },
            mode,
            combiner_weights: Var::param(combiner.weights.into_dyn()),
            combiner_bias: Var::param(ArrayD::from_elem(IxDyn(&[]), combiner.bias)),
            scale: Var::param(ArrayD::ones(IxDyn(&[k]))),
            shift: Var::param(ArrayD::zeros(IxDyn(&[k]))),
            gather: Var::constant(assignment.gather_matrix().into_dyn()),
            assignment,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.assignment.len()
    }

    pub fn basis_matrix(&self) -> Result<BasisMatrix> {
        let entries = self
            .basis
            .value()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| ObeError::shape(e.to_string()))?
            .to_owned();
        BasisMatrix::new(entries, self.mode)
    }

    pub fn set_basis(&mut self, basis: BasisMatrix) {
        self.mode = basis.mode();
        let entries = basis.into_entries().into_dyn();
        self.basis = match self.mode {
            BasisMode::Learned => Var::param(entries),
            BasisMode::Dct => Var::constant(entries),
        };
    }

    pub fn combiner(&self) -> ChannelCombiner {
        ChannelCombiner {
            weights: self.combiner_weights.value().iter().copied().collect::<Array1<f64>>(),
            bias: self.combiner_bias.item(),
        }
    }

    /// Selected coefficients `c'_{m(i)}` for a batch `[B, C, n, n]`, shape `[B, k]`.
    pub fn coefficients(&self, images: &Var) -> Result<Var> {
        let n = self.assignment.side;
        let c = self.combiner_weights.len();
        if images.ndim() != 4 || images.shape()[1..] != [c, n, n] {
            return Err(ObeError::shape(format!("expected images [B, {c}, {n}, {n}], got {:?}", images.shape())));
        }
        let grids = expand_var(images, &self.basis);
        let combined = combine_var(&grids, &self.combiner_weights, &self.combiner_bias);
        Ok(select_var(&combined, &self.gather))
    }

    /// Means of `q'(c_i | c'_i; P)`: `a_i c'_{m(i)} + b_i`.
    pub fn predict(&self, images: &Var) -> Result<Var> {
        Ok(self.coefficients(images)?.mul(&self.scale).add(&self.shift))
    }

    /// Trainable tensors in a fixed order; the basis is absent in DCT mode.
    pub fn trainable(&self) -> Vec<&Var> {
        let mut out = Vec::new();
        if self.mode == BasisMode::Learned {
            out.push(&self.basis);
        }
        out.extend([&self.combiner_weights, &self.combiner_bias, &self.scale, &self.shift]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Var> {
        let mut out = Vec::new();
        if self.mode == BasisMode::Learned {
            out.push(&mut self.basis);
        }
        out.extend([
            &mut self.combiner_weights,
            &mut self.combiner_bias,
            &mut self.scale,
            &mut self.shift,
        ]);
        out
    }

    pub fn orthogonality(&self) -> Var {
        orthogonality_loss_var(&self.basis)
    }
}

/// Differentiable critic objective together with its logged parts.
pub struct CriticLoss {
    /// `E[D(real)] - E[D(fake)] - k_gp E[|grad D(X_hat)|^p_gp]`, to be maximized.
    pub value: Var,
    pub wasserstein: f64,
    pub penalty: f64,
}

/// The critic objective with the divergence gradient penalty.
///
/// The penalty gradient is built with `create_graph`, so the returned value
/// can be differentiated again with respect to the critic parameters.
pub fn critic_loss(
    critic: &Critic,
    real: &Var,
    fake: &Var,
    interpolated: &InterpolatedBatch,
    k_gp: f64,
    p_gp: f64,
) -> Result<CriticLoss> {
    let real_score = critic.discriminate(real)?.mean();
    let fake_score = critic.discriminate(fake)?.mean();
    let x_hat = Var::param(interpolated.images.clone());
    let scores = critic.discriminate(&x_hat)?;
    let g = grad(&scores.sum(), &[&x_hat], true).remove(0);
    let b = x_hat.shape()[0];
    let norm_pow = g.square().sum_to(&[b, 1, 1, 1]).powf(p_gp / 2.0).mean();
    let wasserstein = real_score.sub(&fake_score);
    let value = wasserstein.sub(&norm_pow.scale(k_gp));
    if !value.is_finite() || !g.is_finite() {
        return Err(ObeError::NonFinite {
            stage: "critic loss".into(),
            detail: format!(
                "wasserstein {} penalty {} (gradient finite: {})",
                wasserstein.item(),
                norm_pow.item(),
                g.is_finite()
            ),
        });
    }
    Ok(CriticLoss {
        wasserstein: wasserstein.item(),
        penalty: norm_pow.item(),
        value,
    })
}

fn codes(c: &Array2<f64>) -> Var {
    Var::constant(c.clone().into_dyn())
}

/// `E[-1/2 sum_i (c_i - m_i)^2]` over the batch.
fn gaussian_term(c: &Array2<f64>, mean: &Var) -> Result<Var> {
    if mean.shape() != c.shape() {
        return Err(ObeError::shape(format!("codes {:?} vs predicted means {:?}", c.shape(), mean.shape())));
    }
    let b = c.nrows() as f64;
    Ok(codes(c).sub(mean).square().sum().scale(-0.5 / b))
}

/// `E[log prod_i q'(c_i | c'_i; P)]` with constants dropped.
pub fn obe_log_likelihood(c: &Array2<f64>, fake: &Var, obe: &ObeModule) -> Result<Var> {
    gaussian_term(c, &obe.predict(fake)?)
}

/// `E[log q(c | X; Q)]` with constants dropped.
pub fn encoder_log_likelihood(c: &Array2<f64>, fake: &Var, critic: &Critic, encoder: &EncoderHead) -> Result<Var> {
    gaussian_term(c, &encoder.encode(critic, fake)?)
}

/// Inference loss `E[lambda log prod q' + (1 - lambda) log q]`, to be maximized.
pub fn infer_info_loss(
    c: &Array2<f64>,
    fake: &Var,
    critic: &Critic,
    encoder: &EncoderHead,
    obe: &ObeModule,
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    let a = obe_log_likelihood(c, fake, obe)?;
    let q = encoder_log_likelihood(c, fake, critic, encoder)?;
    Ok(a.scale(lambda).add(&q.scale(1.0 - lambda)))
}

/// Coefficients of the generator-side objective
/// `-E[D(G)] - gamma (w_obe L_obe + w_enc L_enc) + w_or L_or`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub gamma: f64,
    pub obe: f64,
    pub encoder: f64,
    pub orthogonality: f64,
}

impl TermWeights {
    pub fn full(weights: &LossWeights) -> Self {
        TermWeights {
            gamma: weights.gamma,
            obe: weights.lambda,
            encoder: 1.0 - weights.lambda,
            orthogonality: 0.0,
        }
    }
}

pub struct GeneratorLoss {
    pub value: Var,
    pub adversarial: f64,
    pub info: f64,
    pub info_obe: f64,
    pub info_encoder: f64,
    pub orthogonality: f64,
    pub fake: Var,
}

/// The quantity descended by G, the encoder head, and the OBE parameters.
pub fn generator_side_loss(
    generator: &Generator,
    critic: &Critic,
    encoder: &EncoderHead,
    obe: Option<&ObeModule>,
    sample: &LatentSample,
    terms: &TermWeights,
) -> Result<GeneratorLoss> {
    let fake = generator.generate(sample)?;
    let adversarial = critic.discriminate(&fake)?.mean().neg();
    let mut value = adversarial.clone();
    let (mut info_obe, mut info_encoder, mut orthogonality) = (0.0, 0.0, 0.0);
    if let Some(obe) = obe {
        if terms.obe != 0.0 {
            let l = obe_log_likelihood(&sample.c, &fake, obe)?;
            info_obe = l.item();
            value = value.sub(&l.scale(terms.gamma * terms.obe));
        }
        let or = obe.orthogonality();
        orthogonality = or.item();
        if terms.orthogonality != 0.0 {
            value = value.add(&or.scale(terms.orthogonality));
        }
    }
    if terms.encoder != 0.0 {
        let l = encoder_log_likelihood(&sample.c, &fake, critic, encoder)?;
        info_encoder = l.item();
        value = value.sub(&l.scale(terms.gamma * terms.encoder));
    }
    let info_value = terms.obe * info_obe + terms.encoder * info_encoder;
    if !value.is_finite() {
        return Err(ObeError::NonFinite {
            stage: "generator loss".into(),
            detail: format!("adversarial {} info {info_value} orthogonality {orthogonality}", adversarial.item()),
        });
    }
    Ok(GeneratorLoss {
        adversarial: adversarial.item(),
        info: info_value,
        info_obe,
        info_encoder,
        orthogonality,
        value,
        fake,
    })
}

/// Logged decomposition of the composite objective; carries no gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub adversarial: f64,
    pub infer_info: f64,
    pub orthogonality: f64,
    pub total: f64,
}

/// `total = L_adv - gamma L_infer_info + alpha L_or`.
pub fn total_objective_report(adversarial: f64, infer_info: f64, orthogonality: f64, gamma: f64, alpha: f64) -> ObjectiveReport {
    ObjectiveReport {
        adversarial,
        infer_info,
        orthogonality,
        total: adversarial - gamma * infer_info + alpha * orthogonality,
    }
}

/// Fully enumerable joint over a multi-dimensional discrete code and a finite image set.
///
/// Codes are tuples with per-dimension cardinalities `code_dims`; joint code
/// indices are row-major over those dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteToyModel {
    pub code_dims: Vec<usize>,
    /// `p(c)` over joint codes.
    pub prior: Vec<f64>,
    /// `p(X | c)`, shape `[codes, images]`.
    pub likelihood: Array2<f64>,
    /// Tabular `q(c | X)`, shape `[images, codes]`.
    pub q: Array2<f64>,
    /// Per-dimension `q'(c_i | X)`, each of shape `[images, code_dims[i]]`.
    pub q_prime: Vec<Array2<f64>>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `E[lambda log prod q' + (1 - lambda) log q]`.
    pub info_loss: f64,
    pub true_mi: f64,
    pub entropy_c: f64,
    /// `E[log q(c|X)] + H(c)`.
    pub variational_bound: f64,
    /// `E_X KL(p(c|X) || q(c|X))`.
    pub kl_posterior: f64,
    /// `E_X KL(p(c|X) || prod_i q'(c_i|X))`.
    pub kl_product: f64,
    /// `-lambda kl_product + I - H`.
    pub upper_bound: f64,
    /// `info_loss - (-lambda kl_product + (lambda - 1) kl_posterior + I - H)`.
    pub decomposition_residual: f64,
}

const NORMALIZATION_TOL: f64 = 1e-9;

fn check_distribution(name: &str, values: impl IntoIterator<Item = f64>, strict: bool) -> Result<()> {
    let mut total = 0.0;
    for v in values {
        if !v.is_finite() || v < 0.0 || (strict && v == 0.0) {
            return Err(ObeError::Distribution(format!("{name} has entry {v}")));
        }
        total += v;
    }
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(ObeError::Distribution(format!("{name} sums to {total}")));
    }
    Ok(())
}

impl DiscreteToyModel {
    pub fn codes(&self) -> usize {
        self.prior.len()
    }

    pub fn images(&self) -> usize {
        self.likelihood.ncols()
    }

    /// Per-dimension values of a joint code index.
    pub fn unravel(&self, mut code: usize) -> Vec<usize> {
        let mut out = vec![0; self.code_dims.len()];
        for (i, &d) in self.code_dims.iter().enumerate().rev() {
            out[i] = code % d;
            code /= d;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let joint: usize = self.code_dims.iter().product();
        if self.code_dims.is_empty() || self.code_dims.contains(&0) || joint != self.prior.len() {
            return Err(ObeError::Distribution(format!(
                "code dims {:?} do not match {} prior entries",
                self.code_dims,
                self.prior.len()
            )));
        }
        if joint > 5 || self.images() > 32 || self.images() == 0 {
            return Err(ObeError::Distribution(format!(
                "toy too large to enumerate: {joint} codes, {} images",
                self.images()
            )));
        }
        if self.likelihood.nrows() != joint || self.q.shape() != [self.images(), joint] {
            return Err(ObeError::shape("likelihood or q table has the wrong shape".to_string()));
        }
        if self.q_prime.len() != self.code_dims.len()
            || self.q_prime.iter().zip(&self.code_dims).any(|(t, &d)| t.shape() != [self.images(), d])
        {
            return Err(ObeError::shape("q' tables do not match the code dims".to_string()));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(ObeError::config("lambda", format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        check_distribution("p(c)", self.prior.iter().copied(), false)?;
        for (c, row) in self.likelihood.rows().into_iter().enumerate() {
            check_distribution(&format!("p(X|c={c})"), row.iter().copied(), false)?;
        }
        for (x, row) in self.q.rows().into_iter().enumerate() {
            check_distribution(&format!("q(c|X={x})"), row.iter().copied(), true)?;
        }
        for (i, table) in self.q_prime.iter().enumerate() {
            for (x, row) in table.rows().into_iter().enumerate() {
                check_distribution(&format!("q'_{i}(c|X={x})"), row.iter().copied(), true)?;
            }
        }
        Ok(())
    }

    /// `p(c, X)`, shape `[codes, images]`.
    pub fn joint(&self) -> Array2<f64> {
        Array2::from_shape_fn(self.likelihood.raw_dim(), |(c, x)| self.prior[c] * self.likelihood[[c, x]])
    }

    /// `p(c | X)`, shape `[images, codes]`; rows for unreachable images are uniform.
    pub fn posterior(&self) -> Array2<f64> {
        let joint = self.joint();
        let mut post = Array2::zeros((self.images(), self.codes()));
        for x in 0..self.images() {
            let px: f64 = joint.column(x).sum();
            for c in 0..self.codes() {
                post[[x, c]] = if px > 0.0 { joint[[c, x]] / px } else { 1.0 / self.codes() as f64 };
            }
        }
        post
    }

    /// Per-dimension marginals of the true posterior, shaped like `q_prime`.
    pub fn posterior_marginals(&self) -> Vec<Array2<f64>> {
        let post = self.posterior();
        let mut out: Vec<Array2<f64>> = self.code_dims.iter().map(|&d| Array2::zeros((self.images(), d))).collect();
        for c in 0..self.codes() {
            for (i, v) in self.unravel(c).into_iter().enumerate() {
                for x in 0..self.images() {
                    out[i][[x, v]] += post[[x, c]];
                }
            }
        }
        out
    }

    fn product_q_prime(&self, x: usize, c: usize) -> f64 {
        self.unravel(c)
            .into_iter()
            .enumerate()
            .map(|(i, v)| self.q_prime[i][[x, v]])
            .product()
    }
}

/// Enumerates every `(c, X)` outcome and reports the bound terms.
pub fn bound_oracle(toy: &DiscreteToyModel) -> Result<BoundReport> {
    toy.validate()?;
    let joint = toy.joint();
    let post = toy.posterior();
    let lambda = toy.lambda;
    let entropy_c: f64 = toy.prior.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
    let (mut true_mi, mut log_q, mut info_loss, mut kl_posterior, mut kl_product) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for c in 0..toy.codes() {
        for x in 0..toy.images() {
            let pcx = joint[[c, x]];
            if pcx == 0.0 {
                continue;
            }
            let p_post = post[[x, c]];
            let q = toy.q[[x, c]];
            let q_prod = toy.product_q_prime(x, c);
            true_mi += pcx * (p_post / toy.prior[c]).ln();
            log_q += pcx * q.ln();
            info_loss += pcx * (lambda * q_prod.ln() + (1.0 - lambda) * q.ln());
            kl_posterior += pcx * (p_post / q).ln();
            kl_product += pcx * (p_post / q_prod).ln();
        }
    }
    let upper_bound = -lambda * kl_product + true_mi - entropy_c;
    let decomposition = upper_bound + (lambda - 1.0) * kl_posterior;
    Ok(BoundReport {
        info_loss,
        true_mi,
        entropy_c,
        variational_bound: log_q + entropy_c,
        kl_posterior,
        kl_product,
        upper_bound,
        decomposition_residual: info_loss - decomposition,
    })
}

impl BoundReport {
    /// Checks the bound chain term by term at absolute tolerance `tol`.
    pub fn verify(&self, tol: f64) -> Result<()> {
        let checks = [
            ("variational bound exceeds I(c;X)", self.variational_bound - self.true_mi),
            ("bound gap differs from E KL(p||q)", (self.true_mi - self.variational_bound - self.kl_posterior).abs()),
            ("KL(p||q) negative", -self.kl_posterior),
            ("KL(p||prod q') negative", -self.kl_product),
            ("decomposition mismatch", self.decomposition_residual.abs()),
            ("inference loss exceeds its upper bound", self.info_loss - self.upper_bound),
        ];
        for (what, excess) in checks {
            if excess > tol {
                return Err(ObeError::BoundViolated(format!("{what} by {excess:e}")));
            }
        }
        Ok(())
    }
}

//! Alternating optimization loop.
//!
//! Each step updates the critic, then G together with the encoder head and
//! the OBE parameters, then refines `P` alone until `L_or < eps`.

use std::collections::BTreeMap;

use obe_autodiff::{gradients, no_grad, Adam, AdamState, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{BatchStream, FactorDataset};
use crate::error::{ObeError, Result};
use crate::networks::{sample_latent_with, Critic, EncoderHead, Generator, NetworkSpec};
use crate::obe::{dct_basis, orthogonalize, AssignmentOrder, BasisMatrix, BasisMode, CoefficientAssignment};
use crate::objectives::{
    critic_loss, generator_side_loss, total_objective_report, InterpolatedBatch, LossWeights, ObeModule,
    ObjectiveReport, TermWeights,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Drop the OBE module: no basis, heads, or coefficient term.
    pub obe_off: bool,
    /// One-step mode: add `alpha * L_or` to the joint loss and skip the inner loop.
    pub alternating_off: bool,
    /// Zero the weight of the encoder likelihood term.
    pub infogan_term_off: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iters: usize,
    pub spec: NetworkSpec,
    pub weights: LossWeights,
    pub epsilon: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    /// Step cap for the inner loop; defaults to ten times `lr`.
    pub inner_lr: Option<f64>,
    pub inner_max_iters: usize,
    pub basis: BasisMode,
    pub basis_noise: f64,
    pub assignment: AssignmentOrder,
    pub explicit_positions: Vec<(usize, usize)>,
    pub ablation: AblationFlags,
}

impl TrainConfig {
    pub fn dsprites() -> Self {
        TrainConfig {
            seed: 0,
            iters: 100_000,
            spec: NetworkSpec {
                side: 64,
                channels: 1,
                width: 64,
                noise_dim: 60,
                code_dim: 5,
            },
            weights: LossWeights::default(),
            epsilon: 0.2,
            lr: 0.0009,
            beta1: 0.5,
            beta2: 0.999,
            batch: 64,
            inner_lr: None,
            inner_max_iters: 500,
            basis: BasisMode::Learned,
            basis_noise: 0.01,
            assignment: AssignmentOrder::Diagonal,
            explicit_positions: Vec::new(),
            ablation: AblationFlags::default(),
        }
    }

    pub fn celeba() -> Self {
        TrainConfig {
            spec: NetworkSpec {
                side: 64,
                channels: 3,
                width: 64,
                noise_dim: 120,
                code_dim: 15,
            },
            epsilon: 0.8,
            ..Self::dsprites()
        }
    }

    /// Desk-scale configuration for the procedural square dataset.
    ///
    /// Uses penalty power 6: with power 1 the critic objective is
    /// scale-invariant and the critic output grows without bound.
    pub fn toy() -> Self {
        TrainConfig {
            iters: 2000,
            weights: LossWeights {
                p_gp: 6.0,
                ..LossWeights::default()
            },
            spec: NetworkSpec {
                side: 32,
                channels: 1,
                width: 8,
                noise_dim: 10,
                code_dim: 3,
            },
            batch: 32,
            ..Self::dsprites()
        }
    }

    pub fn inner_lr(&self) -> f64 {
        self.inner_lr.unwrap_or(10.0 * self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.weights.validate()?;
        if !(self.epsilon > 0.0) {
            return Err(ObeError::config("obe.epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ObeError::config("optim", "need lr > 0 and betas in [0, 1)"));
        }
        if self.inner_lr.is_some_and(|v| !(v > 0.0)) {
            return Err(ObeError::config("obe.inner_lr", "must be positive"));
        }
        if self.batch == 0 {
            return Err(ObeError::config("optim.batch", "must be positive"));
        }
        if !(self.basis_noise >= 0.0) {
            return Err(ObeError::config("obe.basis_noise", "must be non-negative"));
        }
        if !self.ablation.obe_off {
            self.build_assignment()?;
        }
        Ok(())
    }

    pub fn build_assignment(&self) -> Result<CoefficientAssignment> {
        CoefficientAssignment::build(self.assignment, self.spec.side, self.spec.code_dim, &self.explicit_positions)
    }

    /// Weights of the generator-side terms under the ablation flags.
    pub fn term_weights(&self) -> TermWeights {
        let mut t = TermWeights::full(&self.weights);
        if self.ablation.obe_off {
            t.obe = 0.0;
            t.encoder = 1.0;
        }
        if self.ablation.infogan_term_off {
            t.encoder = 0.0;
        }
        if self.ablation.alternating_off && !self.ablation.obe_off && self.basis == BasisMode::Learned {
            t.orthogonality = self.weights.alpha;
        }
        t
    }

    fn runs_inner_loop(&self) -> bool {
        !self.ablation.obe_off && !self.ablation.alternating_off && self.basis == BasisMode::Learned
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

/// The full model and its three ablations; all share the base seed.
pub fn ablation_variants(config: &TrainConfig) -> Vec<Variant> {
    let base = TrainConfig {
        ablation: AblationFlags::default(),
        ..config.clone()
    };
    let with = |name: &str, flags: AblationFlags| Variant {
        name: name.to_string(),
        config: TrainConfig {
            ablation: flags,
            ..base.clone()
        },
    };
    vec![
        with("full", AblationFlags::default()),
        with("obe_off", AblationFlags { obe_off: true, ..Default::default() }),
        with("infogan_term_off", AblationFlags { infogan_term_off: true, ..Default::default() }),
        with("alternating_off", AblationFlags { alternating_off: true, ..Default::default() }),
    ]
}

/// Position of the training data stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCursor {
    pub epoch: u64,
    pub cursor: usize,
}

#[derive(Clone)]
pub struct TrainState {
    pub generator: Generator,
    pub critic: Critic,
    pub encoder: EncoderHead,
    pub obe: Option<ObeModule>,
    pub critic_opt: Adam,
    pub generator_opt: Adam,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub data: DataCursor,
}

/// Scalars that accompany the named arrays of a serialized state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounters {
    pub iteration: u64,
    pub critic_steps: u64,
    pub generator_steps: u64,
    pub rng_seed: String,
    pub rng_word_pos: String,
    pub data: DataCursor,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let mut draw = || init.random::<u64>();
        let generator = Generator::new(config.spec, draw())?;
        let critic = Critic::new(config.spec, draw())?;
        let encoder = EncoderHead::new(config.spec, draw())?;
        let basis_seed = draw();
        let rng_seed = draw();
        let obe = if config.ablation.obe_off {
            None
        } else {
            let basis = match config.basis {
                BasisMode::Learned => {
                    BasisMatrix::perturbed_identity(config.spec.side, config.basis_noise, &mut ChaCha8Rng::seed_from_u64(basis_seed))
                }
                BasisMode::Dct => dct_basis(config.spec.side)?,
            };
            Some(ObeModule::new(basis, config.spec.channels, config.build_assignment()?)?)
        };
        Ok(TrainState {
            generator,
            critic,
            encoder,
            obe,
            critic_opt: Adam::new(config.lr, config.beta1, config.beta2),
            generator_opt: Adam::new(config.lr, config.beta1, config.beta2),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            data: DataCursor::default(),
        })
    }

    /// Every array of the state by name, plus the scalar counters.
    pub fn to_named(&self) -> (BTreeMap<String, Tensor>, StateCounters) {
        let mut out = BTreeMap::new();
        for (prefix, params) in [("g", &self.generator.params), ("d", &self.critic.params), ("q", &self.encoder.params)] {
            for (name, var) in params.names().iter().zip(params.vars()) {
                out.insert(format!("{prefix}.{name}"), var.value().clone());
            }
        }
        if let Some(obe) = &self.obe {
            out.insert("obe.basis".into(), obe.basis.value().clone());
            out.insert("obe.combiner.weight".into(), obe.combiner_weights.value().clone());
            out.insert("obe.combiner.bias".into(), obe.combiner_bias.value().clone());
            out.insert("obe.head.scale".into(), obe.scale.value().clone());
            out.insert("obe.head.shift".into(), obe.shift.value().clone());
        }
        for (prefix, opt) in [("opt.d", &self.critic_opt), ("opt.g", &self.generator_opt)] {
            let state = opt.state();
            for (i, (m, v)) in state.first.iter().zip(&state.second).enumerate() {
                out.insert(format!("{prefix}.m.{i:03}"), m.clone());
                out.insert(format!("{prefix}.v.{i:03}"), v.clone());
            }
        }
        let counters = StateCounters {
            iteration: self.iteration,
            critic_steps: self.critic_opt.state().step,
            generator_steps: self.generator_opt.state().step,
            rng_seed: hex_seed(&self.rng.get_seed()),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            data: self.data,
        };
        (out, counters)
    }

    /// Rebuilds a state for `config` from [`TrainState::to_named`] output.
    pub fn from_named(config: &TrainConfig, arrays: &BTreeMap<String, Tensor>, counters: &StateCounters) -> Result<Self> {
        let mut state = TrainState::new(config)?;
        let take = |name: &str| -> Result<Tensor> {
            arrays
                .get(name)
                .cloned()
                .ok_or_else(|| ObeError::Data(format!("checkpoint is missing array {name}")))
        };
        for (prefix, params) in [
            ("g", &mut state.generator.params),
            ("d", &mut state.critic.params),
            ("q", &mut state.encoder.params),
        ] {
            let values = params.names().iter().map(|n| take(&format!("{prefix}.{n}"))).collect::<Result<Vec<_>>>()?;
            params.load(values)?;
        }
        if let Some(obe) = state.obe.as_mut() {
            let basis = take("obe.basis")?;
            let entries = basis
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| ObeError::shape(format!("obe.basis: {e}")))?;
            obe.set_basis(BasisMatrix::new(entries, config.basis)?);
            let load = |var: &mut Var, name: &str| -> Result<()> {
                let value = take(name)?;
                if value.shape() != var.shape() {
                    return Err(ObeError::shape(format!("{name}: expected {:?}, got {:?}", var.shape(), value.shape())));
                }
                *var = Var::param(value);
                Ok(())
            };
            load(&mut obe.combiner_weights, "obe.combiner.weight")?;
            load(&mut obe.combiner_bias, "obe.combiner.bias")?;
            load(&mut obe.scale, "obe.head.scale")?;
            load(&mut obe.shift, "obe.head.shift")?;
        }
        for (prefix, opt, steps) in [
            ("opt.d", &mut state.critic_opt, counters.critic_steps),
            ("opt.g", &mut state.generator_opt, counters.generator_steps),
        ] {
            let mut moments = AdamState { step: steps, ..AdamState::default() };
            let mut i = 0;
            while let (Some(m), Some(v)) = (arrays.get(&format!("{prefix}.m.{i:03}")), arrays.get(&format!("{prefix}.v.{i:03}"))) {
                moments.first.push(m.clone());
                moments.second.push(v.clone());
                i += 1;
            }
            opt.set_state(moments);
        }
        let seed = parse_seed(&counters.rng_seed)?;
        let word_pos: u128 = counters
            .rng_word_pos
            .parse()
            .map_err(|_| ObeError::Data(format!("bad rng position {}", counters.rng_word_pos)))?;
        state.rng = ChaCha8Rng::from_seed(seed);
        state.rng.set_word_pos(word_pos);
        state.iteration = counters.iteration;
        state.data = counters.data;
        Ok(state)
    }
}

/// Parameters updated by the generator-side optimizer, in a fixed order.
fn generator_side_params<'a>(
    generator: &'a mut Generator,
    encoder: &'a mut EncoderHead,
    obe: &'a mut Option<ObeModule>,
) -> Vec<&'a mut Var> {
    let mut out: Vec<&mut Var> = generator.params.vars_mut().collect();
    out.extend(encoder.params.vars_mut());
    if let Some(obe) = obe.as_mut() {
        out.extend(obe.trainable_mut());
    }
    out
}

fn hex_seed(seed: &[u8; 32]) -> String {
    seed.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_seed(text: &str) -> Result<[u8; 32]> {
    let bad = || ObeError::Data(format!("bad rng seed {text}"));
    if text.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&text[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    /// `E[D(real)] - E[D(fake)]` before the critic update.
    pub wasserstein: f64,
    pub gradient_penalty: f64,
    pub critic_loss: f64,
    /// Weighted inference likelihood `w_obe L_obe + w_enc L_enc`.
    pub infer_info: f64,
    pub info_obe: f64,
    pub info_encoder: f64,
    /// `L_or` after the inner loop.
    pub orthogonality: f64,
    /// `L_or` right after the joint update.
    pub orthogonality_joint: f64,
    pub inner_iters: usize,
    /// Final inner-loop loss when it hit its iteration cap.
    pub inner_warning: Option<f64>,
    pub objective: ObjectiveReport,
}

impl StepReport {
    pub fn is_finite(&self) -> bool {
        [
            self.wasserstein,
            self.gradient_penalty,
            self.critic_loss,
            self.infer_info,
            self.orthogonality,
            self.objective.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Refines `P` alone until `L_or < eps` or the iteration cap; returns (iterations, warning).
pub fn inner_loop(state: &mut TrainState, config: &TrainConfig) -> Result<(usize, Option<f64>)> {
    let Some(obe) = state.obe.as_mut() else {
        return Ok((0, None));
    };
    if !config.runs_inner_loop() {
        return Ok((0, None));
    }
    let out = orthogonalize(&obe.basis_matrix()?, config.epsilon, config.inner_max_iters, config.inner_lr())?;
    if let Some(w) = &out.warning {
        log::warn!("inner loop stopped at L_or = {} after {} iterations", w.final_loss, w.max_iters);
    }
    let warning = out.warning.as_ref().map(|w| w.final_loss);
    let iterations = out.iterations;
    obe.set_basis(out.basis);
    Ok((iterations, warning))
}

fn non_finite(stage: &str, detail: String) -> ObeError {
    ObeError::NonFinite { stage: stage.into(), detail }
}

/// One alternating step on a real batch `[B, C, n, n]`.
///
/// On error the state is left untouched.
pub fn train_step(state: &mut TrainState, real: &Tensor, config: &TrainConfig) -> Result<StepReport> {
    let s = &config.spec;
    if real.shape() != [config.batch, s.channels, s.side, s.side] {
        return Err(ObeError::shape(format!(
            "real batch {:?} does not match [{}, {}, {}, {}]",
            real.shape(),
            config.batch,
            s.channels,
            s.side,
            s.side
        )));
    }
    let mut next = state.clone();
    let b = config.batch;
    let mu: Vec<f64> = (0..b).map(|_| next.rng.random_range(0.0..1.0)).collect();
    let sample = sample_latent_with(b, s.noise_dim, s.code_dim, &mut next.rng);

    let fake = {
        let _guard = no_grad();
        next.generator.generate(&sample)?
    };
    let x_hat = InterpolatedBatch::new(real, fake.value(), mu)?;
    let real_var = Var::constant(real.clone());
    let critic = critic_loss(&next.critic, &real_var, &fake, &x_hat, config.weights.k_gp, config.weights.p_gp)?;
    let critic_grads = {
        let params: Vec<&Var> = next.critic.params.vars().iter().collect();
        gradients(&critic.value.neg(), &params)
    };
    if critic_grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(non_finite("critic update", "non-finite critic gradient".into()));
    }
    {
        let mut params: Vec<&mut Var> = next.critic.params.vars_mut().collect();
        next.critic_opt.step(&mut params, &critic_grads);
    }

    let terms = config.term_weights();
    let gen = generator_side_loss(&next.generator, &next.critic, &next.encoder, next.obe.as_ref(), &sample, &terms)?;
    let gen_grads = {
        let params: Vec<Var> = generator_side_params(&mut next.generator, &mut next.encoder, &mut next.obe)
            .into_iter()
            .map(|v| v.clone())
            .collect();
        let refs: Vec<&Var> = params.iter().collect();
        gradients(&gen.value, &refs)
    };
    if gen_grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(non_finite("generator update", "non-finite generator-side gradient".into()));
    }
    {
        let mut params = generator_side_params(&mut next.generator, &mut next.encoder, &mut next.obe);
        next.generator_opt.step(&mut params, &gen_grads);
    }
    let orthogonality_joint = next.obe.as_ref().map_or(0.0, |o| o.orthogonality().item());
    let (inner_iters, inner_warning) = inner_loop(&mut next, config)?;
    let orthogonality = next.obe.as_ref().map_or(0.0, |o| o.orthogonality().item());

    next.iteration += 1;
    let report = StepReport {
        iteration: next.iteration,
        wasserstein: critic.wasserstein,
        gradient_penalty: critic.penalty,
        critic_loss: critic.value.item(),
        infer_info: gen.info,
        info_obe: gen.info_obe,
        info_encoder: gen.info_encoder,
        orthogonality,
        orthogonality_joint,
        inner_iters,
        inner_warning,
        objective: total_objective_report(gen.adversarial, gen.info, orthogonality, terms.gamma, config.weights.alpha),
    };
    if !report.is_finite() {
        return Err(non_finite("step report", format!("{report:?}")));
    }
    *state = next;
    Ok(report)
}

pub type TrainLog = Vec<StepReport>;

/// Cyclic data stream for training, positioned at the state's cursor.
pub fn training_stream(config: &TrainConfig, data: &FactorDataset, cursor: DataCursor) -> Result<BatchStream> {
    BatchStream::resume(data.len(), config.batch, config.seed, true, cursor.epoch, cursor.cursor)
}

/// Runs `iters` steps from `state`, calling `hook` after each one.
pub fn train_from(
    config: &TrainConfig,
    mut state: TrainState,
    data: &FactorDataset,
    iters: usize,
    mut hook: impl FnMut(&TrainState, &StepReport) -> Result<()>,
) -> Result<(TrainState, TrainLog)> {
    if data.side() != config.spec.side || data.channels() != config.spec.channels {
        return Err(ObeError::config(
            "data",
            format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                data.channels(),
                data.side(),
                data.side(),
                config.spec.channels,
                config.spec.side,
                config.spec.side
            ),
        ));
    }
    let mut stream = training_stream(config, data, state.data)?;
    let mut log = Vec::with_capacity(iters);
    for _ in 0..iters {
        let indices = stream.next().expect("cyclic stream never ends");
        let real = data.images(&indices);
        let report = train_step(&mut state, &real, config)?;
        let (epoch, cursor) = stream.position();
        state.data = DataCursor { epoch, cursor };
        hook(&state, &report)?;
        log.push(report);
    }
    Ok((state, log))
}

pub fn train(config: &TrainConfig, data: &FactorDataset) -> Result<(TrainState, TrainLog)> {
    let state = TrainState::new(config)?;
    train_from(config, state, data, config.iters, |_, _| Ok(()))
}

/// Code means used for evaluation: the OBE path when present, otherwise the encoder.
pub fn infer_codes(state: &TrainState, images: &Tensor, source: RepresentationSource) -> Result<ndarray::Array2<f64>> {
    let _guard = no_grad();
    let x = Var::constant(images.clone());
    let out = match (source, &state.obe) {
        (RepresentationSource::Obe, Some(obe)) | (RepresentationSource::Auto, Some(obe)) => obe.predict(&x)?,
        (RepresentationSource::Obe, None) => {
            return Err(ObeError::config("metrics.representation", "model has no OBE module"));
        }
        _ => state.encoder.encode(&state.critic, &x)?,
    };
    out.value()
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| ObeError::shape(e.to_string()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationSource {
    #[default]
    Auto,
    Encoder,
    Obe,
}

impl std::str::FromStr for RepresentationSource {
    type Err = ObeError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "auto" => RepresentationSource::Auto,
            "encoder" => RepresentationSource::Encoder,
            "obe" => RepresentationSource::Obe,
            other => return Err(ObeError::config("representation", format!("unknown source '{other}'"))),
        })
    }
}

/// Flat hash of every parameter tensor except the basis, for isolation checks.
pub fn non_basis_fingerprint(state: &TrainState) -> Vec<u64> {
    let (arrays, _) = state.to_named();
    arrays
        .iter()
        .filter(|(k, _)| k.as_str() != "obe.basis")
        .flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

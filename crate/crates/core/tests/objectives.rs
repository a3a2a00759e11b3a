use ndarray::{Array2, ArrayD, Axis, IxDyn};
use obe_autodiff::{gradients, Tensor, Var};
use obe_core::networks::*;
use obe_core::obe::{BasisMatrix, CoefficientAssignment};
use obe_core::objectives::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> NetworkSpec {
    NetworkSpec {
        side: 8,
        channels: 1,
        width: 4,
        noise_dim: 3,
        code_dim: 2,
    }
}

#[derive(Clone)]
struct Mini {
    g: Generator,
    d: Critic,
    q: EncoderHead,
    obe: ObeModule,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    G(usize),
    D(usize),
    Q(usize),
    Basis,
    Combiner,
    Scale,
    Shift,
}

impl Mini {
    fn new(seed: u64) -> Self {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = BasisMatrix::perturbed_identity(8, 0.2, &mut rng);
        let mut obe = ObeModule::new(basis, 1, CoefficientAssignment::diagonal(8, 2).unwrap()).unwrap();
        obe.scale = Var::param(ArrayD::from_shape_fn(IxDyn(&[2]), |_| rng.random_range(0.5..1.5)));
        obe.shift = Var::param(ArrayD::from_shape_fn(IxDyn(&[2]), |_| rng.random_range(-0.3..0.3)));
        Mini {
            g: Generator::new(s, seed + 1).unwrap(),
            d: Critic::new(s, seed + 2).unwrap(),
            q: EncoderHead::new(s, seed + 3).unwrap(),
            obe,
        }
    }

    fn slots(&self, with: &[char]) -> Vec<Slot> {
        let mut out = Vec::new();
        if with.contains(&'g') {
            out.extend((0..self.g.params.vars().len()).map(Slot::G));
        }
        if with.contains(&'d') {
            out.extend((0..self.d.params.vars().len()).map(Slot::D));
        }
        if with.contains(&'q') {
            out.extend((0..self.q.params.vars().len()).map(Slot::Q));
        }
        if with.contains(&'p') {
            out.extend([Slot::Basis, Slot::Combiner, Slot::Scale, Slot::Shift]);
        }
        out
    }

    fn var(&self, slot: Slot) -> &Var {
        match slot {
            Slot::G(i) => &self.g.params.vars()[i],
            Slot::D(i) => &self.d.params.vars()[i],
            Slot::Q(i) => &self.q.params.vars()[i],
            Slot::Basis => &self.obe.basis,
            Slot::Combiner => &self.obe.combiner_weights,
            Slot::Scale => &self.obe.scale,
            Slot::Shift => &self.obe.shift,
        }
    }

    fn set(&mut self, slot: Slot, value: Tensor) {
        let target = match slot {
            Slot::G(i) => self.g.params.vars_mut().nth(i).unwrap(),
            Slot::D(i) => self.d.params.vars_mut().nth(i).unwrap(),
            Slot::Q(i) => self.q.params.vars_mut().nth(i).unwrap(),
            Slot::Basis => &mut self.obe.basis,
            Slot::Combiner => &mut self.obe.combiner_weights,
            Slot::Scale => &mut self.obe.scale,
            Slot::Shift => &mut self.obe.shift,
        };
        *target = Var::param(value);
    }
}

/// Central differences on a few entries of every slot against reverse-mode gradients.
fn check_gradients(model: &Mini, slots: &[Slot], loss: impl Fn(&Mini) -> Var, seed: u64) {
    let out = loss(model);
    let vars: Vec<&Var> = slots.iter().map(|&s| model.var(s)).collect();
    let grads = gradients(&out, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut checked = 0;
    for (slot, grad) in slots.iter().zip(&grads) {
        let base = model.var(*slot).value().clone();
        for _ in 0..4.min(base.len()) {
            let flat = rng.random_range(0..base.len());
            let probe = |delta: f64| {
                let mut m = model.clone();
                let mut t = base.clone();
                *t.iter_mut().nth(flat).unwrap() += delta;
                m.set(*slot, t);
                loss(&m).item()
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let analytic = *grad.iter().nth(flat).unwrap();
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-5);
            assert!(rel < 1e-3, "{slot:?}[{flat}]: analytic {analytic} vs numeric {fd}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

fn images(batch: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(&[batch, 1, 8, 8]), |_| rng.random_range(lo..hi))
}

#[test]
fn critic_loss_gradient_matches_finite_differences() {
    let model = Mini::new(0);
    let real = Var::constant(images(3, -1.0, 1.0, 1));
    let fake = Var::constant(images(3, -1.0, 1.0, 2));
    let x_hat = InterpolatedBatch::new(real.value(), fake.value(), vec![0.2, 0.5, 0.9]).unwrap();
    for p in [1.0, 2.0] {
        let loss = |m: &Mini| critic_loss(&m.d, &real, &fake, &x_hat, 2.0, p).unwrap().value;
        check_gradients(&model, &model.slots(&['d']), loss, 3);
    }
}

#[test]
fn info_loss_gradient_matches_finite_differences() {
    let model = Mini::new(10);
    let sample = sample_latent(3, 3, 2, 4).unwrap();
    let loss = |m: &Mini| {
        let fake = m.g.generate(&sample).unwrap();
        infer_info_loss(&sample.c, &fake, &m.d, &m.q, &m.obe, 0.7).unwrap()
    };
    check_gradients(&model, &model.slots(&['g', 'd', 'q', 'p']), loss, 5);
}

#[test]
fn generator_side_gradient_matches_finite_differences() {
    let model = Mini::new(20);
    let sample = sample_latent(3, 3, 2, 6).unwrap();
    let terms = TermWeights {
        gamma: 1.1,
        obe: 0.9,
        encoder: 0.1,
        orthogonality: 1.0,
    };
    let loss = |m: &Mini| generator_side_loss(&m.g, &m.d, &m.q, Some(&m.obe), &sample, &terms).unwrap().value;
    check_gradients(&model, &model.slots(&['g', 'q', 'p']), loss, 7);
}

/// Critic with non-negative weights on positive images: every unit stays on the identity branch.
fn positive_critic() -> Critic {
    let mut d = Critic::new(spec(), 5).unwrap();
    let values = d.params.values().into_iter().map(|t| t.mapv(f64::abs)).collect();
    d.params.load(values).unwrap();
    d
}

#[test]
fn linear_critic_penalty_is_a_power_of_the_weight_norm() {
    let d = positive_critic();
    let score = |x: &Tensor| d.discriminate(&Var::constant(x.clone())).unwrap().value()[[0]];
    // the critic is affine on positive images; recover its weight by unit probes
    let x0 = ArrayD::from_elem(IxDyn(&[1, 1, 8, 8]), 0.5);
    let base = score(&x0);
    let w: Vec<f64> = (0..64)
        .map(|i| {
            let mut x = x0.clone();
            x[[0, 0, i / 8, i % 8]] += 0.25;
            (score(&x) - base) / 0.25
        })
        .collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();

    let real = images(4, 0.1, 1.0, 1);
    let fake = images(4, 0.1, 1.0, 2);
    let mean_diff: f64 = (0..64)
        .map(|i| {
            let (r, c) = (i / 8, i % 8);
            let m = |t: &Tensor| (0..4).map(|b| t[[b, 0, r, c]]).sum::<f64>() / 4.0;
            w[i] * (m(&real) - m(&fake))
        })
        .sum();
    for (k, p) in [(2.0, 1.0), (0.5, 2.0), (1.0, 3.0)] {
        for mu in [vec![0.0, 0.3, 0.6, 1.0], vec![0.9, 0.1, 0.5, 0.5]] {
            let x_hat = InterpolatedBatch::new(&real, &fake, mu).unwrap();
            let out = critic_loss(&d, &Var::constant(real.clone()), &Var::constant(fake.clone()), &x_hat, k, p).unwrap();
            assert!((out.penalty - norm.powf(p)).abs() < 1e-9 * norm.powf(p).max(1.0));
            assert!((out.wasserstein - mean_diff).abs() < 1e-9);
            assert!((out.value.item() - (mean_diff - k * norm.powf(p))).abs() < 1e-8);
        }
    }
}

#[test]
fn critic_loss_ignores_batch_order() {
    let model = Mini::new(3);
    let real = images(4, -1.0, 1.0, 8);
    let fake = images(4, -1.0, 1.0, 9);
    let mu = vec![0.1, 0.4, 0.7, 0.95];
    let perm = [2, 0, 3, 1];
    let a = critic_loss(
        &model.d,
        &Var::constant(real.clone()),
        &Var::constant(fake.clone()),
        &InterpolatedBatch::new(&real, &fake, mu.clone()).unwrap(),
        2.0,
        1.0,
    )
    .unwrap();
    let (rp, fp) = (real.select(Axis(0), &perm), fake.select(Axis(0), &perm));
    let mp: Vec<f64> = perm.iter().map(|&i| mu[i]).collect();
    let b = critic_loss(
        &model.d,
        &Var::constant(rp.clone()),
        &Var::constant(fp.clone()),
        &InterpolatedBatch::new(&rp, &fp, mp).unwrap(),
        2.0,
        1.0,
    )
    .unwrap();
    assert!((a.value.item() - b.value.item()).abs() < 1e-12);
}

#[test]
fn equal_lambda_weighs_both_terms_equally() {
    let model = Mini::new(4);
    let sample = sample_latent(5, 3, 2, 1).unwrap();
    let fake = model.g.generate(&sample).unwrap();
    let a = obe_log_likelihood(&sample.c, &fake, &model.obe).unwrap().item();
    let q = encoder_log_likelihood(&sample.c, &fake, &model.d, &model.q).unwrap().item();
    let mixed = infer_info_loss(&sample.c, &fake, &model.d, &model.q, &model.obe, 0.5).unwrap().item();
    assert!((mixed - 0.5 * (a + q)).abs() < 1e-12);
}

#[test]
fn perfect_heads_leave_only_the_adversarial_term() {
    let model = Mini::new(6);
    let sample = sample_latent(4, 3, 2, 2).unwrap();
    let fake = model.g.generate(&sample).unwrap();
    // choose codes equal to what both heads already predict
    let c_obe = model.obe.predict(&fake).unwrap().value().clone().into_dimensionality().unwrap();
    let obe_only = LatentSample {
        z: sample.z.clone(),
        c: c_obe,
    };
    let terms = TermWeights {
        gamma: 1.1,
        obe: 1.0,
        encoder: 0.0,
        orthogonality: 0.0,
    };
    let out = generator_side_loss(&model.g, &model.d, &model.q, Some(&model.obe), &obe_only, &terms);
    // the generator sees different codes now, so compare against its own adversarial value
    let out = out.unwrap();
    let fake2 = model.g.generate(&obe_only).unwrap();
    let adv = -model.d.discriminate(&fake2).unwrap().mean().item();
    assert!((out.adversarial - adv).abs() < 1e-12);
    let expected = adv - 1.1 * out.info_obe;
    assert!((out.value.item() - expected).abs() < 1e-12);
}

#[test]
fn objective_report_round_trips_through_json() {
    let r = total_objective_report(0.123456789012345, -2.5e-7, 0.19999999999999998, 1.1, 1.0);
    let text = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<ObjectiveReport>(&text).unwrap(), r);
    assert_eq!(total_objective_report(0.0, 0.0, 0.0, 1.1, 1.0).total, 0.0);
}

fn normalized_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.05..1.0));
    for mut r in m.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

fn random_toy(seed: u64) -> DiscreteToyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes: [&[usize]; 5] = [&[2], &[5], &[2, 2], &[3], &[4]];
    let code_dims = shapes[seed as usize % shapes.len()].to_vec();
    let codes: usize = code_dims.iter().product();
    let images = rng.random_range(2..=32);
    let prior = normalized_rows(1, codes, &mut rng).row(0).to_vec();
    DiscreteToyModel {
        likelihood: normalized_rows(codes, images, &mut rng),
        q: normalized_rows(images, codes, &mut rng),
        q_prime: code_dims.iter().map(|&d| normalized_rows(images, d, &mut rng)).collect(),
        code_dims,
        prior,
        lambda: rng.random_range(0.05..0.95),
    }
}

/// `I(c;X)` and `E log q(c|X) + H(c)` computed from the joint table in another arrangement.
fn enumerate(toy: &DiscreteToyModel) -> (f64, f64, f64) {
    let codes = toy.prior.len();
    let images = toy.likelihood.ncols();
    let px: Vec<f64> = (0..images).map(|x| (0..codes).map(|c| toy.prior[c] * toy.likelihood[[c, x]]).sum()).collect();
    let h_c: f64 = -toy.prior.iter().map(|p| p * p.ln()).sum::<f64>();
    let mut h_c_given_x = 0.0;
    let mut log_q = 0.0;
    let mut kl = 0.0;
    for x in 0..images {
        for c in 0..codes {
            let joint = toy.prior[c] * toy.likelihood[[c, x]];
            let post = joint / px[x];
            h_c_given_x -= joint * post.ln();
            log_q += joint * toy.q[[x, c]].ln();
            kl += joint * (post.ln() - toy.q[[x, c]].ln());
        }
    }
    (h_c - h_c_given_x, log_q + h_c, kl)
}

#[test]
fn variational_bound_never_exceeds_mutual_information() {
    for seed in 0..40 {
        let toy = random_toy(seed);
        let r = bound_oracle(&toy).unwrap();
        let (mi, bound, kl) = enumerate(&toy);
        assert!((r.true_mi - mi).abs() < 1e-9);
        assert!((r.variational_bound - bound).abs() < 1e-9);
        assert!(r.variational_bound <= r.true_mi + 1e-9);
        assert!((r.true_mi - r.variational_bound - kl).abs() < 1e-9);
        r.verify(1e-9).unwrap();
    }
}

#[test]
fn bound_is_tight_at_the_true_posterior() {
    for seed in 0..20 {
        let mut toy = random_toy(seed);
        toy.q = toy.posterior();
        toy.q_prime = toy.posterior_marginals();
        let r = bound_oracle(&toy).unwrap();
        assert!((r.true_mi - r.variational_bound).abs() < 1e-9);
        assert!(r.kl_posterior.abs() < 1e-9);
        r.verify(1e-9).unwrap();
    }
}

#[test]
fn independent_code_has_no_information() {
    let mut toy = random_toy(3);
    let row = toy.likelihood.row(0).to_owned();
    for mut r in toy.likelihood.rows_mut() {
        r.assign(&row);
    }
    let r = bound_oracle(&toy).unwrap();
    assert!(r.true_mi.abs() < 1e-12);
    assert!(r.variational_bound <= 1e-9);
    assert!(r.info_loss <= r.upper_bound + 1e-9);
}

use ndarray::{ArrayD, Axis, IxDyn};
use obe_autodiff::Var;
use obe_core::networks::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> NetworkSpec {
    NetworkSpec {
        side: 16,
        channels: 2,
        width: 4,
        noise_dim: 5,
        code_dim: 3,
    }
}

#[test]
fn outputs_are_finite_for_many_seeds() {
    let s = spec();
    for seed in 0..100 {
        let g = Generator::new(s, seed).unwrap();
        let d = Critic::new(s, seed + 1000).unwrap();
        let q = EncoderHead::new(s, seed + 2000).unwrap();
        let fake = g.generate(&sample_latent(4, s.noise_dim, s.code_dim, seed).unwrap()).unwrap();
        assert!(fake.value().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        assert!(d.discriminate(&fake).unwrap().is_finite());
        assert!(q.encode(&d, &fake).unwrap().is_finite());
    }
}

#[test]
fn samples_do_not_interact_within_a_batch() {
    let s = spec();
    let g = Generator::new(s, 3).unwrap();
    let d = Critic::new(s, 4).unwrap();
    let q = EncoderHead::new(s, 5).unwrap();
    let sample = sample_latent(6, s.noise_dim, s.code_dim, 8).unwrap();
    let perm = [4, 0, 5, 2, 1, 3];
    let permuted = LatentSample {
        z: sample.z.select(Axis(0), &perm),
        c: sample.c.select(Axis(0), &perm),
    };
    let a = g.generate(&sample).unwrap();
    let b = g.generate(&permuted).unwrap();
    assert_eq!(a.value().select(Axis(0), &perm), *b.value());

    let score_a = d.discriminate(&a).unwrap();
    let score_b = d.discriminate(&b).unwrap();
    assert_eq!(score_a.value().select(Axis(0), &perm), *score_b.value());
    let code_a = q.encode(&d, &a).unwrap();
    let code_b = q.encode(&d, &b).unwrap();
    assert_eq!(code_a.value().select(Axis(0), &perm), *code_b.value());

    // a single sample alone gives the same output as inside the batch
    let alone = g
        .generate(&LatentSample {
            z: sample.z.select(Axis(0), &[2]),
            c: sample.c.select(Axis(0), &[2]),
        })
        .unwrap();
    let inside = a.value().index_axis(Axis(0), 2).to_owned();
    let diff = (&alone.value().index_axis(Axis(0), 0) - &inside).mapv(f64::abs);
    assert!(diff.iter().all(|&v| v < 1e-12));
}

#[test]
fn shape_errors_are_reported() {
    let s = spec();
    let g = Generator::new(s, 0).unwrap();
    assert!(g.generate(&sample_latent(2, 4, 3, 0).unwrap()).is_err());
    let d = Critic::new(s, 0).unwrap();
    let wrong = Var::constant(ArrayD::zeros(IxDyn(&[2, 1, 16, 16])));
    assert!(d.discriminate(&wrong).is_err());
    assert!(sample_latent(0, 4, 3, 0).is_err());
}

#[test]
fn seeds_decide_initialization() {
    let s = spec();
    let a = Generator::new(s, 11).unwrap();
    let b = Generator::new(s, 11).unwrap();
    let c = Generator::new(s, 12).unwrap();
    assert_eq!(a.params.values(), b.params.values());
    assert_ne!(a.params.values(), c.params.values());
}

#[test]
fn critic_scores_respond_to_the_image() {
    let s = spec();
    let d = Critic::new(s, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = ArrayD::from_shape_fn(IxDyn(&[2, 2, 16, 16]), |_| rng.random_range(-1.0..1.0));
    let scores = d.discriminate(&Var::constant(x)).unwrap();
    let v = scores.value();
    assert_ne!(v[[0]], v[[1]]);
}

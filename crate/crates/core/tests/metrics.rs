use ndarray::{array, Array1, Array2, ArrayD, Axis, IxDyn};
use obe_core::datasets::FactorDataset;
use obe_core::metrics::*;
use obe_core::networks::{Generator, NetworkSpec};
use obe_core::obe::{dct_basis, dct_matrix, CoefficientAssignment};
use obe_core::objectives::ObeModule;
use obe_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full factorial over `cards` with tiny blank images.
fn factorial(cards: &[usize]) -> FactorDataset {
    let total: usize = cards.iter().product();
    let mut labels = Array2::zeros((total, cards.len()));
    for i in 0..total {
        let mut rest = i;
        for f in (0..cards.len()).rev() {
            labels[[i, f]] = rest % cards[f];
            rest /= cards[f];
        }
    }
    let names = (0..cards.len()).map(|f| format!("f{f}")).collect();
    FactorDataset::from_bytes(vec![0; total * 4], 1, 2, Some((labels, cards.to_vec(), names))).unwrap()
}

/// Labels through a per-dimension map.
struct Mapped<F>(usize, F);

impl<F: Fn(usize, f64) -> f64> Representation for Mapped<F> {
    fn code_dim(&self) -> usize {
        self.0
    }

    fn encode(&self, data: &FactorDataset, indices: &[usize]) -> Result<Array2<f64>> {
        let rows = data.factor_rows(indices).unwrap();
        Ok(Array2::from_shape_fn((indices.len(), self.0), |(r, j)| (self.1)(j, rows[[r, j % rows.ncols()]] as f64)))
    }
}

/// Exact MIG of the identity code on a full factorial table, by enumeration.
fn enumerated_identity_mig(cards: &[usize]) -> f64 {
    // each code dimension is a copy of one factor; every other dimension is independent of it
    let mut total = 0.0;
    for &c in cards {
        let h = (c as f64).ln();
        let own = h;
        let other = 0.0;
        total += (own - other) / h;
    }
    total / cards.len() as f64
}

#[test]
fn factorvae_identity_scores_one() {
    let data = factorial(&[3, 4, 5, 3, 4]);
    let s = factorvae_score(&FactorLabels::of(&data), &data, 800, 100, 64, None, 0).unwrap();
    assert_eq!(s.score, 1.0);
}

#[test]
fn factorvae_noise_is_near_chance() {
    let data = factorial(&[3, 4, 5, 3, 4]);
    let mut scores = Vec::new();
    for seed in 0..8 {
        let rep = NoiseRepresentation { dim: 5, seed: 100 + seed };
        scores.push(factorvae_score(&rep, &data, 800, 100, 64, None, seed).unwrap().score);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((mean - 0.2).abs() <= 0.05, "mean {mean} over {scores:?}");
}

#[test]
fn factorvae_ignores_positive_rescaling() {
    let data = factorial(&[3, 4, 5, 3]);
    let noisy = |j: usize, v: f64| v + 0.37 * ((j as f64 + 1.3) * v * 7.1).sin();
    let a = factorvae_score(&Mapped(4, noisy), &data, 200, 50, 32, None, 5).unwrap();
    let scales = [0.01, 3.0, 250.0, 1.0];
    let b = factorvae_score(&Mapped(4, move |j, v| scales[j] * noisy(j, v)), &data, 200, 50, 32, None, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn factorvae_rejects_collapsed_and_single_factor_inputs() {
    let data = factorial(&[3, 4]);
    let flat = Mapped(2, |_, _| 0.5);
    let err = factorvae_score(&flat, &data, 10, 10, 8, None, 0).unwrap_err();
    assert!(err.to_string().contains("collapsed"));
    let single = factorial(&[1, 6]);
    assert!(factorvae_score(&FactorLabels::of(&single), &single, 10, 10, 8, None, 0).is_err());
}

#[test]
fn mig_one_to_one_and_noise() {
    let cards = [3, 6, 8, 8];
    let data = factorial(&cards);
    let exact = enumerated_identity_mig(&cards);
    assert_eq!(exact, 1.0);
    let id = mig_score(&FactorLabels::of(&data), &data, 20, 10_000, 1).unwrap();
    assert!(id.score >= 0.95 && id.score <= exact, "{}", id.score);
    let noise = mig_score(&NoiseRepresentation { dim: 4, seed: 9 }, &data, 20, 10_000, 1).unwrap();
    assert!(noise.score <= 0.05, "{}", noise.score);
}

#[test]
fn mig_duplicate_dimension_has_no_gap() {
    let data = factorial(&[4, 5, 6]);
    // dims 0 and 3 both copy factor 0
    let rep = Mapped(4, |_, v| v);
    let s = mig_score(&rep, &data, 20, 4000, 2).unwrap();
    assert_eq!(s.per_factor[0], Some(0.0));
    assert!(s.per_factor[1].unwrap() > 0.9);
}

#[test]
fn mig_is_invariant_under_monotone_maps() {
    let data = factorial(&[4, 5, 6]);
    let base = |j: usize, v: f64| v + 0.8 * ((v + 1.0) * (j as f64 + 2.0) * 1.7).sin() - 0.3 * j as f64;
    let a = mig_score(&Mapped(3, base), &data, 20, 3000, 4).unwrap();
    let cube = mig_score(&Mapped(3, move |j, v| base(j, v).powi(3)), &data, 20, 3000, 4).unwrap();
    let affine = mig_score(&Mapped(3, move |j, v| 2.0 * base(j, v) + 1.0), &data, 20, 3000, 4).unwrap();
    assert_eq!(a, cube);
    assert_eq!(a, affine);
}

#[test]
fn mig_excludes_zero_entropy_factor() {
    let data = factorial(&[1, 5, 6]);
    let s = mig_score(&FactorLabels::of(&data), &data, 20, 2000, 0).unwrap();
    assert_eq!(s.per_factor[0], None);
    assert_eq!(s.warnings.len(), 1);
}

#[test]
fn sap_identity_noise_and_constant() {
    let data = factorial(&[3, 6, 8, 8]);
    let id = sap_score(&FactorLabels::of(&data), &data, 10_000, 3).unwrap();
    assert!(id.score >= 0.9, "{}", id.score);
    let noise = sap_score(&NoiseRepresentation { dim: 4, seed: 2 }, &data, 10_000, 3).unwrap();
    assert!(noise.score <= 0.05, "{}", noise.score);
    let flat = sap_score(&Mapped(4, |_, _| 1.25), &data, 1000, 3).unwrap();
    assert_eq!(flat.score, 0.0);
}

/// Random mixtures of labels and noise.
struct Mixture {
    weights: Array2<f64>,
    noise: f64,
    seed: u64,
}

impl Representation for Mixture {
    fn code_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn encode(&self, data: &FactorDataset, indices: &[usize]) -> Result<Array2<f64>> {
        let rows = data.factor_rows(indices).unwrap().mapv(|v| v as f64);
        let noise = NoiseRepresentation { dim: self.code_dim(), seed: self.seed }.encode(data, indices)?;
        Ok(rows.dot(&self.weights.t()) + noise * self.noise)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scores_stay_in_unit_interval(w in proptest::collection::vec(-2.0f64..2.0, 9), noise in 0.0f64..3.0, seed in 0u64..1000) {
        let data = factorial(&[3, 4, 5]);
        let rep = Mixture { weights: Array2::from_shape_vec((3, 3), w).unwrap(), noise: noise + 1e-3, seed };
        let f = factorvae_score(&rep, &data, 60, 30, 16, None, seed).unwrap().score;
        let m = mig_score(&rep, &data, 10, 600, seed).unwrap().score;
        let s = sap_score(&rep, &data, 600, seed).unwrap().score;
        for v in [f, m, s] {
            prop_assert!((0.0..=1.0).contains(&v), "{} {} {}", f, m, s);
        }
    }
}

/// Band `i` spells the binary expansion of `c_i` across its columns, so any change to `c_i`
/// beyond `2^-side` flips pixels in that band and nowhere else.
struct StripeOracle {
    k: usize,
    side: usize,
}

impl ImageGenerator for StripeOracle {
    fn noise_dim(&self) -> usize {
        2
    }

    fn code_dim(&self) -> usize {
        self.k
    }

    fn render(&self, _z: &Array2<f64>, c: &Array2<f64>) -> Result<ArrayD<f64>> {
        let band = self.side / self.k;
        let levels = (1u64 << self.side) as f64;
        Ok(ArrayD::from_shape_fn(IxDyn(&[c.nrows(), 1, self.side, self.side]), |ix| {
            let row = ix[2] / band;
            if row >= self.k {
                return -1.0;
            }
            let q = (((c[[ix[0], row]] + 1.0) / 2.0 * levels) as u64).min((1 << self.side) - 1);
            if (q >> (self.side - 1 - ix[3])) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        }))
    }
}

struct Constant(usize);

impl ImageGenerator for Constant {
    fn noise_dim(&self) -> usize {
        2
    }

    fn code_dim(&self) -> usize {
        self.0
    }

    fn render(&self, z: &Array2<f64>, _c: &Array2<f64>) -> Result<ArrayD<f64>> {
        Ok(ArrayD::from_elem(IxDyn(&[z.nrows(), 1, 8, 8]), 0.25))
    }
}

fn small_vp() -> VpSettings {
    VpSettings {
        pairs: 2000,
        epochs: 200,
        ..VpSettings::default()
    }
}

#[test]
fn vp_stripe_oracle_is_predictable() {
    let out = vp_score(&StripeOracle { k: 3, side: 12 }, &small_vp(), 0).unwrap();
    assert!(out.score >= 0.99, "{:?}", out.score);
}

#[test]
fn vp_constant_generator_is_chance() {
    let out = vp_score(&Constant(3), &small_vp(), 0).unwrap();
    assert!(out.score <= 1.0 / 3.0 + 0.05, "{}", out.score);
}

#[test]
fn vp_labels_are_balanced() {
    let k = 5;
    let lat = pair_latents(10_000, 3, k, &mut ChaCha8Rng::seed_from_u64(11));
    for l in 0..k {
        let freq = lat.labels.iter().filter(|&&x| x == l).count() as f64 / 10_000.0;
        assert!((freq - 1.0 / k as f64).abs() <= 0.02, "{l}: {freq}");
    }
}

/// Rows with exactly zero mean and identity sample covariance, mapped to the requested moments.
fn exact_moments(mu: &Array1<f64>, chol: &Array2<f64>, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = mu.len();
    let mut x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let m = x.mean_axis(Axis(0)).unwrap();
    x -= &m;
    // whiten with the inverse Cholesky factor of the sample covariance (2x2, written out)
    let cov = x.t().dot(&x) / (n as f64 - 1.0);
    let l00 = cov[[0, 0]].sqrt();
    let l10 = cov[[1, 0]] / l00;
    let l11 = (cov[[1, 1]] - l10 * l10).sqrt();
    let inv = array![[1.0 / l00, 0.0], [-l10 / (l00 * l11), 1.0 / l11]];
    let white = x.dot(&inv.t());
    white.dot(&chol.t()) + mu
}

#[test]
fn quality_matches_closed_form() {
    let mu1: Array1<f64> = array![0.5, -1.0];
    let mu2: Array1<f64> = array![-0.25, 2.0];
    let l1: Array2<f64> = array![[1.5, 0.0], [0.4, 0.8]];
    let l2: Array2<f64> = array![[0.7, 0.0], [-0.9, 1.1]];
    let s1 = l1.dot(&l1.t());
    let s2 = l2.dot(&l2.t());
    // for 2x2 M with positive eigenvalues, tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))
    let m = s1.dot(&s2);
    let det = m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[1, 0]];
    let tr_root = (m[[0, 0]] + m[[1, 1]] + 2.0 * det.sqrt()).sqrt();
    let diff = &mu1 - &mu2;
    let expected = diff.dot(&diff) + s1.diag().sum() + s2.diag().sum() - 2.0 * tr_root;

    let a = exact_moments(&mu1, &l1, 400, 1);
    let b = exact_moments(&mu2, &l2, 300, 2);
    let to_images = |x: &Array2<f64>| x.clone().into_shape_with_order((x.nrows(), 1, 1, 2)).unwrap().into_dyn();
    let got = quality_score(&to_images(&a), &to_images(&b), &FlattenFeatures).unwrap();
    assert!((got.distance - expected).abs() < 1e-6, "{} vs {expected}", got.distance);
    assert!(!got.clamped);

    let same = quality_score(&to_images(&a), &to_images(&a), &FlattenFeatures).unwrap();
    assert!(same.distance.abs() < 1e-9);
}

#[test]
fn quality_needs_two_samples() {
    let one = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
    assert!(quality_score(&one, &one, &FlattenFeatures).is_err());
}

/// `c_i` scales the basis image whose DCT coefficient sits at `(i + 1, i + 1)`.
struct LinearDct {
    side: usize,
    k: usize,
}

impl ImageGenerator for LinearDct {
    fn noise_dim(&self) -> usize {
        1
    }

    fn code_dim(&self) -> usize {
        self.k
    }

    fn render(&self, z: &Array2<f64>, c: &Array2<f64>) -> Result<ArrayD<f64>> {
        let d = dct_matrix(self.side)?;
        let n = self.side;
        Ok(ArrayD::from_shape_fn(IxDyn(&[c.nrows(), 1, n, n]), |ix| {
            let (b, r, s) = (ix[0], ix[2], ix[3]);
            let mut v = 0.1 * z[[b, 0]] * d[[0, r]] * d[[0, s]];
            for i in 0..self.k {
                v += c[[b, i]] * d[[i + 1, r]] * d[[i + 1, s]];
            }
            v
        }))
    }
}

#[test]
fn matched_curve_dominates_for_a_disentangled_generator() {
    let (n, k) = (8, 3);
    let obe = ObeModule::new(dct_basis(n).unwrap(), 1, CoefficientAssignment::diagonal(n, k).unwrap()).unwrap();
    for dim in 0..k {
        let set = correlation_curves(&LinearDct { side: n, k }, &obe, dim, 9, 4).unwrap();
        assert_eq!(set.values.dim(), (9, k));
        for j in 0..k {
            if j != dim {
                assert!(set.variation[dim] > set.variation[j]);
            }
        }
        // the matched coefficient reproduces the sweep
        for (t, &c) in set.sweep.iter().enumerate() {
            assert!((set.values[[t, dim]] - c).abs() < 1e-12);
        }
        // unmatched curves are flat up to rounding
        assert!(set.selectivity.is_none_or(|s| s > 1e6));
    }
}

#[test]
fn curves_of_an_untrained_generator_are_finite() {
    let spec = NetworkSpec {
        side: 8,
        channels: 1,
        width: 4,
        noise_dim: 3,
        code_dim: 2,
    };
    let g = Generator::new(spec, 1).unwrap();
    let obe = ObeModule::new(dct_basis(8).unwrap(), 1, CoefficientAssignment::diagonal(8, 2).unwrap()).unwrap();
    let set = correlation_curves(&g, &obe, 1, 5, 0).unwrap();
    assert!(set.values.iter().all(|v| v.is_finite()));
    let single = correlation_curves(&g, &obe, 0, 1, 0).unwrap();
    assert_eq!(single.values.nrows(), 1);
    assert!(single.variation.iter().all(|&v| v == 0.0));
    assert!(correlation_curves(&g, &obe, 2, 5, 0).is_err());
}

#[test]
fn unlabeled_data_skips_label_metrics() {
    let data = FactorDataset::from_bytes(vec![0; 16 * 4], 1, 2, None).unwrap();
    let rep = NoiseRepresentation { dim: 2, seed: 0 };
    let report = evaluate(&[MetricKind::Factorvae, MetricKind::Mig], &MetricProtocol::default(), Some(&rep), &data, None, 0, "m");
    assert_eq!(report.factorvae, None);
    assert_eq!(report.skipped.len(), 2);
    assert!(report.skipped.iter().all(|s| s.reason == "requires factor labels"));
}

#[test]
fn evaluation_is_seed_deterministic() {
    let data = factorial(&[3, 4, 5]);
    let protocol = MetricProtocol {
        factorvae_train_votes: 50,
        factorvae_eval_votes: 20,
        factorvae_batch: 16,
        mig_samples: 500,
        sap_samples: 500,
        ..MetricProtocol::default()
    };
    let rep = Mapped(3, |j: usize, v: f64| v * (j as f64 + 1.0) + (v * 3.3).cos());
    let kinds = [MetricKind::Factorvae, MetricKind::Mig, MetricKind::Sap];
    let a = evaluate(&kinds, &protocol, Some(&rep), &data, None, 7, "m");
    let b = evaluate(&kinds, &protocol, Some(&rep), &data, None, 7, "m");
    assert_eq!(a, b);
    assert!(a.skipped.is_empty());
    let json = serde_json::to_string(&a).unwrap();
    assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), a);
}

#[test]
fn aggregate_table_round_trips() {
    let mut reports = Vec::new();
    for (id, base) in [("full", 0.9), ("obe_off", 0.7)] {
        for seed in 0..3u64 {
            let mut r = MetricReport::new(id, seed, MetricProtocol::default());
            r.factorvae = Some(base + 0.01 * seed as f64);
            if id == "full" {
                r.mig = Some(0.3 + 0.02 * seed as f64);
            }
            reports.push(r);
        }
    }
    let table = AggregateTable::from_reports(&reports, &[MetricKind::Factorvae, MetricKind::Mig]);
    let text = table.render();
    let parsed = AggregateTable::parse(&text).unwrap();
    assert_eq!(parsed.render(), text);
    assert_eq!(parsed.rows[1].1[1], None);
    let fv = parsed.rows[0].1[0].unwrap();
    assert!((fv.mean - 0.91).abs() < 1e-6 && (fv.std - 0.01).abs() < 1e-6 && fv.count == 3);
}

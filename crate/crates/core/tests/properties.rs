use irt_core::advi::{build_transforms, flatten, unflatten, GrmModel, Model};
use irt_core::diff::{self, record, Real};
use irt_core::encoder::encode_features;
use irt_core::eval::{self, PointwiseLogLik};
use irt_core::factor::{partition_by_cutoff, varimax_with_trace, LoadingMatrix};
use irt_core::grm::{self, Hyper, ItemView, ModelShape, ResponseMatrix};
use irt_core::io::Artifact;
use proptest::prelude::*;

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn thresholds(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, 1..max).prop_map(sorted)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gradients_are_linear(x in -2.0..2.0f64, y in 0.1..3.0f64, a in -3.0..3.0f64, b in -3.0..3.0f64) {
        fn f<R: Real>(v: &[R]) -> R { v[0].sigmoid() * v[1] + v[1].ln() }
        fn g<R: Real>(v: &[R]) -> R { (v[0] * v[1]).exp() - v[0].square() }
        let gf = record(&[x, y], |v| f(v)).unwrap().backward().unwrap().into_vec();
        let gg = record(&[x, y], |v| g(v)).unwrap().backward().unwrap().into_vec();
        let gc = record(&[x, y], |v| f(v) * a + g(v) * b).unwrap().backward().unwrap().into_vec();
        for k in 0..2 {
            let want = a * gf[k] + b * gg[k];
            prop_assert!((gc[k] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn primitives_compose_with_chain_rule(x in 0.2..2.0f64, op in 0usize..11) {
        // q(x) = 0.7x + 0.3 keeps every primitive inside its domain
        struct F(usize);
        impl diff::ScalarFn for F {
            fn eval<R: Real>(&self, v: &[R]) -> R {
                let q = v[0] * 0.7 + 0.3;
                match self.0 {
                    0 => q.exp(),
                    1 => q.ln(),
                    2 => q.ln_1p(),
                    3 => q.sigmoid(),
                    4 => q.log_sigmoid(),
                    5 => q.log1mexp(),
                    6 => q.square(),
                    7 => q.sqrt(),
                    8 => R::log_sum_exp(&[q, q * 2.0, -q]),
                    9 => R::sum(&[q, q.square(), q / 3.0]),
                    _ => R::dot(&[q, q.exp()], &[q.sqrt(), q]),
                }
            }
        }
        let err = diff::check_gradients(&F(op), &[x], 1e-5).unwrap();
        prop_assert!(err < 1e-6, "op {} err {}", op, err);
    }

    #[test]
    fn recording_is_deterministic(x in prop::collection::vec(-3.0..3.0f64, 1..8)) {
        let run = || {
            let t = record(&x, |v| Real::log_sum_exp(v) * v[0].sigmoid()).unwrap();
            (t.value().to_bits(), t.backward().unwrap().into_vec().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn category_probabilities_sum_to_one(theta in -8.0..8.0f64, lambda in 0.0..6.0f64, t in thresholds(9)) {
        let total: f64 = (1..=t.len() + 1).map(|j| grm::grm_cat_prob(theta, lambda, &t, j).unwrap()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cumulative_probability_rises_with_trait(lambda in 0.01..5.0f64, t in thresholds(6), j in 2usize..6) {
        let j = j.min(t.len() + 1);
        let upper = |theta: f64| -> f64 {
            (j..=t.len() + 1).map(|c| grm::grm_cat_prob(theta, lambda, &t, c).unwrap()).sum()
        };
        let grid: Vec<f64> = (0..=40).map(|k| -5.0 + 0.25 * k as f64).collect();
        for w in grid.windows(2) {
            prop_assert!(upper(w[1]) >= upper(w[0]) - 1e-12);
        }
    }

    #[test]
    fn weights_form_a_scale_free_simplex(
        lam in prop::collection::vec(0.0..5.0f64, 1..6).prop_filter("nonzero", |v| v.iter().any(|x| *x > 1e-6)),
        c in 0.01..100.0f64,
        nu in 0.2..3.0f64,
    ) {
        let w = grm::domain_weights(&lam, nu).unwrap();
        let scaled: Vec<f64> = lam.iter().map(|l| l * c).collect();
        let ws = grm::domain_weights(&scaled, nu).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in w.iter().zip(&ws) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_dimension_mixture_is_the_plain_model(theta in -5.0..5.0f64, lambda in 0.01..5.0f64, t in thresholds(8), j in 1usize..9) {
        let j = j.min(t.len() + 1);
        let th = vec![t.clone()];
        let item = ItemView { lambda: &[lambda], thresholds: &th };
        let mix = grm::mixture_response_logprob(j, &[theta], item, 1.0).unwrap();
        prop_assert_eq!(mix.to_bits(), grm::grm_log_cat_prob(theta, lambda, &t, j).to_bits());
    }

    #[test]
    fn every_parameter_reaches_the_density(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (p, i, d) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3));
        let cells = (0..p * i).map(|_| Some(rng.random_range(1..=3))).collect();
        let data = ResponseMatrix::new(p, i, cells, vec![3; i]).unwrap();
        let model = GrmModel::new(&data, d, Hyper::standard(d)).unwrap();
        let u: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let base = model.log_density(&u);
        for k in 0..u.len() {
            let mut v = u.clone();
            v[k] += 0.1;
            prop_assert!(model.log_density(&v) != base, "coordinate {} is dead", k);
        }
    }

    #[test]
    fn transforms_invert(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let shape = ModelShape {
            persons: rng.random_range(1..4),
            items: rng.random_range(1..4),
            dims: rng.random_range(1..4),
            categories: vec![rng.random_range(2..6); 3],
        };
        let shape = ModelShape { categories: shape.categories[..shape.items].to_vec(), ..shape };
        let t = build_transforms(&shape);
        let u: Vec<f64> = (0..t.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = t.forward(&u);
        let params = unflatten(&shape, &x);
        prop_assert!(params.validate().is_ok());
        prop_assert_eq!(flatten(&params), x.clone());
        let back = t.inverse(&x).unwrap();
        for (a, b) in u.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lppd_matches_naive_sum(p in 1usize..10, s in 1usize..20, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..p * s).map(|_| rng.random_range(-5.0..0.0)).collect();
        let naive: f64 = v.chunks(s).map(|r| (r.iter().map(|x| x.exp()).sum::<f64>() / s as f64).ln()).sum();
        let m = PointwiseLogLik::new(p, s, v).unwrap();
        prop_assert!((eval::lppd(&m).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn pwaic_is_nonnegative_and_zero_only_for_constant_rows(p in 1usize..8, s in 2usize..12, seed in any::<u64>(), constant in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..p)
            .flat_map(|_| {
                let c: f64 = rng.random_range(-5.0..0.0);
                (0..s).map(|_| if constant { c } else { rng.random_range(-5.0..0.0) }).collect::<Vec<_>>()
            })
            .collect();
        let pw = eval::pwaic(&PointwiseLogLik::new(p, s, v).unwrap()).unwrap();
        prop_assert!(pw >= 0.0);
        prop_assert_eq!(pw == 0.0, constant);
    }

    #[test]
    fn waic_ignores_order_of_persons_and_samples(p in 2usize..8, s in 2usize..10, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..p * s).map(|_| rng.random_range(-5.0..0.0)).collect();
        let mut rows: Vec<Vec<f64>> = v.chunks(s).map(<[f64]>::to_vec).collect();
        let a = eval::waic(&PointwiseLogLik::new(p, s, v).unwrap()).unwrap();
        rows.shuffle(&mut rng);
        let mut cols: Vec<usize> = (0..s).collect();
        cols.shuffle(&mut rng);
        let w: Vec<f64> = rows.iter().flat_map(|r| cols.iter().map(|&c| r[c]).collect::<Vec<_>>()).collect();
        let b = eval::waic(&PointwiseLogLik::new(p, s, w).unwrap()).unwrap();
        for (x, y) in [(a.lppd, b.lppd), (a.pwaic, b.pwaic), (a.waic, b.waic), (a.se, b.se)] {
            prop_assert!((x - y).abs() < 1e-10 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn varimax_is_an_orthogonal_rotation(items in 3usize..10, dims in 2usize..4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..items * dims).map(|_| rng.random_range(-0.7..0.7)).collect();
        let l = LoadingMatrix::new(items, dims, v).unwrap();
        let r = varimax_with_trace(&l);
        let rot = &r.rotation;
        for a in 0..dims {
            for b in 0..dims {
                let dot: f64 = (0..dims).map(|k| rot[k * dims + a] * rot[k * dims + b]).sum();
                let eye = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - eye).abs() < 1e-8);
            }
        }
        for i in 0..items {
            for d in 0..dims {
                let want: f64 = (0..dims).map(|k| l.get(i, k) * rot[k * dims + d]).sum();
                prop_assert!((r.loadings.get(i, d) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn partition_ignores_column_signs(items in 2usize..10, dims in 1usize..4, seed in any::<u64>(), flips in any::<u8>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..items * dims).map(|_| rng.random_range(-1.0..1.0)).collect();
        let flipped: Vec<f64> = v
            .iter()
            .enumerate()
            .map(|(k, x)| if flips >> (k % dims) & 1 == 1 { -x } else { *x })
            .collect();
        let a = partition_by_cutoff(&LoadingMatrix::new(items, dims, v).unwrap(), 0.4).unwrap();
        let b = partition_by_cutoff(&LoadingMatrix::new(items, dims, flipped).unwrap(), 0.4).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn feature_width_is_categories_plus_flags(cats in prop::collection::vec(2usize..9, 1..10), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Option<usize>> = cats.iter().map(|&j| if rng.random::<bool>() { Some(rng.random_range(1..=j)) } else { None }).collect();
        let f = encode_features(&x, &cats).unwrap();
        prop_assert_eq!(f.len(), cats.iter().sum::<usize>() + cats.len());
        prop_assert_eq!(f.iter().sum::<f64>() as usize, cats.len());
    }

    #[test]
    fn artifacts_round_trip_byte_for_byte(v in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..20)) {
        let a = Artifact::new("values", v).unwrap();
        let bytes = a.to_bytes().unwrap();
        let b: Artifact<Vec<f64>> = Artifact::from_slice(&bytes, "values").unwrap();
        prop_assert_eq!(b.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn communalities_stay_in_unit_interval() {
    use irt_core::factor::{correlation_matrix, principal_axis};
    use irt_core::sim::{simulate, TruthSpec};
    for seed in 0..10 {
        let spec = TruthSpec { persons: 300, items: 8, dims: 2, ..TruthSpec::default() };
        let (_, data) = simulate(&spec, seed).unwrap();
        let l = principal_axis(&correlation_matrix(&data).unwrap(), 2).unwrap();
        for h in l.communalities() {
            assert!((0.0..=1.0 + 1e-6).contains(&h), "{h}");
        }
    }
}

use proptest::prelude::*;
use vfmodel_core::distributions::{sample_truncated_normal, RngStream};
use vfmodel_core::evaluation::{compute_dic, deviance, RecoveredDraw, RecoveredEffects};
use vfmodel_core::linalg::Matrix2;
use vfmodel_core::model::{censor, linear_predictor, loglik_individual, residual_sd, UnitIndex};
use vfmodel_core::stage1::PoolDraw;
use vfmodel_core::{
    CovarianceSpec, Design, Eye, FixedEffects, IndividualData, ModelVariant, Observation, RandomEffects,
    VarianceParams,
};

fn spd() -> impl Strategy<Value = Matrix2> {
    (0.05f64..50.0, -0.99f64..0.99, 0.05f64..50.0).prop_map(|(a, r, b)| {
        let c = r * (a * b).sqrt();
        Matrix2::new(a, c, c, b)
    })
}

/// One eye, two hemifields of two locations, three visits.
fn individual(values: &[f64]) -> IndividualData {
    let mut obs = Vec::new();
    let mut k = 0;
    for v in 1..=3u32 {
        for h in 1..=2u8 {
            for l in 1..=2u8 {
                obs.push(Observation::from_reading(0, Eye::Os, h, l, v, 0.5 * (v - 1) as f64, values[k]).unwrap());
                k += 1;
            }
        }
    }
    IndividualData::new("Q", obs).unwrap()
}

fn readings() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.5f64..40.0], 12)
}

fn effects(d: &Design) -> impl Strategy<Value = RandomEffects> {
    let width = d.effect_names(true).len();
    let d = d.clone();
    prop::collection::vec(-3.0f64..3.0, width).prop_map(move |v| RandomEffects::from_flat(&d, [0.0, 0.0], &v, true).unwrap())
}

fn pool_draw(variant: ModelVariant) -> impl Strategy<Value = PoolDraw> {
    (15.0f64..25.0, -1.0f64..0.5, 0.5f64..20.0, 0.2f64..3.0, 2.0f64..3.0, -0.1f64..-0.01).prop_map(
        move |(a0, a1, s2, s2phi, b0, b1)| PoolDraw {
            alpha: [a0, a1],
            beta_star: variant.has_variance_link().then_some([b0, b1]),
            c_gamma: [1.0, 0.0, 0.1],
            c_eta: [1.0, 0.1, 0.1],
            c_lambda: [2.0, -0.1, 0.2],
            sigma2_phi: variant.has_visit_effects().then_some(s2phi),
            sigma2: (!variant.has_variance_link()).then_some(s2),
        },
    )
}

fn variant() -> impl Strategy<Value = ModelVariant> {
    prop_oneof![Just(ModelVariant::Model1), Just(ModelVariant::Model2), Just(ModelVariant::Model3)]
}

proptest! {
    #[test]
    fn censor_is_idempotent(y in -1e6f64..1e6) {
        prop_assert_eq!(censor(censor(y)), censor(y));
        prop_assert!(censor(y) >= 0.0);
    }

    #[test]
    fn cholesky_round_trip(m in spd()) {
        let l = m.cholesky().unwrap();
        prop_assert!(l.0[0][0] > 0.0 && l.0[1][1] > 0.0 && l.0[0][1] == 0.0);
        prop_assert!(l.lower_gram().max_abs_diff(&m) < 1e-12);
        let spec = CovarianceSpec::new(m).unwrap();
        let back = CovarianceSpec::from_cholesky(spec.cholesky_elements()).unwrap();
        prop_assert!(back.matrix().max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn truncated_draws_respect_the_bound(mu in -50.0f64..50.0, sd in 0.01f64..30.0, upper in -5.0f64..5.0, seed in 0u64..1000) {
        let mut rng = RngStream::new(seed, 0).rng();
        for _ in 0..20 {
            let x = sample_truncated_normal(mu, sd, upper, &mut rng);
            prop_assert!(x < upper && x.is_finite());
        }
    }

    #[test]
    fn linked_spread_falls_with_the_mean(b0 in -2.0f64..4.0, b1 in -0.5f64..-1e-3, mu in -10.0f64..50.0, step in 1e-3f64..10.0) {
        let var = VarianceParams::linked(b0, b1);
        prop_assert!(residual_sd(mu + step, &var, ModelVariant::Model3) < residual_sd(mu, &var, ModelVariant::Model3));
    }

    #[test]
    fn predictor_is_affine_in_time(values in readings(), seed in any::<u64>(), a in 0.0f64..10.0, b in 0.0f64..10.0, beta1 in -2.0f64..2.0) {
        let d = Design::new(&individual(&values)).unwrap();
        let width = d.effect_names(true).len();
        let mut rng = RngStream::new(seed, 0).rng();
        let flat: Vec<f64> = (0..width).map(|_| vfmodel_core::distributions::std_normal(&mut rng)).collect();
        let fx = RandomEffects::from_flat(&d, [1.0, -0.2], &flat, true).unwrap();
        let fixed = FixedEffects { beta0: 20.0, beta1 };
        let unit = UnitIndex { location: 1, visit: 2 };
        let slope = beta1 + fx.alpha[1] + fx.gamma[0][1] + fx.eta[d.locations[1].hemifield][1] + fx.lambda[1][1];
        let mu = |t| linear_predictor(&fixed, &fx, &d, unit, t, ModelVariant::Model2).unwrap();
        prop_assert!((mu(a + b) - mu(a) - b * slope).abs() < 1e-10 * (1.0 + mu(a).abs()));
    }

    #[test]
    fn likelihood_ignores_observation_order(values in readings(), perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(), variant in variant()) {
        let data = individual(&values);
        let mut shuffled = data.clone();
        shuffled.observations = perm.iter().map(|&i| data.observations[i].clone()).collect();
        let shuffled = IndividualData::new("Q", shuffled.observations).unwrap();
        let (d, e) = (Design::new(&data).unwrap(), Design::new(&shuffled).unwrap());
        let var = if variant.has_variance_link() { VarianceParams::linked(2.8, -0.08) } else { VarianceParams::homoscedastic(5.0) };
        let mut fx = RandomEffects::zeros(&d);
        fx.alpha = [18.0, -0.4];
        let mut fe = RandomEffects::zeros(&e);
        fe.alpha = fx.alpha;
        let a = loglik_individual(&d, &FixedEffects::ZERO, &fx, &var, variant).unwrap();
        let b = loglik_individual(&e, &FixedEffects::ZERO, &fe, &var, variant).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }
}

fn dic_case() -> impl Strategy<Value = (Vec<f64>, ModelVariant, Vec<(PoolDraw, RandomEffects)>)> {
    (readings(), variant()).prop_flat_map(|(values, variant)| {
        let d = Design::new(&individual(&values)).unwrap();
        let states = prop::collection::vec((pool_draw(variant), effects(&d)), 1..8);
        (Just(values), Just(variant), states)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dic_identities_hold((values, variant, states) in dic_case()) {
        let d = Design::new(&individual(&values)).unwrap();
        let draws: Vec<RecoveredDraw> = states
            .iter()
            .enumerate()
            .map(|(k, (theta, fx))| {
                let mut effects = fx.clone();
                effects.alpha = theta.alpha;
                RecoveredDraw { draw: k, theta: theta.clone(), effects }
            })
            .collect();
        let rec = RecoveredEffects { individual_id: "Q".into(), variant, draws, skipped: Vec::new() };
        let report = compute_dic(std::slice::from_ref(&d), variant, std::slice::from_ref(&rec)).unwrap();
        prop_assert_eq!(report.p_d, report.dbar - report.dhat);
        prop_assert_eq!(report.dic, report.dbar + report.p_d);
        prop_assert_eq!(report.draws, states.len());
        let mean_dev = states
            .iter()
            .map(|(t, fx)| deviance(std::slice::from_ref(&d), variant, &[(t, fx)]).unwrap())
            .sum::<f64>()
            / states.len() as f64;
        prop_assert!((report.dbar - mean_dev).abs() < 1e-9 * mean_dev.abs().max(1.0));
        if states.len() == 1 {
            prop_assert!(report.p_d.abs() < 1e-8 * report.dbar.abs().max(1.0));
        }
    }
}

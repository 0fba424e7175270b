use proptest::prelude::*;
use wisp_core::incentive::{self, EnvState, PricingGrid, PricingStrategy, QosMappings};

fn coarse() -> PricingGrid {
    PricingGrid {
        v_r_max: 60.0,
        v_r_step: 2.0,
        i_b_max: 30.0,
        i_b_step: 3.0,
    }
}

fn env() -> impl Strategy<Value = EnvState> {
    (10.0f64..80.0, 20.0f64..80.0, 4u32..60, 0.0f64..1500.0, 1u32..7).prop_map(|(v_c, v_m, e_t, u_th, max_aps)| EnvState {
        v_c,
        v_m,
        e_t,
        u_th,
        max_aps,
        ..EnvState::economy_default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn best_response_ignores_fixed_payment(env in env(), v_r in 0.0f64..60.0, i_b in 0.0f64..30.0, shift in 0.0f64..500.0) {
        let a = incentive::vsp_best_response(&PricingStrategy { v_r, i_b }, &env);
        let b = incentive::vsp_best_response(&PricingStrategy { v_r, i_b: i_b + shift }, &env);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn oracle_outcomes_pass_audit(env in env()) {
        if let Some(o) = incentive::oracle_optimal_pricing(&env, &coarse()).unwrap() {
            prop_assert!(incentive::audit(&o, &env).is_empty());
            prop_assert!(o.u_vsp >= env.u_th && o.allocation.total() <= env.e_t);
        }
    }

    #[test]
    fn oracle_user_utility_grows_with_v_m(env in env(), bump in 0.0f64..20.0) {
        let richer = EnvState { v_m: env.v_m + bump, ..env.clone() };
        let a = incentive::oracle_optimal_pricing(&env, &coarse()).unwrap();
        let b = incentive::oracle_optimal_pricing(&richer, &coarse()).unwrap();
        if let Some(a) = a {
            prop_assert!(b.unwrap().u_us >= a.u_us);
        }
    }

    #[test]
    fn mappings_are_monotone_from_zero(n in 0u32..40) {
        let m = QosMappings::calibrated();
        prop_assert_eq!(m.perception_accuracy(0), 0.0);
        prop_assert_eq!(m.brisque_gain(0) + m.tv_gain(0), 0.0);
        prop_assert!(m.perception_accuracy(n + 1) >= m.perception_accuracy(n));
        prop_assert!(m.brisque_gain(n + 1) >= m.brisque_gain(n));
        prop_assert!(m.tv_gain(n + 1) >= m.tv_gain(n));
    }
}

#[test]
fn default_economy_prices_in_observed_band() {
    let env = EnvState::economy_default();
    let o = incentive::oracle_optimal_pricing(&env, &PricingGrid::default()).unwrap().unwrap();
    assert!((30.0..=50.0).contains(&o.strategy.v_r), "{:?}", o.strategy);
    assert!((10.0..=20.0).contains(&o.strategy.i_b), "{:?}", o.strategy);
}

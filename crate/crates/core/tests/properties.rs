mod common;

use common::{full_graph, game_strategy, victim_window};
use dpnash::{
    adjacent, beta_to_demand, build_iteration_matrix, dp_ratio_check, nash_equilibrium, payoff,
    recover_dispatch, sensitivity, social_optimum, step_size_bound, total_cost, AttackModel,
    BidProfile, MarketParams, SeekEngine,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_round_trips_to_demand(game in game_strategy()) {
        let coeffs = game.coefficients().unwrap();
        for (i, p) in game.prosumers.iter().enumerate() {
            let d = beta_to_demand(coeffs.beta()[i], p.c, &game.market);
            prop_assert!((d - p.d).abs() <= 1e-12 * p.d.max(1.0));
        }
    }

    #[test]
    fn equilibrium_is_a_best_response(game in game_strategy(), delta in 1e-3f64..5.0) {
        let coeffs = game.coefficients().unwrap();
        let b = nash_equilibrium(&coeffs).unwrap();
        for i in 0..game.count() {
            let base = payoff(i, &b, &coeffs);
            for s in [-delta, delta] {
                let mut dev = b.clone();
                dev.0[i] += s;
                // Concave with curvature 1/2: the loss is exactly s²/2.
                let loss = base - payoff(i, &dev, &coeffs);
                prop_assert!((loss - 0.5 * s * s).abs() <= 1e-9 * base.abs().max(1.0));
            }
        }
    }

    #[test]
    fn dispatch_is_feasible(game in game_strategy(), bids in prop::collection::vec(-200.0f64..200.0, 8)) {
        let n = game.count();
        let b = BidProfile(bids[..n].to_vec());
        let dispatch = recover_dispatch(&b, &game.prosumers, &game.market).unwrap();
        let scale: f64 = bids.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!(dispatch.q.iter().sum::<f64>().abs() <= 1e-12 * scale);
        for (k, p) in game.prosumers.iter().enumerate() {
            prop_assert!((dispatch.p[k] + dispatch.q[k] - p.d).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn social_optimum_dominates(game in game_strategy(), bids in prop::collection::vec(-200.0f64..200.0, 8)) {
        let n = game.count();
        let social = social_optimum(&game.prosumers, &game.market).unwrap();
        let best = total_cost(&social, &game.prosumers);
        let coeffs = game.coefficients().unwrap();
        let eq = recover_dispatch(&nash_equilibrium(&coeffs).unwrap(), &game.prosumers, &game.market).unwrap();
        let any = recover_dispatch(&BidProfile(bids[..n].to_vec()), &game.prosumers, &game.market).unwrap();
        prop_assert!(best <= total_cost(&eq, &game.prosumers) * (1.0 + 1e-12));
        prop_assert!(best <= total_cost(&any, &game.prosumers) * (1.0 + 1e-12));
        let total: f64 = game.demands().iter().sum();
        prop_assert!((social.p.iter().sum::<f64>() - total).abs() <= 1e-9 * total);
    }

    #[test]
    fn sensitivity_grows_with_market(game in game_strategy(), factor in 1.01f64..10.0) {
        let a = sensitivity(&game.prosumers, &game.market).unwrap();
        let stiffer = MarketParams::new(game.market.a * factor, game.count()).unwrap();
        let b = sensitivity(&game.prosumers, &stiffer).unwrap();
        prop_assert!(b > a);
        // Bounded by I/(I−1) as a → ∞.
        let n = game.count() as f64;
        prop_assert!(b < n / (n - 1.0));
    }

    #[test]
    fn beta_gap_bounded_by_sensitivity(game in game_strategy(), who in 0usize..8, shift in -1.0f64..1.0, eps in 0.05f64..5.0) {
        let i = who % game.count();
        let mu = 1.0;
        let mut moved = game.clone();
        moved.prosumers[i].d += shift * mu;
        prop_assert!(adjacent(&game.demands(), &moved.demands(), mu).unwrap());
        let beta = game.coefficients().unwrap().beta().clone();
        let beta2 = moved.coefficients().unwrap().beta().clone();
        let a = sensitivity(&game.prosumers, &game.market).unwrap();
        let gap: f64 = beta.iter().zip(beta2.iter()).map(|(x, y)| (x - y).abs()).sum();
        prop_assert!(gap <= a * mu * (1.0 + 1e-12));
        let sigma = a * mu / eps;
        prop_assert!(dp_ratio_check(beta.as_slice(), beta2.as_slice(), sigma, eps).unwrap().passes);
    }

    #[test]
    fn admissible_steps_contract(game in game_strategy(), frac in 0.05f64..0.99) {
        let coeffs = game.coefficients().unwrap();
        let graph = full_graph(game.count());
        let bound = step_size_bound(&coeffs, &graph.spectrum()).unwrap();
        let m = build_iteration_matrix(&coeffs, &graph, frac * bound).unwrap().m;
        prop_assert!(m < 1.0, "m = {m} at alpha = {}", frac * bound);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noiseless_attack_is_exact(game in game_strategy(), victim in 0usize..8, start in 0usize..200) {
        let n = game.count();
        let victim = victim % n;
        let coeffs = game.coefficients().unwrap();
        let graph = full_graph(n);
        let alpha = 0.9 * step_size_bound(&coeffs, &graph.spectrum()).unwrap();
        let len = n + 1;
        let model = AttackModel::new(victim, len, &coeffs, &game.costs(), &game.market, &graph, alpha).unwrap();
        let mut engine = SeekEngine::new(&coeffs, &graph, alpha, None, None).unwrap();
        let rows = victim_window(&mut engine, victim, start, len);
        let res = model.infer(&rows).unwrap();
        let beta = coeffs.beta()[victim];
        prop_assert!(res.determined);
        prop_assert!((res.beta_hat - beta).abs() <= 1e-6 * beta.abs().max(1.0),
            "beta_hat {} vs {}", res.beta_hat, beta);
    }
}

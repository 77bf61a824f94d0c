use proptest::prelude::*;
use rand::Rng;

use sophia_core::optimizer::{
    check_bias_bound, engineered_pair, estimate_objective_is, estimate_objective_plain, exact_gradient,
    exact_objective, hashed_reward, policy_gradient, ToyRecord,
};
use sophia_core::policy::ToyPolicy;
use sophia_core::rng::seeded;

fn random_policy(seed: u64, scale: f64) -> ToyPolicy {
    let shape = ToyPolicy::new(3, 3, 0, 2).unwrap();
    let mut rng = seeded(seed);
    let params = (0..shape.param_len()).map(|_| rng.random_range(-scale..scale)).collect();
    shape.with_params(params).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dropping_the_ratio_costs_at_most_delta(seed in any::<u64>(), spread in 0.01f64..3.0) {
        let mu = random_policy(seed, 1.0);
        let pi = random_policy(seed.wrapping_add(1), spread);
        let reward = hashed_reward(seed);
        let report = check_bias_bound(&pi, &mu, &reward, &[]).unwrap();

        // independent sums over each policy's own enumeration
        let g_is: f64 = pi.enumerate(&[]).unwrap().iter().map(|(y, p)| p * reward(y)).sum();
        let g_1: f64 = mu.enumerate(&[]).unwrap().iter().map(|(y, p)| p * reward(y)).sum();
        prop_assert!((report.g_is - g_is).abs() < 1e-12);
        prop_assert!((report.g_1 - g_1).abs() < 1e-12);
        prop_assert!(report.bound_satisfied);
        prop_assert!((g_is - g_1).abs() <= report.delta + 1e-12);
    }

    #[test]
    fn engineered_pairs_respect_their_delta(seed in any::<u64>(), delta in 0.001f64..0.3) {
        let reward = hashed_reward(seed);
        let (mu, pi) = engineered_pair(3, 3, 2, delta, seed, &reward).unwrap();
        let report = check_bias_bound(&pi, &mu, &reward, &[]).unwrap();
        prop_assert!((report.delta - delta).abs() < 1e-9);
        prop_assert!(report.gap() <= delta + 1e-12);
    }

    #[test]
    fn weighted_gradient_is_the_true_gradient(seed in any::<u64>()) {
        let mu = random_policy(seed, 1.0);
        let pi = random_policy(seed.wrapping_add(7), 1.0);
        let reward = hashed_reward(seed);
        let weighted = exact_gradient(&pi, &mu, &reward, &[], true).unwrap();
        let h = 1e-6;
        for (i, w) in weighted.iter().enumerate() {
            let mut plus = pi.clone();
            plus.params_mut()[i] += h;
            let mut minus = pi.clone();
            minus.params_mut()[i] -= h;
            let fd = (exact_objective(&plus, &reward, &[]).unwrap() - exact_objective(&minus, &reward, &[]).unwrap())
                / (2.0 * h);
            prop_assert!((w - fd).abs() < 1e-7, "param {}: {} vs {}", i, w, fd);
        }
        // on-policy the ratio is one and both estimators agree
        let on = exact_gradient(&pi, &pi, &reward, &[], true).unwrap();
        let plain = exact_gradient(&pi, &pi, &reward, &[], false).unwrap();
        prop_assert!(on.iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn batch_gradient_is_mean_reward_weighted_score(seed in any::<u64>(), n in 1usize..12) {
        let pi = random_policy(seed, 1.0);
        let mut rng = seeded(seed ^ 1);
        let records: Vec<ToyRecord> = (0..n)
            .map(|_| ToyRecord {
                context: vec![],
                sequence: pi.sample(&[], &mut rng).unwrap(),
                reward: f64::from(rng.random_range(0..2u8)),
            })
            .collect();
        let got = policy_gradient(&records, &pi).unwrap();
        let mut want = vec![0.0; pi.param_len()];
        for r in &records {
            for (w, g) in want.iter_mut().zip(pi.grad_log_prob(&[], &r.sequence).unwrap()) {
                *w += r.reward * g / n as f64;
            }
        }
        prop_assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
        prop_assert!((estimate_objective_is(&records, &pi, &pi).unwrap() - estimate_objective_plain(&records).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ratio_free_gradient_is_unbiased_on_policy() {
    // Monte Carlo mean of R * score under mu approaches the exact gradient.
    let mu = random_policy(3, 1.0);
    let reward = hashed_reward(3);
    let exact = exact_gradient(&mu, &mu, &reward, &[], false).unwrap();
    let mut rng = seeded(4);
    let draws = 20_000;
    let records: Vec<ToyRecord> = (0..draws)
        .map(|_| {
            let sequence = mu.sample(&[], &mut rng).unwrap();
            let reward = reward(&sequence);
            ToyRecord {
                context: vec![],
                sequence,
                reward,
            }
        })
        .collect();
    let estimate = policy_gradient(&records, &mu).unwrap();
    for (e, x) in estimate.iter().zip(&exact) {
        // |R * score| <= 3 componentwise, so the standard error is at most
        // 3/sqrt(draws); allow ten of them
        assert!((e - x).abs() < 10.0 * 3.0 / (draws as f64).sqrt(), "{e} vs {x}");
    }
}

use brcsgan_core::discriminator::{Discriminator, DiscriminatorConfig};
use brcsgan_core::generator::{Generator, GeneratorConfig};
use brcsgan_core::numerics::{Optimizer, OptimizerSettings, Tensor};
use brcsgan_core::reward::{
    enumerate_sequences, exact_expected_gradient, exact_objective, exact_prefix_value, policy_gradient,
    policy_gradient_step, run_episode, teacher_forcing_loss, terminal_reward, RewardConfig,
};
use brcsgan_core::rng::RngStream;
use brcsgan_core::{Error, Token};

const EOS: Token = 2;

fn tiny_gen(seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        vocab_size: 6,
        embed_dim: 3,
        hidden_dim: 4,
        attention_dim: 3,
        readout_dim: 3,
        t_max: 3,
    };
    Generator::new(cfg, seed).unwrap()
}

fn tiny_disc(seed: u64) -> Discriminator {
    let cfg = DiscriminatorConfig {
        vocab_size: 6,
        embed_dim: 3,
        windows: vec![1, 2],
        kernels_per_window: 2,
        seq_len: 3,
        bn_momentum: 0.9,
        bn_eps: 1e-5,
    };
    Discriminator::new(cfg, seed).unwrap()
}

/// Zero output transform: every pair scores exactly 0.5.
fn neutral_disc() -> Discriminator {
    let mut d = tiny_disc(0);
    for name in ["disc.v", "disc.v_b"] {
        let id = d.params().id(name).unwrap();
        let shape = d.params().value(id).shape().to_vec();
        *d.params_mut().value_mut(id) = Tensor::zeros(&shape);
    }
    d
}

fn reward_cfg(lambda: f64, length_normalize: bool) -> RewardConfig {
    RewardConfig {
        lambda,
        baseline: 0.5,
        rollouts: 4,
        t_max: 3,
        length_normalize,
    }
}

#[test]
fn zero_reward_leaves_the_generator_unchanged() {
    let mut g = tiny_gen(1);
    let before = g.params().flat_values();
    let disc = neutral_disc();
    let pairs: Vec<(&[Token], &[Token])> = vec![(&[4, 5], &[5, EOS]), (&[5], &[4, 4, EOS])];
    let mut opt = Optimizer::new(OptimizerSettings::sgd(0.5));
    let mut rng = RngStream::new(3);
    let diag = policy_gradient_step(&mut g, &disc, &pairs, &reward_cfg(1.0, true), &mut opt, &mut rng).unwrap();
    assert_eq!(diag.mean_abs_reward, 0.0);
    assert_eq!(g.params().flat_values(), before);
}

#[test]
fn teacher_forcing_with_unit_reward_is_the_mle_gradient() {
    let g = tiny_gen(2);
    let pairs: Vec<(&[Token], &[Token])> = vec![(&[4, 5], &[5, EOS]), (&[5, 5, 4], &[4, EOS]), (&[4], &[EOS])];
    let (tf_loss, tf) = teacher_forcing_loss(&g, &pairs, 1.0).unwrap();
    let (mle_loss, mle) = g.mle_loss(&pairs).unwrap();
    assert!((tf_loss - mle_loss).abs() < 1e-15);
    for (a, b) in tf.flatten(g.params()).iter().zip(mle.flatten(g.params())) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn episodes_carry_one_reward_per_token() {
    let g = tiny_gen(3);
    let d = tiny_disc(3);
    let cfg = reward_cfg(0.7, true);
    let mut rng = RngStream::new(9);
    for _ in 0..20 {
        let ep = run_episode(&g, &d, &[4, 5], &[5, 4, EOS], &cfg, &mut rng).unwrap();
        let n = ep.tokens.len();
        assert!((1..=3).contains(&n));
        assert_eq!(ep.rewards.len(), n);
        assert_eq!(ep.rollouts.len(), n - 1);
        for (t, rolls) in ep.rollouts.iter().enumerate() {
            assert_eq!(rolls.len(), cfg.rollouts);
            for r in rolls {
                assert!(r.starts_with(&ep.tokens[..t + 1]) && r.len() <= 3);
            }
        }
        let last = terminal_reward(&d, &[4, 5], &ep.tokens, &[5, 4, EOS], &cfg).unwrap();
        assert_eq!(*ep.rewards.last().unwrap(), last);
    }
}

#[test]
fn rewards_stay_inside_the_mixture_range() {
    let g = tiny_gen(4);
    let d = tiny_disc(4);
    let mut rng = RngStream::new(1);
    for lambda in [0.0, 0.3, 0.7, 1.0] {
        let cfg = reward_cfg(lambda, true);
        let (lo, hi) = (-lambda * cfg.baseline, lambda * (1.0 - cfg.baseline) + (1.0 - lambda));
        let pairs: Vec<(&[Token], &[Token])> = vec![(&[4, 5], &[5, EOS]), (&[5, 4], &[4, 5, EOS])];
        let (_, eps, _) = policy_gradient(&g, &d, &pairs, &cfg, &mut rng).unwrap();
        for r in eps.iter().flat_map(|e| &e.rewards) {
            assert!(*r >= lo - 1e-12 && *r <= hi + 1e-12, "lambda {lambda}: {r}");
        }
    }
}

#[test]
fn exact_gradient_matches_finite_differences_of_the_objective() {
    for seed in 0..3 {
        let g = tiny_gen(seed);
        let d = tiny_disc(seed);
        let cfg = reward_cfg(0.7, false);
        let (src, reference): (&[Token], &[Token]) = (&[4, 5], &[5, EOS]);
        let exact = exact_expected_gradient(&g, &d, src, reference, &cfg).unwrap();
        let objective = |probe: &Generator| exact_objective(probe, &d, src, reference, &cfg).unwrap().value;
        let h = 1e-5;
        let ids: Vec<_> = g.params().ids().collect();
        let mut k = 0;
        for id in ids {
            for i in 0..g.params().value(id).data().len() {
                let mut plus = g.clone();
                plus.params_mut().value_mut(id).data_mut()[i] += h;
                let mut minus = g.clone();
                minus.params_mut().value_mut(id).data_mut()[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!((fd - exact[k]).abs() < 1e-6, "seed {seed}, {}[{i}]: {fd} vs {}", g.params().name(id), exact[k]);
                k += 1;
            }
        }
        assert_eq!(k, exact.len());
    }
}

#[test]
fn constant_reward_has_zero_exact_gradient() {
    let g = tiny_gen(5);
    let cfg = RewardConfig {
        baseline: 0.2,
        ..reward_cfg(1.0, false)
    };
    let grad = exact_expected_gradient(&g, &neutral_disc(), &[4, 5], &[4, EOS], &cfg).unwrap();
    assert!(grad.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn empty_prefix_value_is_the_objective() {
    let g = tiny_gen(6);
    let obj = exact_objective(&g, &tiny_disc(6), &[5, 4], &[4, 4, EOS], &reward_cfg(0.5, true)).unwrap();
    assert!((exact_prefix_value(&obj, &[]).unwrap() - obj.value).abs() < 1e-12);
    let mass: f64 = obj.sequences.iter().map(|s| s.1).sum();
    assert!((mass - 1.0).abs() < 1e-12);
}

#[test]
fn enumeration_refuses_large_spaces() {
    let g = tiny_gen(0);
    assert!(matches!(enumerate_sequences(&g, &[4], 4), Err(Error::SpaceTooLarge(_))));
    let cfg = GeneratorConfig {
        vocab_size: 7,
        ..g.config().clone()
    };
    let wide = Generator::new(cfg, 0).unwrap();
    assert!(matches!(enumerate_sequences(&wide, &[4], 3), Err(Error::SpaceTooLarge(_))));
}

#[test]
fn baseline_shift_leaves_the_exact_gradient_unchanged() {
    let g = tiny_gen(7);
    let d = tiny_disc(7);
    let at = |b: f64| {
        let cfg = RewardConfig {
            baseline: b,
            ..reward_cfg(1.0, false)
        };
        exact_expected_gradient(&g, &d, &[4, 5], &[5, EOS], &cfg).unwrap()
    };
    let (a, b) = (at(0.5), at(0.1));
    assert!(a.iter().any(|v| v.abs() > 1e-6));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

use brcsgan_core::corpus::{generate_corpus, SyntheticTaskSpec, TaskKind, EOS, PAD};
use brcsgan_core::generator::{DecodeState, Generator, GeneratorConfig, Policy, SampleMode, WeightedSequence};
use brcsgan_core::numerics::{finite_difference_check_with, Optimizer, OptimizerSettings, Stencil};
use brcsgan_core::reward::enumerate_sequences;
use brcsgan_core::rng::RngStream;
use brcsgan_core::Token;

fn tiny(vocab: usize, t_max: usize, seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        vocab_size: vocab,
        embed_dim: 3,
        hidden_dim: 4,
        attention_dim: 3,
        readout_dim: 3,
        t_max,
    };
    Generator::new(cfg, seed).unwrap()
}

/// Whole-model checks include coordinates with gradients near 1e-9; a
/// fourth-order stencil at a larger step keeps rounding well below them.
const FD_STEP: f64 = 1e-3;

/// Spread parameters over a wider range than the initializer so that
/// attention and gate derivatives are well above finite-difference noise.
fn randomize(g: &mut Generator, rng: &mut RngStream) {
    let store = g.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.uniform_range(-0.8, 0.8);
        }
    }
}

#[test]
fn sequence_log_prob_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut g = tiny(7, 5, seed);
        let mut rng = RngStream::new(seed + 100);
        randomize(&mut g, &mut rng);
        // At least two source tokens: with one, attention weights are constant
        // and every attention parameter has an exactly zero gradient.
        let src: Vec<Token> = (0..2 + rng.below(3)).map(|_| 4 + rng.below(3) as Token).collect();
        let mut tgt: Vec<Token> = (0..rng.below(3)).map(|_| 3 + rng.below(4) as Token).collect();
        tgt.push(EOS);
        let weights: Vec<f64> = tgt.iter().map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let ids: Vec<_> = g.params().ids().collect();
        let report = finite_difference_check_with(
            |store| {
                let mut probe = g.clone();
                probe.params_mut().load_named(&store.named_values())?;
                probe.weighted_nll(&[WeightedSequence {
                    source: &src,
                    tokens: &tgt,
                    weights: weights.clone(),
                }])
            },
            &mut g.params().clone(),
            FD_STEP,
            &ids,
            Stencil::FourPoint,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn step_distribution_is_normalized_with_zero_pad() {
    let g = tiny(9, 6, 3);
    let enc = g.encode(&[4, 5, 6]).unwrap();
    let mut state = g.initial_state(&enc);
    for _ in 0..4 {
        let (p, next) = g.decode_step(&state, &enc).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[PAD as usize], 0.0);
        state = next;
    }
}

#[test]
fn step_probabilities_agree_with_token_log_probs() {
    let g = tiny(8, 6, 5);
    let src = [4, 7, 5];
    let tgt = [6, 4, EOS];
    let enc = g.encode(&src).unwrap();
    let mut state = g.initial_state(&enc);
    let lp = g.token_log_probs(&src, &tgt).unwrap();
    for (k, &y) in tgt.iter().enumerate() {
        let (p, next) = g.decode_step(&state, &enc).unwrap();
        assert!((p[y as usize].ln() - lp[k]).abs() < 1e-12);
        state = DecodeState { prev: y, ..next };
    }
    assert!((g.sequence_log_prob(&src, &tgt).unwrap() - lp.iter().sum::<f64>()).abs() < 1e-12);
}

#[test]
fn enumerated_sequences_sum_to_one() {
    for seed in 0..5 {
        let g = tiny(6, 3, seed);
        let seqs = enumerate_sequences(&g, &[4, 5], 3).unwrap();
        // UNK, EOS and two words are emittable: EOS after 0, 1 or 2 other
        // tokens, or three non-EOS tokens cut at the length limit.
        assert_eq!(seqs.len(), 1 + 3 + 9 + 27);
        let total: f64 = seqs.iter().map(|s| s.1).sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }
}

#[test]
fn beam_search_finds_the_enumeration_argmax() {
    for seed in 0..10 {
        let g = tiny(6, 3, seed);
        let src = [4, 5, 4];
        let seqs = enumerate_sequences(&g, &src, 3).unwrap();
        let best = seqs.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert_eq!(g.beam_search(&src, 64, None, 3).unwrap(), best.0, "seed {seed}");
    }
}

#[test]
fn beam_of_one_is_greedy() {
    for seed in 0..10 {
        let g = tiny(12, 8, seed);
        let src = [4, 9, 11, 5];
        let greedy = g.greedy_decode_all(&[&src], 8).unwrap().remove(0);
        assert_eq!(g.beam_search(&src, 1, None, 8).unwrap(), greedy);
    }
}

#[test]
fn max_len_one_returns_a_single_token() {
    let g = tiny(10, 5, 1);
    let mut rng = RngStream::new(2);
    assert_eq!(g.sample(&[4, 5], SampleMode::Greedy, 1, &mut rng).unwrap().len(), 1);
    assert_eq!(g.sample(&[4, 5], SampleMode::Multinomial, 1, &mut rng).unwrap().len(), 1);
}

#[test]
fn multinomial_first_token_frequencies_within_three_sigma() {
    let g = tiny(7, 1, 9);
    let enc = g.encode(&[4, 6]).unwrap();
    let (p, _) = g.decode_step(&g.initial_state(&enc), &enc).unwrap();
    let draws = 50_000;
    let mut counts = vec![0usize; p.len()];
    let mut rng = RngStream::new(77);
    for _ in 0..draws {
        let y = g.sample_trajectory(&enc, SampleMode::Multinomial, 1, &mut rng).unwrap().tokens[0];
        counts[y as usize] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        let n = draws as f64;
        let sigma = (n * p[k] * (1.0 - p[k])).sqrt();
        assert!((c as f64 - n * p[k]).abs() <= 3.0 * sigma + 1e-9, "token {k}: {c} vs {}", n * p[k]);
    }
}

#[test]
fn initial_loss_is_near_uniform_entropy() {
    let spec = SyntheticTaskSpec {
        kind: TaskKind::Copy,
        vocab_size: 50,
        train_size: 64,
        dev_size: 1,
        test_size: 1,
        ..SyntheticTaskSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let g = Generator::new(GeneratorConfig::new(50, spec.t_max), 4).unwrap();
    let pairs: Vec<(&[Token], &[Token])> = corpus.train.iter().map(|p| (&p.source[..], &p.target[..])).collect();
    let (loss, _) = g.mle_loss(&pairs).unwrap();
    let uniform = ((50 - 2) as f64).ln();
    assert!((loss - uniform).abs() < 0.05 * uniform, "{loss} vs {uniform}");
}

#[test]
fn identical_pairs_have_identical_losses() {
    let g = tiny(9, 6, 2);
    let pair: (&[Token], &[Token]) = (&[4, 5, 6], &[6, 5, EOS]);
    let (one, _) = g.mle_loss(&[pair]).unwrap();
    let (many, _) = g.mle_loss(&[pair, pair, pair]).unwrap();
    assert!((one - many).abs() < 1e-12);
}

#[test]
fn mle_training_reduces_loss_on_copy_pairs() {
    let spec = SyntheticTaskSpec {
        kind: TaskKind::Copy,
        vocab_size: 20,
        min_len: 3,
        max_len: 8,
        train_size: 1000,
        dev_size: 10,
        test_size: 10,
        t_max: 10,
        seed: 5,
    };
    let corpus = generate_corpus(&spec).unwrap();
    let mut g = Generator::new(GeneratorConfig::new(20, 10), 1).unwrap();
    let mut opt = Optimizer::new(OptimizerSettings::adam(3e-3));
    let pairs: Vec<(&[Token], &[Token])> = corpus.train.iter().map(|p| (&p.source[..], &p.target[..])).collect();
    let probe = &pairs[..64];
    let (before, _) = g.mle_loss(probe).unwrap();
    for step in 0..200 {
        let at = (step * 16) % (pairs.len() - 16);
        g.mle_step(&pairs[at..at + 16], &mut opt).unwrap();
    }
    let (after, _) = g.mle_loss(probe).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn attention_weights_are_a_distribution_over_the_source() {
    for seed in 0..5 {
        let g = tiny(9, 6, seed);
        let src = [4, 8, 5, 6];
        let enc = g.encode(&src).unwrap();
        let mut state = g.initial_state(&enc);
        for _ in 0..3 {
            let (alpha, _) = g.attend(&state, &enc).unwrap();
            assert_eq!(alpha.len(), src.len());
            assert!(alpha.iter().all(|&a| a >= 0.0));
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            state = g.decode_step(&state, &enc).unwrap().1;
        }
    }
}

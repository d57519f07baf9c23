use brcsgan_core::discriminator::{Discriminator, DiscriminatorConfig, Mode, Side};
use brcsgan_core::numerics::{finite_difference_check_with, BatchStats, Optimizer, OptimizerSettings, Stencil, Tensor};
use brcsgan_core::rng::RngStream;
use brcsgan_core::Token;

fn small(seed: u64) -> Discriminator {
    let cfg = DiscriminatorConfig {
        vocab_size: 9,
        embed_dim: 3,
        windows: vec![1, 2, 3],
        kernels_per_window: 2,
        seq_len: 5,
        bn_momentum: 0.9,
        bn_eps: 1e-5,
    };
    Discriminator::new(cfg, seed).unwrap()
}

fn random_row(rng: &mut RngStream, vocab: usize, max_len: usize) -> Vec<Token> {
    let n = 1 + rng.below(max_len);
    (0..n).map(|_| 3 + rng.below(vocab - 3) as Token).collect()
}

fn as_refs(pairs: &[(Vec<Token>, Vec<Token>)]) -> Vec<(&[Token], &[Token])> {
    pairs.iter().map(|(s, t)| (&s[..], &t[..])).collect()
}

fn random_pairs(rng: &mut RngStream, n: usize) -> Vec<(Vec<Token>, Vec<Token>)> {
    (0..n).map(|_| (random_row(rng, 9, 5), random_row(rng, 9, 5))).collect()
}

/// Central differences at `h` and `h / 2` disagree on some coordinate when a
/// ReLU or max-pool switch falls inside the stencil.
fn smooth_within(d: &Discriminator, real: &[(&[Token], &[Token])], fake: &[(&[Token], &[Token])], h: f64) -> bool {
    let loss = |p: &Discriminator| p.loss(real, fake).unwrap().0;
    let ids: Vec<_> = d.params().ids().collect();
    for id in ids {
        for i in 0..d.params().value(id).data().len() {
            let fd = |step: f64| {
                let mut plus = d.clone();
                plus.params_mut().value_mut(id).data_mut()[i] += step;
                let mut minus = d.clone();
                minus.params_mut().value_mut(id).data_mut()[i] -= step;
                (loss(&plus) - loss(&minus)) / (2.0 * step)
            };
            let (a, b) = (fd(h), fd(h / 2.0));
            if (a - b).abs() > 1e-8 + 1e-6 * a.abs().max(b.abs()) {
                return false;
            }
        }
    }
    true
}

/// Instances whose stencil straddles a kink are redrawn; the redraw budget
/// keeps the guard from silently discarding most of them.
#[test]
fn log_loss_gradients_match_finite_differences() {
    let mut redraws = 0;
    for seed in 0..20u64 {
        let mut rng = RngStream::new(seed + 500);
        let (d, real, fake) = loop {
            let mut d = small(seed);
            let store = d.params_mut();
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                for v in store.value_mut(id).data_mut() {
                    *v = rng.uniform_range(-0.8, 0.8);
                }
            }
            let real = random_pairs(&mut rng, 3);
            let fake = random_pairs(&mut rng, 3);
            if smooth_within(&d, &as_refs(&real), &as_refs(&fake), 1e-5) {
                break (d, real, fake);
            }
            redraws += 1;
        };
        let (r, f) = (as_refs(&real), as_refs(&fake));
        let biases: Vec<_> = (0..3).flat_map(|i| [Side::Source, Side::Target].map(|s| d.conv_bias_id(s, i))).collect();

        let (_, grads, _) = d.loss(&r, &f).unwrap();
        for &b in &biases {
            let g = grads.get(b).map(|t| t.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))).unwrap_or(0.0);
            assert!(g < 1e-10, "seed {seed}: conv bias gradient {g}");
        }

        let ids: Vec<_> = d.params().ids().filter(|id| !biases.contains(id)).collect();
        let report = finite_difference_check_with(
            |store| {
                let mut probe = d.clone();
                probe.params_mut().load_named(&store.named_values())?;
                let (loss, grads, _) = probe.loss(&r, &f)?;
                Ok((loss, grads))
            },
            &mut d.params().clone(),
            1e-5,
            &ids,
            Stencil::Central,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
    assert!(redraws <= 4, "{redraws} redraws");
}

#[test]
fn predictions_follow_a_permutation_of_the_batch() {
    let d = small(3);
    let mut rng = RngStream::new(8);
    let pairs = random_pairs(&mut rng, 7);
    let refs = as_refs(&pairs);
    let order = [4, 0, 6, 2, 5, 1, 3];
    let permuted: Vec<_> = order.iter().map(|&i| refs[i]).collect();
    for mode in [Mode::Eval, Mode::Train] {
        let p = d.predict_batch(&refs, mode).unwrap();
        let q = d.predict_batch(&permuted, mode).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert!((q[k] - p[i]).abs() < 1e-12, "{mode:?}: {} vs {}", q[k], p[i]);
        }
    }
}

#[test]
fn zero_output_transform_gives_half_and_two_ln_two() {
    let mut d = small(4);
    for name in ["disc.v", "disc.v_b"] {
        let id = d.params().id(name).unwrap();
        let shape = d.params().value(id).shape().to_vec();
        *d.params_mut().value_mut(id) = Tensor::zeros(&shape);
    }
    let mut rng = RngStream::new(1);
    let real = random_pairs(&mut rng, 4);
    let fake = random_pairs(&mut rng, 4);
    for p in d.predict_batch(&as_refs(&real), Mode::Eval).unwrap() {
        assert_eq!(p, 0.5);
    }
    let (loss, _, _) = d.loss(&as_refs(&real), &as_refs(&fake)).unwrap();
    assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    // Ties are read as real.
    let labels: Vec<bool> = (0..8).map(|i| i < 4).collect();
    let all: Vec<_> = as_refs(&real).into_iter().chain(as_refs(&fake)).collect();
    assert_eq!(d.accuracy(&all, &labels).unwrap(), 0.5);
}

#[test]
fn swapping_output_columns_mirrors_probabilities() {
    let d = small(6);
    let mut mirrored = d.clone();
    for name in ["disc.v", "disc.v_b"] {
        let id = mirrored.params().id(name).unwrap();
        let t = mirrored.params_mut().value_mut(id);
        for row in t.data_mut().chunks_mut(2) {
            row.swap(0, 1);
        }
    }
    let mut rng = RngStream::new(2);
    let pairs = random_pairs(&mut rng, 5);
    let p = d.predict_batch(&as_refs(&pairs), Mode::Eval).unwrap();
    let q = mirrored.predict_batch(&as_refs(&pairs), Mode::Eval).unwrap();
    for (a, b) in p.iter().zip(&q) {
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn feature_width_is_windows_times_kernels() {
    let d = small(2);
    let (m, _) = d.embed_pair(&[4, 5, 6, 2, 0], &[7, 2, 0, 0, 0]).unwrap();
    let f = d.extract_features(&m, Side::Source, Mode::Eval).unwrap();
    assert_eq!(f.data().len(), d.config().features_per_side());
}

fn random_running_stats(d: &mut Discriminator, rng: &mut RngStream) {
    let kern = d.config().kernels_per_window;
    for side in [Side::Source, Side::Target] {
        let stats = (0..d.config().windows.len())
            .map(|_| BatchStats {
                mean: (0..kern).map(|_| rng.uniform_range(-0.3, 0.3)).collect(),
                var: (0..kern).map(|_| rng.uniform_range(0.2, 2.0)).collect(),
            })
            .collect();
        d.set_running_stats(side, stats).unwrap();
    }
}

#[test]
fn pooled_features_match_a_direct_scan() {
    let mut d = small(11);
    let mut rng = RngStream::new(12);
    random_running_stats(&mut d, &mut rng);
    let cfg = d.config().clone();
    let (m, _) = d.embed_pair(&[4, 8, 5, 2, 0], &[3, 2, 0, 0, 0]).unwrap();
    let f = d.extract_features(&m, Side::Source, Mode::Eval).unwrap();
    let k = cfg.embed_dim;
    let x = m.data();
    let p = d.params();
    for (i, &l) in cfg.windows.iter().enumerate() {
        let w = p.value(p.id(&format!("disc.src.w{l}")).unwrap()).data();
        let gamma = p.value(p.id(&format!("disc.src.gamma{l}")).unwrap()).data();
        let beta = p.value(p.id(&format!("disc.src.beta{l}")).unwrap()).data();
        let b = p.value(d.conv_bias_id(Side::Source, i)).data();
        let stats = &d.running_stats(Side::Source)[i];
        for c in 0..cfg.kernels_per_window {
            let mut best = f64::NEG_INFINITY;
            for j in 0..=cfg.seq_len - l {
                let mut z = b[c];
                for r in 0..l * k {
                    z += x[j * k + r] * w[r * cfg.kernels_per_window + c];
                }
                let n = gamma[c] * (z - stats.mean[c]) / (stats.var[c] + cfg.bn_eps).sqrt() + beta[c];
                best = best.max(n.max(0.0));
            }
            let got = f.data()[i * cfg.kernels_per_window + c];
            assert!((got - best).abs() < 1e-12, "window {l} kernel {c}: {got} vs {best}");
        }
    }
}

#[test]
fn permuting_a_kernel_bank_permutes_its_features() {
    let mut d = small(13);
    let mut rng = RngStream::new(14);
    random_running_stats(&mut d, &mut rng);
    let (m, _) = d.embed_pair(&[5, 6, 7, 2, 0], &[4, 2, 0, 0, 0]).unwrap();
    let before = d.extract_features(&m, Side::Source, Mode::Eval).unwrap();
    let kern = d.config().kernels_per_window;
    let (bank, l) = (1, d.config().windows[1]);
    // kern = 2, so the permutation is a swap.
    let perm = |v: &mut [f64], stride: usize| {
        for row in v.chunks_mut(stride) {
            row.swap(0, 1);
        }
    };
    for name in [format!("disc.src.w{l}"), format!("disc.src.b{l}"), format!("disc.src.gamma{l}"), format!("disc.src.beta{l}")] {
        let id = d.params().id(&name).unwrap();
        perm(d.params_mut().value_mut(id).data_mut(), kern);
    }
    let mut stats = d.running_stats(Side::Source).to_vec();
    perm(&mut stats[bank].mean, kern);
    perm(&mut stats[bank].var, kern);
    d.set_running_stats(Side::Source, stats).unwrap();
    let after = d.extract_features(&m, Side::Source, Mode::Eval).unwrap();
    let mut expected = before.data().to_vec();
    perm(&mut expected[bank * kern..(bank + 1) * kern], kern);
    assert_eq!(after.data(), &expected[..]);
}

#[test]
fn training_and_evaluation_modes_differ_before_stats_settle() {
    let d = small(5);
    let pairs: Vec<(Vec<Token>, Vec<Token>)> = vec![(vec![4, 5, 6], vec![7, 8]), (vec![8, 3], vec![4, 4, 4, 5])];
    let train = d.predict_batch(&as_refs(&pairs), Mode::Train).unwrap();
    let eval = d.predict_batch(&as_refs(&pairs), Mode::Eval).unwrap();
    assert!(train.iter().zip(&eval).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn steps_keep_every_parameter_inside_the_box() {
    let mut d = small(7);
    let mut opt = Optimizer::new(OptimizerSettings::sgd(5.0));
    let mut rng = RngStream::new(3);
    for _ in 0..20 {
        let real = random_pairs(&mut rng, 4);
        let fake = random_pairs(&mut rng, 4);
        d.disc_step(&as_refs(&real), &as_refs(&fake), &mut opt, 0.3).unwrap();
        assert!(d.params().max_abs_value() <= 0.3);
    }
}

/// Each side is pooled on its own and the logit is linear in the joined
/// features, so the fake targets come from a disjoint token range.
#[test]
fn separates_real_and_fake_target_distributions() {
    let cfg = DiscriminatorConfig {
        vocab_size: 12,
        embed_dim: 8,
        windows: vec![1, 2],
        kernels_per_window: 8,
        seq_len: 6,
        bn_momentum: 0.9,
        bn_eps: 1e-5,
    };
    let mut d = Discriminator::new(cfg, 9).unwrap();
    let mut opt = Optimizer::new(OptimizerSettings::adam(1e-2));
    let mut rng = RngStream::new(4);
    let batch = |rng: &mut RngStream, n: usize| {
        let real: Vec<_> = (0..n)
            .map(|_| {
                let s = random_row(rng, 12, 6);
                let t = s.iter().map(|&y| 3 + y % 4).collect();
                (s, t)
            })
            .collect();
        let fake: Vec<_> = (0..n)
            .map(|_| {
                let s = random_row(rng, 12, 6);
                let t = s.iter().map(|&y| 7 + y % 5).collect();
                (s, t)
            })
            .collect();
        (real, fake)
    };
    for _ in 0..50 {
        let (real, fake) = batch(&mut rng, 16);
        d.disc_step(&as_refs(&real), &as_refs(&fake), &mut opt, 1.0).unwrap();
    }
    let (real, fake) = batch(&mut rng, 100);
    let all: Vec<_> = as_refs(&real).into_iter().chain(as_refs(&fake)).collect();
    let labels: Vec<bool> = (0..200).map(|i| i < 100).collect();
    let acc = d.accuracy(&all, &labels).unwrap();
    assert!(acc >= 0.9, "accuracy {acc}");
}

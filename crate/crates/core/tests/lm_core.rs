use rlt_core::lm::*;
use rlt_core::Error;

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        context_window: 12,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        seed,
    }
}

/// Randomizes every parameter (including gains and biases) so no group has
/// a trivially zero gradient.
fn perturbed(cfg: ModelConfig, scale: f64) -> ModelState<f32> {
    let mut m = ModelState::<f32>::new(cfg).unwrap();
    let mut state = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    for (name, t) in m.params.iter_mut() {
        for v in t.data.iter_mut() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let u = (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            *v = (base + u * 2.0 * scale) as f32;
        }
    }
    m
}

fn batch() -> Vec<LmExample> {
    vec![
        LmExample {
            input: vec![1, 4, 2, 7, 3, 9],
            target: vec![4, 2, 7, 3, 9, 5],
            mask: vec![false, true, true, false, true, true],
        },
        LmExample {
            input: vec![3, 3, 10, 0],
            target: vec![3, 10, 0, 6],
            mask: vec![true, true, true, true],
        },
    ]
}

fn masked_loss_f64(model: &ModelState<f64>, batch: &[LmExample]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for ex in batch {
        let table = model.forward(&ex.input).unwrap();
        for (i, (&t, &m)) in ex.target.iter().zip(&ex.mask).enumerate() {
            if m {
                total -= table.row(i)[t as usize];
                n += 1;
            }
        }
    }
    total / n as f64
}

#[test]
fn forward_rows_are_normalized() {
    let m = perturbed(tiny(3), 0.5);
    let table = m.forward(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0, 1]).unwrap();
    for i in 0..table.rows {
        let lse: f64 = table.row(i).iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-5, "row {i}: {lse}");
    }
    let single = ModelState::<f32>::new(tiny(1)).unwrap().forward(&[4]).unwrap();
    let s: f64 = single.row(0).iter().map(|&v| (v as f64).exp()).sum();
    assert!((s - 1.0).abs() < 1e-5);
}

#[test]
fn forward_is_deterministic() {
    let a = ModelState::<f32>::new(tiny(9)).unwrap();
    let b = ModelState::<f32>::new(tiny(9)).unwrap();
    let toks = [3, 1, 4, 1, 5, 9, 2, 6];
    assert_eq!(a.forward(&toks).unwrap().data, b.forward(&toks).unwrap().data);
}

#[test]
fn forward_is_causal() {
    let m = perturbed(tiny(5), 0.5);
    let base = [1, 2, 3, 4, 5, 6, 7, 8];
    let table = m.forward(&base).unwrap();
    for t in 0..base.len() {
        let mut changed = base;
        changed[t] = (changed[t] + 3) % 11;
        let other = m.forward(&changed).unwrap();
        for i in 0..t {
            assert_eq!(table.row(i), other.row(i), "perturbing {t} changed row {i}");
        }
    }
}

#[test]
fn context_overflow_is_reported() {
    let m = ModelState::<f32>::new(tiny(1)).unwrap();
    let err = m.forward(&[1; 13]).unwrap_err();
    assert!(matches!(err, Error::ContextOverflow { len: 13, window: 12 }));
    assert!(matches!(
        token_log_probs(&m, &[1; 8], &[2; 5]),
        Err(Error::ContextOverflow { .. })
    ));
}

#[test]
fn uniform_model_gives_minus_log_vocab() {
    let m = ModelState::<f32>::uniform(tiny(2)).unwrap();
    let lp = token_log_probs(&m, &[1, 2], &[3, 4, 5]).unwrap();
    let want = -(11f64.ln());
    assert_eq!(lp.len(), 3);
    for v in lp {
        assert!((v as f64 - want).abs() < 1e-6);
    }
    let ex = LmExample::prompt_completion(&[1, 2, 3], &[4, 5, 6]);
    let (loss, _) = cross_entropy_and_grads(&m, &[ex]).unwrap();
    assert!((loss - 11f64.ln()).abs() < 1e-6);
}

#[test]
fn token_log_probs_match_gathered_forward_rows() {
    let m = perturbed(tiny(4), 0.4);
    let ctx = [1, 5, 2];
    let targets = [7, 7, 3, 10, 0];
    let lp = token_log_probs(&m, &ctx, &targets).unwrap();
    let full: Vec<TokenId> = ctx.iter().chain(&targets).copied().collect();
    let table = m.forward(&full).unwrap();
    for (k, &t) in targets.iter().enumerate() {
        let oracle = table.row(ctx.len() - 1 + k)[t as usize];
        assert!((lp[k] - oracle).abs() < 1e-6);
        assert!(lp[k] <= 0.0);
    }
}

#[test]
fn greedy_targets_dominate_their_rows() {
    let m = perturbed(tiny(8), 0.6);
    let prefix = [2, 3];
    let gen = sample(&m, &prefix, &GenerationConfig::greedy(6), &[]).unwrap();
    let lp = token_log_probs(&m, &prefix, &gen.tokens).unwrap();
    let full: Vec<TokenId> = prefix.iter().chain(&gen.tokens).copied().collect();
    let table = m.forward(&full).unwrap();
    for k in 0..gen.tokens.len() {
        let row = table.row(prefix.len() - 1 + k);
        assert!(row.iter().all(|&alt| lp[k] >= alt));
    }
}

#[test]
fn empty_mask_is_empty_loss() {
    let m = ModelState::<f32>::new(tiny(1)).unwrap();
    let ex = LmExample {
        input: vec![1, 2],
        target: vec![2, 3],
        mask: vec![false, false],
    };
    assert!(matches!(cross_entropy_and_grads(&m, &[ex]), Err(Error::EmptyLoss)));
}

#[test]
fn masked_positions_do_not_affect_loss() {
    let m = perturbed(tiny(6), 0.5);
    let b = batch();
    let (l0, g0) = cross_entropy_and_grads(&m, &b).unwrap();
    let mut b2 = b.clone();
    b2[0].target[0] = 9;
    b2[0].target[3] = 1;
    let (l1, g1) = cross_entropy_and_grads(&m, &b2).unwrap();
    assert_eq!(l0, l1);
    assert_eq!(g0, g1);
}

/// Analytic f32 gradients against central differences of the same model
/// evaluated in f64, per parameter group.
#[test]
fn gradients_match_finite_differences() {
    for seed in [11u64, 12] {
        let m32 = perturbed(tiny(seed), 0.5);
        let b = batch();
        let (_, grads) = cross_entropy_and_grads(&m32, &b).unwrap();
        let base = m32.cast::<f64>();
        let h = 1e-4;
        for (gi, (name, g)) in grads.iter().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for idx in 0..g.len() {
                let mut plus = base.clone();
                plus.params.at_mut(gi)[idx] += h;
                let mut minus = base.clone();
                minus.params.at_mut(gi)[idx] -= h;
                let fd = (masked_loss_f64(&plus, &b) - masked_loss_f64(&minus, &b)) / (2.0 * h);
                let a = g.data[idx] as f64;
                num += (a - fd) * (a - fd);
                den += fd * fd;
            }
            let rel = num.sqrt() / den.sqrt().max(1e-12);
            assert!(rel < 1e-3, "{name}: relative error {rel:e} (seed {seed})");
            assert!(den > 0.0, "{name} has a zero gradient");
        }
    }
}

#[test]
fn gradients_match_finite_differences_in_f64() {
    let m = perturbed(tiny(21), 0.5).cast::<f64>();
    let b = batch();
    let (_, grads) = cross_entropy_and_grads(&m, &b).unwrap();
    let h = 1e-5;
    for (gi, (name, g)) in grads.iter().enumerate() {
        for idx in (0..g.len()).step_by(7) {
            let mut plus = m.clone();
            plus.params.at_mut(gi)[idx] += h;
            let mut minus = m.clone();
            minus.params.at_mut(gi)[idx] -= h;
            let fd = (masked_loss_f64(&plus, &b) - masked_loss_f64(&minus, &b)) / (2.0 * h);
            assert!((g.data[idx] - fd).abs() < 1e-7 + 1e-5 * fd.abs(), "{name}[{idx}]");
        }
    }
}

fn row_probs(model: &ModelState<f32>, prefix: &[TokenId]) -> Vec<f64> {
    let t = model.forward(prefix).unwrap();
    t.row(prefix.len() - 1).iter().map(|x| (*x as f64).exp()).collect()
}

#[test]
fn first_token_frequencies_match_the_model() {
    let m = perturbed(tiny(31), 0.8);
    let prefix = [1u32, 4, 2];
    let p = row_probs(&m, &prefix);
    let n = 100_000;
    let mut counts = vec![0usize; p.len()];
    for i in 0..n {
        let g = sample(&m, &prefix, &GenerationConfig::sampled(1.0, 1.0, 1, i), &[]).unwrap();
        counts[g.tokens[0] as usize] += 1;
    }
    let mut chi2 = 0.0;
    for (v, &c) in counts.iter().enumerate() {
        let expect = p[v] * n as f64;
        let se = (n as f64 * p[v] * (1.0 - p[v])).sqrt();
        assert!((c as f64 - expect).abs() <= 3.0 * se, "token {v}: {c} draws, expected {expect:.1} ± {se:.1}");
        chi2 += (c as f64 - expect).powi(2) / expect;
    }
    // 99.9% quantile of chi-square with 10 degrees of freedom.
    assert!(chi2 < 29.59, "chi-square {chi2}");
}

#[test]
fn greedy_and_tight_nucleus_pick_the_argmax() {
    let m = perturbed(tiny(32), 0.8);
    let prefix = [2u32, 5];
    let g = sample(&m, &prefix, &GenerationConfig::greedy(6), &[]).unwrap();
    let mut seq = prefix.to_vec();
    for &t in &g.tokens {
        let p = row_probs(&m, &seq);
        let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(t as usize, best);
        seq.push(t);
    }
    for seed in 0..20 {
        let tight = sample(&m, &prefix, &GenerationConfig::sampled(1.0, 1e-9, 6, seed), &[]).unwrap();
        assert_eq!(tight.tokens, g.tokens);
    }
}

#[test]
fn sampling_is_reproducible_and_stops() {
    let m = perturbed(tiny(33), 0.8);
    let cfg = GenerationConfig::sampled(0.9, 0.95, 8, 77);
    let a = sample(&m, &[1, 2], &cfg, &[]).unwrap();
    let b = sample(&m, &[1, 2], &cfg, &[]).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.tokens.len(), a.finish), (8, FinishReason::MaxNewTokens));

    let stop = a.tokens[2];
    let s = sample(&m, &[1, 2], &cfg, &[stop]).unwrap();
    let first = a.tokens.iter().position(|&t| t == stop).unwrap();
    assert_eq!(s.tokens, a.tokens[..=first].to_vec());
    assert_eq!(s.finish, FinishReason::Stop);

    let long = GenerationConfig::sampled(1.0, 1.0, 100, 1);
    let full = sample(&m, &[1, 2], &long, &[]).unwrap();
    assert_eq!((full.tokens.len(), full.finish), (10, FinishReason::ContextFull));
    assert!(matches!(sample(&m, &[1; 13], &long, &[]), Err(Error::ContextOverflow { .. })));
    assert!(GenerationConfig::sampled(0.0, 1.0, 1, 0).validate().is_err());
    assert!(GenerationConfig::sampled(1.0, 0.0, 1, 0).validate().is_err());
}

#[test]
fn checkpoints_round_trip() {
    let m = perturbed(tiny(41), 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    let ctx = [1u32, 2, 3];
    assert_eq!(token_log_probs(&back, &ctx, &[4, 5]).unwrap(), token_log_probs(&m, &ctx, &[4, 5]).unwrap());
    assert!(matches!(load_model_for_vocab(&path, 12), Err(Error::ConfigMismatch(_))));
    assert!(load_model_for_vocab(&path, 11).is_ok());

    let mut bytes = encode_model(&m);
    bytes[0] ^= 0xff;
    assert!(matches!(decode_model(&bytes), Err(Error::FormatError(_))));
    let mut bytes = encode_model(&m);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(matches!(decode_model(&bytes), Err(Error::FormatError(_))));
    assert!(matches!(decode_model(&encode_model(&m)[..40]), Err(Error::FormatError(_))));
}

fn rollouts() -> Vec<Rollout> {
    vec![
        Rollout { tokens: vec![1, 4, 2, 7, 3, 9], gen_start: 3, advantage: 1.2 },
        Rollout { tokens: vec![1, 4, 2, 5, 5], gen_start: 3, advantage: -0.7 },
        Rollout { tokens: vec![3, 3, 10, 0, 6], gen_start: 2, advantage: 0.4 },
    ]
}

/// The objective the policy gradient differentiates, evaluated directly.
fn policy_objective(m: &ModelState<f64>, r: &ModelState<f64>, rs: &[Rollout], beta: f64) -> f64 {
    let g = rs.len() as f64;
    let mut loss = 0.0;
    for ro in rs {
        let input = &ro.tokens[..ro.tokens.len() - 1];
        let (p, q) = (m.forward(input).unwrap(), r.forward(input).unwrap());
        let n = (ro.tokens.len() - ro.gen_start) as f64;
        for pos in ro.gen_start - 1..input.len() {
            let lp = p.row(pos);
            let kl: f64 = lp.iter().zip(q.row(pos)).map(|(a, b)| a.exp() * (a - b)).sum();
            loss -= (ro.advantage * lp[ro.tokens[pos + 1] as usize] - beta * kl) / (n * g);
        }
    }
    loss
}

#[test]
fn policy_gradient_matches_finite_differences() {
    let m = perturbed(tiny(51), 0.5).cast::<f64>();
    let r = perturbed(tiny(52), 0.5).cast::<f64>();
    let rs = rollouts();
    let beta = 0.3;
    let (grads, diag) = policy_gradient(&m, &rs, &r, beta, TokenReduction::Mean).unwrap();
    assert!((diag.loss - policy_objective(&m, &r, &rs, beta)).abs() < 1e-12);
    let h = 1e-5;
    for (gi, (name, g)) in grads.iter().enumerate() {
        for idx in (0..g.len()).step_by(5) {
            let mut plus = m.clone();
            plus.params.at_mut(gi)[idx] += h;
            let mut minus = m.clone();
            minus.params.at_mut(gi)[idx] -= h;
            let fd = (policy_objective(&plus, &r, &rs, beta) - policy_objective(&minus, &r, &rs, beta)) / (2.0 * h);
            assert!((g.data[idx] - fd).abs() < 1e-7 + 1e-5 * fd.abs(), "{name}[{idx}]: {} vs {fd}", g.data[idx]);
        }
    }
}

#[test]
fn zero_advantage_at_the_reference_has_zero_gradient() {
    let m = perturbed(tiny(53), 0.5);
    let mut rs = rollouts();
    rs.iter_mut().for_each(|r| r.advantage = 0.0);
    let (_, diag) = policy_gradient(&m, &rs, &m, 0.04, TokenReduction::Mean).unwrap();
    assert!(diag.grad_norm < 1e-6);
}

#[test]
fn positive_advantage_raises_the_rollout_likelihood() {
    let mut m = perturbed(tiny(54), 0.5);
    let reference = m.clone();
    let ro = Rollout { tokens: vec![1, 4, 2, 7, 3, 9], gen_start: 3, advantage: 1.0 };
    let lp = |m: &ModelState<f32>| token_log_probs(m, &ro.tokens[..3], &ro.tokens[3..]).unwrap().iter().map(|&x| x as f64).sum::<f64>();
    let before = lp(&m);
    let mut opt = OptimizerState::new(&m.params, AdamWConfig { lr: 1e-3, ..Default::default() });
    policy_gradient_step(&mut m, std::slice::from_ref(&ro), &reference, 0.0, TokenReduction::Mean, &mut opt).unwrap();
    assert!(lp(&m) > before);
}

#[test]
fn large_beta_pulls_toward_the_reference() {
    let reference = perturbed(tiny(55), 0.5);
    let mut m = perturbed(tiny(56), 0.5);
    let rs = rollouts();
    let kl = |m: &ModelState<f32>| policy_gradient(m, &rs, &reference, 1.0, TokenReduction::Mean).unwrap().1.mean_kl_to_ref;
    let mut opt = OptimizerState::new(&m.params, AdamWConfig { lr: 1e-3, ..Default::default() });
    for _ in 0..5 {
        let before = kl(&m);
        policy_gradient_step(&mut m, &rs, &reference, 1e3, TokenReduction::Mean, &mut opt).unwrap();
        assert!(kl(&m) <= before, "KL rose from {before}");
    }
}

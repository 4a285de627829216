mod common;

use common::{model_config, perturbed, small_run, Noise};
use proptest::prelude::*;
use rlt_core::format::{
    build_distillation_record, render_student_prompt, student_target_tokens, DistillationRecord, SegmentedTrace,
    TraceSource, Vocabulary, END_SOLUTION,
};
use rlt_core::reward::student_answer;
use rlt_core::lm::{cross_entropy_and_grads, sample, GenerationConfig, ModelState};
use rlt_core::pipeline::{synthetic_traces, teacher_parse_rate, warm_teacher, Role};
use rlt_core::sft::*;
use rlt_core::tasks::{gen_arith_chain, ArithChainSpec, ThinkStyle};
use rlt_core::Error;

fn vocab() -> Vocabulary {
    Vocabulary::standard()
}

fn trace(q: &str, s: &str, think: &str) -> SegmentedTrace {
    let v = vocab();
    SegmentedTrace::new(
        &v.tokenize(q).unwrap(),
        &v.tokenize(s).unwrap(),
        &v.tokenize(think).unwrap(),
        TraceSource::Synthetic,
    )
}

fn quick(epochs: f64) -> SftConfig {
    SftConfig {
        epochs,
        batch_size: 1,
        lr: 1e-2,
        final_lr: 1e-3,
        weight_decay: 0.0,
        ..SftConfig::desk()
    }
}

#[test]
fn overfits_one_record() {
    let t = trace("((3+4)*2) mod 10 = ?", "4", "3+4=7 7*2=4");
    let model = ModelState::<f32>::new(model_config(vocab().size(), 48, 1)).unwrap();
    let rec = build_distillation_record(&t, 48);
    let (model, log) = sft_train(model, &[rec], &quick(150.0), |_| {}).unwrap();
    assert!(log.last().unwrap().loss < 0.05, "final loss {}", log.last().unwrap().loss);
    let prompt = render_student_prompt(&vocab(), "((3+4)*2) mod 10 = ?").unwrap();
    let out = sample(&model, &prompt, &GenerationConfig::greedy(40), &[END_SOLUTION]).unwrap();
    // The prompt already holds the opening thought tag; decoding stops at
    // the closing solution tag.
    let target = student_target_tokens(&t.think, &t.solution);
    let end = target.iter().position(|&x| x == END_SOLUTION).unwrap();
    assert_eq!(out.tokens, target[1..=end].to_vec());
}

#[test]
fn uniform_model_loss_is_log_vocab() {
    let v = vocab();
    let tasks = gen_arith_chain(&ArithChainSpec { count: 20, ..Default::default() }).unwrap();
    let traces = synthetic_traces(&v, &tasks, ThinkStyle::Steps).unwrap();
    let records: Vec<_> = traces.iter().map(|t| build_distillation_record(t, 96)).collect();
    let model = ModelState::<f32>::uniform(model_config(v.size(), 96, 2)).unwrap();
    let (_, log) = sft_train(model, &records, &SftConfig { epochs: 1.0, ..SftConfig::desk() }, |_| {}).unwrap();
    let ln_v = (v.size() as f64).ln();
    assert!((log[0].loss - ln_v).abs() < 0.05 * ln_v, "{} vs {ln_v}", log[0].loss);
}

fn random_record(noise: &mut Noise, vocab_size: usize) -> DistillationRecord {
    let n_in = 2 + noise.below(6);
    let n_out = 1 + noise.below(6);
    let input_tokens: Vec<u32> = (0..n_in).map(|_| noise.below(vocab_size) as u32).collect();
    let target_tokens: Vec<u32> = (0..n_out).map(|_| noise.below(vocab_size) as u32).collect();
    DistillationRecord {
        input_tokens,
        target_tokens,
        loss_mask: (0..n_out).map(|_| noise.next() < 0.25).collect(),
        oversize: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_targets_do_not_matter(seed in any::<u64>()) {
        let mut noise = Noise::new(seed);
        let model = perturbed::<f32>(model_config(12, 16, seed), 0.5);
        let recs: Vec<_> = (0..3).map(|_| random_record(&mut noise, 12)).collect();
        let examples: Vec<_> = recs.iter().map(DistillationRecord::to_example).collect();
        let mut changed = examples.clone();
        for ex in &mut changed {
            for (t, &m) in ex.target.iter_mut().zip(&ex.mask) {
                if !m {
                    *t = noise.below(12) as u32;
                }
            }
        }
        let (a, ga) = cross_entropy_and_grads(&model, &examples).unwrap();
        let (b, gb) = cross_entropy_and_grads(&model, &changed).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ga, gb);
    }
}

#[test]
fn student_records_mask_the_prompt() {
    let t = trace("2 3 4 -> 24", "(2*3)*4", "2*3=6 6*4=24");
    let rec = build_distillation_record(&t, 96);
    let ex = rec.to_example();
    let prompt_len = rec.input_tokens.len();
    assert_eq!(render_student_prompt(&vocab(), "2 3 4 -> 24").unwrap()[..prompt_len], rec.input_tokens[..]);
    assert!(ex.mask[..prompt_len - 1].iter().all(|&m| !m));
    assert!(ex.mask[prompt_len - 1..].iter().all(|&m| m));
}

#[test]
fn training_is_deterministic() {
    let v = vocab();
    let tasks = gen_arith_chain(&ArithChainSpec { count: 30, ..Default::default() }).unwrap();
    let records: Vec<_> = synthetic_traces(&v, &tasks, ThinkStyle::Steps)
        .unwrap()
        .iter()
        .map(|t| build_distillation_record(t, 96))
        .collect();
    let cfg = SftConfig { epochs: 2.0, batch_size: 4, seed: 9, ..SftConfig::desk() };
    let run = || sft_train(ModelState::<f32>::new(model_config(v.size(), 96, 3)).unwrap(), &records, &cfg, |_| {}).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.len(), cfg.total_steps(30));
    let other = SftConfig { seed: 10, ..cfg };
    let (c, _) = sft_train(ModelState::<f32>::new(model_config(v.size(), 96, 3)).unwrap(), &records, &other, |_| {}).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn schedule_endpoints() {
    for cfg in [SftConfig::full_finetune(), SftConfig::subset_1k(), SftConfig::desk()] {
        for total in [20, 333, 1000] {
            let s = cfg.schedule(total);
            let warm = (total as f64 * cfg.warmup_ratio).round() as usize;
            assert_eq!(s.lr_at(0), 0.0);
            assert!((s.lr_at(warm) - cfg.lr).abs() < 1e-9);
            assert!((s.lr_at(total) - cfg.final_lr).abs() < 1e-9);
        }
    }
    let flat = SftConfig { lr_decay: LrDecay::Constant, ..SftConfig::desk() }.schedule(100);
    assert_eq!(flat.lr_at(100), flat.peak);
}

#[test]
fn logged_lr_follows_the_schedule() {
    let t = trace("((3+4)*2) mod 10 = ?", "4", "3+4=7 7*2=4");
    let model = ModelState::<f32>::new(model_config(vocab().size(), 48, 4)).unwrap();
    let cfg = quick(20.0);
    let (_, log) = sft_train(model, &[build_distillation_record(&t, 48)], &cfg, |_| {}).unwrap();
    let s = cfg.schedule(20);
    for m in &log {
        assert_eq!(m.lr, s.lr_at(m.step + 1));
    }
    assert!((log.last().unwrap().lr - cfg.final_lr).abs() < 1e-12);
}

#[test]
fn zero_epochs_and_empty_data() {
    let t = trace("1 2 3 -> 6", "1+2+3", "1+2=3 3+3=6");
    let model = perturbed::<f32>(model_config(vocab().size(), 48, 5), 0.3);
    let (out, log) = sft_train(model.clone(), &[build_distillation_record(&t, 48)], &quick(0.0), |_| {}).unwrap();
    assert_eq!(out, model);
    assert!(log.is_empty());
    let (out, _) = warmup_teacher(model.clone(), &[t], &quick(0.0)).unwrap();
    assert_eq!(out, model);
    assert!(matches!(sft_train(model.clone(), &[], &quick(1.0), |_| {}), Err(Error::EmptyDataset)));
    assert!(matches!(warmup_teacher(model, &[], &quick(1.0)), Err(Error::EmptyDataset)));
}

#[test]
fn warmup_teaches_the_format() {
    let cfg = small_run();
    let (train, _) = cfg.corpus().unwrap();
    let v = cfg.vocab();
    let fresh = cfg.fresh_model(Role::Teacher).unwrap();
    let probe = &train[cfg.seed_traces..cfg.seed_traces + 100];
    let gen = GenerationConfig::sampled(1.0, 1.0, 48, 11);
    let before = teacher_parse_rate(&fresh, &v, probe, &gen, 48).unwrap();
    let fingerprint = v.fingerprint();
    let (warm, _) = warm_teacher(&cfg, fresh, &train).unwrap();
    let after = teacher_parse_rate(&warm, &v, probe, &gen, 48).unwrap();
    println!("teacher parse rate {before:.2} -> {after:.2}");
    assert!(after > before);
    assert!(after >= 0.8);
    assert_eq!(warm.config.vocab_size, v.size());
    assert_eq!(cfg.vocab().fingerprint(), fingerprint);
}

#[test]
fn eval_recount_and_fixed_students() {
    let cfg = small_run();
    let (train, test) = cfg.corpus().unwrap();
    let v = cfg.vocab();
    let traces = synthetic_traces(&v, &train[..200], ThinkStyle::Steps).unwrap();
    let student = rlt_core::pipeline::distill(cfg.fresh_model(Role::Student).unwrap(), &traces, &cfg.sft_config(1))
        .unwrap()
        .student;
    let report = eval_student(&student, &v, &test, &GenerationConfig::greedy(48)).unwrap();
    let correct = report.outcomes.iter().filter(|o| o.correct).count();
    assert_eq!(report.accuracy, correct as f64 / test.len() as f64);
    for (o, task) in report.outcomes.iter().zip(&test) {
        assert_eq!(o.id, task.id);
        assert_eq!(o.correct, o.answer.as_deref().is_some_and(|a| task.check(a)));
    }

    // Oracle: the ground-truth completion goes through the same parse and check.
    for t in synthetic_traces(&v, &test, ThinkStyle::Steps).unwrap().iter().zip(&test) {
        let answer = student_answer(&v, &student_target_tokens(&t.0.think, &t.0.solution)).unwrap();
        assert!(t.1.check(&answer));
    }

    // A student trained to answer `0` to everything.
    let fixed: Vec<_> = train[..20]
        .iter()
        .map(|t| build_distillation_record(&trace(&t.question, "0", "0"), 96))
        .collect();
    let (wrong, _) = sft_train(cfg.fresh_model(Role::Student).unwrap(), &fixed, &SftConfig { batch_size: 4, ..quick(30.0) }, |_| {}).unwrap();
    let not_zero: Vec<_> = test.iter().filter(|t| !t.check("0")).cloned().collect();
    let r = eval_student(&wrong, &v, &not_zero, &GenerationConfig::greedy(48)).unwrap();
    assert_eq!((r.accuracy, r.format_rate), (0.0, 1.0));
    assert!(r.outcomes.iter().all(|o| o.answer.as_deref() == Some("0")));
}

mod common;

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

use common::{small_run, Noise};
use proptest::prelude::*;
use rlt_core::format::{render_rlt_prompt, END_EXPLANATION};
use rlt_core::lm::{sample, ModelState};
use rlt_core::pipeline::*;
use rlt_core::reward::{compute_r_ss, compute_rlt_reward};
use rlt_core::rl::{derive_seed, train_correctness_rl, train_rlt_teacher, GrpoConfig, RunOptions};
use rlt_core::sft::{EvalOutcome, EvalReport};
use rlt_core::tasks::TaskInstance;

struct Fixture {
    cfg: RunConfig,
    train: Vec<TaskInstance>,
    test: Vec<TaskInstance>,
    reward_student: ModelState,
    teacher: ModelState,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_run();
        let (train, test) = cfg.corpus().unwrap();
        let (reward_student, _) = train_reward_student(&cfg, &train).unwrap();
        let init = teacher_init(&cfg, &reward_student).unwrap();
        let (teacher, _) = warm_teacher(&cfg, init, &train).unwrap();
        Fixture { cfg, train, test, reward_student, teacher }
    })
}

fn tiny_grpo(steps: usize) -> GrpoConfig {
    GrpoConfig { steps, batch_prompts: 4, group_size: 4, max_new_tokens: 40, ..fixture().cfg.grpo_config() }
}

fn expected_selection(cs: &[Candidate]) -> Selection {
    for (i, c) in cs.iter().enumerate() {
        if c.parsed && c.fits {
            return Selection::Fit(i);
        }
    }
    let parsed: Vec<usize> = (0..cs.len()).filter(|&i| cs[i].parsed).collect();
    if parsed.is_empty() {
        return Selection::Skip;
    }
    let score = |i: usize| cs[i].r_ss.unwrap_or(f64::NEG_INFINITY);
    let best = parsed.iter().map(|&i| score(i)).fold(f64::NEG_INFINITY, f64::max);
    Selection::Fallback(*parsed.iter().find(|&&i| score(i) == best).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn selection_follows_fits_first_then_best_score(
        raw in proptest::collection::vec((any::<bool>(), any::<bool>(), proptest::option::of(-4i32..=0)), 1..8)
    ) {
        let cs: Vec<Candidate> = raw
            .iter()
            .map(|&(parsed, fits, r)| Candidate { parsed, fits: parsed && fits, r_ss: r.map(|x| x as f64 / 4.0) })
            .collect();
        prop_assert_eq!(select_candidate(&cs), expected_selection(&cs));
    }
}

#[test]
fn selection_examples() {
    let c = |parsed, fits, r_ss| Candidate { parsed, fits, r_ss };
    assert_eq!(select_candidate(&[c(true, true, None)]), Selection::Fit(0));
    assert_eq!(
        select_candidate(&[c(true, false, None), c(true, true, None), c(true, true, None)]),
        Selection::Fit(1)
    );
    assert_eq!(
        select_candidate(&[c(true, false, Some(-0.5)), c(true, false, Some(-0.2))]),
        Selection::Fallback(1)
    );
    assert_eq!(select_candidate(&[c(false, false, None); 3]), Selection::Skip);
}

#[test]
fn generated_traces_follow_the_selection_rule() {
    let f = fixture();
    let v = f.cfg.vocab();
    let tasks = &f.train[..24];
    let gen = f.cfg.trace_generation();
    let reward = f.cfg.reward_config();
    let students = [f.reward_student.clone()];
    let outcomes = generate_traces(&f.teacher, &students, &v, tasks, 3, f.cfg.context_window, &gen, &reward).unwrap();
    assert_eq!(outcomes, generate_traces(&f.teacher, &students, &v, tasks, 3, f.cfg.context_window, &gen, &reward).unwrap());
    let fitting = outcomes.iter().filter(|o| o.selected.as_ref().is_some_and(|s| !s.oversize)).count();
    assert!(fitting >= 20, "{fitting} of 24 fit");

    // With a budget no record fits, so every selection is a fallback on the
    // solution score; recompute it from the raw samples.
    let tight = 30;
    let outcomes = generate_traces(&f.teacher, &students, &v, tasks, 3, tight, &gen, &reward).unwrap();
    for (i, (o, task)) in outcomes.iter().zip(tasks).enumerate() {
        assert_eq!(o.sampled, 3);
        let prompt = render_rlt_prompt(&v, &task.question, &task.canonical_solution).unwrap();
        let mut best: Option<(usize, f64)> = None;
        for j in 0..3 {
            let cfg = gen.clone().with_seed(derive_seed(&[gen.rng_seed, i as u64, j as u64]));
            let out = sample(&f.teacher, &prompt, &cfg, &[END_EXPLANATION]).unwrap();
            if out.tokens.len() > reward.max_completion_tokens {
                continue;
            }
            let Ok(t) = rlt_core::format::parse_rlt_completion(&prompt, &out.tokens) else { continue };
            let r = compute_r_ss(&students, &t, reward.alpha).unwrap().0;
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((j, r));
            }
        }
        match (&o.selected, best) {
            (Some(s), Some((j, r))) => {
                assert!(s.oversize);
                assert_eq!((s.sample_index, s.r_ss), (j, Some(r)));
            }
            (None, None) => {}
            other => panic!("task {i}: {other:?}"),
        }
    }
}

#[test]
fn rank_buckets_are_ordered_by_reward() {
    let f = fixture();
    let v = f.cfg.vocab();
    let tasks = &f.train[..16];
    let reward = f.cfg.reward_config();
    let students = [f.reward_student.clone()];
    let k = 4;
    let buckets = rank_buckets(&f.teacher, &students, &v, tasks, k, &f.cfg.trace_generation(), &reward).unwrap();
    assert_eq!(buckets.len(), k);
    assert!(buckets.iter().all(|b| b.len() == tasks.len()));
    let means: Vec<f64> = buckets.iter().map(|b| bucket_mean_reward(b)).collect();
    assert!(means.windows(2).all(|w| w[0] >= w[1]), "{means:?}");
    for (i, task) in tasks.iter().enumerate() {
        let prompt = render_rlt_prompt(&v, &task.question, &task.canonical_solution).unwrap();
        let entries: Vec<_> = buckets.iter().map(|b| &b[i]).collect();
        assert!(entries.iter().all(|e| e.task_id == task.id));
        let samples: BTreeSet<usize> = entries.iter().map(|e| e.sample_index).collect();
        assert_eq!(samples.len(), k);
        for w in entries.windows(2) {
            assert!(w[0].reward.total >= w[1].reward.total);
            if w[0].reward.total == w[1].reward.total {
                assert!(w[0].sample_index < w[1].sample_index);
            }
        }
        for e in entries {
            if let Some(t) = &e.trace {
                let mut completion = t.think.clone();
                completion.push(END_EXPLANATION);
                let again = compute_rlt_reward(&f.teacher, &students, &prompt, &completion, &reward).unwrap();
                assert_eq!(again, e.reward);
            }
        }
    }
}

/// Pearson from integer sums: x = -rank, y = solved count. Exact up to the
/// final square root.
fn exact_pearson(ranks: &[i64], solved: &[i64]) -> Option<f64> {
    let n = ranks.len() as i128;
    let x: Vec<i128> = ranks.iter().map(|&r| -(r as i128)).collect();
    let y: Vec<i128> = solved.iter().map(|&s| s as i128).collect();
    let (sx, sy) = (x.iter().sum::<i128>(), y.iter().sum::<i128>());
    let sxy: i128 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let sxx: i128 = x.iter().map(|a| a * a).sum();
    let syy: i128 = y.iter().map(|b| b * b).sum();
    let cov = n * sxy - sx * sy;
    let (vx, vy) = (n * sxx - sx * sx, n * syy - sy * sy);
    (vx > 0 && vy > 0).then(|| cov as f64 / ((vx as f64).sqrt() * (vy as f64).sqrt()))
}

#[test]
fn pearson_matches_an_exact_recount() {
    let mut noise = Noise::new(4);
    for _ in 0..200 {
        let k = 2 + noise.below(14);
        let total = 500;
        let solved: Vec<i64> = (0..k).map(|_| noise.below(total + 1) as i64).collect();
        let rows: Vec<BucketRow> = solved
            .iter()
            .enumerate()
            .map(|(rank, &s)| BucketRow { rank, accuracy: s as f64 / total as f64, mean_reward: 0.0, traces: 0, flagged: 0 })
            .collect();
        let ranks: Vec<i64> = (0..k as i64).collect();
        match (correlation_from_rows(&rows), exact_pearson(&ranks, &solved)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
    let two = [
        BucketRow { rank: 0, accuracy: 0.6, mean_reward: 0.0, traces: 0, flagged: 0 },
        BucketRow { rank: 1, accuracy: 0.4, mean_reward: 0.0, traces: 0, flagged: 0 },
    ];
    assert!((correlation_from_rows(&two).unwrap() - 1.0).abs() < 1e-12);
    let flat: Vec<_> = two.iter().map(|r| BucketRow { accuracy: 0.5, ..r.clone() }).collect();
    assert_eq!(correlation_from_rows(&flat), None);
}

#[test]
fn identical_buckets_have_undefined_correlation() {
    let f = fixture();
    let v = f.cfg.vocab();
    let tasks = &f.train[..12];
    let reward = f.cfg.reward_config();
    let students = [f.reward_student.clone()];
    let b = rank_buckets(&f.teacher, &students, &v, tasks, 2, &f.cfg.trace_generation(), &reward).unwrap();
    let same = vec![b[0].clone(), b[0].clone()];
    let sft = rlt_core::sft::SftConfig { epochs: 1.0, ..f.cfg.sft_config(1) };
    let report = correlation_analysis(&same, &f.cfg.fresh_model(Role::Student).unwrap(), &sft, &v, &f.test[..20], &f.cfg.eval_generation()).unwrap();
    assert_eq!(report.rows[0].accuracy, report.rows[1].accuracy);
    assert_eq!(report.pearson, None);
}

/// Longest common contiguous run by trying every pair of start points.
fn brute_overlap(a: &[u8], b: &[u8]) -> f64 {
    let mut best = 0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            let mut n = 0;
            while i + n < a.len() && j + n < b.len() && a[i + n] == b[j + n] {
                n += 1;
            }
            best = best.max(n);
        }
    }
    if b.is_empty() { 0.0 } else { best as f64 / b.len() as f64 }
}

#[test]
fn overlap_matches_brute_force() {
    let mut noise = Noise::new(9);
    for _ in 0..50 {
        let alphabet = 2 + noise.below(4);
        let a: Vec<u8> = (0..noise.below(30)).map(|_| noise.below(alphabet) as u8).collect();
        let b: Vec<u8> = (0..1 + noise.below(12)).map(|_| noise.below(alphabet) as u8).collect();
        assert_eq!(overlap_ratio(&a, &b), brute_overlap(&a, &b));
    }
    assert_eq!(overlap_ratio(b"(2*3)*4", b"(2*3)*4"), 1.0);
    assert_eq!(overlap_ratio(b"abc", b"(2*3)*4"), 0.0);
}

#[test]
fn solved_set_overlap_recount() {
    let mut noise = Noise::new(2);
    let report = |noise: &mut Noise| {
        EvalReport::from_outcomes(
            (0..20)
                .map(|i| EvalOutcome {
                    id: format!("t{i}"),
                    formatted: true,
                    correct: noise.next() > 0.0,
                    answer: None,
                    completion_len: 0,
                })
                .collect(),
        )
    };
    let (a, b) = (report(&mut noise), report(&mut noise));
    let (mut both, mut either) = (0, 0);
    for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
        both += usize::from(x.correct && y.correct);
        either += usize::from(x.correct || y.correct);
    }
    assert_eq!(solved_set_overlap(&a, &b), Some(both as f64 / either as f64));
    assert_eq!(solved_set_overlap(&a, &a), Some(1.0));
    let none = EvalReport::from_outcomes(vec![]);
    assert_eq!(solved_set_overlap(&none, &none), None);
}

#[test]
fn coldstart_without_traces_is_plain_rl() {
    let f = fixture();
    let v = f.cfg.vocab();
    let init = f.reward_student.clone();
    let grpo = GrpoConfig { steps: 2, batch_prompts: 4, group_size: 4, ..f.cfg.correctness_rl_config() };
    let test = &f.test[..20];
    let out = coldstart_then_rl(init.clone(), &[], &f.cfg.sft_config(1), &v, &f.train, &grpo, test, &f.cfg.eval_generation()).unwrap();
    assert!(out.sft_metrics.is_empty());
    assert_eq!(out.summary.acc_after_sft, out.summary.acc_before);
    let (direct, log) = train_correctness_rl(init, &v, &f.train, &grpo, RunOptions::default()).unwrap();
    assert_eq!(direct, out.student);
    assert_eq!(log, out.rl_metrics);
}

#[test]
fn coldstart_smoke_run_improves_on_sft() {
    let f = fixture();
    let v = f.cfg.vocab();
    let traces = synthetic_traces(&v, &f.train, f.cfg.seed_style).unwrap();
    let grpo = GrpoConfig { steps: 10, ..f.cfg.correctness_rl_config() };
    let init = f.cfg.fresh_model(Role::Student).unwrap();
    let out = coldstart_then_rl(init, &traces, &f.cfg.sft_config(3), &v, &f.train, &grpo, &f.test, &f.cfg.eval_generation()).unwrap();
    let s = &out.summary;
    println!("cold start: before {:.3} after sft {:.3} after rl {:.3}", s.acc_before, s.acc_after_sft, s.acc_after_rl);
    assert!(s.acc_after_sft >= s.acc_before);
    // RL may wobble by a few held-out tasks.
    assert!(s.acc_after_rl >= s.acc_after_sft - 0.03);
}

#[test]
fn two_stage_with_an_empty_stage_is_one_run() {
    let f = fixture();
    let v = f.cfg.vocab();
    let tasks = &f.train[..64];
    let grpo = tiny_grpo(4);
    let reward = f.cfg.reward_config();
    let sft = rlt_core::sft::SftConfig { epochs: 1.0, ..f.cfg.sft_config(1) };
    let student_init = f.cfg.fresh_model(Role::Student).unwrap();
    let (single, log) =
        train_rlt_teacher(f.teacher.clone(), &[f.reward_student.clone()], &v, tasks, &grpo, &reward, RunOptions::default()).unwrap();
    for split in [0, 4] {
        let out = two_stage_training(
            f.teacher.clone(),
            f.reward_student.clone(),
            student_init.clone(),
            &v,
            tasks,
            &grpo,
            &reward,
            &sft,
            &f.cfg.trace_generation(),
            split,
        )
        .unwrap();
        assert_eq!(out.teacher, single, "split {split}");
        assert_eq!(out.rl_metrics, log);
        assert!(out.interim_student.is_none());
        assert_eq!(out.stages.iter().map(|s| s.steps).sum::<usize>(), 4);
    }
    let out = two_stage_training(
        f.teacher.clone(),
        f.reward_student.clone(),
        student_init,
        &v,
        tasks,
        &grpo,
        &reward,
        &sft,
        &f.cfg.trace_generation(),
        2,
    )
    .unwrap();
    assert!(out.interim_student.is_some());
    assert_eq!(out.rl_metrics.len(), 4);
    assert_eq!(out.rl_metrics[..2], log[..2]);
    let stages: Vec<_> = out.stages.iter().map(|s| (s.first_step, s.steps, s.reward_student.as_str())).collect();
    assert_eq!(stages, vec![(0, 2, "initial"), (2, 2, "interim")]);
}

#[test]
fn ablation_modes_change_only_their_term() {
    let base = fixture().cfg.reward_config();
    assert_eq!(AblationMode::Full.apply(&base), base);
    assert_eq!(AblationMode::NoKl.apply(&base).lambda, 0.0);
    assert_eq!(AblationMode::NoMinmax.apply(&base).alpha, 0.0);
    assert_eq!(AblationMode::NoKl.apply(&base).alpha, base.alpha);
    assert_eq!("no_minmax".parse::<AblationMode>().unwrap(), AblationMode::NoMinmax);
}

#[test]
fn reruns_reproduce_the_manifest() {
    let f = fixture();
    let v = f.cfg.vocab();
    let run = |dir: &std::path::Path, cfg: &RunConfig| {
        let (train, _) = cfg.corpus().unwrap();
        let mut run = RunDir::create(dir, "smoke", cfg).unwrap();
        run.add_corpus("train", train.iter().map(|t| t.id.as_str()));
        let outcomes = generate_traces(&f.teacher, &[f.reward_student.clone()], &v, &train[..16], 1, cfg.context_window, &cfg.trace_generation(), &cfg.reward_config()).unwrap();
        let rows: Vec<_> = outcomes.iter().filter_map(|o| o.record(&v)).collect();
        run.write_dataset("traces", &rows).unwrap();
        let grpo = GrpoConfig { steps: 2, batch_prompts: 4, group_size: 4, ..cfg.correctness_rl_config() };
        let (student, log) = train_correctness_rl(f.reward_student.clone(), &v, &train, &grpo, RunOptions::default()).unwrap();
        run.save_checkpoint("student", &student).unwrap();
        run.write_metrics("rl", &log).unwrap();
        run.finish().unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run(a.path(), &f.cfg);
    first.verify(a.path()).unwrap();
    let loaded = RunManifest::load(a.path()).unwrap();
    let second = run(b.path(), &loaded.config);
    let hashes = |m: &RunManifest| m.artifacts().map(|x| (x.name.clone(), x.sha256.clone())).collect::<Vec<_>>();
    assert_eq!(hashes(&first), hashes(&second));
    assert_eq!(first.corpora, second.corpora);
}

#[test]
fn test_ids_never_reach_training_data() {
    let f = fixture();
    let test_ids: HashSet<&str> = f.test.iter().map(|t| t.id.as_str()).collect();
    assert!(f.train.iter().all(|t| !test_ids.contains(t.id.as_str())));
    let v = f.cfg.vocab();
    let outcomes = generate_traces(&f.teacher, &[f.reward_student.clone()], &v, &f.train[..32], 1, f.cfg.context_window, &f.cfg.trace_generation(), &f.cfg.reward_config()).unwrap();
    assert!(outcomes.iter().all(|o| !test_ids.contains(o.task_id.as_str())));
    let questions: HashSet<&str> = f.test.iter().map(|t| t.question.as_str()).collect();
    assert!(f.train.iter().all(|t| !questions.contains(t.question.as_str())));
}

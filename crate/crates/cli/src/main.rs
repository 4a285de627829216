use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rlt_core::format::{read_jsonl, SegmentedTrace, TraceRecord, Vocabulary};
use rlt_core::lm::{load_model_for_vocab, ModelState};
use rlt_core::pipeline::*;
use rlt_core::rl::{train_correctness_rl, train_rlt_teacher, RunOptions};
use rlt_core::sft::eval_student;
use rlt_core::tasks::{TaskFamily, TaskInstance};

#[derive(Parser)]
#[command(name = "rlt", version, about = "Train teachers that explain, and the students they teach")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML run config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for artifacts, metrics and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Directory with train.jsonl / test.jsonl; regenerated from the config
    /// when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split a task corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        family: Option<TaskFamily>,
    },
    /// Warm a teacher up on synthetic explanations in the teaching format.
    TeacherSft {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; a fresh model when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// GRPO on the dense teacher reward.
    TeacherRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Reward student(s); several are ensembled.
        #[arg(long, required = true)]
        student: Vec<PathBuf>,
        /// Pause after this many steps, distill an interim student and use
        /// it as the reward student for the rest.
        #[arg(long)]
        two_stage: Option<usize>,
    },
    /// Sample, select and save teacher explanations for the train split.
    GenTraces {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Student used for the solution-score fallback.
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train a student on a trace file (or on synthetic explanations).
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Permute think spans across records (control run).
        #[arg(long)]
        shuffle_thinks: bool,
    },
    /// Greedy accuracy on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Distill on traces (if given), then correctness RL.
    ColdstartRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Rank-bucketed explanations, one student per bucket, correlation.
    RankAnalysis {
        #[command(flatten)]
        common: Common,
        /// Defaults to the warmed-up teacher checkpoint of a teacher-sft run.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Apply a teacher to another task family.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        family: TaskFamily,
        /// Also run correctness RL directly on the target family.
        #[arg(long)]
        direct_rl: bool,
    },
    /// Teacher RL under an ablated reward, with trace statistics.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: AblationMode,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
    /// CSV tables and SVG plots from the metrics of one or more runs.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Ctx {
    cfg: RunConfig,
    vocab: Vocabulary,
    out: PathBuf,
    corpus: Option<PathBuf>,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(Self {
            vocab: cfg.vocab(),
            cfg,
            out: c.out.clone(),
            corpus: c.corpus.clone(),
        })
    }

    fn run(&self, pipeline: &str) -> Result<RunDir> {
        Ok(RunDir::create(&self.out, pipeline, &self.cfg)?)
    }

    fn corpus_of(&self, family: TaskFamily) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
        match &self.corpus {
            Some(dir) => Ok((read_jsonl(dir.join("train.jsonl"))?, read_jsonl(dir.join("test.jsonl"))?)),
            None => Ok(self.cfg.corpus_for(family)?),
        }
    }

    fn corpus(&self) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
        self.corpus_of(self.cfg.family)
    }

    fn model(&self, path: &Path) -> Result<ModelState> {
        load_model_for_vocab(path, self.vocab.size()).with_context(|| format!("loading {}", path.display()))
    }

    fn traces(&self, path: &Path) -> Result<Vec<SegmentedTrace>> {
        let rows: Vec<TraceRecord> = read_jsonl(path)?;
        Ok(rows.iter().map(|r| r.to_trace(&self.vocab)).collect::<rlt_core::Result<_>>()?)
    }
}

fn record_corpus(run: &mut RunDir, train: &[TaskInstance], test: &[TaskInstance]) {
    run.add_corpus("train", train.iter().map(|t| t.id.as_str()));
    run.add_corpus("test", test.iter().map(|t| t.id.as_str()));
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenCorpus { common, family } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.cfg.corpus_for(family.unwrap_or(ctx.cfg.family))?;
            let mut run = ctx.run("gen-corpus")?;
            record_corpus(&mut run, &train, &test);
            run.write_dataset("train", &train)?;
            run.write_dataset("test", &test)?;
            run.finish()?;
            println!("train {} test {}", train.len(), test.len());
        }
        Command::TeacherSft { common, init } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.corpus()?;
            let init = match init {
                Some(p) => ctx.model(&p)?,
                None => ctx.cfg.fresh_model(Role::Teacher)?,
            };
            let mut run = ctx.run("teacher-sft")?;
            record_corpus(&mut run, &train, &test);
            let (teacher, metrics) = warm_teacher(&ctx.cfg, init, &train)?;
            let rate = teacher_parse_rate(&teacher, &ctx.vocab, &test, &ctx.cfg.trace_generation(), ctx.cfg.rl_max_new_tokens)?;
            run.save_checkpoint("teacher_warm", &teacher)?;
            run.write_metrics("teacher_sft", &metrics)?;
            run.note("parse_rate", json!(rate));
            run.finish()?;
            println!("parse rate {rate:.3}");
        }
        Command::TeacherRl {
            common,
            teacher,
            student,
            two_stage,
        } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.corpus()?;
            let teacher = ctx.model(&teacher)?;
            let students = student.iter().map(|p| ctx.model(p)).collect::<Result<Vec<_>>>()?;
            let mut run = ctx.run("teacher-rl")?;
            record_corpus(&mut run, &train, &test);
            let grpo = ctx.cfg.grpo_config();
            let reward = ctx.cfg.reward_config();
            match two_stage {
                None => {
                    let (teacher, metrics) =
                        train_rlt_teacher(teacher, &students, &ctx.vocab, &train, &grpo, &reward, RunOptions {
                            abort_checkpoint: Some(run.path("teacher_rl_aborted.ckpt")),
                            on_step: None,
                        })?;
                    run.save_checkpoint("teacher_rl", &teacher)?;
                    run.write_metrics("teacher_rl", &metrics)?;
                }
                Some(first) => {
                    if students.len() != 1 {
                        bail!("two-stage training takes exactly one reward student");
                    }
                    let out = two_stage_training(
                        teacher,
                        students[0].clone(),
                        ctx.cfg.fresh_model(Role::Student)?,
                        &ctx.vocab,
                        &train,
                        &grpo,
                        &reward,
                        &ctx.cfg.sft_config(ctx.cfg.role_seed(Role::Student)),
                        &ctx.cfg.trace_generation(),
                        first,
                    )?;
                    run.save_checkpoint("teacher_rl", &out.teacher)?;
                    if let Some(s) = &out.interim_student {
                        run.save_checkpoint("interim_student", s)?;
                    }
                    run.save_checkpoint("final_student", &out.final_student)?;
                    run.write_metrics("teacher_rl", &out.rl_metrics)?;
                    run.note("stages", json!(out.stages));
                }
            }
            run.finish()?;
        }
        Command::GenTraces {
            common,
            teacher,
            student,
            k,
        } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.corpus()?;
            let teacher = ctx.model(&teacher)?;
            let student = ctx.model(&student)?;
            let mut run = ctx.run("gen-traces")?;
            record_corpus(&mut run, &train, &test);
            let outcomes = generate_traces(
                &teacher,
                std::slice::from_ref(&student),
                &ctx.vocab,
                &train,
                k.unwrap_or(ctx.cfg.traces_k),
                ctx.cfg.context_window,
                &ctx.cfg.trace_generation(),
                &ctx.cfg.reward_config(),
            )?;
            let records: Vec<TraceRecord> = outcomes.iter().filter_map(|o| o.record(&ctx.vocab)).collect();
            let skipped: Vec<&str> = outcomes.iter().filter(|o| o.selected.is_none()).map(|o| o.task_id.as_str()).collect();
            run.write_dataset("traces", &records)?;
            run.note("skipped", json!(skipped));
            run.note("stats", json!(trace_stats(&selected_traces(&outcomes))));
            run.finish()?;
            println!("traces {} skipped {}", records.len(), skipped.len());
        }
        Command::Distill {
            common,
            traces,
            init,
            shuffle_thinks: shuffle,
        } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.corpus()?;
            let (traces, role) = match &traces {
                Some(p) => (ctx.traces(p)?, Role::Student),
                None => (synthetic_traces(&ctx.vocab, &train, ctx.cfg.reward_student_style)?, Role::RewardStudent),
            };
            let traces = if shuffle { shuffle_thinks(&traces, ctx.cfg.seed) } else { traces };
            let init = match init {
                Some(p) => ctx.model(&p)?,
                None => ctx.cfg.fresh_model(role)?,
            };
            let mut run = ctx.run("distill")?;
            record_corpus(&mut run, &train, &test);
            let d = distill(init, &traces, &ctx.cfg.sft_config(ctx.cfg.role_seed(role)))?;
            let report = eval_student(&d.student, &ctx.vocab, &test, &ctx.cfg.eval_generation())?;
            run.save_checkpoint("student", &d.student)?;
            run.write_metrics("distill", &d.metrics)?;
            run.note("dropped_oversize", json!(d.dropped_oversize));
            run.note("accuracy", json!(report.accuracy));
            run.finish()?;
            println!("accuracy {:.4}", report.accuracy);
        }
        Command::Eval { common, model } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.corpus()?;
            let model = ctx.model(&model)?;
            let mut run = ctx.run("eval")?;
            record_corpus(&mut run, &train, &test);
            let report = eval_student(&model, &ctx.vocab, &test, &ctx.cfg.eval_generation())?;
            run.write_dataset("outcomes", &report.outcomes)?;
            run.note("accuracy", json!(report.accuracy));
            run.note("format_rate", json!(report.format_rate));
            run.finish()?;
            println!("accuracy {:.4} format {:.4}", report.accuracy, report.format_rate);
        }
        Command::ColdstartRl { common, traces, init } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.corpus()?;
            let traces = match &traces {
                Some(p) => ctx.traces(p)?,
                None => Vec::new(),
            };
            let init = match init {
                Some(p) => ctx.model(&p)?,
                None => ctx.cfg.fresh_model(Role::Student)?,
            };
            let mut run = ctx.run("coldstart-rl")?;
            record_corpus(&mut run, &train, &test);
            let out = coldstart_then_rl(
                init,
                &traces,
                &ctx.cfg.sft_config(ctx.cfg.role_seed(Role::Student)),
                &ctx.vocab,
                &train,
                &ctx.cfg.correctness_rl_config(),
                &test,
                &ctx.cfg.eval_generation(),
            )?;
            run.save_checkpoint("student", &out.student)?;
            run.write_metrics("sft", &out.sft_metrics)?;
            run.write_metrics("rl", &out.rl_metrics)?;
            run.write_metrics("summary", std::slice::from_ref(&out.summary))?;
            run.finish()?;
            let s = out.summary;
            println!("accuracy before {:.4} after sft {:.4} after rl {:.4}", s.acc_before, s.acc_after_sft, s.acc_after_rl);
        }
        Command::RankAnalysis {
            common,
            teacher,
            student,
            k,
        } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.corpus()?;
            let teacher = ctx.model(&teacher)?;
            let student = ctx.model(&student)?;
            let mut run = ctx.run("rank-analysis")?;
            record_corpus(&mut run, &train, &test);
            let buckets = rank_buckets(
                &teacher,
                std::slice::from_ref(&student),
                &ctx.vocab,
                &train,
                k.unwrap_or(ctx.cfg.rank_k),
                &ctx.cfg.trace_generation(),
                &ctx.cfg.reward_config(),
            )?;
            for (j, b) in buckets.iter().enumerate() {
                let rows: Vec<_> = b
                    .iter()
                    .map(|e| {
                        json!({
                            "task_id": e.task_id,
                            "sample_index": e.sample_index,
                            "flagged": e.flagged,
                            "think": e.trace.as_ref().map(|t| ctx.vocab.detokenize(&t.think)),
                            "reward": e.reward,
                        })
                    })
                    .collect();
                run.write_dataset(&format!("bucket_{j}"), &rows)?;
            }
            let report = correlation_analysis(
                &buckets,
                &ctx.cfg.fresh_model(Role::Student)?,
                &ctx.cfg.sft_config(ctx.cfg.role_seed(Role::Student)),
                &ctx.vocab,
                &test,
                &ctx.cfg.eval_generation(),
            )?;
            run.write_metrics("buckets", &report.rows)?;
            run.note("pearson", json!(report.pearson));
            run.finish()?;
            match report.pearson {
                Some(r) => println!("pearson {r:.4}"),
                None => println!("pearson undefined"),
            }
        }
        Command::Transfer {
            common,
            teacher,
            student,
            family,
            direct_rl,
        } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.corpus_of(family)?;
            let teacher = ctx.model(&teacher)?;
            let student = ctx.model(&student)?;
            let mut run = ctx.run("transfer")?;
            record_corpus(&mut run, &train, &test);
            let sft = ctx.cfg.sft_config(ctx.cfg.role_seed(Role::Student));
            let out = zero_shot_transfer(
                &teacher,
                std::slice::from_ref(&student),
                ctx.cfg.fresh_model(Role::Student)?,
                &ctx.vocab,
                &train,
                &test,
                ctx.cfg.traces_k,
                &ctx.cfg.trace_generation(),
                &ctx.cfg.reward_config(),
                &sft,
                &ctx.cfg.eval_generation(),
            )?;
            let records: Vec<TraceRecord> = out.traces.iter().filter_map(|o| o.record(&ctx.vocab)).collect();
            run.write_dataset("traces", &records)?;
            run.write_dataset("outcomes", &out.eval.outcomes)?;
            run.save_checkpoint("student", &out.student)?;
            run.note("accuracy", json!(out.eval.accuracy));
            println!("transfer accuracy {:.4}", out.eval.accuracy);
            if direct_rl {
                let (rl_student, metrics) = train_correctness_rl(
                    ctx.cfg.fresh_model(Role::Student)?,
                    &ctx.vocab,
                    &train,
                    &ctx.cfg.correctness_rl_config(),
                    RunOptions::default(),
                )?;
                let direct = eval_student(&rl_student, &ctx.vocab, &test, &ctx.cfg.eval_generation())?;
                run.write_metrics("direct_rl", &metrics)?;
                run.note("direct_rl_accuracy", json!(direct.accuracy));
                run.note("solved_overlap", json!(solved_set_overlap(&out.eval, &direct)));
                println!("direct rl accuracy {:.4}", direct.accuracy);
            }
            run.finish()?;
        }
        Command::Ablate {
            common,
            mode,
            teacher,
            student,
        } => {
            let ctx = Ctx::new(&common)?;
            let (train, test) = ctx.corpus()?;
            let teacher = ctx.model(&teacher)?;
            let student = ctx.model(&student)?;
            let mut run = ctx.run("ablate")?;
            record_corpus(&mut run, &train, &test);
            let out = ablation_run(
                mode,
                teacher,
                std::slice::from_ref(&student),
                &ctx.vocab,
                &train,
                &ctx.cfg.grpo_config(),
                &ctx.cfg.reward_config(),
                &ctx.cfg.trace_generation(),
                ctx.cfg.context_window,
            )?;
            let records: Vec<TraceRecord> = out.traces.iter().filter_map(|o| o.record(&ctx.vocab)).collect();
            run.save_checkpoint("teacher", &out.teacher)?;
            run.write_metrics("teacher_rl", &out.rl_metrics)?;
            run.write_dataset("traces", &records)?;
            run.note("stats", json!(out.stats));
            run.finish()?;
            println!(
                "mean think length {:.2} solution overlap {:.4}",
                out.stats.mean_think_len, out.stats.mean_overlap
            );
        }
        Command::Report { runs, out } => report(&runs, &out)?,
    }
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut reward_curves = Vec::new();
    for dir in runs {
        let manifest = RunManifest::load(dir)?;
        manifest.verify(dir)?;
        let label = dir.file_name().map_or_else(|| manifest.pipeline.clone(), |n| n.to_string_lossy().into_owned());
        for m in &manifest.metrics {
            let rows: Vec<serde_json::Value> = read_jsonl(dir.join(&m.path))?;
            let stem = format!("{label}_{}", m.name);
            std::fs::write(out.join(format!("{stem}.csv")), json_rows_to_csv(&rows)?)?;
            let curve = column(&rows, "step", "mean_reward");
            if !curve.is_empty() {
                reward_curves.push((stem.clone(), curve));
            }
            let buckets = column(&rows, "rank", "accuracy");
            if !buckets.is_empty() {
                let svg = svg_line_plot("accuracy by bucket rank", "rank", "accuracy", &[(stem.clone(), buckets)]);
                std::fs::write(out.join(format!("{stem}.svg")), svg)?;
            }
        }
    }
    if !reward_curves.is_empty() {
        let svg = svg_line_plot("mean reward per step", "step", "mean reward", &reward_curves);
        std::fs::write(out.join("reward_curves.svg"), svg)?;
    }
    println!("report written to {}", out.display());
    Ok(())
}

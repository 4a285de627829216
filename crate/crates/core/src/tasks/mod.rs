//! Synthetic verifiable tasks: countdown and modular arithmetic chains.

mod expr;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use expr::{fmt_rat, parse_expr, Expr, Glyphs, Op, Rational};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Countdown3,
    Countdown4,
    ArithChain,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Countdown3 => "countdown3",
            TaskFamily::Countdown4 => "countdown4",
            TaskFamily::ArithChain => "arith_chain",
        }
    }

    pub fn check(self, question: &str, candidate: &str) -> bool {
        match self {
            TaskFamily::Countdown3 | TaskFamily::Countdown4 => check_countdown(question, candidate),
            TaskFamily::ArithChain => check_arith_chain(question, candidate),
        }
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "countdown3" => Ok(TaskFamily::Countdown3),
            "countdown4" => Ok(TaskFamily::Countdown4),
            "arith_chain" => Ok(TaskFamily::ArithChain),
            _ => Err(Error::InvalidConfig(format!("unknown task family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Difficulty {
    Countdown {
        numbers: usize,
        min_value: i64,
        max_value: i64,
        max_target: i64,
        glyphs: Glyphs,
    },
    ArithChain {
        steps: usize,
        modulus: i64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub family: TaskFamily,
    pub question: String,
    pub canonical_solution: String,
    pub difficulty: Difficulty,
    #[serde(default)]
    pub split: Split,
}

impl TaskInstance {
    pub fn check(&self, candidate: &str) -> bool {
        self.family.check(&self.question, candidate)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountdownSpec {
    pub numbers: usize,
    pub count: usize,
    pub min_value: i64,
    pub max_value: i64,
    pub max_target: i64,
    pub glyphs: Glyphs,
    pub seed: u64,
}

impl Default for CountdownSpec {
    fn default() -> Self {
        Self {
            numbers: 3,
            count: 1000,
            min_value: 1,
            max_value: 9,
            max_target: 99,
            glyphs: Glyphs::Standard,
            seed: 0,
        }
    }
}

const RETRIES_PER_INSTANCE: usize = 200;

/// Countdown instances built expression-first: draw the numbers, combine
/// random pairs with random operations (positive integer intermediates
/// only), then state the numbers and the resulting target. Questions are
/// unique within a call.
pub fn gen_countdown(spec: &CountdownSpec) -> Result<Vec<TaskInstance>> {
    let family = match spec.numbers {
        3 => TaskFamily::Countdown3,
        4 => TaskFamily::Countdown4,
        n => return Err(Error::InvalidConfig(format!("countdown needs 3 or 4 numbers, got {n}"))),
    };
    if spec.min_value < 1 || spec.max_value < spec.min_value || spec.max_target < 1 {
        return Err(Error::InvalidConfig(format!("bad countdown ranges {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(spec.count);
    let budget = RETRIES_PER_INSTANCE * spec.count.max(1);
    let mut attempts = 0;
    while out.len() < spec.count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::GenerationFailure(format!(
                "only {} of {} unique countdown instances after {budget} attempts",
                out.len(),
                spec.count
            )));
        }
        let nums: Vec<i64> = (0..spec.numbers)
            .map(|_| rng.random_range(spec.min_value..=spec.max_value))
            .collect();
        let Some(expr) = random_countdown_expr(&nums, &mut rng) else {
            continue;
        };
        let target = expr.eval().expect("constructed expression evaluates").to_integer() as i64;
        if target > spec.max_target {
            continue;
        }
        let question = countdown_question(&nums, target);
        if !seen.insert(question.clone()) {
            continue;
        }
        let canonical_solution = expr.render(spec.glyphs);
        debug_assert!(check_countdown(&question, &canonical_solution));
        out.push(TaskInstance {
            id: format!("{}-{}-{}", family.name(), spec.seed, out.len()),
            family,
            question,
            canonical_solution,
            difficulty: Difficulty::Countdown {
                numbers: spec.numbers,
                min_value: spec.min_value,
                max_value: spec.max_value,
                max_target: spec.max_target,
                glyphs: spec.glyphs,
            },
            split: Split::Train,
        });
    }
    Ok(out)
}

/// `2 3 4 -> 24`
pub fn countdown_question(numbers: &[i64], target: i64) -> String {
    let nums: Vec<String> = numbers.iter().map(|n| n.to_string()).collect();
    format!("{} -> {}", nums.join(" "), target)
}

fn parse_countdown_question(question: &str) -> Option<(Vec<i64>, i64)> {
    let (lhs, rhs) = question.split_once("->")?;
    let nums = lhs
        .split_whitespace()
        .map(|t| t.parse().ok())
        .collect::<Option<Vec<i64>>>()?;
    let target = rhs.trim().parse().ok()?;
    (!nums.is_empty()).then_some((nums, target))
}

fn random_countdown_expr<R: Rng>(numbers: &[i64], rng: &mut R) -> Option<Expr> {
    let mut pool: Vec<(Expr, i64)> = numbers.iter().map(|&n| (Expr::Num(n), n)).collect();
    while pool.len() > 1 {
        let i = rng.random_range(0..pool.len());
        let (a, va) = pool.swap_remove(i);
        let j = rng.random_range(0..pool.len());
        let (b, vb) = pool.swap_remove(j);
        let op = Op::ALL[rng.random_range(0..4)];
        let v = match op {
            Op::Add => va + vb,
            Op::Sub if va > vb => va - vb,
            Op::Mul => va * vb,
            Op::Div if vb > 1 && va % vb == 0 => va / vb,
            _ => return None,
        };
        pool.push((Expr::Bin(op, Box::new(a), Box::new(b)), v));
    }
    pool.pop().map(|(e, _)| e)
}

/// Accepts iff the candidate parses, uses exactly the given multiset of
/// numbers and evaluates exactly to the target.
pub fn check_countdown(question: &str, candidate: &str) -> bool {
    let Some((mut nums, target)) = parse_countdown_question(question) else {
        return false;
    };
    let Some(expr) = parse_expr(candidate) else {
        return false;
    };
    let mut used = Vec::new();
    expr.numbers(&mut used);
    nums.sort_unstable();
    used.sort_unstable();
    nums == used && expr.eval() == Some(Rational::from_integer(target as i128))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithChainSpec {
    pub count: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub modulus: i64,
    pub seed: u64,
}

impl Default for ArithChainSpec {
    fn default() -> Self {
        Self {
            count: 1000,
            min_steps: 2,
            max_steps: 3,
            modulus: 10,
            seed: 0,
        }
    }
}

/// Chains like `((3+4)*2) mod 10 = ?` with answer `4`. The start value is a
/// residue, operands are 1..=9 and operations are `+` or `*`.
pub fn gen_arith_chain(spec: &ArithChainSpec) -> Result<Vec<TaskInstance>> {
    if spec.min_steps == 0 || spec.max_steps < spec.min_steps || spec.modulus < 2 {
        return Err(Error::InvalidConfig(format!("bad arith chain spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(spec.count);
    let budget = RETRIES_PER_INSTANCE * spec.count.max(1);
    let mut attempts = 0;
    while out.len() < spec.count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::GenerationFailure(format!(
                "only {} of {} unique chains after {budget} attempts",
                out.len(),
                spec.count
            )));
        }
        let steps = rng.random_range(spec.min_steps..=spec.max_steps);
        let mut expr = Expr::Num(rng.random_range(0..spec.modulus.min(10)));
        for _ in 0..steps {
            let op = if rng.random::<bool>() { Op::Add } else { Op::Mul };
            expr = Expr::Bin(op, Box::new(expr), Box::new(Expr::Num(rng.random_range(1..=9))));
        }
        let question = format!("({}) mod {} = ?", expr.render(Glyphs::Standard), spec.modulus);
        if !seen.insert(question.clone()) {
            continue;
        }
        let answer = eval_mod(&expr, spec.modulus).expect("chain of + and * evaluates");
        out.push(TaskInstance {
            id: format!("arith_chain-{}-{}", spec.seed, out.len()),
            family: TaskFamily::ArithChain,
            question,
            canonical_solution: answer.to_string(),
            difficulty: Difficulty::ArithChain {
                steps,
                modulus: spec.modulus,
            },
            split: Split::Train,
        });
    }
    Ok(out)
}

fn parse_arith_question(question: &str) -> Option<(Expr, i64)> {
    let (expr, rest) = question.rsplit_once(" mod ")?;
    let (modulus, tail) = rest.split_once('=')?;
    if tail.trim() != "?" {
        return None;
    }
    let modulus: i64 = modulus.trim().parse().ok()?;
    (modulus >= 2).then_some(())?;
    Some((parse_expr(expr)?, modulus))
}

fn eval_mod(expr: &Expr, modulus: i64) -> Option<i64> {
    let v = expr.eval()?;
    if !v.is_integer() {
        return None;
    }
    Some((v.to_integer() % modulus as i128).rem_euclid(modulus as i128) as i64)
}

/// String-normalized exact match: surrounding and inner whitespace and a
/// leading `+` are ignored, leading zeros are stripped.
pub fn check_arith_chain(question: &str, answer: &str) -> bool {
    let Some((expr, modulus)) = parse_arith_question(question) else {
        return false;
    };
    let Some(expected) = eval_mod(&expr, modulus) else {
        return false;
    };
    normalize_answer(answer).is_some_and(|a| a == expected.to_string())
}

fn normalize_answer(answer: &str) -> Option<String> {
    let s: String = answer.chars().filter(|c| !c.is_whitespace()).collect();
    let s = s.strip_prefix('+').unwrap_or(&s);
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let trimmed = s.trim_start_matches('0');
    Some(if trimmed.is_empty() { "0".into() } else { trimmed.into() })
}

/// How a synthetic explanation is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThinkStyle {
    /// One `a op b = c` step per operation, e.g. `3+4=7 7*2=4`.
    #[default]
    Steps,
    /// The steps followed by a restatement of the solution.
    StepsThenSolution,
    /// Only the solution restated.
    Solution,
    /// One of the three above, picked per instance from a hash of its id.
    Mixed,
}

/// Synthetic explanation for an instance, built from its canonical solution.
pub fn synthetic_think(task: &TaskInstance, style: ThinkStyle) -> String {
    let steps = match (&task.family, &task.difficulty) {
        (TaskFamily::ArithChain, Difficulty::ArithChain { modulus, .. }) => {
            let (expr, _) = parse_arith_question(&task.question).expect("generated question parses");
            mod_steps(&expr, *modulus)
        }
        (_, Difficulty::Countdown { glyphs, .. }) => parse_expr(&task.canonical_solution)
            .and_then(|e| e.steps(*glyphs))
            .expect("canonical solution evaluates"),
        _ => String::new(),
    };
    let style = match style {
        ThinkStyle::Mixed => {
            let h = Sha256::digest(task.id.as_bytes());
            [ThinkStyle::Steps, ThinkStyle::StepsThenSolution, ThinkStyle::Solution][h[0] as usize % 3]
        }
        s => s,
    };
    match style {
        ThinkStyle::Mixed => unreachable!(),
        ThinkStyle::Steps => steps,
        ThinkStyle::StepsThenSolution => format!("{steps} so {}", task.canonical_solution),
        ThinkStyle::Solution => format!("so {}", task.canonical_solution),
    }
}

fn mod_steps(expr: &Expr, modulus: i64) -> String {
    fn go(e: &Expr, m: i64, out: &mut Vec<String>) -> i64 {
        match e {
            Expr::Num(n) => *n,
            Expr::Bin(op, a, b) => {
                let x = go(a, m, out);
                let y = go(b, m, out);
                let z = match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mul => x * y,
                    Op::Div => x / y.max(1),
                }
                .rem_euclid(m);
                out.push(format!("{x}{}{y}={z}", Glyphs::Standard.symbol(*op)));
                z
            }
        }
    }
    let mut parts = Vec::new();
    go(expr, modulus, &mut parts);
    parts.join(" ")
}

/// Deterministic disjoint split: a seeded shuffle, the first
/// `round(n * test_fraction)` instances go to test. Order within each split
/// follows the input order.
pub fn split_corpus(
    instances: &[TaskInstance],
    test_fraction: f64,
    seed: u64,
) -> (Vec<TaskInstance>, Vec<TaskInstance>) {
    let n = instances.len();
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (task, t) in instances.iter().zip(is_test) {
        let mut task = task.clone();
        if t {
            task.split = Split::Test;
            test.push(task);
        } else {
            task.split = Split::Train;
            train.push(task);
        }
    }
    (train, test)
}

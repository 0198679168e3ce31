//! Seeded synthetic arithmetic tasks with train / interpolation /
//! extrapolation splits.
//!
//! Operand digit counts are drawn uniformly from the allowed range, then the
//! operand uniformly among numbers with that many digits (1-digit operands
//! include 0). Evaluation splits never share a question string with any
//! other split.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numvocab::NumberVocabulary;

pub const COPY_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";
const MAX_DIGITS: u32 = 18;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid digit range {0:?}: expected lo..hi with 1 <= lo <= hi <= 18")]
    BadRange(String),
    #[error("extrapolation digits {extra} must exceed the training maximum {train_max}")]
    NoExtrapolation { extra: u32, train_max: u32 },
    #[error("{split} split asks for {requested} distinct questions but only about {available} exist")]
    Capacity {
        split: Split,
        requested: usize,
        available: u128,
    },
    #[error("unknown {kind} {value:?}")]
    Unknown { kind: &'static str, value: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    AddSub,
    Multiplication,
    /// Letter strings echoed back; answers contain no number tokens.
    Copy,
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "addsub" | "add_sub" | "add-sub" => Ok(Task::AddSub),
            "mul" | "multiplication" => Ok(Task::Multiplication),
            "copy" => Ok(Task::Copy),
            _ => Err(DataError::Unknown {
                kind: "task",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::AddSub => "addsub",
            Task::Multiplication => "mul",
            Task::Copy => "copy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Interpolation,
    Extrapolation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Interpolation, Split::Extrapolation];
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "interpolation" | "interp" => Ok(Split::Interpolation),
            "extrapolation" | "extra" => Ok(Split::Extrapolation),
            _ => Err(DataError::Unknown {
                kind: "split",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Interpolation => "interpolation",
            Split::Extrapolation => "extrapolation",
        })
    }
}

/// Inclusive digit-count range, written `lo..hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DigitRange {
    pub lo: u32,
    pub hi: u32,
}

impl DigitRange {
    pub fn new(lo: u32, hi: u32) -> Result<Self, DataError> {
        if lo == 0 || lo > hi || hi > MAX_DIGITS {
            return Err(DataError::BadRange(format!("{lo}..{hi}")));
        }
        Ok(Self { lo, hi })
    }

    /// Count of nonnegative integers whose digit count lies in the range.
    fn population(&self) -> u128 {
        (self.lo..=self.hi).map(numbers_with_digits).sum()
    }
}

impl FromStr for DigitRange {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::BadRange(s.to_string());
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let k = s.trim().parse().map_err(|_| bad())?;
                (k, k)
            }
        };
        DigitRange::new(lo, hi).map_err(|_| bad())
    }
}

impl fmt::Display for DigitRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GenSpec {
    pub task: Task,
    pub train_digits: DigitRange,
    /// Operand digit count that defines the extrapolation split; at least one
    /// operand of every extrapolation sample has exactly this many digits.
    pub extrapolation_digits: u32,
    pub n_train: usize,
    pub n_interpolation: usize,
    pub n_extrapolation: usize,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(task: Task, train_digits: DigitRange, extrapolation_digits: u32, n: usize, seed: u64) -> Self {
        Self {
            task,
            train_digits,
            extrapolation_digits,
            n_train: n,
            n_interpolation: (n / 10).max(1),
            n_extrapolation: (n / 10).max(1),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        DigitRange::new(self.train_digits.lo, self.train_digits.hi)?;
        if self.extrapolation_digits <= self.train_digits.hi || self.extrapolation_digits > MAX_DIGITS {
            return Err(DataError::NoExtrapolation {
                extra: self.extrapolation_digits,
                train_max: self.train_digits.hi,
            });
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Interpolation => self.n_interpolation,
            Split::Extrapolation => self.n_extrapolation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaskSample {
    pub question: String,
    pub answer: String,
    /// Exact value of the answer; `None` for non-numeric tasks.
    pub answer_value: Option<i128>,
    /// Digit count of each operand (string length for the copy task).
    pub difficulty: Vec<u32>,
    pub split: Split,
}

impl TaskSample {
    /// Difficulty bucket used for per-bucket metrics: the largest operand
    /// digit count.
    pub fn bucket(&self) -> u32 {
        self.difficulty.iter().copied().max().unwrap_or(0)
    }

    /// Rebuilds a sample from its question and answer strings.
    pub fn parse(question: &str, answer: &str, split: Split) -> Option<Self> {
        let (answer_value, difficulty) = if let Some(word) = question.strip_prefix("Copy ").and_then(|q| q.strip_suffix('?')) {
            (None, vec![word.len() as u32])
        } else {
            let (value, operands) = evaluate_question(question)?;
            (Some(value), operands.iter().map(|o| digit_count(*o)).collect())
        };
        Some(Self {
            question: question.to_string(),
            answer: answer.to_string(),
            answer_value,
            difficulty,
            split,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub train: Vec<TaskSample>,
    pub interpolation: Vec<TaskSample>,
    pub extrapolation: Vec<TaskSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TaskSample] {
        match split {
            Split::Train => &self.train,
            Split::Interpolation => &self.interpolation,
            Split::Extrapolation => &self.extrapolation,
        }
    }

    /// Writes `train.tsv`, `interpolation.tsv` and `extrapolation.tsv`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<(Split, std::path::PathBuf, usize)>, DataError> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for split in Split::ALL {
            let path = dir.join(format!("{split}.tsv"));
            std::fs::write(&path, to_tsv(self.split(split)))?;
            written.push((split, path, self.split(split).len()));
        }
        Ok(written)
    }

    pub fn read_dir(dir: &Path) -> Result<Self, DataError> {
        let read = |split: Split| -> Result<Vec<TaskSample>, DataError> {
            let path = dir.join(format!("{split}.tsv"));
            if !path.exists() {
                return Ok(Vec::new());
            }
            from_tsv(&std::fs::read_to_string(path)?, split)
        };
        Ok(Self {
            train: read(Split::Train)?,
            interpolation: read(Split::Interpolation)?,
            extrapolation: read(Split::Extrapolation)?,
        })
    }
}

pub fn to_tsv(samples: &[TaskSample]) -> String {
    samples.iter().map(|s| format!("{}\t{}\n", s.question, s.answer)).collect()
}

pub fn from_tsv(text: &str, split: Split) -> Result<Vec<TaskSample>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let (q, a) = line.split_once('\t').ok_or_else(|| DataError::Parse {
                line: i + 1,
                reason: "missing tab".into(),
            })?;
            let sample = TaskSample::parse(q, a, split).ok_or_else(|| DataError::Parse {
                line: i + 1,
                reason: format!("unrecognised question {q:?}"),
            })?;
            if let Some(v) = sample.answer_value {
                if a != v.to_string() {
                    return Err(DataError::Parse {
                        line: i + 1,
                        reason: format!("answer {a:?} does not match {v}"),
                    });
                }
            }
            Ok(sample)
        })
        .collect()
}

pub fn generate(spec: &GenSpec) -> Result<Dataset, DataError> {
    match spec.task {
        Task::AddSub => gen_addsub(spec),
        Task::Multiplication => gen_multiplication(spec),
        Task::Copy => gen_copy(spec),
    }
}

/// `What is {a} * {b}?` with the exact product as answer.
pub fn gen_multiplication(spec: &GenSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    generate_splits(spec, |rng, range, force| {
        let ops = draw_operands(rng, 2, range, force);
        let q = format!("What is {} * {}?", ops[0], ops[1]);
        let v = ops[0] * ops[1];
        (q, v.to_string(), Some(v), ops.iter().map(|&o| digit_count(o)).collect())
    })
}

/// `What is {a} + {b} - {c}?` style expressions of 2 to 4 operands.
pub fn gen_addsub(spec: &GenSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    generate_splits(spec, |rng, range, force| {
        let n = rng.gen_range(2..=4);
        let ops = draw_operands(rng, n, range, force);
        let mut q = format!("What is {}", ops[0]);
        let mut v = ops[0];
        for &o in &ops[1..] {
            if rng.gen_bool(0.5) {
                q.push_str(&format!(" + {o}"));
                v += o;
            } else {
                q.push_str(&format!(" - {o}"));
                v -= o;
            }
        }
        q.push('?');
        (q, v.to_string(), Some(v), ops.iter().map(|&o| digit_count(o)).collect())
    })
}

/// `Copy {word}?` answered by the word itself. Digit ranges are reused as
/// word-length ranges.
pub fn gen_copy(spec: &GenSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let letters: Vec<char> = COPY_ALPHABET.chars().collect();
    generate_splits(spec, |rng, range, force| {
        let len = match force {
            Some(k) => k,
            None => rng.gen_range(range.lo..=range.hi),
        };
        let word: String = (0..len).map(|_| *letters.choose(rng).unwrap()).collect();
        (format!("Copy {word}?"), word, None, vec![len])
    })
}

fn generate_splits(
    spec: &GenSpec,
    mut draw: impl FnMut(&mut ChaCha8Rng, DigitRange, Option<u32>) -> Raw,
) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let extra = DigitRange::new(1, spec.extrapolation_digits)?;
    let train_cap = capacity(spec.task, spec.train_digits, None);
    let extra_cap = capacity(spec.task, extra, Some(spec.extrapolation_digits));

    let train: Vec<TaskSample> = (0..spec.n_train)
        .map(|_| sample(draw(&mut rng, spec.train_digits, None), Split::Train))
        .collect();
    let mut seen: HashSet<String> = train.iter().map(|s| s.question.clone()).collect();
    let free = train_cap.saturating_sub(seen.len() as u128);
    let interpolation = fill_unique(
        &mut rng,
        &mut seen,
        spec.n_interpolation,
        free,
        Split::Interpolation,
        &mut |rng| draw(rng, spec.train_digits, None),
    )?;
    let extrapolation = fill_unique(
        &mut rng,
        &mut seen,
        spec.n_extrapolation,
        extra_cap,
        Split::Extrapolation,
        &mut |rng| draw(rng, extra, Some(spec.extrapolation_digits)),
    )?;
    Ok(Dataset {
        train,
        interpolation,
        extrapolation,
    })
}

type Raw = (String, String, Option<i128>, Vec<u32>);

fn sample((question, answer, answer_value, difficulty): Raw, split: Split) -> TaskSample {
    TaskSample {
        question,
        answer,
        answer_value,
        difficulty,
        split,
    }
}

fn fill_unique(
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<String>,
    n: usize,
    available: u128,
    split: Split,
    draw: &mut dyn FnMut(&mut ChaCha8Rng) -> Raw,
) -> Result<Vec<TaskSample>, DataError> {
    let capacity_error = || DataError::Capacity {
        split,
        requested: n,
        available,
    };
    if n as u128 > available {
        return Err(capacity_error());
    }
    let max_attempts = 200 * n + 10_000;
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(capacity_error());
        }
        let raw = draw(rng);
        if seen.insert(raw.0.clone()) {
            out.push(sample(raw, split));
        }
    }
    Ok(out)
}

/// Draws `n` operands with uniformly chosen digit counts. With `force`, the
/// draw is rejected until at least one operand has exactly `force` digits.
fn draw_operands(rng: &mut ChaCha8Rng, n: usize, range: DigitRange, force: Option<u32>) -> Vec<i128> {
    loop {
        let digits: Vec<u32> = (0..n).map(|_| rng.gen_range(range.lo..=range.hi)).collect();
        if let Some(k) = force {
            if !digits.contains(&k) {
                continue;
            }
        }
        return digits.into_iter().map(|k| draw_with_digits(rng, k)).collect();
    }
}

fn draw_with_digits(rng: &mut ChaCha8Rng, k: u32) -> i128 {
    if k == 1 {
        rng.gen_range(0..10)
    } else {
        rng.gen_range(10i128.pow(k - 1)..10i128.pow(k))
    }
}

fn numbers_with_digits(k: u32) -> u128 {
    if k == 1 {
        10
    } else {
        9 * 10u128.pow(k - 1)
    }
}

pub fn digit_count(x: i128) -> u32 {
    x.unsigned_abs().checked_ilog10().unwrap_or(0) + 1
}

/// Upper bound on the number of distinct questions for a digit range; with
/// `force`, only questions containing a `force`-digit operand count.
fn capacity(task: Task, range: DigitRange, force: Option<u32>) -> u128 {
    let all = range.population();
    let without = match force {
        Some(k) if k > range.lo => DigitRange { lo: range.lo, hi: k - 1 }.population(),
        Some(_) => 0,
        None => 0,
    };
    let pow = |base: u128, e: u32| base.saturating_pow(e);
    match task {
        Task::Multiplication => pow(all, 2).saturating_sub(pow(without, 2)),
        Task::AddSub => (2..=4u32)
            .map(|n| (pow(all, n).saturating_sub(pow(without, n))).saturating_mul(1 << (n - 1)))
            .fold(0u128, |a, b| a.saturating_add(b)),
        Task::Copy => {
            let lo = if force.is_some() { range.hi } else { range.lo };
            (lo..=range.hi).map(|k| pow(26, k)).fold(0u128, |a, b| a.saturating_add(b))
        }
    }
}

/// Evaluates `What is a op b ...?` exactly, returning the value and operands.
pub fn evaluate_question(question: &str) -> Option<(i128, Vec<i128>)> {
    let expr = question.strip_prefix("What is ")?.strip_suffix('?')?;
    let mut parts = expr.split(' ');
    let first: i128 = parse_operand(parts.next()?)?;
    let mut operands = vec![first];
    let mut value = first;
    let mut product = false;
    while let Some(op) = parts.next() {
        let rhs = parse_operand(parts.next()?)?;
        match op {
            "+" => value += rhs,
            "-" => value -= rhs,
            "*" => {
                value = value.checked_mul(rhs)?;
                product = true;
            }
            _ => return None,
        }
        operands.push(rhs);
    }
    if operands.len() < 2 || (product && operands.len() != 2) {
        return None;
    }
    Some((value, operands))
}

fn parse_operand(s: &str) -> Option<i128> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

/// True when every question and answer tokenizes and decodes back unchanged.
pub fn round_trips(samples: &[TaskSample], vocab: &NumberVocabulary) -> bool {
    samples.iter().all(|s| {
        [&s.question, &s.answer].iter().all(|text| {
            vocab
                .encode_text(text)
                .and_then(|seq| vocab.decode(&seq.ids))
                .map(|back| &back == *text)
                .unwrap_or(false)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mul_spec(n: usize) -> GenSpec {
        GenSpec::new(Task::Multiplication, DigitRange::new(1, 5).unwrap(), 6, n, 7)
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&mul_spec(300)).unwrap(), generate(&mul_spec(300)).unwrap());
        let other = GenSpec { seed: 8, ..mul_spec(300) };
        assert_ne!(generate(&mul_spec(300)).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn product_answer() {
        let s = TaskSample::parse("What is 12 * 34?", "408", Split::Train).unwrap();
        assert_eq!(s.answer_value, Some(408));
        assert_eq!(s.difficulty, vec![2, 2]);
    }

    #[test]
    fn extrapolation_has_a_wide_factor() {
        let d = generate(&mul_spec(500)).unwrap();
        assert!(!d.extrapolation.is_empty());
        for s in &d.extrapolation {
            assert!(s.difficulty.contains(&6), "{}", s.question);
            assert!(s.difficulty.iter().all(|&k| k <= 6));
        }
        for s in d.train.iter().chain(&d.interpolation) {
            assert!(s.bucket() <= 5);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        for task in [Task::Multiplication, Task::AddSub] {
            let spec = GenSpec {
                task,
                n_interpolation: 400,
                ..GenSpec::new(task, DigitRange::new(1, 2).unwrap(), 3, 3000, 1)
            };
            let d = generate(&spec).unwrap();
            let train: HashSet<_> = d.train.iter().map(|s| &s.question).collect();
            let interp: HashSet<_> = d.interpolation.iter().map(|s| &s.question).collect();
            let extra: HashSet<_> = d.extrapolation.iter().map(|s| &s.question).collect();
            assert_eq!(interp.len(), d.interpolation.len());
            assert!(train.is_disjoint(&interp));
            assert!(train.is_disjoint(&extra));
            assert!(interp.is_disjoint(&extra));
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let spec = GenSpec {
            n_interpolation: 101,
            ..GenSpec::new(Task::Multiplication, DigitRange::new(1, 1).unwrap(), 2, 1, 0)
        };
        assert!(matches!(generate(&spec), Err(DataError::Capacity { .. })));
    }

    #[test]
    fn digit_counts_are_uniform() {
        let spec = GenSpec {
            n_interpolation: 1,
            n_extrapolation: 1,
            ..mul_spec(10_000)
        };
        let d = generate(&spec).unwrap();
        let mut counts = [0usize; 6];
        for s in &d.train {
            counts[s.difficulty[0] as usize] += 1;
        }
        for (k, &c) in counts.iter().enumerate().skip(1) {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.2).abs() < 0.05, "k={k}: {f}");
        }
    }

    #[test]
    fn addsub_examples() {
        assert_eq!(evaluate_question("What is 13 + 54?").unwrap().0, 67);
        assert_eq!(evaluate_question("What is 5 - 9?").unwrap().0, -4);
        assert_eq!(evaluate_question("What is 5 - 9 + 10 - 1?").unwrap().0, 5);
        assert!(evaluate_question("What is 05 + 1?").is_none());
        assert!(evaluate_question("What is 2 * 3 * 4?").is_none());
    }

    #[test]
    fn addsub_shape() {
        let d = gen_addsub(&GenSpec::new(Task::AddSub, DigitRange::new(1, 2).unwrap(), 3, 500, 3)).unwrap();
        let mut saw_negative = false;
        for s in &d.train {
            assert!((2..=4).contains(&s.difficulty.len()));
            saw_negative |= s.answer_value.unwrap() < 0;
        }
        assert!(saw_negative);
    }

    #[test]
    fn samples_tokenize_losslessly() {
        let v = NumberVocabulary::task_default();
        for task in [Task::Multiplication, Task::AddSub, Task::Copy] {
            let d = generate(&GenSpec::new(task, DigitRange::new(1, 3).unwrap(), 4, 200, 2)).unwrap();
            assert!(round_trips(&d.train, &v));
            assert!(round_trips(&d.extrapolation, &v));
        }
    }

    #[test]
    fn copy_answers_have_no_numbers() {
        let v = NumberVocabulary::task_default();
        let d = gen_copy(&GenSpec::new(Task::Copy, DigitRange::new(1, 5).unwrap(), 6, 100, 2)).unwrap();
        for s in &d.train {
            let ids = v.encode_text(&s.answer).unwrap().ids;
            assert!(ids.iter().all(|&i| v.value_of(i).is_none()));
            assert_eq!(s.answer_value, None);
        }
    }

    #[test]
    fn tsv_round_trip() {
        let d = generate(&mul_spec(50)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write_dir(dir.path()).unwrap();
        assert_eq!(Dataset::read_dir(dir.path()).unwrap(), d);
        assert!(from_tsv("What is 2 * 3?\t7\n", Split::Train).is_err());
    }

    #[test]
    fn ranges_parse() {
        assert_eq!("1..5".parse::<DigitRange>().unwrap(), DigitRange { lo: 1, hi: 5 });
        assert_eq!("3".parse::<DigitRange>().unwrap(), DigitRange { lo: 3, hi: 3 });
        assert!("5..1".parse::<DigitRange>().is_err());
        assert!("0..2".parse::<DigitRange>().is_err());
    }
}

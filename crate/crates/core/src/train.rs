//! Deterministic training loop: batches of question/answer samples, loss
//! selection, AdamW, periodic greedy evaluation, logging and checkpoints.
//!
//! Batch composition depends only on `(seed, step)`, so a run resumed from a
//! checkpoint follows exactly the trajectory of an uninterrupted one.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datagen::{Dataset, TaskSample};
use crate::evalx::{evaluate, EvalError, EvalOptions};
use crate::losses::{
    build_cost, combine_owned, cross_entropy, gaussian_smooth_labels, CostKind, CostSpec, LossError, LossResult, LpVariant,
    NumberLoss, SoftmaxDomain, TargetDistribution, DEFAULT_HUBER_DELTA, DEFAULT_LAMBDA,
};
use crate::numvocab::{number_mask, LabelBatch, NumberVocabulary, VocabError, EOS, PAD};
use crate::seqmodel::{
    adam_step, read_checkpoint, write_checkpoint, AdamConfig, AdamState, Checkpoint, ModelConfig, ModelError,
    Parameters, TokenBatch,
};

pub const LOG_CSV_HEADER: &str = "step,loss_total,loss_ce,loss_ntl,eval_accuracy,eval_mae,eval_mape,wall_ms";
pub const BUCKET_CSV_HEADER: &str = "step,bucket,n,accuracy,mape";
pub const DEFAULT_SIGMA: f64 = 0.5;
const ORDER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite loss at step {step}; batch questions: {questions:?}")]
    NonFinite { step: usize, questions: Vec<String> },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NtlKind {
    Mse,
    Mae,
    Huber,
    Was,
    WasCdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossSpec {
    Ce,
    CeNtl(NtlKind),
    CeGce,
    CeGceNtlWasCdf,
}

impl LossSpec {
    pub const ALL: [LossSpec; 8] = [
        LossSpec::Ce,
        LossSpec::CeNtl(NtlKind::Mse),
        LossSpec::CeNtl(NtlKind::Mae),
        LossSpec::CeNtl(NtlKind::Huber),
        LossSpec::CeNtl(NtlKind::Was),
        LossSpec::CeNtl(NtlKind::WasCdf),
        LossSpec::CeGce,
        LossSpec::CeGceNtlWasCdf,
    ];

    pub fn uses_gce(&self) -> bool {
        matches!(self, LossSpec::CeGce | LossSpec::CeGceNtlWasCdf)
    }

    pub fn uses_cdf(&self) -> bool {
        matches!(self, LossSpec::CeNtl(NtlKind::WasCdf) | LossSpec::CeGceNtlWasCdf)
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossSpec::Ce => "ce",
            LossSpec::CeNtl(NtlKind::Mse) => "ce+ntl-mse",
            LossSpec::CeNtl(NtlKind::Mae) => "ce+ntl-mae",
            LossSpec::CeNtl(NtlKind::Huber) => "ce+ntl-huber",
            LossSpec::CeNtl(NtlKind::Was) => "ce+ntl-was",
            LossSpec::CeNtl(NtlKind::WasCdf) => "ce+ntl-was-cdf",
            LossSpec::CeGce => "ce+gce",
            LossSpec::CeGceNtlWasCdf => "ce+gce+ntl-was-cdf",
        })
    }
}

impl FromStr for LossSpec {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossSpec::ALL
            .into_iter()
            .find(|l| l.to_string() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown loss {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub lambda: f64,
    pub sigma: f64,
    /// Squash factor for the NTL-WAS cost; `None` keeps euclidean cost.
    pub squash: Option<f64>,
    pub huber_delta: f64,
    pub softmax: SoftmaxDomain,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Cap on samples taken from each evaluation split.
    pub eval_samples: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub output_dir: Option<PathBuf>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub context_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::desk_default(1);
        Self {
            loss: LossSpec::Ce,
            lambda: DEFAULT_LAMBDA,
            sigma: DEFAULT_SIGMA,
            squash: None,
            huber_delta: DEFAULT_HUBER_DELTA,
            softmax: SoftmaxDomain::Slice,
            batch_size: 32,
            steps: 1000,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            log_every: 100,
            eval_every: 1000,
            eval_samples: 256,
            checkpoint_every: 0,
            output_dir: None,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            context_length: m.context_length,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 21] = [
        "loss",
        "lambda",
        "sigma",
        "squash",
        "huber_delta",
        "softmax",
        "batch_size",
        "steps",
        "lr",
        "weight_decay",
        "seed",
        "log_every",
        "eval_every",
        "eval_samples",
        "checkpoint_every",
        "output_dir",
        "d_model",
        "n_heads",
        "n_layers",
        "d_ff",
        "context_length",
    ];

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_length: self.context_length,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self, vocab: &NumberVocabulary) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.loss.uses_gce() && !(self.sigma.is_finite() && self.sigma > 0.0) {
            return bad(format!("sigma must be > 0 when GCE is enabled, got {}", self.sigma));
        }
        if self.loss.uses_cdf() && !vocab.sorted_equidistant() {
            return bad("NTL-WAS-CDF requires sorted, equally spaced number-token values".into());
        }
        if let Some(s) = self.squash {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("squash factor must be > 0, got {s}"));
            }
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be at least 1".into());
        }
        if self.eval_every > 0 && !self.eval_every.is_multiple_of(self.log_every) {
            return bad(format!(
                "eval_every ({}) must be a multiple of log_every ({})",
                self.eval_every, self.log_every
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr must be > 0 and weight_decay >= 0".into());
        }
        self.model_config(vocab.len()).validate()?;
        Ok(())
    }

    /// Flat `key = value` text listing every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        match key {
            "loss" => self.loss.to_string(),
            "lambda" => format!("{:?}", self.lambda),
            "sigma" => format!("{:?}", self.sigma),
            "squash" => self.squash.map(|s| format!("{s:?}")).unwrap_or_else(|| "none".into()),
            "huber_delta" => format!("{:?}", self.huber_delta),
            "softmax" => self.softmax.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "lr" => format!("{:?}", self.lr),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "seed" => self.seed.to_string(),
            "log_every" => self.log_every.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "output_dir" => self.output_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "context_length" => self.context_length.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, TrainError> {
            v.parse().map_err(|_| TrainError::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "loss" => self.loss = value.parse()?,
            "lambda" => self.lambda = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "squash" => {
                self.squash = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "huber_delta" => self.huber_delta = num(key, value)?,
            "softmax" => {
                self.softmax = value
                    .parse()
                    .map_err(|_| TrainError::Config(format!("softmax: expected slice or full, got {value:?}")))?
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "eval_samples" => self.eval_samples = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "output_dir" => self.output_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "context_length" => self.context_length = num(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::ConfigSyntax {
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| TrainError::ConfigSyntax {
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Objective evaluated on one batch of logits.
pub struct LossPlan<'v> {
    spec: LossSpec,
    lambda: f64,
    sigma: f64,
    variant: LpVariant,
    vocab: &'v NumberVocabulary,
    loss: NumberLoss<'v>,
    cost: Option<CostSpec>,
}

/// Objective value with its gradient, split into the CE part and the
/// auxiliary (weighted) part.
#[derive(Debug, Clone)]
pub struct StepLoss {
    pub result: LossResult<f32>,
    pub ce: f64,
    pub aux: f64,
}

impl<'v> LossPlan<'v> {
    pub fn new(cfg: &TrainConfig, vocab: &'v NumberVocabulary) -> Result<Self, TrainError> {
        let cost = match cfg.loss {
            LossSpec::CeNtl(NtlKind::Was) => Some(build_cost(
                vocab,
                match cfg.squash {
                    Some(s) => CostKind::Squashed(s),
                    None => CostKind::Euclidean,
                },
            )?),
            _ => None,
        };
        Ok(Self {
            spec: cfg.loss,
            lambda: cfg.lambda,
            sigma: cfg.sigma,
            variant: match cfg.loss {
                LossSpec::CeNtl(NtlKind::Mae) => LpVariant::Mae,
                LossSpec::CeNtl(NtlKind::Huber) => LpVariant::Huber(cfg.huber_delta),
                _ => LpVariant::Mse,
            },
            vocab,
            loss: NumberLoss::new(vocab).with_domain(cfg.softmax),
            cost,
        })
    }

    pub fn evaluate(&self, logits: &Array2<f32>, labels: &LabelBatch) -> Result<StepLoss, TrainError> {
        let lambda = self.lambda as f32;
        let (result, ce) = match self.spec {
            LossSpec::Ce => {
                let ce = cross_entropy(logits, labels)?;
                let t = ce.total;
                (ce, t)
            }
            LossSpec::CeNtl(kind) => {
                let ce = cross_entropy(logits, labels)?;
                let ntl = match kind {
                    NtlKind::Mse | NtlKind::Mae | NtlKind::Huber => self.loss.lp(logits, labels, self.variant)?,
                    NtlKind::Was => self.loss.was(logits, labels, self.cost.as_ref().unwrap())?,
                    NtlKind::WasCdf => {
                        let targets = TargetDistribution::one_hot(labels, self.vocab)?;
                        self.loss.was_cdf(logits, &targets, labels)?
                    }
                };
                let t = ce.total;
                (combine_owned(ce, &ntl, lambda)?, t)
            }
            LossSpec::CeGce | LossSpec::CeGceNtlWasCdf => {
                let targets = gaussian_smooth_labels(labels, self.sigma, self.vocab)?;
                let (base, ce_part) = self.gce_objective(logits, labels, &targets)?;
                let out = if self.spec == LossSpec::CeGceNtlWasCdf {
                    let ntl = self.loss.was_cdf(logits, &targets, labels)?;
                    combine_owned(base, &ntl, lambda)?
                } else {
                    base
                };
                (out, ce_part)
            }
        };
        let total = result.total as f64;
        let ce = ce as f64;
        Ok(StepLoss {
            aux: total - ce,
            ce,
            result,
        })
    }

    /// CE on text positions and full-vocabulary GCE on number positions,
    /// each weighted by its share of the active positions. Returns the
    /// objective and its CE part.
    fn gce_objective(
        &self,
        logits: &Array2<f32>,
        labels: &LabelBatch,
        targets: &TargetDistribution,
    ) -> Result<(LossResult<f32>, f32), TrainError> {
        let mask = number_mask(labels, self.vocab)?;
        let text_pad: Vec<bool> = labels.pad_mask.iter().zip(&mask).map(|(&p, &m)| p || m).collect();
        let text_labels = LabelBatch::new(labels.ids.clone(), text_pad);
        let active = labels.active() as f32;
        if active == 0.0 {
            return Ok((cross_entropy(logits, labels)?, 0.0));
        }
        let ce = cross_entropy(logits, &text_labels)?;
        let gce = NumberLoss::new(self.vocab)
            .with_domain(SoftmaxDomain::Full)
            .gce(logits, targets, labels)?;
        let w_text = text_labels.active() as f32 / active;
        let w_num = gce.number_position_count as f32 / active;
        let mut out = ce.clone();
        out.total = w_text * ce.total + w_num * gce.total;
        out.grad_logits.mapv_inplace(|g| g * w_text);
        out.grad_logits.scaled_add(w_num, &gce.grad_logits);
        for ((o, &c), &g) in out.per_position.iter_mut().zip(&ce.per_position).zip(&gce.per_position) {
            *o = w_text * c + w_num * g;
        }
        out.number_position_count = gce.number_position_count;
        Ok((out, w_text * ce.total))
    }
}

/// Question and answer token ids; the answer ends with `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

pub fn encode_samples(samples: &[TaskSample], vocab: &NumberVocabulary) -> Result<Vec<EncodedSample>, TrainError> {
    let eos = vocab.require(EOS)?;
    samples
        .iter()
        .map(|s| {
            let prompt = vocab.encode_text(&s.question)?.ids;
            let mut answer = vocab.encode_text(&s.answer)?.ids;
            answer.push(eos);
            Ok(EncodedSample { prompt, answer })
        })
        .collect()
}

/// Teacher-forced batch: left-padded inputs and next-token labels with
/// every non-answer position masked.
pub fn assemble_batch(samples: &[&EncodedSample], pad_id: usize) -> (TokenBatch, LabelBatch) {
    let len = samples.iter().map(|s| s.prompt.len() + s.answer.len() - 1).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(samples.len() * len);
    let mut pad = Vec::with_capacity(ids.capacity());
    let mut labels = Vec::with_capacity(ids.capacity());
    let mut label_pad = Vec::with_capacity(ids.capacity());
    for s in samples {
        let seq: Vec<usize> = s.prompt.iter().chain(&s.answer).copied().collect();
        let n = seq.len() - 1;
        let fill = len - n;
        ids.extend(std::iter::repeat_n(pad_id, fill).chain(seq[..n].iter().copied()));
        pad.extend(std::iter::repeat_n(true, fill).chain(std::iter::repeat_n(false, n)));
        labels.extend(std::iter::repeat_n(pad_id, fill).chain(seq[1..].iter().copied()));
        // input position t predicts seq[t + 1]; answers start at prompt.len()
        label_pad.extend(std::iter::repeat_n(true, fill).chain((0..n).map(|t| t + 1 < s.prompt.len())));
    }
    (
        TokenBatch {
            ids,
            pad,
            batch: samples.len(),
            len,
        },
        LabelBatch::new(labels, label_pad),
    )
}

/// Per-bucket evaluation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketPoint {
    pub n: usize,
    pub accuracy: f64,
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub accuracy: f64,
    pub mae: Option<f64>,
    pub mape: Option<f64>,
    pub buckets: BTreeMap<u32, BucketPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    /// Means over the steps since the previous record.
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_ntl: f64,
    pub eval: Option<EvalPoint>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    /// Equality of everything except wall-clock times.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| LogRecord { wall_ms: 0, ..a.clone() } == LogRecord { wall_ms: 0, ..b.clone() })
    }

    pub fn eval_steps(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.eval.is_some()).map(|r| r.step).collect()
    }

    pub fn buckets(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .records
            .iter()
            .filter_map(|r| r.eval.as_ref())
            .flat_map(|e| e.buckets.keys().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn first_crossing(&self, bucket: u32, threshold: f64) -> Option<usize> {
        self.records.iter().find_map(|r| {
            let mape = r.eval.as_ref()?.buckets.get(&bucket)?.mape?;
            (mape < threshold).then_some(r.step)
        })
    }

    pub fn last_eval(&self) -> Option<&EvalPoint> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = format!("{LOG_CSV_HEADER}\n");
        for r in &self.records {
            let (acc, mae, mape) = match &r.eval {
                Some(e) => (e.accuracy.to_string(), opt(e.mae), opt(e.mape)),
                None => Default::default(),
            };
            out.push_str(&format!(
                "{},{},{},{},{acc},{mae},{mape},{}\n",
                r.step, r.loss_total, r.loss_ce, r.loss_ntl, r.wall_ms
            ));
        }
        out
    }

    pub fn buckets_csv(&self) -> String {
        let mut out = format!("{BUCKET_CSV_HEADER}\n");
        for r in &self.records {
            if let Some(e) = &r.eval {
                for (b, p) in &e.buckets {
                    let mape = p.mape.map(|v| v.to_string()).unwrap_or_default();
                    out.push_str(&format!("{},{b},{},{},{mape}\n", r.step, p.n, p.accuracy));
                }
            }
        }
        out
    }

    /// Rebuilds a log from its two CSV files (wall times are kept, bucket
    /// rows attach to the matching step).
    pub fn from_csv(log: &str, buckets: Option<&str>) -> Result<Self, TrainError> {
        let bad = |line: usize, reason: &str| TrainError::ConfigSyntax {
            line,
            reason: reason.to_string(),
        };
        let mut lines = log.lines();
        if lines.next() != Some(LOG_CSV_HEADER) {
            return Err(bad(1, "unexpected log header"));
        }
        let f = |s: &str, line: usize| s.parse::<f64>().map_err(|_| bad(line, "bad number"));
        let o = |s: &str, line: usize| if s.is_empty() { Ok(None) } else { f(s, line).map(Some) };
        let mut records = Vec::new();
        for (i, l) in lines.enumerate() {
            let line = i + 2;
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 8 {
                return Err(bad(line, "expected 8 columns"));
            }
            let eval = if c[4].is_empty() {
                None
            } else {
                Some(EvalPoint {
                    accuracy: f(c[4], line)?,
                    mae: o(c[5], line)?,
                    mape: o(c[6], line)?,
                    buckets: BTreeMap::new(),
                })
            };
            records.push(LogRecord {
                step: c[0].parse().map_err(|_| bad(line, "bad step"))?,
                loss_total: f(c[1], line)?,
                loss_ce: f(c[2], line)?,
                loss_ntl: f(c[3], line)?,
                eval,
                wall_ms: c[7].parse().map_err(|_| bad(line, "bad wall time"))?,
            });
        }
        if let Some(text) = buckets {
            for (i, l) in text.lines().enumerate().skip(1) {
                let c: Vec<&str> = l.split(',').collect();
                if c.len() != 5 {
                    return Err(bad(i + 1, "expected 5 bucket columns"));
                }
                let step: usize = c[0].parse().map_err(|_| bad(i + 1, "bad step"))?;
                let point = BucketPoint {
                    n: c[2].parse().map_err(|_| bad(i + 1, "bad count"))?,
                    accuracy: f(c[3], i + 1)?,
                    mape: o(c[4], i + 1)?,
                };
                let rec = records
                    .iter_mut()
                    .find(|r| r.step == step)
                    .and_then(|r| r.eval.as_mut())
                    .ok_or_else(|| bad(i + 1, "bucket row for a step without evaluation"))?;
                rec.buckets.insert(c[1].parse().map_err(|_| bad(i + 1, "bad bucket"))?, point);
            }
        }
        Ok(Self { records })
    }
}

/// Training state that can be stepped, checkpointed and resumed.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub params: Parameters<f32>,
    pub optimizer: AdamState<f32>,
    pub log: TrainLog,
    vocab: &'a NumberVocabulary,
    plan: LossPlan<'a>,
    train: Vec<EncodedSample>,
    questions: Vec<String>,
    eval_set: Vec<TaskSample>,
    pad_id: usize,
    epoch_cache: Option<(usize, Vec<usize>)>,
    started: Instant,
    pending: (f64, f64, f64, usize),
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, vocab: &'a NumberVocabulary, data: &Dataset) -> Result<Self, TrainError> {
        config.validate(vocab)?;
        let params = Parameters::init(config.model_config(vocab.len()))?;
        let optimizer = AdamState::new(&params);
        Self::assemble(config, vocab, data, params, optimizer)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, vocab: &'a NumberVocabulary, data: &Dataset) -> Result<Self, TrainError> {
        let config = TrainConfig::from_text(&checkpoint.metadata)?;
        config.validate(vocab)?;
        if checkpoint.params.config != config.model_config(vocab.len()) {
            return Err(TrainError::Config(format!(
                "checkpoint model {:?} does not match config and vocabulary of size {}",
                checkpoint.params.config,
                vocab.len()
            )));
        }
        let optimizer = checkpoint
            .optimizer
            .ok_or_else(|| TrainError::Config("checkpoint has no optimizer state to resume from".into()))?;
        Self::assemble(config, vocab, data, checkpoint.params, optimizer)
    }

    fn assemble(
        config: TrainConfig,
        vocab: &'a NumberVocabulary,
        data: &Dataset,
        params: Parameters<f32>,
        optimizer: AdamState<f32>,
    ) -> Result<Self, TrainError> {
        if data.train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let train = encode_samples(&data.train, vocab)?;
        let longest = train.iter().map(|s| s.prompt.len() + s.answer.len() - 1).max().unwrap_or(0);
        if longest > config.context_length {
            return Err(TrainError::Config(format!(
                "longest training sample has {longest} tokens, context_length is {}",
                config.context_length
            )));
        }
        let eval_set: Vec<TaskSample> = data
            .interpolation
            .iter()
            .take(config.eval_samples)
            .chain(data.extrapolation.iter().take(config.eval_samples))
            .cloned()
            .collect();
        Ok(Self {
            plan: LossPlan::new(&config, vocab)?,
            pad_id: vocab.require(PAD)?,
            questions: data.train.iter().map(|s| s.question.clone()).collect(),
            config,
            params,
            optimizer,
            log: TrainLog::default(),
            vocab,
            train,
            eval_set,
            epoch_cache: None,
            started: Instant::now(),
            pending: (0.0, 0.0, 0.0, 0),
        })
    }

    pub fn step(&self) -> usize {
        self.optimizer.step as usize
    }

    /// Sample indices for 1-based `step`: consecutive slices of per-epoch
    /// permutations of the training set.
    fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let n = self.train.len();
        let b = self.config.batch_size;
        (0..b)
            .map(|k| {
                let g = (step - 1) * b + k;
                let epoch = g / n;
                if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    let seed = self.config.seed ^ ORDER_STREAM.wrapping_mul(epoch as u64 + 1);
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                    self.epoch_cache = Some((epoch, perm));
                }
                self.epoch_cache.as_ref().unwrap().1[g % n]
            })
            .collect()
    }

    /// One optimizer step; returns the step's loss.
    pub fn train_step(&mut self) -> Result<StepLoss, TrainError> {
        let step = self.step() + 1;
        let idx = self.batch_indices(step);
        let samples: Vec<&EncodedSample> = idx.iter().map(|&i| &self.train[i]).collect();
        let (batch, labels) = assemble_batch(&samples, self.pad_id);
        let (logits, cache) = self.params.forward(&batch)?;
        let loss = self.plan.evaluate(&logits, &labels)?;
        if !loss.result.total.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                questions: idx.iter().map(|&i| self.questions[i].clone()).collect(),
            });
        }
        let grads = self.params.backward(&cache, &loss.result.grad_logits)?;
        adam_step(&mut self.params, &grads, &mut self.optimizer, &self.config.adam());
        Ok(loss)
    }

    /// Trains up to `target` steps (capped by the config), logging at
    /// cadence and writing checkpoints when an output directory is set.
    pub fn run_until(&mut self, target: usize) -> Result<(), TrainError> {
        let target = target.min(self.config.steps);
        while self.step() < target {
            let loss = match self.train_step() {
                Ok(l) => l,
                Err(e) => {
                    if let (TrainError::NonFinite { questions, step }, Some(dir)) = (&e, &self.config.output_dir) {
                        std::fs::create_dir_all(dir)?;
                        let body = format!("step {step}\n{}\n", questions.join("\n"));
                        std::fs::write(dir.join("nonfinite_batch.txt"), body)?;
                    }
                    return Err(e);
                }
            };
            let p = &mut self.pending;
            p.0 += loss.result.total as f64;
            p.1 += loss.ce;
            p.2 += loss.aux;
            p.3 += 1;
            let s = self.step();
            if s.is_multiple_of(self.config.log_every) || s == self.config.steps {
                self.record(s)?;
            }
            if self.config.checkpoint_every > 0 && s.is_multiple_of(self.config.checkpoint_every) && s < self.config.steps {
                if let Some(dir) = self.config.output_dir.clone() {
                    std::fs::create_dir_all(&dir)?;
                    write_checkpoint(&dir.join(format!("step_{s}.ntlf")), &self.checkpoint())?;
                }
            }
        }
        if self.step() == self.config.steps {
            if let Some(dir) = self.config.output_dir.clone() {
                self.write_outputs(&dir)?;
            }
        }
        Ok(())
    }

    fn record(&mut self, step: usize) -> Result<(), TrainError> {
        let (t, c, a, k) = std::mem::take(&mut self.pending);
        let k = k.max(1) as f64;
        let eval = if self.config.eval_every > 0 && step.is_multiple_of(self.config.eval_every) && !self.eval_set.is_empty() {
            Some(self.eval_point()?)
        } else {
            None
        };
        self.log.records.push(LogRecord {
            step,
            loss_total: t / k,
            loss_ce: c / k,
            loss_ntl: a / k,
            eval,
            wall_ms: self.started.elapsed().as_millis(),
        });
        Ok(())
    }

    pub fn eval_point(&self) -> Result<EvalPoint, TrainError> {
        let ev = evaluate(&self.params, &self.eval_set, self.vocab, &EvalOptions::default())?;
        Ok(EvalPoint {
            accuracy: ev.report.exact_match_accuracy,
            mae: ev.report.mae,
            mape: ev.report.mape,
            buckets: ev
                .per_bucket
                .iter()
                .map(|(&b, r)| {
                    (
                        b,
                        BucketPoint {
                            n: r.n,
                            accuracy: r.exact_match_accuracy,
                            mape: r.mape,
                        },
                    )
                })
                .collect(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            metadata: self.config.to_text(),
        }
    }

    /// `final.ntlf`, `train_log.csv` and `eval_buckets.csv`.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        write_checkpoint(&dir.join("final.ntlf"), &self.checkpoint())?;
        std::fs::write(dir.join("train_log.csv"), self.log.to_csv())?;
        std::fs::write(dir.join("eval_buckets.csv"), self.log.buckets_csv())?;
        Ok(())
    }
}

pub fn run_training(
    config: &TrainConfig,
    vocab: &NumberVocabulary,
    data: &Dataset,
) -> Result<(Parameters<f32>, TrainLog), TrainError> {
    let mut trainer = Trainer::new(config.clone(), vocab, data)?;
    trainer.run_until(config.steps)?;
    Ok((trainer.params, trainer.log))
}

pub fn save_checkpoint(params: &Parameters<f32>, config: &TrainConfig, path: &Path) -> Result<(), TrainError> {
    let ck = Checkpoint {
        params: params.clone(),
        optimizer: None,
        metadata: config.to_text(),
    };
    Ok(write_checkpoint(path, &ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters<f32>, TrainConfig), TrainError> {
    let ck = read_checkpoint(path)?;
    let cfg = TrainConfig::from_text(&ck.metadata)?;
    Ok((ck.params, cfg))
}

/// Loads a checkpoint and checks it was trained on a vocabulary of
/// `vocab_size` tokens.
pub fn load_checkpoint_for(path: &Path, vocab_size: usize) -> Result<(Parameters<f32>, TrainConfig), TrainError> {
    let (params, cfg) = load_checkpoint(path)?;
    if params.config.vocab_size != vocab_size {
        return Err(TrainError::Config(format!(
            "checkpoint vocabulary has {} tokens, expected {vocab_size}",
            params.config.vocab_size
        )));
    }
    Ok((params, cfg))
}

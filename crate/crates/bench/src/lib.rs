//! Wall-clock timing of number token losses against cross-entropy.
//!
//! Two scenarios: the loss alone (value and gradient on random logits) and a
//! full training step of the default decoder (forward, loss, backward,
//! AdamW). Configurations are timed round-robin so slow drift in machine
//! load hits all of them alike.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use ndarray::Array2;
use ntl_core::losses::{build_cost, CostKind, CostSpec, TargetDistribution};
use ntl_core::numvocab::{LabelBatch, NumberVocabulary};
use ntl_core::seqmodel::{adam_step, AdamConfig, AdamState, ModelConfig, Parameters, TokenBatch};
use ntl_core::train::{LossPlan, LossSpec, NtlKind, TrainConfig};
use ntl_core::{cross_entropy, gaussian_smooth_labels, LossResult, LpVariant, NumberLoss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const REPORT_CSV_HEADER: &str = "scenario,config,mean_us,std_us,min_us,median_us,overhead_vs_ce";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Core(#[from] Box<dyn std::error::Error + Send + Sync>),
}

fn core<E: std::error::Error + Send + Sync + 'static>(e: E) -> BenchError {
    BenchError::Core(Box::new(e))
}

/// A loss timed on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchLoss {
    Ce,
    NtlMse,
    NtlMae,
    NtlHuber,
    NtlWas,
    NtlWasCdf,
    Gce,
}

impl BenchLoss {
    pub const ALL: [BenchLoss; 7] = [
        BenchLoss::Ce,
        BenchLoss::NtlMse,
        BenchLoss::NtlMae,
        BenchLoss::NtlHuber,
        BenchLoss::NtlWas,
        BenchLoss::NtlWasCdf,
        BenchLoss::Gce,
    ];
}

impl fmt::Display for BenchLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchLoss::Ce => "ce",
            BenchLoss::NtlMse => "ntl-mse",
            BenchLoss::NtlMae => "ntl-mae",
            BenchLoss::NtlHuber => "ntl-huber",
            BenchLoss::NtlWas => "ntl-was",
            BenchLoss::NtlWasCdf => "ntl-was-cdf",
            BenchLoss::Gce => "gce",
        })
    }
}

impl std::str::FromStr for BenchLoss {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchLoss::ALL
            .into_iter()
            .find(|l| l.to_string() == s)
            .ok_or_else(|| BenchError::Spec(format!("unknown loss {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    LossOnly,
    FullStep,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::LossOnly => "loss_only",
            Scenario::FullStep => "full_step",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub vocab_size: usize,
    pub number_tokens: usize,
    /// Share of positions whose label is a number token.
    pub number_proportion: f64,
    /// Positions per loss-only batch.
    pub positions: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub loss_configs: Vec<BenchLoss>,
    /// Objectives timed in the full-step scenario; empty skips it.
    pub step_configs: Vec<LossSpec>,
    pub step_batch: usize,
    pub step_len: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32_000,
            number_tokens: 10,
            number_proportion: 0.8,
            positions: 256,
            iterations: 100,
            warmup: 5,
            loss_configs: vec![BenchLoss::Ce, BenchLoss::NtlMse, BenchLoss::NtlWas, BenchLoss::NtlWasCdf],
            step_configs: vec![LossSpec::Ce, LossSpec::CeNtl(NtlKind::Was)],
            step_batch: 8,
            step_len: 32,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Spec(m.into()));
        if !(0.0..=1.0).contains(&self.number_proportion) {
            return bad("number_proportion must lie in [0, 1]");
        }
        if self.iterations < 10 {
            return bad("iterations must be at least 10");
        }
        if self.number_tokens < 2 || self.number_tokens >= self.vocab_size {
            return bad("need at least 2 number tokens and at least one text token");
        }
        if self.positions == 0 || self.step_batch == 0 || self.step_len == 0 {
            return bad("positions, step_batch and step_len must be at least 1");
        }
        Ok(())
    }

    /// Number tokens `0..n` with their integer values, then filler text
    /// tokens, with `<pad>` and `<eos>` first.
    pub fn vocabulary(&self) -> Result<NumberVocabulary, BenchError> {
        let mut entries: Vec<(String, Option<f64>)> = vec![("<pad>".into(), None), ("<eos>".into(), None)];
        entries.extend((0..self.number_tokens).map(|d| (d.to_string(), Some(d as f64))));
        let fillers = self.vocab_size.saturating_sub(entries.len());
        entries.extend((0..fillers).map(|i| (format!("w{i}"), None)));
        NumberVocabulary::from_entries(entries).map_err(core)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scenario: Scenario,
    pub config: String,
    pub mean_us: f64,
    pub std_us: f64,
    pub min_us: f64,
    pub median_us: f64,
    /// `(t_config - t_ce) / t_ce` on means; `None` without a CE row.
    pub overhead_vs_ce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, scenario: Scenario, config: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.config == config)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.3},{:.3},{:.3},{:.3},{}\n",
                r.scenario,
                r.config,
                r.mean_us,
                r.std_us,
                r.min_us,
                r.median_us,
                r.overhead_vs_ce.map(|o| format!("{o:.6}")).unwrap_or_default()
            ));
        }
        out
    }
}

/// Mean, sample standard deviation, minimum and median of `xs`.
pub fn summarize(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    (mean, var.sqrt(), sorted[0], median)
}

/// Random logits and labels with number labels at a random subset of
/// positions.
pub fn random_problem(
    rng: &mut ChaCha8Rng,
    vocab: &NumberVocabulary,
    positions: usize,
    proportion: f64,
) -> (Array2<f32>, LabelBatch) {
    let v = vocab.len();
    let logits = Array2::from_shape_simple_fn((positions, v), || rng.gen_range(-3.0f32..3.0));
    let labels = random_labels(rng, vocab, positions, proportion);
    (logits, labels)
}

fn random_labels(rng: &mut ChaCha8Rng, vocab: &NumberVocabulary, positions: usize, proportion: f64) -> LabelBatch {
    let numbers = vocab.number_indices().to_vec();
    let text: Vec<usize> = (0..vocab.len()).filter(|i| vocab.value_of(*i).is_none()).collect();
    let count = (proportion * positions as f64).round() as usize;
    let mut slots: Vec<usize> = (0..positions).collect();
    rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), rng);
    let mut ids = vec![0; positions];
    for (k, &slot) in slots.iter().enumerate() {
        ids[slot] = if k < count {
            numbers[rng.gen_range(0..numbers.len())]
        } else {
            text[rng.gen_range(0..text.len())]
        };
    }
    LabelBatch::unpadded(ids)
}

struct LossOnly<'v> {
    vocab: &'v NumberVocabulary,
    loss: NumberLoss<'v>,
    cost: CostSpec,
}

impl LossOnly<'_> {
    fn run(&self, which: BenchLoss, logits: &Array2<f32>, labels: &LabelBatch) -> Result<LossResult<f32>, BenchError> {
        let out = match which {
            BenchLoss::Ce => cross_entropy(logits, labels),
            BenchLoss::NtlMse => self.loss.lp(logits, labels, LpVariant::Mse),
            BenchLoss::NtlMae => self.loss.lp(logits, labels, LpVariant::Mae),
            BenchLoss::NtlHuber => self.loss.lp(logits, labels, LpVariant::Huber(1.0)),
            BenchLoss::NtlWas => self.loss.was(logits, labels, &self.cost),
            BenchLoss::NtlWasCdf => TargetDistribution::one_hot(labels, self.vocab)
                .and_then(|t| self.loss.was_cdf(logits, &t, labels)),
            BenchLoss::Gce => gaussian_smooth_labels(labels, 0.5, self.vocab).and_then(|t| self.loss.gce(logits, &t, labels)),
        };
        out.map_err(core)
    }
}

/// Times `configs` round-robin: every iteration runs each config once,
/// in rotating order. Returns per-config samples in microseconds.
fn round_robin<F>(n_configs: usize, warmup: usize, iterations: usize, mut run: F) -> Result<Vec<Vec<f64>>, BenchError>
where
    F: FnMut(usize) -> Result<(), BenchError>,
{
    for _ in 0..warmup {
        for c in 0..n_configs {
            run(c)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(iterations); n_configs];
    for it in 0..iterations {
        for k in 0..n_configs {
            let c = (it + k) % n_configs;
            let t = Instant::now();
            run(c)?;
            samples[c].push(t.elapsed().as_secs_f64() * 1e6);
        }
    }
    Ok(samples)
}

fn rows(scenario: Scenario, names: &[String], samples: &[Vec<f64>], ce: Option<usize>) -> Vec<BenchRow> {
    let stats: Vec<_> = samples.iter().map(|s| summarize(s)).collect();
    let ce_mean = ce.map(|i| stats[i].0);
    names
        .iter()
        .zip(&stats)
        .map(|(name, &(mean, std, min, median))| BenchRow {
            scenario,
            config: name.clone(),
            mean_us: mean,
            std_us: std,
            min_us: min,
            median_us: median,
            overhead_vs_ce: ce_mean.map(|c| (mean - c) / c),
        })
        .collect()
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport, BenchError> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut report = BenchReport::default();

    if !spec.loss_configs.is_empty() {
        let (logits, labels) = random_problem(&mut rng, &vocab, spec.positions, spec.number_proportion);
        let runner = LossOnly {
            vocab: &vocab,
            loss: NumberLoss::new(&vocab),
            cost: build_cost(&vocab, CostKind::Euclidean).map_err(core)?,
        };
        let samples = round_robin(spec.loss_configs.len(), spec.warmup, spec.iterations, |c| {
            black_box(runner.run(spec.loss_configs[c], black_box(&logits), &labels)?);
            Ok(())
        })?;
        let names: Vec<String> = spec.loss_configs.iter().map(|c| c.to_string()).collect();
        let ce = spec.loss_configs.iter().position(|&c| c == BenchLoss::Ce);
        report.rows.extend(rows(Scenario::LossOnly, &names, &samples, ce));
    }

    if !spec.step_configs.is_empty() {
        let model = ModelConfig {
            context_length: ModelConfig::desk_default(1).context_length.max(spec.step_len),
            seed: spec.seed,
            ..ModelConfig::desk_default(vocab.len())
        };
        let positions = spec.step_batch * spec.step_len;
        let ids: Vec<usize> = (0..positions).map(|_| rng.gen_range(0..vocab.len())).collect();
        let batch = TokenBatch::new(ids, vec![false; positions], spec.step_batch, spec.step_len).map_err(core)?;
        let labels = random_labels(&mut rng, &vocab, positions, spec.number_proportion);
        let configs: Vec<TrainConfig> = spec
            .step_configs
            .iter()
            .map(|&loss| TrainConfig {
                loss,
                ..TrainConfig::default()
            })
            .collect();
        let plans = configs
            .iter()
            .map(|c| LossPlan::new(c, &vocab))
            .collect::<Result<Vec<_>, _>>()
            .map_err(core)?;
        let mut states: Vec<(Parameters<f32>, AdamState<f32>)> = Vec::new();
        for _ in &configs {
            let p = Parameters::init(model).map_err(core)?;
            let s = AdamState::new(&p);
            states.push((p, s));
        }
        let adam = AdamConfig::default();
        let samples = round_robin(configs.len(), spec.warmup.min(2), spec.iterations, |c| {
            let (params, state) = &mut states[c];
            let (logits, cache) = params.forward(&batch).map_err(core)?;
            let loss = plans[c].evaluate(&logits, &labels).map_err(core)?;
            let grads = params.backward(&cache, &loss.result.grad_logits).map_err(core)?;
            adam_step(params, &grads, state, &adam);
            Ok(())
        })?;
        let names: Vec<String> = spec.step_configs.iter().map(|c| c.to_string()).collect();
        let ce = spec.step_configs.iter().position(|&c| c == LossSpec::Ce);
        report.rows.extend(rows(Scenario::FullStep, &names, &samples, ce));
    }
    Ok(report)
}

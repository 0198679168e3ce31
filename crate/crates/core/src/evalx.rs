//! Decoding-based evaluation and the numeric metric suite.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::datagen::TaskSample;
use crate::numvocab::{NumberVocabulary, VocabError, EOS};
use crate::seqmodel::{ModelError, Parameters};
use crate::train::TrainLog;

pub const DEFAULT_MAPE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("eval cadence differs between runs: {a:?} vs {b:?}")]
    CadenceMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub log_transform: bool,
    pub batch_size: usize,
    /// Generation budget; `None` allows two tokens more than the longest
    /// reference answer.
    pub max_new: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            log_transform: false,
            batch_size: 64,
            max_new: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub output: String,
    pub reference: String,
    /// Numeric value of the reference, if the task is numeric.
    pub truth: Option<f64>,
    /// Parsed numeric output, if the output is a number literal.
    pub parsed: Option<f64>,
    pub bucket: u32,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        canonical(&self.output) == canonical(&self.reference)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub exact_match_accuracy: f64,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub mape: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub parse_failure_rate: f64,
    pub n: usize,
    pub log_transform_applied: bool,
}

pub const METRICS_CSV_HEADER: &str =
    "n,exact_match_accuracy,mae,r2,mape,pearson,spearman,parse_failure_rate,log_transform_applied";

impl MetricsReport {
    /// Value metrics are absent when no output parsed.
    pub fn value_metrics_absent(&self) -> bool {
        self.mae.is_none()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n,
            self.exact_match_accuracy,
            opt(self.mae),
            opt(self.r2),
            opt(self.mape),
            opt(self.pearson),
            opt(self.spearman),
            self.parse_failure_rate,
            self.log_transform_applied
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{METRICS_CSV_HEADER}\n{}\n", self.csv_row())
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "absent".into());
        writeln!(f, "samples            {}", self.n)?;
        writeln!(f, "exact match        {:.4}", self.exact_match_accuracy)?;
        writeln!(f, "parse failures     {:.4}", self.parse_failure_rate)?;
        let note = if self.log_transform_applied { " (signed log10)" } else { "" };
        writeln!(f, "MAE{note:<16}{}", show(self.mae))?;
        writeln!(f, "R2{note:<17}{}", show(self.r2))?;
        writeln!(f, "MAPE               {}", show(self.mape))?;
        writeln!(f, "Pearson            {}", show(self.pearson))?;
        write!(f, "Spearman           {}", show(self.spearman))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_bucket: BTreeMap<u32, MetricsReport>,
    pub predictions: Vec<Prediction>,
}

/// Greedy-decodes every sample's answer and scores the outputs.
pub fn evaluate(
    params: &Parameters<f32>,
    samples: &[TaskSample],
    vocab: &NumberVocabulary,
    options: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    let predictions = predict(params, samples, vocab, options)?;
    let report = score(&predictions, options.log_transform)?;
    let mut by_bucket: BTreeMap<u32, Vec<Prediction>> = BTreeMap::new();
    for p in &predictions {
        by_bucket.entry(p.bucket).or_default().push(p.clone());
    }
    let per_bucket = by_bucket
        .into_iter()
        .map(|(b, ps)| Ok((b, score(&ps, options.log_transform)?)))
        .collect::<Result<_, EvalError>>()?;
    Ok(Evaluation {
        report,
        per_bucket,
        predictions,
    })
}

pub fn predict(
    params: &Parameters<f32>,
    samples: &[TaskSample],
    vocab: &NumberVocabulary,
    options: &EvalOptions,
) -> Result<Vec<Prediction>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let eos = vocab.require(EOS)?;
    let prompts = samples
        .iter()
        .map(|s| vocab.encode_text(&s.question).map(|t| t.ids))
        .collect::<Result<Vec<_>, _>>()?;
    let max_new = match options.max_new {
        Some(m) => m,
        None => {
            let mut longest = 0;
            for s in samples {
                longest = longest.max(vocab.encode_text(&s.answer)?.ids.len());
            }
            longest + 2
        }
    };
    let mut out = Vec::with_capacity(samples.len());
    for (chunk, prompt_chunk) in samples
        .chunks(options.batch_size.max(1))
        .zip(prompts.chunks(options.batch_size.max(1)))
    {
        let generated = params.generate_greedy_batch(prompt_chunk, max_new, Some(eos))?;
        for ((sample, prompt), seq) in chunk.iter().zip(prompt_chunk).zip(generated) {
            let answer_ids: Vec<usize> = seq[prompt.len()..].iter().copied().take_while(|&t| t != eos).collect();
            let output = vocab.decode(&answer_ids)?;
            out.push(Prediction {
                parsed: parse_number(&output),
                truth: sample.answer_value.map(|v| v as f64),
                reference: sample.answer.clone(),
                output,
                bucket: sample.bucket(),
            });
        }
    }
    Ok(out)
}

/// Strict number literal: optional `-`, digits, optional `.digits`.
pub fn parse_number(s: &str) -> Option<f64> {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || frac.is_some_and(|f| !digits(f)) {
        return None;
    }
    s.parse().ok()
}

/// Leading zeros stripped and `-0` folded into `0`; non-numbers unchanged.
pub fn canonical(s: &str) -> String {
    if parse_number(s).is_none() {
        return s.to_string();
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let zero = int == "0" && frac.is_none_or(|f| f.bytes().all(|b| b == b'0'));
    let mut out = String::new();
    if neg && !zero {
        out.push('-');
    }
    out.push_str(int);
    if let Some(f) = frac {
        out.push('.');
        out.push_str(f);
    }
    out
}

/// sign(x)·log10(1 + |x|).
pub fn signed_log(x: f64) -> f64 {
    x.signum() * (1.0 + x.abs()).log10()
}

pub fn score(predictions: &[Prediction], log_transform: bool) -> Result<MetricsReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = predictions.len();
    let correct = predictions.iter().filter(|p| p.correct()).count();
    let numeric: Vec<&Prediction> = predictions.iter().filter(|p| p.truth.is_some()).collect();
    let pairs: Vec<(f64, f64)> = numeric
        .iter()
        .filter_map(|p| Some((p.parsed?, p.truth?)))
        .collect();
    let failures = numeric.len() - pairs.len();
    let tf = |x: f64| if log_transform { signed_log(x) } else { x };
    let (mae, r2, mape, pearson, spearman) = if pairs.is_empty() {
        (None, None, None, None, None)
    } else {
        let m = pairs.len() as f64;
        let mae = sum(pairs.iter().map(|&(p, t)| (tf(p) - tf(t)).abs())) / m;
        let mape = sum(pairs.iter().map(|&(p, t)| (p - t).abs() / t.abs().max(1.0))) / m;
        let preds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let truths: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let tp: Vec<f64> = preds.iter().map(|&x| tf(x)).collect();
        let tt: Vec<f64> = truths.iter().map(|&x| tf(x)).collect();
        (
            Some(mae),
            r_squared(&tp, &tt),
            Some(mape),
            pearson(&preds, &truths),
            spearman(&preds, &truths),
        )
    };
    Ok(MetricsReport {
        exact_match_accuracy: correct as f64 / n as f64,
        mae,
        r2,
        mape,
        pearson,
        spearman,
        parse_failure_rate: failures as f64 / n as f64,
        n,
        log_transform_applied: log_transform,
    })
}

/// Neumaier-compensated sum.
pub fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn mean(xs: &[f64]) -> f64 {
    sum(xs.iter().copied()) / xs.len() as f64
}

/// `None` when the truths have zero variance.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let mt = mean(truth);
    let ss_tot = sum(truth.iter().map(|t| (t - mt) * (t - mt)));
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res = sum(pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)));
    Some(1.0 - ss_res / ss_tot)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let cov = sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)));
    let va = sum(a.iter().map(|x| (x - ma) * (x - ma)));
    let vb = sum(b.iter().map(|y| (y - mb) * (y - mb)));
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketCrossing {
    pub bucket: u32,
    pub first_a: Option<usize>,
    pub first_b: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEfficiency {
    pub threshold: f64,
    pub buckets: Vec<BucketCrossing>,
}

impl SampleEfficiency {
    pub fn bucket(&self, bucket: u32) -> Option<&BucketCrossing> {
        self.buckets.iter().find(|b| b.bucket == bucket)
    }

    pub fn to_csv(&self) -> String {
        let show = |s: Option<usize>| s.map(|v| v.to_string()).unwrap_or_else(|| "absent".into());
        let mut out = String::from("bucket,threshold,first_step_a,first_step_b\n");
        for b in &self.buckets {
            out.push_str(&format!("{},{},{},{}\n", b.bucket, self.threshold, show(b.first_a), show(b.first_b)));
        }
        out
    }
}

/// First eval step at which each run's per-bucket MAPE drops below
/// `threshold`.
pub fn compare_runs(a: &TrainLog, b: &TrainLog, threshold: f64) -> Result<SampleEfficiency, EvalError> {
    let (sa, sb) = (a.eval_steps(), b.eval_steps());
    if sa != sb {
        return Err(EvalError::CadenceMismatch { a: sa, b: sb });
    }
    let mut buckets: Vec<u32> = a.buckets().into_iter().chain(b.buckets()).collect();
    buckets.sort_unstable();
    buckets.dedup();
    Ok(SampleEfficiency {
        threshold,
        buckets: buckets
            .into_iter()
            .map(|bucket| BucketCrossing {
                bucket,
                first_a: a.first_crossing(bucket, threshold),
                first_b: b.first_crossing(bucket, threshold),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(output: &str, truth: i64) -> Prediction {
        Prediction {
            output: output.into(),
            reference: truth.to_string(),
            truth: Some(truth as f64),
            parsed: parse_number(output),
            bucket: 1,
        }
    }

    #[test]
    fn perfect_predictions() {
        let ps: Vec<_> = [3, -4, 120, 7].iter().map(|&t| pred(&t.to_string(), t)).collect();
        let r = score(&ps, false).unwrap();
        assert_eq!(r.exact_match_accuracy, 1.0);
        assert_eq!(r.mae, Some(0.0));
        assert_eq!(r.r2, Some(1.0));
        assert_eq!(r.mape, Some(0.0));
        assert_eq!(r.parse_failure_rate, 0.0);
    }

    #[test]
    fn mape_contribution() {
        let r = score(&[pred("90", 100)], false).unwrap();
        assert!((r.mape.unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn signed_log_error() {
        let r = score(&[pred("100", 1000)], true).unwrap();
        let expected = 1001f64.log10() - 101f64.log10();
        assert!((r.mae.unwrap() - expected).abs() < 1e-15);
        // the oracle value 1.0 is log10(1000) - log10(100), recovered up to the +1 offset
        assert!((r.mae.unwrap() - 1.0).abs() < 5e-3);
        assert!(r.log_transform_applied);
    }

    #[test]
    fn unparseable_outputs() {
        let ps = vec![pred("12", 12), pred("1a", 13), pred("", 5)];
        let r = score(&ps, false).unwrap();
        assert!((r.exact_match_accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.parse_failure_rate - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.exact_match_accuracy + r.parse_failure_rate <= 1.0);
        let none = score(&[pred("x", 1)], false).unwrap();
        assert!(none.value_metrics_absent());
        assert_eq!(none.exact_match_accuracy, 0.0);
    }

    #[test]
    fn canonical_forms() {
        assert_eq!(canonical("007"), "7");
        assert_eq!(canonical("-0"), "0");
        assert_eq!(canonical("-00"), "0");
        assert_eq!(canonical("-012"), "-12");
        assert_eq!(canonical("abc"), "abc");
        assert!(pred("0408", 408).correct());
    }

    #[test]
    fn r2_of_mean_prediction_is_zero() {
        let t = [1.0, 4.0, 2.0, 9.0];
        let m = t.iter().sum::<f64>() / 4.0;
        assert!(r_squared(&[m; 4], &t).unwrap().abs() < 1e-12);
        assert_eq!(r_squared(&t, &t), Some(1.0));
    }

    #[test]
    fn spearman_ignores_monotone_maps() {
        let a = [1.0, 5.0, 2.0, 8.0, 3.0, 3.0];
        let b = [2.0, 3.0, 1.0, 9.0, 4.0, 0.5];
        let s = spearman(&a, &b).unwrap();
        let ea: Vec<f64> = a.iter().map(|x: &f64| x.exp()).collect();
        let cb: Vec<f64> = b.iter().map(|x| x * x * x - 7.0).collect();
        assert!((spearman(&ea, &cb).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn compensated_sum() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(sum(xs), 2.0);
    }

    #[test]
    fn strict_number_parsing() {
        assert_eq!(parse_number("-12.5"), Some(-12.5));
        assert_eq!(parse_number("12."), None);
        assert_eq!(parse_number("+3"), None);
        assert_eq!(parse_number("1e3"), None);
    }
}

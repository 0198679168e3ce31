use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use ntl_bench::{run_bench, BenchError, BenchLoss, BenchSpec};
use ntl_core::check::{all_grad_ops, cdf_equivalence_suite, gradient_suite, ot_equivalence_suite, CheckOutcome, GradOp};
use ntl_core::datagen::{generate, DataError};
use ntl_core::evalx::{evaluate, EvalError};
use ntl_core::landscape::{
    distance_csv, distance_curves, heatmap_svg, scan_simplex_csv, simplex_csv, simplex_grid, Figure,
    LandscapeError, LossColumn, DEFAULT_QS, DEFAULT_RESOLUTION,
};
use ntl_core::losses::LossError;
use ntl_core::seqmodel::{read_checkpoint, ModelError};
use ntl_core::train::{load_checkpoint_for, TrainError};
use ntl_core::{
    compare_runs, Dataset, DigitRange, EvalOptions, GenSpec, NumberVocabulary, Split, Task, TrainConfig, TrainLog,
    Trainer, VocabError,
};

use crate::manifest::Manifest;
use crate::Output;

pub const VOCAB_FILE: &str = "vocab.txt";

/// A bad flag or input caught by the command itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

#[derive(Debug, thiserror::Error)]
#[error("self-check failed: {}", .0.join(", "))]
pub struct SelfcheckFailed(pub Vec<String>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Validation,
    Runtime,
    Selfcheck,
}

impl Failure {
    pub fn code(self) -> u8 {
        match self {
            Failure::Validation => 2,
            Failure::Runtime => 3,
            Failure::Selfcheck => 4,
        }
    }

    pub fn classify(err: &anyhow::Error) -> Self {
        for cause in err.chain() {
            if cause.is::<SelfcheckFailed>() {
                return Failure::Selfcheck;
            }
            let invalid = if cause.is::<Invalid>() {
                Some(true)
            } else if let Some(e) = cause.downcast_ref::<TrainError>() {
                Some(train_invalid(e))
            } else if let Some(e) = cause.downcast_ref::<DataError>() {
                Some(!matches!(e, DataError::Io(_)))
            } else if let Some(e) = cause.downcast_ref::<VocabError>() {
                Some(!matches!(e, VocabError::Io(_)))
            } else if let Some(e) = cause.downcast_ref::<LandscapeError>() {
                Some(!matches!(e, LandscapeError::Scan(_)))
            } else if let Some(e) = cause.downcast_ref::<BenchError>() {
                Some(matches!(e, BenchError::Spec(_)))
            } else { cause.downcast_ref::<ModelError>().map(model_invalid) };
            match invalid {
                Some(true) => return Failure::Validation,
                Some(false) => return Failure::Runtime,
                None => {}
            }
        }
        Failure::Runtime
    }
}

fn train_invalid(e: &TrainError) -> bool {
    match e {
        TrainError::Config(_) | TrainError::ConfigSyntax { .. } | TrainError::EmptyDataset => true,
        TrainError::Loss(l) => !matches!(l, LossError::Vocab(VocabError::Io(_))),
        TrainError::Vocab(v) => !matches!(v, VocabError::Io(_)),
        TrainError::Model(m) => model_invalid(m),
        TrainError::Eval(EvalError::Empty) => true,
        TrainError::Eval(_) | TrainError::NonFinite { .. } | TrainError::Io(_) => false,
    }
}

fn model_invalid(e: &ModelError) -> bool {
    matches!(e, ModelError::Config(_) | ModelError::TooLong { .. } | ModelError::BadToken { .. })
}

fn output_root() -> PathBuf {
    std::env::var_os("NTL_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("ntl-out"))
}

fn out_dir(o: &Output, command: &str) -> PathBuf {
    o.out.clone().unwrap_or_else(|| output_root().join(command))
}

/// Runs `body` unless `dir` already holds `manifest`; writes the manifest
/// only after `body` succeeds.
fn guarded(dir: &Path, force: bool, manifest: &Manifest, body: impl FnOnce() -> Result<()>) -> Result<()> {
    if !force && manifest.is_current(dir) {
        println!("up to date: {} (pass --force to rerun)", dir.display());
        return Ok(());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Manifest::clear(dir)?;
    body()?;
    let path = manifest.write(dir)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn load_vocab(path: Option<&Path>) -> Result<NumberVocabulary> {
    match path {
        Some(p) => NumberVocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display())),
        None => Ok(NumberVocabulary::task_default()),
    }
}

fn split_files(dir: &Path) -> Vec<PathBuf> {
    Split::ALL
        .iter()
        .map(|s| dir.join(format!("{s}.tsv")))
        .filter(|p| p.exists())
        .collect()
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// addsub, mul or copy.
    #[arg(long)]
    pub task: Task,
    /// Operand digit counts seen in training, `lo..hi` or `k`.
    #[arg(long, default_value = "1..2")]
    pub train_digits: DigitRange,
    /// Largest operand digit count of the extrapolation split.
    #[arg(long, default_value_t = 3)]
    pub extra_digits: u32,
    /// Training samples; each evaluation split gets a tenth unless set.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long)]
    pub n_interpolation: Option<usize>,
    #[arg(long)]
    pub n_extrapolation: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: Output,
}

pub fn datagen(a: DatagenArgs) -> Result<()> {
    let mut spec = GenSpec::new(a.task, a.train_digits, a.extra_digits, a.n, a.seed);
    if let Some(n) = a.n_interpolation {
        spec.n_interpolation = n;
    }
    if let Some(n) = a.n_extrapolation {
        spec.n_extrapolation = n;
    }
    spec.validate()?;
    let dir = out_dir(&a.output, "datagen");
    let mut m = Manifest::new("datagen", Some(spec.seed));
    m.set("task", spec.task)
        .set("train_digits", spec.train_digits)
        .set("extra_digits", spec.extrapolation_digits)
        .set("n_train", spec.n_train)
        .set("n_interpolation", spec.n_interpolation)
        .set("n_extrapolation", spec.n_extrapolation);
    for s in Split::ALL {
        m.artifact(format!("{s}.tsv"));
    }
    m.artifact(VOCAB_FILE);
    guarded(&dir, a.output.force, &m, || {
        let data = generate(&spec)?;
        for (split, path, n) in data.write_dir(&dir)? {
            println!("{split:<14} {n:>7} samples -> {}", path.display());
        }
        NumberVocabulary::task_default().save(&dir.join(VOCAB_FILE))?;
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding the split files written by `datagen`.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Vocabulary file (`token<TAB>value|NONE` per line); defaults to the task vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// ce, ce+ntl-mse, ce+ntl-mae, ce+ntl-huber, ce+ntl-was, ce+ntl-was-cdf, ce+gce, ce+gce+ntl-was-cdf.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Squash factor of the NTL-WAS cost.
    #[arg(long)]
    pub squash: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

impl TrainArgs {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        let s = |x: Option<String>| x;
        vec![
            ("loss", s(self.loss.clone())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("sigma", self.sigma.map(|v| v.to_string())),
            ("squash", self.squash.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("log_every", self.log_every.map(|v| v.to_string())),
            ("eval_every", self.eval_every.map(|v| v.to_string())),
        ]
    }

    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        for (key, value) in self.flags() {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Invalid(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let vocab = load_vocab(a.vocab.as_deref())?;
    let dir = out_dir(&a.output, "train");
    let resumed = match &a.resume {
        Some(p) => Some(read_checkpoint(p).with_context(|| format!("reading checkpoint {}", p.display()))?),
        None => None,
    };
    let mut cfg = match &resumed {
        Some(ck) => {
            if a.config.is_some() || a.flags().iter().any(|f| f.0 != "steps" && f.1.is_some()) || !a.overrides.is_empty() {
                return Err(Invalid("--resume takes its config from the checkpoint; only --steps may change".into()).into());
            }
            let mut cfg = TrainConfig::from_text(&ck.metadata)?;
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            cfg
        }
        None => a.config()?,
    };
    cfg.output_dir = Some(dir.clone());
    cfg.validate(&vocab)?;

    let mut m = Manifest::new("train", Some(cfg.seed));
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            m.set(k.trim(), v.trim());
        }
    }
    for p in split_files(&a.data) {
        m.input(&p)?;
    }
    if let Some(p) = &a.vocab {
        m.input(p)?;
    }
    if let Some(p) = &a.resume {
        m.input(p)?;
    }
    m.artifact("final.ntlf").artifact("train_log.csv").artifact("eval_buckets.csv").artifact(VOCAB_FILE);

    guarded(&dir, a.output.force, &m, || {
        let data = Dataset::read_dir(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
        let mut trainer = match resumed {
            Some(ck) => {
                let mut t = Trainer::resume(ck, &vocab, &data)?;
                t.config = cfg.clone();
                t
            }
            None => Trainer::new(cfg.clone(), &vocab, &data)?,
        };
        println!("training {} for {} steps -> {}", cfg.loss, cfg.steps, dir.display());
        while trainer.step() < cfg.steps {
            let next = (trainer.step() / cfg.log_every + 1) * cfg.log_every;
            trainer.run_until(next.min(cfg.steps))?;
            if let Some(r) = trainer.log.records.last() {
                let eval = r
                    .eval
                    .as_ref()
                    .map(|e| format!(" acc {:.4} mae {}", e.accuracy, e.mae.map_or("-".into(), |v| format!("{v:.4}"))))
                    .unwrap_or_default();
                println!(
                    "step {:>6} loss {:.5} ce {:.5} ntl {:.5}{eval}",
                    r.step, r.loss_total, r.loss_ce, r.loss_ntl
                );
            }
        }
        if trainer.step() > 0 && !dir.join("final.ntlf").exists() {
            trainer.write_outputs(&dir)?;
        }
        vocab.save(&dir.join(VOCAB_FILE))?;
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by `datagen`.
    #[arg(long)]
    pub data: PathBuf,
    /// train, interpolation or extrapolation.
    #[arg(long, default_value = "extrapolation")]
    pub split: Split,
    /// Defaults to `vocab.txt` next to the checkpoint, then the task vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Score regression metrics on sign(x)·log10(1 + |x|).
    #[arg(long)]
    pub log_transform: bool,
    #[arg(long)]
    pub max_samples: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[command(flatten)]
    pub output: Output,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let beside = a.checkpoint.parent().map(|d| d.join(VOCAB_FILE)).filter(|p| p.exists());
    let vocab_path = a.vocab.clone().or(beside);
    let vocab = load_vocab(vocab_path.as_deref())?;
    if a.batch_size == 0 {
        bail!(Invalid("--batch-size must be at least 1".into()));
    }
    let split_path = a.data.join(format!("{}.tsv", a.split));
    if !split_path.exists() {
        bail!(Invalid(format!("no {} split at {}", a.split, split_path.display())));
    }
    let dir = out_dir(&a.output, "eval");
    let mut m = Manifest::new("eval", None);
    m.set("split", a.split)
        .set("log_transform", a.log_transform)
        .set("max_samples", a.max_samples.map_or("all".into(), |n| n.to_string()))
        .set("batch_size", a.batch_size);
    m.input(&a.checkpoint)?.input(&split_path)?;
    if let Some(p) = &vocab_path {
        m.input(p)?;
    }
    m.artifact("metrics.csv").artifact("metrics_by_bucket.csv").artifact("predictions.tsv");

    guarded(&dir, a.output.force, &m, || {
        let (params, _) = load_checkpoint_for(&a.checkpoint, vocab.len())?;
        let data = Dataset::read_dir(&a.data)?;
        let mut samples = data.split(a.split).to_vec();
        if let Some(n) = a.max_samples {
            samples.truncate(n);
        }
        let options = EvalOptions {
            log_transform: a.log_transform,
            batch_size: a.batch_size,
            max_new: None,
        };
        let ev = evaluate(&params, &samples, &vocab, &options).map_err(TrainError::from)?;
        println!("{}", ev.report);
        fs::write(dir.join("metrics.csv"), ev.report.to_csv())?;
        let mut by_bucket = format!("bucket,{}\n", ntl_core::evalx::METRICS_CSV_HEADER);
        for (b, r) in &ev.per_bucket {
            by_bucket.push_str(&format!("{b},{}\n", r.csv_row()));
        }
        fs::write(dir.join("metrics_by_bucket.csv"), by_bucket)?;
        let mut preds = String::from("question\treference\toutput\tcorrect\n");
        for (s, p) in samples.iter().zip(&ev.predictions) {
            preds.push_str(&format!("{}\t{}\t{}\t{}\n", s.question, p.reference, p.output, p.correct()));
        }
        fs::write(dir.join("predictions.tsv"), preds)?;
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Output directory of the first training run.
    #[arg(long)]
    pub a: PathBuf,
    /// Output directory of the second training run.
    #[arg(long)]
    pub b: PathBuf,
    /// Per-bucket MAPE a run has to drop below.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[command(flatten)]
    pub output: Output,
}

fn read_log(dir: &Path) -> Result<TrainLog> {
    let log = fs::read_to_string(dir.join("train_log.csv")).with_context(|| format!("reading {}", dir.display()))?;
    let buckets = fs::read_to_string(dir.join("eval_buckets.csv")).ok();
    Ok(TrainLog::from_csv(&log, buckets.as_deref())?)
}

pub fn compare(a: CompareArgs) -> Result<()> {
    if !(a.threshold.is_finite() && a.threshold > 0.0) {
        bail!(Invalid(format!("--threshold must be > 0, got {}", a.threshold)));
    }
    let dir = out_dir(&a.output, "compare");
    let mut m = Manifest::new("compare", None);
    m.set("threshold", a.threshold);
    for run in [&a.a, &a.b] {
        m.input(&run.join("train_log.csv"))?;
        let buckets = run.join("eval_buckets.csv");
        if buckets.exists() {
            m.input(&buckets)?;
        }
    }
    m.artifact("sample_efficiency.csv");
    guarded(&dir, a.output.force, &m, || {
        let eff = compare_runs(&read_log(&a.a)?, &read_log(&a.b)?, a.threshold).map_err(TrainError::from)?;
        let csv = eff.to_csv();
        print!("{csv}");
        fs::write(dir.join("sample_efficiency.csv"), csv)?;
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 32_000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 10)]
    pub number_tokens: usize,
    /// Share of positions labelled with a number token.
    #[arg(long, default_value_t = 0.8)]
    pub proportion: f64,
    #[arg(long, default_value_t = 256)]
    pub positions: usize,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Comma separated losses for the loss-only scenario.
    #[arg(long, value_delimiter = ',', default_value = "ce,ntl-mse,ntl-was,ntl-was-cdf")]
    pub losses: Vec<BenchLoss>,
    /// Skip the full training step scenario.
    #[arg(long)]
    pub no_full_step: bool,
    #[arg(long, default_value_t = 8)]
    pub step_batch: usize,
    #[arg(long, default_value_t = 32)]
    pub step_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: Output,
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let mut spec = BenchSpec {
        vocab_size: a.vocab_size,
        number_tokens: a.number_tokens,
        number_proportion: a.proportion,
        positions: a.positions,
        iterations: a.iterations,
        warmup: a.warmup,
        loss_configs: a.losses.clone(),
        step_batch: a.step_batch,
        step_len: a.step_len,
        seed: a.seed,
        ..BenchSpec::default()
    };
    if a.no_full_step {
        spec.step_configs.clear();
    }
    spec.validate()?;
    let dir = out_dir(&a.output, "bench");
    let mut m = Manifest::new("bench", Some(spec.seed));
    m.set("vocab_size", spec.vocab_size)
        .set("number_tokens", spec.number_tokens)
        .set("proportion", spec.number_proportion)
        .set("positions", spec.positions)
        .set("iterations", spec.iterations)
        .set("warmup", spec.warmup)
        .set("losses", a.losses.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","))
        .set(
            "full_step",
            spec.step_configs.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        )
        .set("step_batch", spec.step_batch)
        .set("step_len", spec.step_len)
        .artifact("bench.csv");
    guarded(&dir, a.output.force, &m, || {
        let report = run_bench(&spec)?;
        let csv = report.to_csv();
        print!("{csv}");
        fs::write(dir.join("bench.csv"), csv)?;
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    /// 1b (loss against distance of the wrong digit) or 2 (the (p3, p5) simplex).
    #[arg(long)]
    pub figure: Figure,
    /// Grid points per axis for figure 2.
    #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: usize,
    #[command(flatten)]
    pub output: Output,
}

pub fn landscape(a: LandscapeArgs) -> Result<()> {
    let dir = out_dir(&a.output, "landscape");
    let mut m = Manifest::new("landscape", None);
    match a.figure {
        Figure::NominalFlatness => {
            m.set("figure", "1b")
                .set("q", DEFAULT_QS.map(|q| q.to_string()).join(","))
                .artifact("fig1b.csv");
        }
        Figure::Simplex => {
            if a.resolution < 2 {
                bail!(LandscapeError::Resolution(a.resolution));
            }
            m.set("figure", "2").set("resolution", a.resolution).artifact("fig2.csv");
            for c in LossColumn::ALL {
                m.artifact(format!("fig2_{}.svg", c.name()));
            }
        }
    }
    guarded(&dir, a.output.force, &m, || {
        match a.figure {
            Figure::NominalFlatness => {
                let csv = distance_csv(&distance_curves(&DEFAULT_QS)?);
                fs::write(dir.join("fig1b.csv"), csv)?;
                println!("wrote {}", dir.join("fig1b.csv").display());
            }
            Figure::Simplex => {
                let points = simplex_grid(a.resolution)?;
                let csv = simplex_csv(&points);
                fs::write(dir.join("fig2.csv"), &csv)?;
                for c in LossColumn::ALL {
                    fs::write(dir.join(format!("fig2_{}.svg", c.name())), heatmap_svg(&points, a.resolution, c))?;
                }
                let scan = scan_simplex_csv(&csv, a.resolution)?;
                println!(
                    "wrote {} ({} rows); mse zero on diagonal: {}, mse positive elsewhere: {}, was zero only at origin: {}",
                    dir.join("fig2.csv").display(),
                    scan.rows,
                    scan.mse_zero_on_diagonal,
                    scan.mse_positive_off_diagonal,
                    scan.was_zero_only_at_origin
                );
            }
        }
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per gradient check; the transport suites run twice as many.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Corrupt the analytic gradient of the named op (for testing the checker).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    #[command(flatten)]
    pub output: Output,
}

fn with_fault(ops: Vec<GradOp>, name: &str) -> Result<Vec<GradOp>> {
    if !ops.iter().any(|op| op.name == name) {
        let names: Vec<_> = ops.iter().map(|op| op.name).collect();
        bail!(Invalid(format!("unknown op {name:?}; ops are {}", names.join(", "))));
    }
    Ok(ops
        .into_iter()
        .map(|op| {
            if op.name != name {
                return op;
            }
            let eval = op.eval;
            GradOp {
                name: op.name,
                needs_equidistant: op.needs_equidistant,
                eval: Box::new(move |inst, z| {
                    eval(inst, z).map(|mut r| {
                        r.grad_logits.mapv_inplace(|g| g * 1.01);
                        r
                    })
                }),
            }
        })
        .collect())
}

pub fn selfcheck(a: SelfcheckArgs) -> Result<()> {
    if a.cases == 0 {
        bail!(Invalid("--cases must be at least 1".into()));
    }
    let mut ops = all_grad_ops();
    if let Some(name) = &a.inject_fault {
        ops = with_fault(ops, name)?;
    }
    let dir = out_dir(&a.output, "selfcheck");
    let mut m = Manifest::new("selfcheck", Some(a.seed));
    m.set("cases", a.cases)
        .set("inject_fault", a.inject_fault.as_deref().unwrap_or("none"))
        .artifact("selfcheck.txt");
    let mut failed = Vec::new();
    let outcome = guarded(&dir, a.output.force, &m, || {
        let mut outcomes: Vec<CheckOutcome> = gradient_suite(&ops, a.seed, a.cases)
            .into_iter()
            .map(|mut o| {
                o.name = format!("gradient {}", o.name);
                o
            })
            .collect();
        outcomes.push(ot_equivalence_suite(a.seed.wrapping_add(1), 2 * a.cases));
        outcomes.push(cdf_equivalence_suite(a.seed.wrapping_add(2), 2 * a.cases));
        let report: String = outcomes.iter().map(|o| format!("{o}\n")).collect();
        print!("{report}");
        fs::write(dir.join("selfcheck.txt"), &report)?;
        failed = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.clone()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(anyhow!(SelfcheckFailed(failed.clone())))
        }
    });
    outcome
}

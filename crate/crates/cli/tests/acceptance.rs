//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 6 to 8 depend on wall-clock timing or on stochastic training
//! outcomes; their verdicts are reported but do not fail the run. Every
//! other criterion is exact and a FAIL exits nonzero.
//!
//! Training runs go through the `ntl` binary into a cache directory under
//! the cargo target dir, so a rerun with unchanged manifests reuses them.
//! Set `NTL_ACCEPTANCE_FRESH=1` to force retraining. Pass criterion
//! numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use ntl_bench::{run_bench, BenchSpec, Scenario};
use ntl_core::check::{all_grad_ops, cdf_equivalence_suite, gradient_suite, ot_equivalence_suite};
use ntl_core::landscape::{distance_curves, scan_simplex_csv, DEFAULT_QS, LABEL_DIGIT};
use ntl_core::seqmodel::read_checkpoint;
use ntl_core::losses::gaussian_smooth_values;
use ntl_core::{build_cost, compare_runs, CostKind, NumberVocabulary, TrainLog};

type Outcome = Result<(bool, String), String>;

struct Criterion {
    id: u8,
    name: &'static str,
    /// Timing or training-noise dependent; reported, never fatal.
    advisory: bool,
    run: fn(&Ctx) -> Outcome,
}

struct Ctx {
    root: PathBuf,
    fresh: bool,
    /// Desk-scale run pairs shared by criteria 7 and 8.
    desk: std::cell::OnceCell<Result<Vec<DeskPair>, String>>,
}

fn main() {
    let wanted: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&root).expect("acceptance cache dir");
    let ctx = Ctx {
        root,
        fresh: std::env::var("NTL_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1"),
        desk: std::cell::OnceCell::new(),
    };
    let criteria = [
        Criterion { id: 1, name: "gradient oracle", advisory: false, run: gradient_oracle },
        Criterion { id: 2, name: "transport oracle equivalence", advisory: false, run: transport_equivalence },
        Criterion { id: 3, name: "nominal flatness of CE vs NTL-WAS", advisory: false, run: nominal_flatness },
        Criterion { id: 4, name: "simplex landscape scan", advisory: false, run: simplex_scan },
        Criterion { id: 5, name: "exact neutrality on text-only data", advisory: false, run: text_neutrality },
        Criterion { id: 6, name: "runtime protocol", advisory: true, run: runtime_protocol },
        Criterion { id: 7, name: "desk-scale extrapolation benefit", advisory: true, run: desk_benefit },
        Criterion { id: 8, name: "sample-efficiency crossings", advisory: true, run: sample_efficiency },
        Criterion { id: 9, name: "gaussian label suite", advisory: false, run: gaussian_suite },
        Criterion { id: 10, name: "squash endpoints", advisory: false, run: squash_endpoints },
    ];
    let mut fatal = 0;
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let t = Instant::now();
        let (pass, detail) = match (c.run)(&ctx) {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        let note = if c.advisory && !pass { " [advisory]" } else { "" };
        println!("{tag} [{}] {}{note}: {detail} ({:.1} s)", c.id, c.name, t.elapsed().as_secs_f64());
        if !pass {
            failed += 1;
            if !c.advisory {
                fatal += 1;
            }
        }
    }
    println!("acceptance: {failed} failed, {fatal} of them exact criteria");
    if fatal > 0 {
        std::process::exit(1);
    }
}

fn ntl(ctx: &Ctx, args: &[&str]) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ntl"));
    cmd.args(args).current_dir(&ctx.root);
    if ctx.fresh && args.first() != Some(&"datagen") {
        cmd.arg("--force");
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "ntl {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn gradient_oracle(_: &Ctx) -> Outcome {
    let outcomes = gradient_suite(&all_grad_ops(), 20_240_601, 100);
    let worst = outcomes.iter().map(|o| o.worst).fold(0.0, f64::max);
    let bad: Vec<_> = outcomes.iter().filter(|o| !o.passed() || o.cases != 100).map(|o| o.name.clone()).collect();
    Ok((
        bad.is_empty(),
        format!("{} ops x 100 instances, worst relative error {worst:.2e} (< 1e-6); failing: {bad:?}", outcomes.len()),
    ))
}

fn transport_equivalence(_: &Ctx) -> Outcome {
    let ot = ot_equivalence_suite(11, 200);
    let cdf = cdf_equivalence_suite(12, 200);
    Ok((
        ot.passed() && cdf.passed() && ot.cases == 200 && cdf.cases == 200,
        format!("closed form vs exact OT {:.2e}, CDF vs closed form {:.2e} (<= 1e-9)", ot.worst, cdf.worst),
    ))
}

fn nominal_flatness(_: &Ctx) -> Outcome {
    let points = distance_curves(&DEFAULT_QS).map_err(|e| e.to_string())?;
    let label = LABEL_DIGIT as i64;
    let mut ok = true;
    let mut worst_spread: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for &q in &DEFAULT_QS {
        let rows: Vec<_> = points.iter().filter(|p| p.q == q).collect();
        ok &= rows.len() == 9 && rows.iter().all(|p| p.token != LABEL_DIGIT);
        let ce: Vec<f64> = rows.iter().map(|p| p.losses.ce).collect();
        let spread = ce.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - ce.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        worst_spread = worst_spread.max(spread);
        // mass q on t, (1 - q)/9 on every other digit including the label
        for p in &rows {
            let t = p.token as i64;
            let rest: f64 = (0..10).filter(|&k| k != t).map(|k| ((k - label).abs()) as f64).sum();
            let expected = q * (t - label).abs() as f64 + (1.0 - q) / 9.0 * rest;
            worst_oracle = worst_oracle.max((p.losses.was - expected).abs());
        }
        let mut by_distance: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for p in &rows {
            by_distance.entry((p.token as i64 - label).abs()).or_default().push(p.losses.was);
        }
        let groups: Vec<_> = by_distance.values().collect();
        for w in groups.windows(2) {
            let hi_prev = w[0].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo_next = w[1].iter().cloned().fold(f64::INFINITY, f64::min);
            ok &= lo_next > hi_prev;
        }
    }
    ok &= worst_spread <= 1e-12 && worst_oracle <= 1e-12;
    Ok((
        ok,
        format!("CE spread {worst_spread:.1e} (<= 1e-12); NTL-WAS strictly increasing in distance, max deviation from closed form {worst_oracle:.1e}"),
    ))
}

fn simplex_scan(ctx: &Ctx) -> Outcome {
    ntl(ctx, &["landscape", "--figure", "2", "--resolution", "101", "--out", "fig2"])?;
    let csv = fs::read_to_string(ctx.root.join("fig2/fig2.csv")).map_err(|e| e.to_string())?;
    let scan = scan_simplex_csv(&csv, 101).map_err(|e| e.to_string())?;
    // independent pass over the same file
    let (mut rows, mut ok) = (0, true);
    for line in csv.lines().skip(1) {
        let c: Vec<f64> = line.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect();
        let (p3, p5, mse, was) = (c[0], c[1], c[3], c[4]);
        rows += 1;
        let diagonal = (p3 - p5).abs() < 1e-12;
        let origin = p3 == 0.0 && p5 == 0.0;
        ok &= if diagonal { mse == 0.0 } else { mse > 0.0 };
        ok &= if origin { was == 0.0 } else { was > 0.0 };
    }
    let expected_rows = 101 * 102 / 2;
    Ok((
        ok && scan.passed() && rows == expected_rows && scan.rows == expected_rows,
        format!(
            "{rows} grid points; NTL-MSE zero exactly on the diagonal, NTL-WAS zero only at the origin; built-in scan {}",
            if scan.passed() { "clean" } else { "flagged" }
        ),
    ))
}

fn text_neutrality(ctx: &Ctx) -> Outcome {
    ntl(ctx, &["datagen", "--task", "copy", "--train-digits", "1..4", "--extra-digits", "5", "--n", "2000", "--seed", "5", "--out", "copy-data"])?;
    let mut checkpoints = Vec::new();
    for (loss, out) in [("ce", "copy-ce"), ("ce+ntl-was", "copy-was")] {
        ntl(
            ctx,
            &["train", "--data", "copy-data", "--loss", loss, "--lambda", "0.3", "--steps", "500", "--seed", "3", "--eval-every", "0", "--out", out],
        )?;
        let mut ck = read_checkpoint(&ctx.root.join(out).join("final.ntlf")).map_err(|e| e.to_string())?;
        // the metadata records the loss name; compare the trained state
        ck.metadata.clear();
        checkpoints.push(ck.to_bytes());
    }
    let same = checkpoints[0] == checkpoints[1];
    Ok((
        same,
        format!(
            "500 steps on letter copying; parameter and optimizer bytes {} ({} bytes)",
            if same { "identical" } else { "differ" },
            checkpoints[0].len()
        ),
    ))
}

fn runtime_protocol(_: &Ctx) -> Outcome {
    let spec = BenchSpec::default();
    let report = run_bench(&spec).map_err(|e| e.to_string())?;
    let mean = |s: Scenario, c: &str| report.row(s, c).map(|r| r.mean_us).ok_or(format!("missing {s} {c}"));
    let ce = mean(Scenario::LossOnly, "ce")?;
    let (mse, was, cdf) = (
        mean(Scenario::LossOnly, "ntl-mse")?,
        mean(Scenario::LossOnly, "ntl-was")?,
        mean(Scenario::LossOnly, "ntl-was-cdf")?,
    );
    let overhead = report
        .row(Scenario::FullStep, "ce+ntl-was")
        .and_then(|r| r.overhead_vs_ce)
        .ok_or("missing full-step overhead")?;
    let speedup = ce / was;
    let ordered = was <= mse && mse <= cdf;
    Ok((
        speedup >= 5.0 && ordered && overhead <= 0.10,
        format!(
            "V={} numbers={} p={} iters={}: NTL-WAS {speedup:.1}x faster than CE (>= 5); means us WAS {was:.0}, MSE {mse:.0}, WAS-CDF {cdf:.0} (ordering {}); full-step overhead {:.1}% (<= 10%)",
            spec.vocab_size,
            spec.number_tokens,
            spec.number_proportion,
            spec.iterations,
            if ordered { "holds" } else { "violated" },
            overhead * 100.0
        ),
    ))
}

struct DeskRun {
    log: TrainLog,
    mae: Option<f64>,
    accuracy: f64,
}

struct DeskPair {
    seed: u64,
    ce: DeskRun,
    ntl: DeskRun,
}

const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const DESK_STEPS: &str = "20000";

fn desk_runs(ctx: &Ctx) -> Result<&Vec<DeskPair>, String> {
    ctx.desk
        .get_or_init(|| {
            ntl(ctx, &["datagen", "--task", "addsub", "--train-digits", "1..2", "--extra-digits", "3", "--n", "10000", "--seed", "7", "--out", "desk-data"])?;
            let mut pairs = Vec::new();
            for seed in DESK_SEEDS {
                let run = |loss: &str, tag: &str| -> Result<DeskRun, String> {
                    let out = format!("desk-{tag}-s{seed}");
                    let seed = seed.to_string();
                    ntl(
                        ctx,
                        &["train", "--data", "desk-data", "--loss", loss, "--lambda", "0.3", "--steps", DESK_STEPS, "--batch-size", "32", "--seed", &seed, "--log-every", "100", "--eval-every", "1000", "--out", &out],
                    )?;
                    let eval_out = format!("{out}-eval");
                    let ck = format!("{out}/final.ntlf");
                    ntl(ctx, &["eval", "--checkpoint", &ck, "--data", "desk-data", "--split", "extrapolation", "--out", &eval_out])?;
                    let metrics = fs::read_to_string(ctx.root.join(&eval_out).join("metrics.csv")).map_err(|e| e.to_string())?;
                    let row: Vec<&str> = metrics.lines().nth(1).ok_or("empty metrics")?.split(',').collect();
                    let dir = ctx.root.join(&out);
                    let log = fs::read_to_string(dir.join("train_log.csv")).map_err(|e| e.to_string())?;
                    let buckets = fs::read_to_string(dir.join("eval_buckets.csv")).map_err(|e| e.to_string())?;
                    Ok(DeskRun {
                        log: TrainLog::from_csv(&log, Some(&buckets)).map_err(|e| e.to_string())?,
                        accuracy: row[1].parse().map_err(|_| "bad accuracy")?,
                        mae: row[2].parse().ok(),
                    })
                };
                let ce = run("ce", "ce")?;
                let ntl = run("ce+ntl-was", "was")?;
                pairs.push(DeskPair { seed, ce, ntl });
            }
            Ok(pairs)
        })
        .as_ref()
        .map_err(|e| e.clone())
}

fn desk_benefit(ctx: &Ctx) -> Outcome {
    let pairs = desk_runs(ctx)?;
    let show = |x: Option<f64>| x.map_or("absent".into(), |v| format!("{v:.2}"));
    let mut wins = 0;
    let mut parts = Vec::new();
    for p in pairs {
        // a run whose outputs never parse has no MAE and cannot win
        let win = match (p.ntl.mae, p.ce.mae) {
            (Some(a), Some(b)) => a <= b,
            (Some(_), None) => true,
            _ => false,
        };
        wins += win as usize;
        parts.push(format!(
            "seed {}: MAE ntl {} vs ce {}, acc {:.3} vs {:.3}",
            p.seed,
            show(p.ntl.mae),
            show(p.ce.mae),
            p.ntl.accuracy,
            p.ce.accuracy
        ));
    }
    let n = pairs.len() as f64;
    let acc_ntl = pairs.iter().map(|p| p.ntl.accuracy).sum::<f64>() / n;
    let acc_ce = pairs.iter().map(|p| p.ce.accuracy).sum::<f64>() / n;
    Ok((
        wins >= 2 && acc_ntl >= acc_ce,
        format!(
            "NTL MAE <= CE in {wins}/3 seeds; mean extrapolation accuracy {acc_ntl:.4} vs {acc_ce:.4}; {}",
            parts.join("; ")
        ),
    ))
}

fn sample_efficiency(ctx: &Ctx) -> Outcome {
    let pairs = desk_runs(ctx)?;
    // training covers 1 and 2 digit operands; bucket 2 is the hardest seen
    let bucket = 2;
    let mut wins = 0;
    let mut parts = Vec::new();
    for p in pairs {
        let eff = compare_runs(&p.ntl.log, &p.ce.log, 0.5).map_err(|e| e.to_string())?;
        let b = eff.bucket(bucket).ok_or(format!("bucket {bucket} never evaluated"))?;
        let win = match (b.first_a, b.first_b) {
            (Some(a), Some(c)) => a <= c,
            (Some(_), None) => true,
            _ => false,
        };
        wins += win as usize;
        let show = |s: Option<usize>| s.map_or("never".into(), |v| v.to_string());
        parts.push(format!("seed {}: ntl {} vs ce {}", p.seed, show(b.first_a), show(b.first_b)));
    }
    Ok((
        wins >= 2,
        format!("first step with bucket-{bucket} MAPE < 0.5, NTL no later in {wins}/3 seeds; {}", parts.join("; ")),
    ))
}

fn gaussian_suite(ctx: &Ctx) -> Outcome {
    let vocab = NumberVocabulary::task_default();
    let digits: Vec<f64> = (0..10).map(f64::from).collect();
    let narrow = gaussian_smooth_values(&digits, 0.05, &vocab).map_err(|e| e.to_string())?;
    let wide = gaussian_smooth_values(&digits, 0.5, &vocab).map_err(|e| e.to_string())?;
    let row_sum_err = narrow
        .rows()
        .into_iter()
        .chain(wide.rows())
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let narrow_min = (0..10).map(|k| narrow[[k, k]]).fold(f64::INFINITY, f64::min);
    // brute-force oracle: normalized Gaussian weights over the ten digits
    let oracle = |center: f64, sigma: f64| {
        let w: Vec<f64> = digits.iter().map(|v| (-(v - center).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = w.iter().sum();
        Array2::from_shape_fn((1, 10), |(_, k)| w[k] / s)
    };
    let center = wide[[5, 5]];
    let oracle_err = (0..10)
        .map(|k| {
            let o = oracle(k as f64, 0.5);
            (0..10).map(|j| (o[[0, j]] - wide[[k, j]]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let static_ok = row_sum_err <= 1e-9 && narrow_min >= 0.999 && (center - 0.7866).abs() <= 1e-3 && oracle_err <= 1e-12;

    ntl(ctx, &["datagen", "--task", "addsub", "--train-digits", "1..2", "--extra-digits", "3", "--n", "2000", "--seed", "9", "--out", "gce-data"])?;
    ntl(
        ctx,
        &["train", "--data", "gce-data", "--loss", "ce+gce+ntl-was-cdf", "--lambda", "0.3", "--sigma", "0.5", "--steps", "1000", "--seed", "4", "--eval-every", "0", "--out", "gce-run"],
    )?;
    let log = fs::read_to_string(ctx.root.join("gce-run/train_log.csv")).map_err(|e| e.to_string())?;
    let log = TrainLog::from_csv(&log, None).map_err(|e| e.to_string())?;
    let finite = log
        .records
        .iter()
        .all(|r| r.loss_total.is_finite() && r.loss_ce.is_finite() && r.loss_ntl.is_finite());
    let last = log.records.last().map(|r| r.step).unwrap_or(0);
    Ok((
        static_ok && finite && last == 1000,
        format!(
            "row sums within {row_sum_err:.1e}; sigma 0.05 label mass >= {narrow_min:.6}; sigma 0.5 center {center:.5} (oracle gap {oracle_err:.1e}); CE+GCE+NTL-WAS-CDF {last} steps all finite: {finite}"
        ),
    ))
}

fn squash_endpoints(_: &Ctx) -> Outcome {
    let vocab = NumberVocabulary::task_default();
    let e = |r: Result<_, ntl_core::LossError>| r.map_err(|e: ntl_core::LossError| e.to_string());
    let euclid = e(build_cost(&vocab, CostKind::Euclidean))?.matrix;
    let reference = Array2::from_shape_fn((10, 10), |(j, k)| (j as f64 - k as f64).abs());
    let off: Vec<f64> = euclid.indexed_iter().filter(|((j, k), _)| j != k).map(|(_, &v)| v).collect();
    let ratio = off.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / off.iter().cloned().fold(f64::INFINITY, f64::min);
    let at_ratio = e(build_cost(&vocab, CostKind::Squashed(ratio)))?.matrix;
    let flat = e(build_cost(&vocab, CostKind::Squashed(1.0)))?.matrix;
    let max_gap = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let flat_off: Vec<f64> = flat.indexed_iter().filter(|((j, k), _)| j != k).map(|(_, &v)| v).collect();
    let flat_spread = flat_off.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - flat_off.iter().cloned().fold(f64::INFINITY, f64::min);
    let gap = max_gap(&at_ratio, &euclid);
    let ok = ratio == 9.0 && max_gap(&euclid, &reference) == 0.0 && gap <= 1e-12 && flat_spread <= 1e-12;
    Ok((
        ok,
        format!("euclidean max/min ratio {ratio}; squashed(9) vs euclidean {gap:.1e}; squashed(1) off-diagonal spread {flat_spread:.1e}"),
    ))
}

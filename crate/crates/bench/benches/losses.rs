use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ntl_bench::{random_problem, BenchSpec};
use ntl_core::losses::{build_cost, CostKind, TargetDistribution};
use ntl_core::{cross_entropy, LpVariant, NumberLoss};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss_only(c: &mut Criterion) {
    let spec = BenchSpec::default();
    let vocab = spec.vocabulary().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, labels) = random_problem(&mut rng, &vocab, spec.positions, spec.number_proportion);
    let cost = build_cost(&vocab, CostKind::Euclidean).unwrap();
    let loss = NumberLoss::new(&vocab);

    let mut group = c.benchmark_group("loss_only");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("ce", spec.vocab_size), |b| {
        b.iter(|| cross_entropy(&logits, &labels).unwrap())
    });
    group.bench_function(BenchmarkId::new("ntl-mse", spec.vocab_size), |b| {
        b.iter(|| loss.lp(&logits, &labels, LpVariant::Mse).unwrap())
    });
    group.bench_function(BenchmarkId::new("ntl-was", spec.vocab_size), |b| {
        b.iter(|| loss.was(&logits, &labels, &cost).unwrap())
    });
    group.bench_function(BenchmarkId::new("ntl-was-cdf", spec.vocab_size), |b| {
        b.iter(|| {
            let t = TargetDistribution::one_hot(&labels, &vocab).unwrap();
            loss.was_cdf(&logits, &t, &labels).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, loss_only);
criterion_main!(benches);

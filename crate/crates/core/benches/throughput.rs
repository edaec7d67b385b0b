//! Single-thread pool versus the default rayon pool on the data-parallel
//! hot paths: batch gradients, exhaustive index scoring, repeated trials.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;

use pvse_core::dataset::{generate_synthetic, load_dataset, SynthSpec};
use pvse_core::embedding::{FrequencyScope, ModelParams, ModelShape};
use pvse_core::eval::{tag_retrieval_trial, TrialSpec};
use pvse_core::loss::LossConfig;
use pvse_core::query::{retrieve, EmbeddingIndex, RetrieveOptions};
use pvse_core::train::{loss_gradients, TrainingSample};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("1-thread", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("default", ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        images: 256,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let shape = ModelShape {
        embed_dim: 128,
        feature_dim: spec.feature_dim,
        grid_rows: spec.grid_rows,
        grid_cols: spec.grid_cols,
    };
    let params =
        ModelParams::init(data.scheme().clone(), data.vocab().clone(), shape, FrequencyScope::Dataset, 0).unwrap();
    let samples = data.training_samples(params.vocab()).unwrap();
    let batch: Vec<&TrainingSample> = samples.iter().take(32).collect();
    let index = EmbeddingIndex::build(&params, &data).unwrap();
    let tag = data.region_categories()[1].tags[0].clone();
    let trial = TrialSpec {
        negative_ratio: 5,
        m_values: vec![5],
        ..TrialSpec::new(tag, 0)
    };
    let cfg = LossConfig::default();
    let none: [&str; 0] = [];

    let mut group = c.benchmark_group("throughput");
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("gradients_n32", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| loss_gradients(&batch, &params, &cfg).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("retrieve_256", name), &pool, |b, pool| {
            let opts = RetrieveOptions {
                top_m: 10,
                exclude_query: true,
            };
            b.iter(|| pool.install(|| retrieve(&index, &params, "img-0000", &none, &none, opts).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("trial_30x", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| tag_retrieval_trial(&index, &params, &trial).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("index_build", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| EmbeddingIndex::build(&params, &data).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);

//! Criterion benches for the data-parallel hot paths, comparing the
//! feature-dispatched implementation against the always-sequential one.
//! Build with `--no-default-features` to measure the pure sequential crate.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stageflow::harness::{build_pipeline, PipelineConfig};
use stageflow::retrieval::{random_query, retrieve, retrieve_serial, RetrievalIndex};
use stageflow::segment::{dtw, segment_demos};
use stageflow::simenv::{bundled_task, gen_demos};

fn bench_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.master_seed = 3;
    cfg.demos.per_task = 8;
    cfg.train.steps = 60;
    cfg.tune.steps = 10;
    cfg.eval.tasks = vec![1];
    cfg
}

fn retrieval_scan(c: &mut Criterion) {
    let task = bundled_task(1).unwrap();
    let demos = gen_demos(&task, 40, 7, 0.005).unwrap();
    let seg = segment_demos(&demos, 0.02).unwrap();
    let cfg = bench_config();
    let pipeline = build_pipeline(&cfg).unwrap();
    let mut lib = pipeline.libraries[0].clone();
    lib.demos = seg.staged;
    lib.segmentation = seg.segmentation;
    let index = RetrievalIndex::new(&lib);
    let mut rng = stageflow::rng::stream(5, &[stageflow::rng::BENCH]);
    let queries: Vec<_> = (0..64).map(|_| random_query(&lib, &mut rng)).collect();

    let mut group = c.benchmark_group("retrieve");
    group.bench_function("serial", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % queries.len();
            retrieve_serial(&index, &queries[i]).unwrap()
        });
    });
    group.bench_function("dispatched", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % queries.len();
            retrieve(&index, &queries[i]).unwrap()
        });
    });
    group.finish();
}

fn rollout_batch(c: &mut Criterion) {
    let cfg = bench_config();
    let pipeline = build_pipeline(&cfg).unwrap();
    let task = &pipeline.tasks[0];
    let lib = &pipeline.libraries[0];

    let mut group = c.benchmark_group("rollout_batch");
    group.sample_size(10);
    for &n in &[4usize, 16] {
        group.bench_with_input(BenchmarkId::new("full", n), &n, |b, &n| {
            b.iter(|| {
                let seeds: Vec<u64> = (0..n as u64).collect();
                stageflow::par::map_slice(&seeds, |&s| {
                    stageflow::execution::run_episode(
                        &pipeline.params,
                        &stageflow::execution::RolloutMode::Full(lib),
                        task,
                        s,
                        0.0,
                    )
                    .unwrap()
                    .trace
                    .success
                })
            });
        });
    }
    group.finish();
}

fn dtw_alignment(c: &mut Criterion) {
    let task = bundled_task(1).unwrap();
    let demos = gen_demos(&task, 8, 11, 0.005).unwrap();
    c.bench_function("dtw_pair", |b| {
        b.iter(|| dtw(&demos[0].states, &demos[1].states).unwrap().1);
    });
}

criterion_group!(benches, retrieval_scan, rollout_batch, dtw_alignment);
criterion_main!(benches);

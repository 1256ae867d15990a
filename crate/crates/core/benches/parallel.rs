//! Sequential against data-parallel execution for the hot paths: trajectory
//! cleaning, region encoding, minibatch gradients and evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trajdest::eval::{evaluate, EvalConfig};
use trajdest::exec::Execution;
use trajdest::geo::GeoPoint;
use trajdest::ingest::{generate_synthetic_city, SynthConfig, Trajectory};
use trajdest::models::{EncodedTrip, ModelConfig, ModelKind, NeuralModel};
use trajdest::partition::{PartitionConfig, SpacePartition};
use trajdest::preprocess::{run_pipeline, PreprocessConfig, TauThreshold};
use trajdest::train::{batch_gradients, sample_examples};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

struct City {
    raw: Vec<Trajectory>,
    preprocess: PreprocessConfig,
    partition: SpacePartition,
    encoded: Vec<EncodedTrip>,
}

fn city() -> City {
    let city = generate_synthetic_city(&SynthConfig {
        n_trips: 2000,
        ..SynthConfig::default()
    });
    let b = city.bbox();
    let preprocess = PreprocessConfig {
        bbox: [b.min_lat, b.max_lat, b.min_lon, b.max_lon],
        tau_threshold: TauThreshold::Fixed(2.65),
        ..PreprocessConfig::porto()
    };
    let (kept, _) = run_pipeline(city.trips.clone(), &preprocess, Execution::Sequential).unwrap();
    let points: Vec<GeoPoint> = kept.iter().flat_map(|t| t.points.iter().copied()).collect();
    let partition = SpacePartition::build(
        &points,
        PartitionConfig::for_target_regions(points.len(), 64),
    )
    .unwrap();
    let encoded = kept
        .iter()
        .map(|t| EncodedTrip::new(t, &partition))
        .collect();
    City {
        raw: city.trips,
        preprocess,
        partition,
        encoded,
    }
}

fn bench_parallel(c: &mut Criterion) {
    let city = city();
    let centroids = city.partition.centroids();
    let model = NeuralModel::new(
        ModelKind::MultiLstm,
        ModelConfig::default().with_regions(centroids.len()),
        1,
    )
    .unwrap();
    let batch = sample_examples(&city.encoded[..256], &mut ChaCha8Rng::seed_from_u64(3));
    let test = &city.encoded[..200];
    let eval_cfg = EvalConfig {
        completion_levels: vec![25, 50, 75],
        ..EvalConfig::default()
    };

    let mut group = c.benchmark_group("execution");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("preprocess", name), &exec, |b, &exec| {
            b.iter(|| run_pipeline(city.raw.clone(), &city.preprocess, exec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("encode", name), &exec, |b, &exec| {
            b.iter(|| exec.map(&city.encoded, |t| city.partition.encode_points(&t.points)))
        });
        group.bench_with_input(
            BenchmarkId::new("batch_gradients", name),
            &exec,
            |b, &exec| b.iter(|| batch_gradients(&model, &batch, &centroids, 0.5, exec).unwrap()),
        );
        group.bench_with_input(BenchmarkId::new("evaluate", name), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, test, &centroids, &eval_cfg, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_parallel);
criterion_main!(benches);

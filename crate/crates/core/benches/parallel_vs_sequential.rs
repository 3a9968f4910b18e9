use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use goalcast_core::envsim::{generate_dataset, DatasetConfig};
use goalcast_core::metrics::{evaluate_all, Bandwidth, ForecastSet, SceneEval, Units};
use goalcast_core::stats::{bayesian_signed_rank, PairedScores, SignedRankConfig};
use goalcast_core::{Exec, Homography, Point2, SemanticGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid = SemanticGrid::binary(128, 128, vec![0; 128 * 128]).unwrap();
    let h = Homography::similarity(8.0, Point2::new(0.0, 0.0)).unwrap();
    let walk = |rng: &mut ChaCha8Rng| -> Vec<Point2> {
        let (mut x, mut y) = (rng.random_range(2.0..14.0), rng.random_range(2.0..14.0));
        (0..12)
            .map(|_| {
                x += rng.random_range(-0.5..0.5);
                y += rng.random_range(-0.5..0.5);
                Point2::new(x, y)
            })
            .collect()
    };
    let sets: Vec<ForecastSet> = (0..200)
        .map(|i| {
            let samples = (0..20).map(|_| walk(&mut rng)).collect();
            ForecastSet::new(format!("s{i}"), samples, walk(&mut rng)).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("evaluate_all_200_scenes_k20");
    for (label, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(label), &exec, |b, &exec| {
            b.iter(|| {
                let scenes: Vec<SceneEval> = sets
                    .iter()
                    .map(|fs| SceneEval { forecast: fs.clone(), grid: &grid, homography: &h })
                    .collect();
                evaluate_all(&scenes, Units::Meters, Bandwidth::Scott, exec).unwrap()
            })
        });
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let cfg = DatasetConfig { envs_per_split: [2, 1, 1], scenes_per_env: 8, ..DatasetConfig::default() };
    let mut group = c.benchmark_group("generate_dataset_4_envs_x8");
    group.sample_size(10);
    for (label, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(label), &exec, |b, &exec| {
            b.iter(|| generate_dataset(&cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn signed_rank(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps = PairedScores {
        method_a: "a".into(),
        method_b: "b".into(),
        diffs: (0..100).map(|_| rng.random_range(-1.0..1.5)).collect(),
        rope: 0.5,
    };
    let cfg = SignedRankConfig::default();
    let mut group = c.benchmark_group("bayesian_signed_rank_n100");
    group.sample_size(10);
    for (label, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(label), &exec, |b, &exec| {
            b.iter(|| bayesian_signed_rank(&ps, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, metrics, simulation, signed_rank);
criterion_main!(benches);

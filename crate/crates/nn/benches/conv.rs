use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use goalcast_core::Exec;
use goalcast_nn::{layers::Conv2d, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv_forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = Conv2d::new("c", 16, 16, 3);
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut rng);
    let x = Tensor::from_vec(&[16, 16, 32, 32], (0..16 * 16 * 32 * 32).map(|i| (i as f64 * 0.01).sin()).collect());
    let mut group = c.benchmark_group("conv3x3_16x16x32x32_batch16");
    for (label, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &exec, |b, &exec| {
            b.iter(|| {
                let mut g = Graph::new(exec);
                let xv = g.constant(x.clone());
                let y = layer.forward(&mut g, &store, xv).unwrap();
                let s = g.sum(y);
                g.backward(s)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv_forward_backward);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dingdate_core::graph::{random_graph, Scope};
use dingdate_core::inference::{factorized_inference, oracle_inference, NodeActivations};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("era_shape_view");
    for (nd, np, ns) in [(2, 4, 4), (3, 6, 6), (4, 8, 8)] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_graph(&mut rng, nd, np, ns, 2);
        let acts = NodeActivations::new((0..g.len()).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap();
        let view = g.view(Scope::EraShape);
        let n = view.len();
        group.bench_with_input(BenchmarkId::new("factorized", n), &view, |b, v| {
            b.iter(|| factorized_inference(v, &acts).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("enumeration", n), &view, |b, v| {
            b.iter(|| oracle_inference(v, &acts).unwrap())
        });
    }
    group.finish();

    // 11 periods, 29 shapes, 96 characteristics: only the closed form is tractable.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_graph(&mut rng, 4, 11, 29, 96);
    let acts = NodeActivations::new((0..g.len()).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap();
    let view = g.view(Scope::EraCharacteristic);
    c.bench_function("era_characteristic_view/factorized/107", |b| {
        b.iter(|| factorized_inference(&view, &acts).unwrap())
    });
}

criterion_group!(benches, inference);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use exchanger::baseline::self_attention_baseline;
use exchanger::exchanger::exchanger_forward;
use exchanger::{ExchangerConfig, Graph};
use exchanger_bench::fixture;

fn forward(c: &mut Criterion) {
    let cfg = ExchangerConfig::default();
    let mut group = c.benchmark_group("forward");
    for t in [64, 256, 1024] {
        let f = fixture(&cfg, t, 0);
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::new("exchanger", t), &f, |b, f| {
            b.iter(|| {
                let mut g = Graph::new();
                let (v, p) = (g.constant(f.v.clone()), g.constant(f.p.clone()));
                exchanger_forward(&mut g, &f.store, &f.exchanger, v, p, &f.mask).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("self_attention", t), &f, |b, f| {
            b.iter(|| {
                let mut g = Graph::new();
                let (v, p) = (g.constant(f.v.clone()), g.constant(f.p.clone()));
                self_attention_baseline(&mut g, &f.store, &f.attention, v, p, &f.mask).unwrap()
            })
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let cfg = ExchangerConfig { d: 32, ..Default::default() };
    let f = fixture(&cfg, 40, 1);
    c.bench_function("exchanger_backward_t40_d32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (v, p) = (g.constant(f.v.clone()), g.constant(f.p.clone()));
            let out = exchanger_forward(&mut g, &f.store, &f.exchanger, v, p, &f.mask).unwrap();
            let loss = g.mean(out);
            g.backward(loss).unwrap();
            g.param_grads(&f.store)
        })
    });
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);

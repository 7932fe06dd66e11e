use cilda_bench::{random_matrix, student_and_batch, unit_rows};
use cilda_core::losses::crd_loss;
use cilda_core::Graph;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let (a, b) = (random_matrix(n, n, 1), random_matrix(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                let y = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap();
                black_box(y.value())
            })
        });
    }
    group.finish();
}

fn encoder_forward(c: &mut Criterion) {
    let (model, batch) = student_and_batch(32);
    c.bench_function("student_forward_b32", |bench| bench.iter(|| black_box(model.predict_logits(&batch).unwrap())));
    c.bench_function("student_forward_backward_b32", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let bound = model.bind(&g, true);
            let (logits, _) = bound.classify(&batch, None, None).unwrap();
            g.backward(logits.sum()).unwrap();
            black_box(bound.grads(&g))
        })
    });
}

fn contrastive(c: &mut Criterion) {
    let (t, s) = (unit_rows(32, 128, 3), unit_rows(32, 128, 4));
    c.bench_function("crd_loss_k32_u128", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let loss = crd_loss(g.param(t.clone()), g.param(s.clone()), 2.0).unwrap();
            g.backward(loss).unwrap();
            black_box(loss.item().unwrap())
        })
    });
}

criterion_group!(benches, matmul, encoder_forward, contrastive);
criterion_main!(benches);

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use signprop_bench::{filled, mnist_mlp};
use signprop_core::network::softmax_cross_entropy;
use signprop_core::tensor::{conv2d, conv2d_backward, matmul, matmul_nt, matmul_tn};
use signprop_core::{ConvGeometry, Optimizer, OptimizerConfig, RuleKind};

fn matmuls(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let x = filled(&[64, 784]);
    let w = filled(&[784, 256]);
    let d = filled(&[64, 256]);
    g.bench_function("forward 64x784x256", |b| b.iter(|| matmul(black_box(&x), black_box(&w)).unwrap()));
    g.bench_function("input grad 64x256x784", |b| b.iter(|| matmul_nt(black_box(&d), black_box(&w)).unwrap()));
    g.bench_function("weight grad 784x64x256", |b| b.iter(|| matmul_tn(black_box(&x), black_box(&d)).unwrap()));
    g.finish();
}

fn convolutions(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    let geom = ConvGeometry::new(1, 1).unwrap();
    let x = filled(&[16, 16, 14, 14]);
    let k = filled(&[32, 16, 3, 3]);
    let y = conv2d(&x, &k, geom).unwrap();
    g.bench_function("forward 16x16x14x14 * 32x16x3x3", |b| {
        b.iter(|| conv2d(black_box(&x), black_box(&k), geom).unwrap())
    });
    g.bench_function("backward", |b| {
        b.iter(|| conv2d_backward(black_box(&x), black_box(&k), black_box(&y), black_box(&k), geom).unwrap())
    });
    g.finish();
}

fn train_steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("train step 784-256-256-10, batch 64");
    g.sample_size(20);
    for rule in RuleKind::ALL {
        let (mut net, x, labels) = mnist_mlp(rule);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.05, 0.9, 1e-4)).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(rule.name()), &rule, |b, _| {
            b.iter(|| {
                let logits = net.forward(&x).unwrap();
                let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
                net.backward(&grad).unwrap();
                opt.step(net.params_mut()).unwrap();
                loss
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmuls, convolutions, train_steps);
criterion_main!(benches);

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use qsam_bench::{random_qtensor, random_quaternions, random_tensor, textured_gray};
use qsam_core::layers::{same_conv, ConvLayer, Init, QConv2dParams};
use qsam_core::{hamilton, qconv2d, ssim, Algebra, Graph, NetConfig, ParamStore, QsamNet, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_hamilton(c: &mut Criterion) {
    let qs = random_quaternions(1024, 1);
    c.bench_function("hamilton/1024 products", |b| {
        b.iter(|| {
            let mut acc = qs[0];
            for q in &qs[1..] {
                acc = hamilton(acc, *q);
            }
            black_box(acc)
        })
    });
}

fn bench_qconv_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("qconv2d forward");
    for channels in [4, 16] {
        let x = random_qtensor::<f32>(1, channels, 64, 0);
        let shape = Shape::new(channels, channels, 3, 3);
        let p = QConv2dParams {
            banks: [0, 1, 2, 3].map(|s| random_tensor(shape, 10 + s)),
            bias: vec![0.0; 4 * channels],
            stride: 1,
            padding: 1,
        };
        group.bench_with_input(BenchmarkId::from_parameter(channels), &channels, |b, _| {
            b.iter(|| qconv2d(black_box(&x), &p).unwrap())
        });
    }
    group.finish();
}

/// Forward and backward through one 3×3 layer, quaternion against its real twin.
fn bench_conv_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv forward+backward 16ch 64px");
    for algebra in [Algebra::Quaternion, Algebra::Real] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let layer = ConvLayer::new(&mut store, "c", algebra, 16, 16, same_conv(3), &mut Init::Uniform(&mut rng)).unwrap();
        let x = random_tensor::<f32>(Shape::new(1, 64, 64, 64), 3);
        group.bench_function(format!("{algebra:?}"), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = layer.forward(&mut g, &store, xv).unwrap();
                let loss = g.sum(y);
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_network(c: &mut Criterion) {
    let cfg = NetConfig {
        widths: vec![4, 8, 16],
        blocks: 1,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f32>::new();
    let net = QsamNet::new(&mut store, &cfg, &mut Init::Uniform(&mut rng)).unwrap();
    let x = random_qtensor::<f32>(1, 1, 64, 5);
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function("restore 64px widths 4,8,16", |b| b.iter(|| net.restore(&store, black_box(&x)).unwrap()));
    group.finish();
}

fn bench_ssim(c: &mut Criterion) {
    let (x, y) = (textured_gray(256, 6), textured_gray(256, 7));
    c.bench_function("ssim/256x256", |b| b.iter(|| ssim(black_box(&x), black_box(&y)).unwrap()));
}

criterion_group!(benches, bench_hamilton, bench_qconv_forward, bench_conv_backward, bench_network, bench_ssim);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use nic_core::entropy::{decode_symbols, encode_symbols, CdfTable};
use nic_core::image::synthetic_image;
use nic_core::overfit::{encode_overfit, OverfitConfig};
use nic_core::pipeline::{decode_image, encode_baseline};
use nic_core::train::{random_batch, TrainConfig, Trainer};
use nic_core::{ArchConfig, ModelParams, RdInterp, RdPoint};

fn range_coder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pmf: Vec<f64> = (0..64).map(|i| (-(i as f64 - 32.0).powi(2) / 50.0).exp()).collect();
    let table = CdfTable::build(&pmf, -32).unwrap();
    let symbols: Vec<i32> = (0..100_000).map(|_| rng.gen_range(-8..8)).collect();
    let tables = vec![&table; symbols.len()];
    let bytes = encode_symbols(&symbols, &tables).unwrap();
    let mut g = c.benchmark_group("range_coder");
    g.throughput(Throughput::Elements(symbols.len() as u64));
    g.bench_function("encode_100k", |b| b.iter(|| encode_symbols(black_box(&symbols), &tables).unwrap()));
    g.bench_function("decode_100k", |b| b.iter(|| decode_symbols(black_box(&bytes), &tables, symbols.len()).unwrap()));
    g.finish();
}

fn codec(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(&ArchConfig::default(), 0).unwrap();
    let img = synthetic_image(64, 64, &mut rng);
    let base = encode_baseline(&params, &img, 1).unwrap();
    let mut g = c.benchmark_group("codec_64x64");
    g.sample_size(20);
    g.bench_function("encode_baseline", |b| b.iter(|| encode_baseline(&params, black_box(&img), 1).unwrap()));
    g.bench_function("decode", |b| b.iter(|| decode_image(&params, black_box(&base.bytes)).unwrap()));
    let bits = base.code.payload_bits() as f64;
    let r = RdInterp::new(RdPoint::new(bits, base.psnr), RdPoint::new(2.0 * bits, base.psnr + 3.0)).unwrap();
    for layers in 1..=3 {
        let cfg = OverfitConfig {
            layers,
            iterations: 10,
            ..OverfitConfig::default()
        };
        g.bench_function(format!("overfit_10_iters_l{layers}"), |b| {
            b.iter(|| encode_overfit(&params, &base, r, &cfg).unwrap())
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<_> = (0..8).map(|_| synthetic_image(96, 96, &mut rng)).collect();
    let cfg = TrainConfig {
        crop_size: 32,
        ..TrainConfig::default()
    };
    let batch = random_batch(&data, &cfg, &mut rng).unwrap();
    let mut trainer = Trainer::new(ModelParams::init(&ArchConfig::default(), 0).unwrap(), 1e-4, 0);
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("train_step_8x32x32", |b| b.iter(|| trainer.train_step(black_box(&batch), 0.008).unwrap()));
    g.finish();
}

criterion_group!(benches, range_coder, codec, training);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use omlc_core::codec::{pad_to_multiple, quantize_round, BaseModel, CodecDims, EntropyModel, DOWNSAMPLE};
use omlc_core::data::texture_corpus;
use omlc_core::entropy_coding::{build_cdf_table, decode_latent, encode_latent};
use omlc_core::metrics::msssim;
use omlc_core::modulation::ModulatorParams;
use omlc_core::nn::Conv2d;
use omlc_core::oml::oml_adapt_patch;
use omlc_core::{OmlConfig, QuantizedLatent, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = Conv2d::new(64, 64, 3, 1, 1, &mut rng);
    let x = Tensor3::from_vec(64, 32, 32, (0..64 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    c.bench_function("conv3x3 64->64 32x32", |b| b.iter(|| layer.forward(black_box(&x)).unwrap()));
}

fn range_coder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let em = EntropyModel::from_scales(&(0..32).map(|i| 0.5 + i as f64 * 0.3).collect::<Vec<_>>()).unwrap();
    let table = build_cdf_table(&em, -127, 127).unwrap();
    let values: Vec<i32> = (0..32 * 32 * 32).map(|_| (rng.random_range(-1.0f64..1.0) * 6.0).round() as i32).collect();
    let z = QuantizedLatent::from_vec(32, 32, 32, values).unwrap();
    let payload = encode_latent(&z, &table).unwrap();
    c.bench_function("range encode 32x32x32", |b| b.iter(|| encode_latent(black_box(&z), &table).unwrap()));
    c.bench_function("range decode 32x32x32", |b| {
        b.iter(|| decode_latent(black_box(&payload), &table, (32, 32, 32)).unwrap())
    });
}

fn ms_ssim(c: &mut Criterion) {
    let imgs = texture_corpus(2, 256, 256, 3);
    c.bench_function("ms-ssim 256x256", |b| b.iter(|| msssim(black_box(&imgs[0]), &imgs[1]).unwrap()));
}

fn oml(c: &mut Criterion) {
    let dims = CodecDims::default();
    let model = BaseModel::init(dims, 4);
    let mut psi = ModulatorParams::new(&dims.modulated_channels(), dims.modulator_hidden, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for l in &mut psi.layers {
        l.w2.iter_mut().for_each(|w| *w = rng.random_range(-0.2..0.2));
    }
    let x = texture_corpus(1, 64, 64, 7).remove(0);
    let (padded, _) = pad_to_multiple(&x, DOWNSAMPLE);
    let z = quantize_round(&model.encoder.encode_latent(&padded).unwrap());
    let cfg = OmlConfig::default();
    let mut group = c.benchmark_group("oml");
    group.sample_size(10);
    group.bench_function("5 iterations, 64x64 patch", |b| {
        b.iter(|| oml_adapt_patch(black_box(&x), &z, &model.decoder, &psi, 0.0035, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, range_coder, ms_ssim, oml);
criterion_main!(benches);

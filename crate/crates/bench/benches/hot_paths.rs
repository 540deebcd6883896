use criterion::{black_box, criterion_group, criterion_main, Criterion};
use imgprep_core::codec::{Codec, JpegCodec};
use imgprep_core::filters::{NlmDenoise, PreprocOperator};
use imgprep_core::metrics::{ms_ssim, proxy_nr_score, ProxyWeights};
use imgprep_core::synth::{add_gaussian_noise, photo_like};
use imgprep_core::unet::{Tensor, UNet, UNetConfig};

fn codec(c: &mut Criterion) {
    let img = photo_like(256, 192, 1);
    let stream = JpegCodec.encode(&img, 75).unwrap();
    c.bench_function("jpeg_encode_256x192_q75", |b| b.iter(|| JpegCodec.encode(black_box(&img), 75).unwrap()));
    c.bench_function("jpeg_decode_256x192_q75", |b| b.iter(|| JpegCodec.decode(black_box(&stream)).unwrap()));
}

fn filters(c: &mut Criterion) {
    let noisy = add_gaussian_noise(&photo_like(128, 96, 2), 10.0, 3);
    let nlm = NlmDenoise::default();
    c.bench_function("nlm_128x96", |b| b.iter(|| nlm.apply(black_box(&noisy)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let a = photo_like(192, 192, 4);
    let b2 = add_gaussian_noise(&a, 8.0, 5);
    let w = ProxyWeights::default();
    c.bench_function("proxy_nr_192", |b| b.iter(|| proxy_nr_score(black_box(&a), &w).unwrap()));
    c.bench_function("ms_ssim_192", |b| b.iter(|| ms_ssim(black_box(&a), &b2).unwrap()));
}

fn network(c: &mut Criterion) {
    let net = UNet::new(UNetConfig::with_base(8), 0).unwrap();
    let x = Tensor::from_image(&photo_like(64, 64, 6));
    let y = Tensor::from_image(&photo_like(64, 64, 7));
    c.bench_function("unet_b8_forward_64", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    c.bench_function("unet_b8_backward_64", |b| b.iter(|| net.backward(black_box(&x), &y).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = codec, filters, metrics, network
}
criterion_main!(benches);

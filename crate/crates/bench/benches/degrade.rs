use criterion::{criterion_group, criterion_main, Criterion};
use omnilv_core::degrade::ops::{canny, compress_dct, gaussian_blur, motion_blur, ringing};
use omnilv_core::degrade::gen_clean;
use omnilv_core::metrics::{psnr, ssim};

fn degradations(c: &mut Criterion) {
    let img = gen_clean(7, 32);
    c.bench_function("gen_clean 32", |b| b.iter(|| gen_clean(7, 32)));
    c.bench_function("gaussian_blur sigma 2", |b| b.iter(|| gaussian_blur(&img, 2.0)));
    c.bench_function("motion_blur len 9", |b| b.iter(|| motion_blur(&img, 9.0, 30.0)));
    c.bench_function("compress_dct q 30", |b| b.iter(|| compress_dct(&img, 30.0)));
    c.bench_function("ringing cutoff 0.3", |b| b.iter(|| ringing(&img, 0.3)));
    c.bench_function("canny", |b| b.iter(|| canny(&img, 0.08, 0.25)));
}

fn metrics(c: &mut Criterion) {
    let a = gen_clean(1, 32);
    let b = gaussian_blur(&a, 1.0);
    c.bench_function("psnr 32x32", |bench| bench.iter(|| psnr(&a, &b).unwrap()));
    c.bench_function("ssim 32x32", |bench| bench.iter(|| ssim(&a, &b).unwrap()));
}

criterion_group!(benches, degradations, metrics);
criterion_main!(benches);

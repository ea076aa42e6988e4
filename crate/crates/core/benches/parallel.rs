//! Rayon vs sequential comparison across the three hot paths: tensor
//! kernels, per-user scoring, and per-user constrained generation.
//!
//! Run with `cargo bench -p mobgpt-core`. Requires the default `parallel`
//! feature; both variants always produce bit-identical results, so this
//! suite is purely about throughput.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::prelude::*;

use mobgpt_core::data::{build_histories, GridCell};
use mobgpt_core::generate::{predict_users, GenConfig};
use mobgpt_core::metrics::dtw;
use mobgpt_core::model::{init_model, ModelConfig};
use mobgpt_core::synth::{generate_synthetic, SynthConfig};
use mobgpt_core::tensor::kernels::{
    matmul_at_par, matmul_at_seq, matmul_bt_par, matmul_bt_seq, matmul_par, matmul_seq,
};

fn bench_kernels(c: &mut Criterion) {
    // training-step shape: [batch*seq, d] x [d, 3d]
    let (m, k, n) = (2400usize, 128, 384);
    let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.001).sin()).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.002).cos()).collect();
    let bt: Vec<f32> = (0..n * k).map(|i| (i as f32 * 0.003).sin()).collect();
    // gradient shape: a^T (m x k) . g (m x n)
    let g: Vec<f32> = (0..m * n).map(|i| (i as f32 * 0.0007).cos()).collect();

    let mut group = c.benchmark_group("kernels_2400x128x384");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("mm", "seq"), |bench| {
        let mut out = vec![0.0f32; m * n];
        bench.iter(|| {
            out.iter_mut().for_each(|v| *v = 0.0);
            matmul_seq(&a, &b, &mut out, m, k, n);
        });
    });
    group.bench_function(BenchmarkId::new("mm", "par"), |bench| {
        let mut out = vec![0.0f32; m * n];
        bench.iter(|| {
            out.iter_mut().for_each(|v| *v = 0.0);
            matmul_par(&a, &b, &mut out, m, k, n);
        });
    });
    group.bench_function(BenchmarkId::new("mm_bt", "seq"), |bench| {
        let mut out = vec![0.0f32; m * n];
        bench.iter(|| {
            out.iter_mut().for_each(|v| *v = 0.0);
            matmul_bt_seq(&a, &bt, &mut out, m, k, n);
        });
    });
    group.bench_function(BenchmarkId::new("mm_bt", "par"), |bench| {
        let mut out = vec![0.0f32; m * n];
        bench.iter(|| {
            out.iter_mut().for_each(|v| *v = 0.0);
            matmul_bt_par(&a, &bt, &mut out, m, k, n);
        });
    });
    group.bench_function(BenchmarkId::new("mm_at", "seq"), |bench| {
        let mut out = vec![0.0f32; k * n];
        bench.iter(|| {
            out.iter_mut().for_each(|v| *v = 0.0);
            matmul_at_seq(&a, &g, &mut out, m, k, n);
        });
    });
    group.bench_function(BenchmarkId::new("mm_at", "par"), |bench| {
        let mut out = vec![0.0f32; k * n];
        bench.iter(|| {
            out.iter_mut().for_each(|v| *v = 0.0);
            matmul_at_par(&a, &g, &mut out, m, k, n);
        });
    });
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    // 40 users, ~300-point horizon trajectories
    let mut users: Vec<(Vec<GridCell>, Vec<GridCell>)> = Vec::new();
    for u in 0..40u32 {
        let mk = |off: u32| -> Vec<GridCell> {
            (0..300u32)
                .map(|i| GridCell { x: (u * 7 + i + off) % 500, y: (u * 13 + i * 2) % 500 })
                .collect()
        };
        users.push((mk(0), mk(3)));
    }
    let mut group = c.benchmark_group("dtw_40_users_300pts");
    group.sample_size(10);
    group.bench_function("seq", |bench| {
        bench.iter(|| users.iter().map(|(a, b)| dtw(a, b).unwrap()).sum::<f64>());
    });
    group.bench_function("par", |bench| {
        bench.iter(|| users.par_iter().map(|(a, b)| dtw(a, b).unwrap()).sum::<f64>());
    });
    group.finish();
}

fn bench_generation(c: &mut Criterion) {
    let synth = SynthConfig { n_users: 6, seed: 5, ..SynthConfig::default() };
    let records = generate_synthetic(&synth).unwrap();
    let histories = build_histories(&records, synth.dow_offset);
    let uids: Vec<u32> = histories.keys().copied().collect();
    let model_cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let params = init_model::<f32>(&model_cfg).unwrap();
    let gen = GenConfig { seed: 1, ..GenConfig::default() };

    let mut group = c.benchmark_group("predict_6_users_2_days");
    group.sample_size(10);
    group.bench_function("par_pool", |bench| {
        bench.iter(|| predict_users(&params, &histories, &uids, 60..62, 60, &gen).unwrap());
    });
    group.bench_function("single_thread_pool", |bench| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        bench.iter(|| {
            pool.install(|| predict_users(&params, &histories, &uids, 60..62, 60, &gen).unwrap())
        });
    });
    group.finish();

    // identical output regardless of pool size, checked once per bench run
    let a = predict_users(&params, &histories, &uids, 60..62, 60, &gen).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| predict_users(&params, &histories, &uids, 60..62, 60, &gen).unwrap());
    assert_eq!(a.pings, b.pings);
}

criterion_group!(benches, bench_kernels, bench_scoring, bench_generation);
criterion_main!(benches);

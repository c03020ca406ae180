use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mipae_core::exec;
use mipae_core::miest::{knn_mi_discrete_continuous, Points};
use mipae_core::nets::{frames_tensor, NetConfig, Networks};
use mipae_core::synthvid::{Dataset, DatasetConfig};
use mipae_tensor::{Mode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const MODES: [(&str, bool); 2] = [("parallel", true), ("serial", false)];

fn knn_mi(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 5000;
    let pts: Vec<f64> = (0..n * 5).map(|_| rng.sample(StandardNormal)).collect();
    let labels: Vec<u32> = (0..n).map(|i| (pts[i * 5] > 0.0) as u32 + 2 * (pts[i * 5 + 1] > 0.0) as u32).collect();
    let pts = Points::new(5, pts).unwrap();
    let mut g = c.benchmark_group("knn_mi_5000x5");
    for (name, par) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(par);
            b.iter(|| knn_mi_discrete_continuous(&labels, &pts, 3).unwrap())
        });
    }
    exec::set_parallel(true);
    g.finish();
}

fn generate(c: &mut Criterion) {
    let cfg = DatasetConfig { num_sequences: 64, ..DatasetConfig::default() };
    let mut g = c.benchmark_group("generate_64_clips_64px");
    g.sample_size(10);
    for (name, par) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(par);
            b.iter(|| Dataset::generate(&cfg).unwrap())
        });
    }
    exec::set_parallel(true);
    g.finish();
}

fn conv_batch(c: &mut Criterion) {
    let cfg = NetConfig { base_channels: 16, ..NetConfig::default() };
    let nets = Networks::<f32>::new(&cfg, 0).unwrap();
    let data = Dataset::generate(&DatasetConfig { num_sequences: 32, ..DatasetConfig::default() }).unwrap();
    let frames: Vec<&[u8]> = data.sequences.iter().map(|s| s.frame_u8(0)).collect();
    let x = frames_tensor::<f32>(&frames, 64, 1);
    let mut g = c.benchmark_group("reconstruct_train_step_b32");
    g.sample_size(10);
    for (name, par) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(par);
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let y = nets.reconstruct(&mut tape, xv, Mode::TRAIN);
                let loss = tape.mean(y);
                tape.backward(loss)
            })
        });
    }
    exec::set_parallel(true);
    g.finish();
}

criterion_group!(benches, knn_mi, generate, conv_batch);
criterion_main!(benches);

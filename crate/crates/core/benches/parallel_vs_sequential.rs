//! Single-thread pool against the default pool on the data-parallel hot
//! paths. Build with `--no-default-features` to time the sequential fallback
//! (both rows then run the plain iterator path).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dcl_core::bounds::empirical_gap;
use dcl_core::encoder::{EncoderConfig, EncoderParams};
use dcl_core::eta::{EtaConfig, EtaProvider};
use dcl_core::experiments::{bound_case, BoundSweepConfig, CifarAnalogConfig};
use dcl_core::objectives::asymptotic_loss_mc;
use dcl_core::rng::SeedStream;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let n = default.current_num_threads();
    vec![
        ("single".into(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        (format!("default-{n}"), default),
    ]
}

fn gap(c: &mut Criterion) {
    let cfg = BoundSweepConfig::default();
    let case = bound_case(&cfg, 3).unwrap();
    let eta = EtaProvider::from_config(&EtaConfig::TrueOracle, case.spec.class_dist(), None).unwrap();
    let mut group = c.benchmark_group("empirical_gap");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            pool.install(|| {
                b.iter(|| empirical_gap(&case.spec, &case.params, &eta, 64, 4, 2000, SeedStream::new(1)).unwrap())
            })
        });
    }
    group.finish();
}

fn asymptotic_mc(c: &mut Criterion) {
    let cfg = CifarAnalogConfig::default();
    let spec = cfg.base_spec().unwrap();
    let params = EncoderParams::init(&EncoderConfig::new(cfg.dim, 64, 32, 2f64.sqrt()), SeedStream::new(2)).unwrap();
    let mut group = c.benchmark_group("asymptotic_loss_mc");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            pool.install(|| {
                b.iter(|| black_box(asymptotic_loss_mc(&spec, &params, 8.0, 2000, 16, SeedStream::new(3)).unwrap()))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, gap, asymptotic_mc);
criterion_main!(benches);

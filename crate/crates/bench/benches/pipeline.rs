use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use multifamm::coarsen::{coarsen, Polyline, StopRule};
use multifamm::covsmooth::smooth_covariance_direct;
use multifamm::mean::{center, fit_univariate_means};
use multifamm::pipeline::step_one;
use multifamm::simeval::{preset, simulate};

fn trajectory(n: usize) -> Polyline {
    let t: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let y = t
        .iter()
        .map(|&s| [(6.0 * s).sin() + 0.05 * (40.0 * s).cos(), (3.0 * s).cos() * (1.0 + s)])
        .collect();
    Polyline::new(t, y).unwrap()
}

fn bench_coarsen(c: &mut Criterion) {
    let pl = trajectory(2000);
    c.bench_function("coarsen/2000-points/relative", |b| {
        b.iter(|| coarsen(&pl, StopRule::Relative(0.003)).unwrap())
    });
    c.bench_function("coarsen/2000-points/full", |b| {
        b.iter(|| coarsen(&pl, StopRule::TargetSize(2)).unwrap())
    });
}

fn bench_fit(c: &mut Criterion) {
    let mut setting = preset("setting1-desk").unwrap();
    setting.design.subjects = 5;
    setting.design.reps = 1;
    let (ds, _) = simulate(&setting, 0).unwrap();
    let opts = setting.true_model_options();

    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("mean", |b| {
        b.iter(|| fit_univariate_means(&ds, &opts.formula, &opts.mean_smoothing).unwrap())
    });
    let mean = fit_univariate_means(&ds, &opts.formula, &opts.mean_smoothing).unwrap();
    group.bench_function("covariance", |b| {
        b.iter_batched(
            || center(&ds, &mean).unwrap(),
            |centered| smooth_covariance_direct(&centered, &opts.covariance).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("step-one", |b| b.iter(|| step_one(&ds, &opts).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_coarsen, bench_fit);
criterion_main!(benches);

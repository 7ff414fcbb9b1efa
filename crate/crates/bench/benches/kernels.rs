use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use vlp_core::channel::{first_bounce_emitters, Aperture};
use vlp_core::geometry::partition_surfaces;
use vlp_core::positioning::{
    linear_least_squares, nonlinear_least_squares, Bounds, RangeMeasurement,
};
use vlp_core::{ChannelConfig, LuminaireField, RoomScenario};

fn scenario() -> RoomScenario {
    RoomScenario::grid16()
}

fn channel(c: &mut Criterion) {
    let s = scenario();
    let cfg = ChannelConfig::default();
    let patches = partition_surfaces(&s, cfg.patch_area).unwrap();
    let lum = *s.luminaire(6).unwrap();
    let aperture = Aperture::photodiode(&s.receiver);
    let rx = s.receiver_pose(0.5, 0.5);

    c.bench_function("first_bounce_emitters", |b| {
        b.iter(|| first_bounce_emitters(black_box(&lum), &patches))
    });

    let mut group = c.benchmark_group("field");
    group.sample_size(10);
    group.bench_function("build_k3", |b| {
        b.iter(|| LuminaireField::build_with_patches(&s, 6, &patches, &cfg, black_box(1)).unwrap())
    });
    let field = LuminaireField::build_with_patches(&s, 6, &patches, &cfg, 1).unwrap();
    group.bench_function("evaluate_one_receiver", |b| {
        b.iter(|| field.order_powers(black_box(&rx), &aperture))
    });
    group.finish();
}

fn ranges(truth: (f64, f64)) -> Vec<RangeMeasurement> {
    scenario()
        .luminaires
        .iter()
        .map(|l| RangeMeasurement {
            x: l.position.x,
            y: l.position.y,
            range: (truth.0 - l.position.x).hypot(truth.1 - l.position.y) * 1.05,
        })
        .collect()
}

fn solvers(c: &mut Criterion) {
    let meas = ranges((1.3, 6.2));
    let bounds = Bounds::footprint(&scenario());
    c.bench_function("linear_least_squares_16", |b| {
        b.iter(|| linear_least_squares(black_box(&meas)).unwrap())
    });
    c.bench_function("nonlinear_least_squares_16", |b| {
        b.iter_batched(
            || (4.0, 4.0),
            |init| nonlinear_least_squares(black_box(&meas), init, &bounds).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, channel, solvers);
criterion_main!(benches);

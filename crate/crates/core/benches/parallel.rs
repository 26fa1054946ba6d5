//! Parallel vs single-threaded execution of the data-parallel kernels.
//! Build with `--no-default-features` to bench the rayon-free fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng as _;

use rtn_core::eval::cindex_static;
use rtn_core::explain::{flat_players, shap_exact};
use rtn_core::par;
use rtn_core::rng::keyed;
use rtn_core::rsf::{grow_forest, ForestParams};
use rtn_core::survclassic::SurvData;
use rtn_core::{SurvivalCurve, TimeGrid};

fn forest_data(n: usize, p: usize) -> SurvData {
    let mut rng = keyed(1, 0, 0);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let time = x.iter().map(|r| 10.0 + 100.0 * r[0] * r[1] + rng.random_range(0.0..20.0)).collect();
    let event = (0..n).map(|_| rng.random::<f64>() < 0.8).collect();
    SurvData::new(x, time, event).expect("valid data")
}

fn curves(n: usize) -> (Vec<SurvivalCurve>, Vec<f64>) {
    let mut rng = keyed(2, 0, 0);
    let g = TimeGrid::new(0.0, 5.0, 300.0).expect("grid");
    let c = (0..n)
        .map(|_| {
            let pmf: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>()).collect();
            let s: f64 = pmf.iter().sum();
            SurvivalCurve::new(g.clone(), pmf.iter().map(|v| v / s).collect()).expect("curve")
        })
        .collect();
    (c, (0..n).map(|_| rng.random_range(1.0..300.0)).collect())
}

fn bench(c: &mut Criterion) {
    let data = forest_data(400, 12);
    let params = ForestParams { n_trees: 32, seed: 3, ..Default::default() };
    let mut g = c.benchmark_group("forest");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| grow_forest(black_box(&data), &params).expect("forest")));
    g.bench_function("sequential", |b| b.iter(|| par::sequential(|| grow_forest(black_box(&data), &params).expect("forest"))));
    g.finish();

    let model = |rows: &[Vec<f64>]| -> rtn_core::Result<Vec<Vec<f64>>> {
        Ok(rows.iter().map(|r| vec![r.iter().enumerate().map(|(i, v)| (v * (i + 1) as f64).sin()).sum()]).collect())
    };
    let mut rng = keyed(4, 0, 0);
    let bg: Vec<Vec<f64>> = (0..64).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let x = vec![0.5; 10];
    let names: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
    let players = flat_players(&names);
    let mut g = c.benchmark_group("shap_exact");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| shap_exact(&model, 0, black_box(&x), &bg, &players, &[0]).expect("shap")));
    g.bench_function("sequential", |b| {
        b.iter(|| par::sequential(|| shap_exact(&model, 0, black_box(&x), &bg, &players, &[0]).expect("shap")))
    });
    g.finish();

    let (cs, d) = curves(3000);
    let ev = vec![true; d.len()];
    let mut g = c.benchmark_group("cindex_static");
    g.sample_size(10);
    g.bench_function("parallel", |b| b.iter(|| cindex_static(black_box(&cs), &d, &ev).expect("cindex")));
    g.bench_function("sequential", |b| b.iter(|| par::sequential(|| cindex_static(black_box(&cs), &d, &ev).expect("cindex"))));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);

//! Sequential vs rayon execution on the two hot batch loops: per-step
//! Jacobians along a sampling path, and per-task rollouts of the race matrix.
//!
//! On a single-core machine both modes should time the same; the parallel
//! column only pulls ahead with more workers.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use facdiff::bench::{Bench, ModelKind, Roster, RunSpec};
use facdiff::certify::VehicleStack;
use facdiff::sampler::ddim_sample;
use facdiff::schedule::{build_cosine_schedule, plan_ddim};
use facdiff::score::{Condition, FactorSpace, GaussianTaskFamily, Observation, TableExpert};
use facdiff::sensitivity::jacobians_along;
use facdiff::vehicle::ChunkFrame;
use facdiff::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn jacobians(c: &mut Criterion) {
    let space = FactorSpace::with_cardinalities(&[3, 3]).unwrap();
    let expert = TableExpert::from_fn(space, |z| {
        (0..128)
            .map(|j| ((j as f64) * 0.05 + z[0] as f64 - 0.5 * z[1] as f64).sin())
            .collect()
    })
    .unwrap();
    let field = GaussianTaskFamily::full(expert, 0.1).unwrap();
    let schedule = build_cosine_schedule(100).unwrap();
    let plan = plan_ddim(&schedule, 20).unwrap();
    let o = Observation::default();
    let path = ddim_sample(&field, &plan, &o, &Condition::joint(&[1, 2]), 0, 0).unwrap();

    let mut g = c.benchmark_group("jacobians_along");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| jacobians_along(&field, &path, &o, exec).unwrap())
        });
    }
    g.finish();
}

fn race_matrix(c: &mut Criterion) {
    let frame = ChunkFrame {
        center: [0.0, 0.0, 2.0],
        scale: 10.0,
    };
    let bench = Bench::prepare(0, 100, frame, VehicleStack::default(), Exec::Parallel).unwrap();
    let roster = Roster::closed_form(&bench.expert, &bench.matrix, false).unwrap();
    let tasks: Vec<Vec<usize>> = bench.matrix.feasible_tasks().into_iter().take(8).collect();
    let spec = RunSpec {
        models: vec![ModelKind::FactoredComposed],
        ddim_steps: 20,
        seeds: vec![0],
        tasks: Some(tasks),
    };

    let mut g = c.benchmark_group("run_matrix");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| bench.run_matrix(&roster, &spec, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, jacobians, race_matrix);
criterion_main!(benches);

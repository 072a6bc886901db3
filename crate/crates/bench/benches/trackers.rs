use std::hint::black_box;

use anarchy_track::coordinated::jc_kf_step;
use anarchy_track::heuristics::{ca_step, ls_step, CaObjective, EstimateMode};
use anarchy_track::uncoordinated::{mht_step, optimal_step, pdaf_step, PatternSet};
use anarchy_track::{AccessPattern, HypothesisSet, MixtureCovariance};
use anarchy_track_bench::fixture;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const SLOTS: usize = 20;

fn coordinated(c: &mut Criterion) {
    let mut group = c.benchmark_group("jc");
    for m in [16, 256] {
        let f = fixture(6, m, SLOTS);
        let q = AccessPattern::new(vec![true, false, true, true, false, false]);
        group.bench_with_input(BenchmarkId::from_parameter(m), &f, |b, f| {
            b.iter(|| {
                let mut belief = f.initial.clone();
                for y in &f.measurements {
                    belief = jc_kf_step(&belief, y, &q, &f.sim.dynamics).unwrap();
                }
                black_box(belief)
            })
        });
    }
    group.finish();
}

fn pdaf(c: &mut Criterion) {
    let mut group = c.benchmark_group("pdaf");
    group.sample_size(10);
    for m in [16, 256] {
        let f = fixture(6, m, SLOTS);
        let patterns = PatternSet::all(&f.sim.config.lambdas).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(m), &f, |b, f| {
            b.iter(|| {
                let mut belief = f.initial.clone();
                for y in &f.measurements {
                    belief = pdaf_step(&belief, y, &f.sim.dynamics, &patterns, MixtureCovariance::Auto).unwrap();
                }
                black_box(belief)
            })
        });
    }
    group.finish();
}

fn mht(c: &mut Criterion) {
    let f = fixture(6, 16, SLOTS);
    let patterns = PatternSet::all(&f.sim.config.lambdas).unwrap();
    c.bench_function("mht4/16", |b| {
        b.iter(|| {
            let mut hyps = HypothesisSet::new(f.initial.clone(), 4);
            for y in &f.measurements {
                hyps = mht_step(&hyps, y, &f.sim.dynamics, &patterns).unwrap().0;
            }
            black_box(hyps)
        })
    });
}

fn optimal(c: &mut Criterion) {
    let f = fixture(2, 4, 5);
    let patterns = PatternSet::all(&f.sim.config.lambdas).unwrap();
    c.bench_function("optimal/k2_m4_t5", |b| {
        b.iter(|| {
            let mut hyps = HypothesisSet::new(f.initial.clone(), 4096);
            for y in &f.measurements {
                hyps = optimal_step(&hyps, y, &f.sim.dynamics, &patterns, MixtureCovariance::Exact)
                    .unwrap()
                    .0;
            }
            black_box(hyps)
        })
    });
}

fn heuristics(c: &mut Criterion) {
    let f = fixture(6, 16, SLOTS);
    let lambdas = f.sim.config.lambdas.clone();
    c.bench_function("soft_ls/16", |b| {
        b.iter(|| {
            let mut belief = f.initial.clone();
            for y in &f.measurements {
                belief = ls_step(&belief, y, &f.sim.dynamics, EstimateMode::Soft).unwrap().0;
            }
            black_box(belief)
        })
    });
    c.bench_function("ca_ml/16", |b| {
        b.iter(|| {
            let mut belief = f.initial.clone();
            for y in &f.measurements {
                belief = ca_step(&belief, y, &f.sim.dynamics, &lambdas, CaObjective::Ml).unwrap().0;
            }
            black_box(belief)
        })
    });
}

criterion_group!(benches, coordinated, pdaf, mht, optimal, heuristics);
criterion_main!(benches);

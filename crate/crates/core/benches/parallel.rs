use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use stagdid::aggregate::{bootstrap_inference, EstimatorSpec};
use stagdid::csdid::{gtatt_table, Flavor};
use stagdid::panel::build_cohort_design;
use stagdid::simlab::{gen_panel, twfe_bias_monte_carlo, CohortSize, EffectSpec, ScenarioSpec};
use stagdid::Execution;

const MODES: [(&str, Execution); 2] = [
    ("serial", Execution::Serial),
    ("parallel", Execution::Parallel),
];

fn small_spec(seed: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::reference(seed);
    spec.cohorts = vec![CohortSize { g: 2, n: 60 }, CohortSize { g: 3, n: 90 }];
    spec.n_never = 250;
    spec
}

fn cells(c: &mut Criterion) {
    let spec = ScenarioSpec::reference(1);
    let (panel, _) = gen_panel(&spec).unwrap();
    let design = build_cohort_design(&panel).unwrap();
    let covariates = spec.covariate_names();
    let mut group = c.benchmark_group("gtatt_table");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| gtatt_table(&panel, &design, &covariates, Flavor::Dr, exec).unwrap())
        });
    }
    group.finish();
}

fn bootstrap(c: &mut Criterion) {
    let spec = small_spec(2);
    let (panel, _) = gen_panel(&spec).unwrap();
    let design = build_cohort_design(&panel).unwrap();
    let estimator = EstimatorSpec {
        covariates: spec.covariate_names(),
        flavor: Flavor::Dr,
    };
    let mut group = c.benchmark_group("bootstrap_b100");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| bootstrap_inference(&panel, &design, &estimator, 100, 7, exec).unwrap())
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let mut spec = small_spec(3);
    spec.effect = EffectSpec::EventTime {
        intercept: 1.0,
        slope: 1.0,
    };
    let mut group = c.benchmark_group("twfe_bias_mc50");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| twfe_bias_monte_carlo(&spec, 50, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, cells, bootstrap, monte_carlo);
criterion_main!(benches);

use stagdid::aggregate::{aggregate_all, bootstrap_inference, EstimatorSpec};
use stagdid::csdid::{gtatt_table, Flavor};
use stagdid::panel::build_cohort_design;
use stagdid::simlab::{
    gen_panel, twfe_bias_monte_carlo, Assignment, CohortSize, CovariateSpec, EffectSpec,
    ScenarioSpec,
};
use stagdid::Execution;

fn dynamic(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        seed,
        n_periods: 4,
        cohorts: vec![CohortSize { g: 2, n: 60 }, CohortSize { g: 3, n: 80 }],
        n_never: 120,
        effect: EffectSpec::EventTime {
            intercept: 1.0,
            slope: 1.0,
        },
        covariates: vec![CovariateSpec {
            name: "x".into(),
            mean: 0.0,
            sd: 1.0,
            level: 1.0,
            trend: 0.3,
            selection: 0.6,
        }],
        trend_quadratic: 0.0,
        selection_quadratic: 0.0,
        assignment: Assignment::Logistic,
        unit_effect_sd: 2.0,
        period_effects: vec![0.0, 0.4, 0.9, 1.1],
        noise_sd: 1.0,
        violation_slope: 0.0,
        max_attempts: 20,
    }
}

#[test]
fn twfe_is_biased_and_group_time_is_not() {
    let summary = twfe_bias_monte_carlo(&dynamic(100), 200, Execution::Parallel).unwrap();
    assert!(summary.cs_bias.z(0.0) < 3.0, "{summary:?}");
    assert!(summary.twfe_bias.z(0.0) > 5.0, "{summary:?}");
    assert!(summary.twfe_bias.mean.abs() > 5.0 * summary.cs_bias.mean.abs());
}

#[test]
fn bootstrap_is_identical_across_execution_modes() {
    let spec = dynamic(7);
    let (panel, _) = gen_panel(&spec).unwrap();
    let design = build_cohort_design(&panel).unwrap();
    let estimator = EstimatorSpec {
        covariates: spec.covariate_names(),
        flavor: Flavor::Dr,
    };
    let run = |exec| bootstrap_inference(&panel, &design, &estimator, 150, 42, exec).unwrap();
    let (serial, parallel) = (run(Execution::Serial), run(Execution::Parallel));
    assert_eq!(serial.cell_draws, parallel.cell_draws);
    assert_eq!(serial.aggregate_draws, parallel.aggregate_draws);

    let mut cells = gtatt_table(
        &panel,
        &design,
        &estimator.covariates,
        Flavor::Dr,
        Execution::Serial,
    )
    .unwrap();
    let mut aggregates = aggregate_all(&cells, &design).unwrap();
    let influence_se = aggregates.overall.se;
    serial.apply(&mut cells, &mut aggregates);
    let ratio = aggregates.overall.se / influence_se;
    assert!(
        (0.7..1.4).contains(&ratio),
        "bootstrap/influence se ratio {ratio}"
    );
    assert!(aggregates.overall.ci_percentile.is_some());
}

#[test]
fn covariate_adjustment_removes_selection_bias() {
    // Selection on a covariate that drives outcome trends biases the
    // unadjusted comparison; adjusting for it does not.
    let mut spec = dynamic(300);
    spec.covariates[0].trend = 1.0;
    spec.covariates[0].selection = 1.0;
    let (mut adjusted, mut unadjusted) = (Vec::new(), Vec::new());
    for i in 0..100 {
        spec.seed = 300 + i;
        let (panel, truth) = gen_panel(&spec).unwrap();
        let design = build_cohort_design(&panel).unwrap();
        let target = truth.cell(3, 4).unwrap();
        for (covs, out) in [
            (spec.covariate_names(), &mut adjusted),
            (vec![], &mut unadjusted),
        ] {
            let cells = gtatt_table(&panel, &design, &covs, Flavor::Dr, Execution::Serial).unwrap();
            let c = cells.iter().find(|c| c.g == 3 && c.t == 4).unwrap();
            out.push(c.estimate - target);
        }
    }
    let adj = stagdid::simlab::McSummary::of(&adjusted);
    let raw = stagdid::simlab::McSummary::of(&unadjusted);
    assert!(adj.z(0.0) < 3.0, "{adj:?}");
    assert!(raw.z(0.0) > 5.0, "{raw:?}");
}

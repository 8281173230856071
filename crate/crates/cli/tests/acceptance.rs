//! Acceptance suite. Each test prints one `PASS`/`FAIL` line straight to
//! stderr (bypassing the test harness capture) before asserting, so a plain
//! `cargo test` log shows the verdict of every criterion.
//!
//! Monte Carlo criteria use fixed seeds and are sized for a single core.

use std::io::Write;
use std::path::Path;
use std::process::Command;

use stagdid::aggregate::{
    agg_event, agg_group, agg_overall, agg_simple, aggregate_all, bootstrap_inference,
    EstimatorSpec,
};
use stagdid::csdid::{
    estimate_cell, gtatt_table, CellFlag, Flavor, GtattCell, Influence, SeSource,
};
use stagdid::inference::Interval;
use stagdid::panel::{build_cohort_design, CohortDesign, PanelDataset};
use stagdid::sensitivity::{
    bh_compare, budget_grid, robust_grids, rr_relative_magnitudes, rr_smoothness, EventEstimate,
    PreTrend, Restriction,
};
use stagdid::simlab::{
    gen_panel, oracle_gtatt, replicate, twfe_bias_demo, Assignment, CohortSize, CovariateSpec,
    EffectSpec, McSummary, ScenarioSpec, Truth,
};
use stagdid::Execution;

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "acceptance {id}: {} {name} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} failed: {detail}");
}

fn scenario(
    seed: u64,
    n_periods: usize,
    cohorts: &[(usize, usize)],
    n_never: usize,
) -> ScenarioSpec {
    ScenarioSpec {
        seed,
        n_periods,
        cohorts: cohorts.iter().map(|&(g, n)| CohortSize { g, n }).collect(),
        n_never,
        effect: EffectSpec::Constant { value: 0.0 },
        covariates: vec![],
        trend_quadratic: 0.0,
        selection_quadratic: 0.0,
        assignment: Assignment::Fixed,
        unit_effect_sd: 1.0,
        period_effects: (0..n_periods).map(|t| 0.3 * t as f64).collect(),
        noise_sd: 1.0,
        violation_slope: 0.0,
        max_attempts: 20,
    }
}

fn covariate(name: &str, trend: f64, selection: f64) -> CovariateSpec {
    CovariateSpec {
        name: name.into(),
        mean: 0.0,
        sd: 1.0,
        level: 1.0,
        trend,
        selection,
    }
}

fn estimate(
    panel: &PanelDataset,
    covariates: &[String],
    flavor: Flavor,
) -> (CohortDesign, Vec<GtattCell>) {
    let design = build_cohort_design(panel).unwrap();
    let cells = gtatt_table(panel, &design, covariates, flavor, Execution::Serial).unwrap();
    (design, cells)
}

fn cell_of(cells: &[GtattCell], g: usize, t: usize) -> &GtattCell {
    cells.iter().find(|c| c.g == g && c.t == t).unwrap()
}

fn fixed_cell(g: usize, t: usize, estimate: f64) -> GtattCell {
    GtattCell {
        g,
        t,
        event_time: t as i64 - g as i64,
        base: if t >= g { g - 1 } else { t - 1 },
        requested: Flavor::Dr,
        flavor: Flavor::Dr,
        estimate,
        se: 0.0,
        ci: Interval::normal(estimate, 0.0),
        p_value: 1.0,
        se_source: SeSource::Influence,
        ci_percentile: None,
        n_treated: 1,
        n_control: 1,
        influence: Influence::default(),
        control_pscores: vec![],
        flags: Vec::<CellFlag>::new(),
        error: None,
    }
}

#[test]
fn criterion_1_aggregation_identities() {
    let design = CohortDesign {
        cohorts: vec![2, 3],
        cohort_sizes: vec![41, 135],
        n_never: 6221,
        n_periods: 4,
    };
    let cells = vec![
        fixed_cell(2, 2, 2.3),
        fixed_cell(2, 3, 3.1),
        fixed_cell(2, 4, 3.2),
        fixed_cell(3, 3, 0.9),
        fixed_cell(3, 4, 1.5),
    ];
    let g2 = agg_group(&cells, &design, 2).unwrap().estimate;
    let g3 = agg_group(&cells, &design, 3).unwrap().estimate;
    let e1 = agg_event(&cells, &design, 1).unwrap().estimate;
    let e2 = agg_event(&cells, &design, 2).unwrap().estimate;
    let simple = agg_simple(&cells, &design).unwrap().estimate;
    let groups = [
        agg_group(&cells, &design, 2).unwrap(),
        agg_group(&cells, &design, 3).unwrap(),
    ];
    let overall = agg_overall(&groups, &design).unwrap().estimate;
    let ok = (g2 - 2.8667).abs() <= 1e-4
        && (g3 - 1.2).abs() <= 1e-12
        && (e1 - 1.873).abs() <= 1e-3
        && (e2 - 3.2).abs() <= 1e-12
        && (simple - 1.722).abs() <= 1e-3
        && (overall - 1.588).abs() <= 1e-3;
    verdict(
        1,
        "aggregation identities",
        ok,
        &format!(
            "group2={g2:.5} group3={g3} e1={e1:.4} e2={e2} simple={simple:.4} overall={overall:.4}"
        ),
    );
}

#[test]
fn criterion_2_oracle_equivalence() {
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for i in 0..50u64 {
        let n_periods = 3 + (i as usize % 4);
        let mut cohorts = Vec::new();
        for g in 2..=n_periods {
            if (i as usize + g) % 3 != 0 || g == n_periods {
                cohorts.push((g, 5 + (i as usize * 7 + g * 11) % 30));
            }
        }
        let mut spec = scenario(1000 + i, n_periods, &cohorts, 20 + (i as usize * 13) % 60);
        spec.effect = EffectSpec::EventTime {
            intercept: 0.5 + (i % 5) as f64,
            slope: 0.25 * (i % 3) as f64,
        };
        spec.noise_sd = 0.5 + (i % 4) as f64;
        spec.unit_effect_sd = 2.0;
        assert!(spec.n_units() <= 200);
        let (panel, _) = gen_panel(&spec).unwrap();
        let design = build_cohort_design(&panel).unwrap();
        for (g, t) in design.cells() {
            let oracle = oracle_gtatt(&panel, g, t).unwrap();
            for flavor in [Flavor::Or, Flavor::Ipw, Flavor::Dr] {
                let cell = estimate_cell(&panel, g, t, &[], flavor);
                worst = worst.max((cell.estimate - oracle).abs());
                compared += 1;
            }
        }
    }
    verdict(
        2,
        "oracle equivalence",
        worst <= 1e-10,
        &format!("{compared} cell estimates, max |diff| {worst:.2e}"),
    );
}

#[test]
fn criterion_3_truth_recovery() {
    let spec = ScenarioSpec::reference(20_000);
    let names = spec.covariate_names();
    let runs = replicate(&spec, 200, Execution::Parallel, |panel, truth| {
        let (_, cells) = estimate(panel, &names, Flavor::Dr);
        Ok((cells, truth.clone()))
    });
    let runs: Vec<(Vec<GtattCell>, Truth)> = runs.into_iter().map(Result::unwrap).collect();
    let mut worst_z = 0.0f64;
    let mut detail = Vec::new();
    for &(g, t) in &[(2, 2), (2, 3), (2, 4), (3, 3), (3, 4)] {
        let bias: Vec<f64> = runs
            .iter()
            .map(|(cells, truth)| cell_of(cells, g, t).estimate - truth.cell(g, t).unwrap())
            .collect();
        let z = McSummary::of(&bias).z(0.0);
        worst_z = worst_z.max(z);
        detail.push(format!("({g},{t}) z={z:.2}"));
    }
    let placebo: Vec<f64> = runs
        .iter()
        .map(|(cells, _)| {
            let pre: Vec<f64> = cells
                .iter()
                .filter(|c| !c.is_post())
                .map(|c| c.estimate)
                .collect();
            pre.iter().sum::<f64>() / pre.len() as f64
        })
        .collect();
    let placebo_z = McSummary::of(&placebo).z(0.0);
    verdict(
        3,
        "truth recovery",
        worst_z <= 3.0 && placebo_z <= 3.0,
        &format!("{} placebo z={placebo_z:.2}", detail.join(" ")),
    );
}

/// Bias of OR, IPW and DR for the single cell (2, 2), in Monte Carlo SEs.
fn robustness_z(spec: &ScenarioSpec, n: usize) -> [f64; 3] {
    let names = spec.covariate_names();
    let runs = replicate(spec, n, Execution::Parallel, |panel, truth| {
        let target = truth.cell(2, 2).unwrap();
        let idx = panel.covariate_indices(&names)?;
        Ok([Flavor::Or, Flavor::Ipw, Flavor::Dr]
            .map(|f| estimate_cell(panel, 2, 2, &idx, f).estimate - target))
    });
    let runs: Vec<[f64; 3]> = runs.into_iter().map(Result::unwrap).collect();
    [0, 1, 2].map(|k| {
        let v: Vec<f64> = runs.iter().map(|r| r[k]).collect();
        McSummary::of(&v).z(0.0)
    })
}

#[test]
fn criterion_4_double_robustness() {
    let mut base = scenario(30_000, 2, &[(2, 400)], 600);
    base.assignment = Assignment::Logistic;
    base.effect = EffectSpec::Constant { value: 1.0 };
    base.covariates = vec![covariate("x", 1.0, 1.0)];

    // Outcome model wrong: a quadratic trend the linear regression misses.
    let mut or_wrong = base.clone();
    or_wrong.trend_quadratic = 1.0;
    let [or_a, _, dr_a] = robustness_z(&or_wrong, 500);

    // Propensity model wrong: quadratic selection the linear logit misses.
    let mut ps_wrong = base.clone();
    ps_wrong.seed = 40_000;
    ps_wrong.selection_quadratic = 1.0;
    let [_, ipw_b, dr_b] = robustness_z(&ps_wrong, 500);

    verdict(
        4,
        "double robustness",
        dr_a <= 3.0 && or_a > 5.0 && dr_b <= 3.0 && ipw_b > 5.0,
        &format!(
            "OR wrong: DR z={dr_a:.2} OR z={or_a:.1}; pscore wrong: DR z={dr_b:.2} IPW z={ipw_b:.1}"
        ),
    );
}

#[test]
fn criterion_5_twfe_bias() {
    let mut spec = scenario(50_000, 4, &[(2, 30), (3, 50)], 40);
    spec.effect = EffectSpec::EventTime {
        intercept: 1.0,
        slope: 1.0,
    };
    spec.noise_sd = 0.0;
    let a = twfe_bias_demo(&spec).unwrap();
    let again = twfe_bias_demo(&spec).unwrap();
    spec.seed += 1;
    let other_seed = twfe_bias_demo(&spec).unwrap();
    let cs_exact = a.cs_bias().abs() <= 1e-8;
    let twfe_off = a.twfe_bias().abs() > 1e-3;
    let reproducible = a == again && (a.twfe_bias() - other_seed.twfe_bias()).abs() <= 1e-8;
    verdict(
        5,
        "TWFE bias demonstration",
        cs_exact && twfe_off && reproducible,
        &format!(
            "truth={:.6} CS simple bias={:.1e} TWFE bias={:.6}",
            a.truth_cell_weighted,
            a.cs_bias(),
            a.twfe_bias()
        ),
    );
}

#[test]
fn criterion_6_bootstrap_coverage() {
    let mut spec = scenario(60_000, 4, &[(2, 40), (3, 60)], 100);
    spec.effect = EffectSpec::EventTime {
        intercept: 1.0,
        slope: 0.5,
    };
    let estimator = EstimatorSpec {
        covariates: vec![],
        flavor: Flavor::Dr,
    };
    let hits = replicate(&spec, 300, Execution::Parallel, |panel, truth| {
        let (design, cells) = estimate(panel, &[], Flavor::Dr);
        let mut cells = cells;
        let mut aggregates = aggregate_all(&cells, &design)?;
        let boot = bootstrap_inference(
            panel,
            &design,
            &estimator,
            299,
            truth.seed,
            Execution::Serial,
        )?;
        boot.apply(&mut cells, &mut aggregates);
        Ok(aggregates.overall.ci.contains(truth.overall))
    });
    let covered = hits.into_iter().filter(|h| *h.as_ref().unwrap()).count();
    let rate = covered as f64 / 300.0;
    verdict(
        6,
        "bootstrap coverage",
        (0.90..=0.98).contains(&rate),
        &format!(
            "overall 95% CI covered truth in {covered}/300 = {:.1}%",
            100.0 * rate
        ),
    );
}

#[test]
fn criterion_7_sensitivity_suite() {
    // (a) and (b) on an estimated event study.
    let mut spec = scenario(70_000, 5, &[(3, 80), (4, 80)], 150);
    spec.effect = EffectSpec::Constant { value: 1.0 };
    let (panel, _) = gen_panel(&spec).unwrap();
    let (design, cells) = estimate(&panel, &[], Flavor::Dr);
    let aggregates = aggregate_all(&cells, &design).unwrap();
    let grid = budget_grid(2.0, 20);
    let grids = robust_grids(&aggregates, &grid, &grid).unwrap();
    let identity = grids
        .iter()
        .filter(|g| g.restriction == Restriction::RelativeMagnitudes)
        .all(|g| g.intervals[0] == g.original_ci);
    let nested = grids.iter().all(|g| {
        g.intervals
            .windows(2)
            .all(|w| w[1].lo <= w[0].lo && w[0].hi <= w[1].hi)
    });

    // (c) closed form.
    let pre = PreTrend::from_placebos(vec![EventEstimate {
        e: -1,
        estimate: 0.5,
        se: 0.1,
    }])
    .unwrap();
    let event = EventEstimate {
        e: 0,
        estimate: 2.0,
        se: 0.5,
    };
    let breakdown = rr_relative_magnitudes(&event, &pre, &[0.0])
        .unwrap()
        .breakdown;
    let closed_form = (breakdown - 2.04).abs() <= 1e-3;

    // (d) linear pre-trend and no effect.
    let mut trend = scenario(71_000, 6, &[(4, 150), (5, 150)], 300);
    trend.violation_slope = 0.5;
    let (panel, _) = gen_panel(&trend).unwrap();
    let (design, cells) = estimate(&panel, &[], Flavor::Dr);
    let aggregates = aggregate_all(&cells, &design).unwrap();
    let pre = PreTrend::from_aggregates(&aggregates).unwrap();
    let mut smooth = Vec::new();
    let mut naive_excludes_zero = true;
    for e in 0..=2 {
        let r = aggregates.event(e).unwrap();
        let event = EventEstimate {
            e,
            estimate: r.estimate,
            se: r.se,
        };
        naive_excludes_zero &= !r.ci.contains(0.0);
        smooth.push(
            rr_smoothness(&event, &pre, &budget_grid(0.5, 11))
                .unwrap()
                .breakdown,
        );
    }
    let trend_zero = smooth.iter().all(|&b| b == 0.0);

    verdict(
        7,
        "sensitivity suite",
        identity && nested && closed_form && trend_zero,
        &format!(
            "(a) {identity} (b) {nested} on {} grids (c) breakdown={breakdown:.4} \
             (d) smoothness breakdowns {smooth:?}, unadjusted CIs exclude 0: {naive_excludes_zero}",
            grids.len()
        ),
    );
}

#[test]
fn criterion_8_trend_comparison() {
    let mut det = scenario(80_000, 5, &[(4, 20)], 30);
    det.noise_sd = 0.0;
    det.violation_slope = 1.0;
    let (panel, _) = gen_panel(&det).unwrap();
    let c = bh_compare(&panel, &[], 100, 1, Execution::Serial).unwrap();
    let exact = (c.theta.estimate - 1.0).abs() <= 1e-6 && c.beta_prime.estimate.abs() <= 1e-6;

    let mut null = scenario(81_000, 5, &[(4, 30)], 30);
    null.effect = EffectSpec::Constant { value: 1.0 };
    let hits = replicate(&null, 300, Execution::Parallel, |panel, truth| {
        let c = bh_compare(panel, &[], 100, truth.seed, Execution::Serial)?;
        Ok(c.difference.ci.contains(0.0))
    });
    let covered = hits.into_iter().filter(|h| *h.as_ref().unwrap()).count();
    let rate = covered as f64 / 300.0;
    verdict(
        8,
        "trend comparison",
        exact && (0.90..=0.98).contains(&rate),
        &format!(
            "theta={:.9} beta'={:.1e}; difference CI covered 0 in {covered}/300 = {:.1}%",
            c.theta.estimate,
            c.beta_prime.estimate,
            100.0 * rate
        ),
    );
}

fn stagdid(args: &[&str], envs: &[(&str, &str)]) {
    let out = Command::new(env!("CARGO_BIN_EXE_stagdid"))
        .args(args)
        .envs(envs.iter().copied())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stagdid {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn same_bytes(a: &Path, b: &Path, name: &str) -> bool {
    std::fs::read(a.join(name)).unwrap() == std::fs::read(b.join(name)).unwrap()
}

#[test]
fn criterion_9_serial_parallel_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ScenarioSpec::reference(90_000);
    spec.n_never = 600;
    spec.cohorts[0].n = 60;
    spec.cohorts[1].n = 90;
    let scenario_path = dir.path().join("scenario.json");
    std::fs::write(&scenario_path, serde_json::to_vec(&spec).unwrap()).unwrap();
    let data = dir.path().join("data");
    let serial = dir.path().join("serial");
    let parallel = dir.path().join("parallel");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    stagdid(
        &[
            "simulate",
            "--scenario",
            &p(&scenario_path),
            "--out",
            &p(&data),
        ],
        &[],
    );
    let input = p(&data.join("panel.csv"));
    let common = [
        "run",
        "--input",
        &input,
        "--covariates",
        "deprivation,list_size",
        "--bootstrap",
        "199",
        "--seed",
        "11",
    ];
    let mut serial_args = common.to_vec();
    let serial_out = p(&serial);
    serial_args.extend(["--out", &serial_out, "--serial"]);
    stagdid(&serial_args, &[]);
    let mut parallel_args = common.to_vec();
    let parallel_out = p(&parallel);
    parallel_args.extend(["--out", &parallel_out]);
    stagdid(&parallel_args, &[("RAYON_NUM_THREADS", "4")]);

    let files = ["gtatt.csv", "aggregates.json", "sensitivity.json"];
    let identical: Vec<bool> = files
        .iter()
        .map(|f| same_bytes(&serial, &parallel, f))
        .collect();
    verdict(
        9,
        "serial/parallel determinism",
        identical.iter().all(|&b| b),
        &format!("byte-identical {:?}: {identical:?}", files),
    );
}

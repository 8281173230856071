//! Synthetic panels with known group-time effects.
//!
//! Untreated outcomes follow
//!
//! ```text
//! Y_it(0) = a_i + phi_t + sum_j (level_j + trend_j t) x_ij + q t x_i0^2 + e_it
//! ```
//!
//! with covariates fixed over time. Cohort membership is drawn from a
//! multinomial logit in the covariates, so covariates shift both adoption and
//! outcome trends and unadjusted comparisons are confounded. Conditional
//! parallel trends holds by construction unless `violation_slope` is set,
//! which adds `violation_slope * t` to every eventually treated unit.
//!
//! Randomness comes from ChaCha8 seeded with the scenario seed; assignment
//! attempt `a` uses stream `a`, and replication `i` of a Monte Carlo loop uses
//! seed `seed + i`. Panels are therefore identical across platforms and
//! thread counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregate::{agg_simple, aggregate_all};
use crate::csdid::{gtatt_table, Flavor};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::panel::{build_cohort_design, validate_panel, Cohort, PanelDataset, RawRow};
use crate::twfe::staggered_twfe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSize {
    pub g: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCell {
    pub g: usize,
    pub t: usize,
    pub value: f64,
}

/// True effect `tau(g, t)` for post cells `t >= g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EffectSpec {
    Constant {
        value: f64,
    },
    /// `intercept + slope * (t - g)`.
    EventTime {
        intercept: f64,
        slope: f64,
    },
    Table {
        cells: Vec<EffectCell>,
    },
}

impl EffectSpec {
    pub fn value(&self, g: usize, t: usize) -> Option<f64> {
        if t < g {
            return Some(0.0);
        }
        match self {
            EffectSpec::Constant { value } => Some(*value),
            EffectSpec::EventTime { intercept, slope } => Some(intercept + slope * (t - g) as f64),
            EffectSpec::Table { cells } => {
                cells.iter().find(|c| c.g == g && c.t == t).map(|c| c.value)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub sd: f64,
    /// Time-constant effect on the outcome level.
    #[serde(default)]
    pub level: f64,
    /// Effect on the outcome per period; drives covariate-specific trends.
    #[serde(default)]
    pub trend: f64,
    /// Log-odds of adoption (any cohort) per unit of the centred covariate.
    #[serde(default)]
    pub selection: f64,
}

fn one() -> f64 {
    1.0
}

fn default_attempts() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Multinomial logit on covariates; cohort sizes are random.
    #[default]
    Logistic,
    /// Exact cohort sizes, units assigned by random permutation.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub n_periods: usize,
    /// Expected cohort sizes (exact under [`Assignment::Fixed`]).
    pub cohorts: Vec<CohortSize>,
    pub n_never: usize,
    pub effect: EffectSpec,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    /// Coefficient on `t * x_0^2` in the outcome.
    #[serde(default)]
    pub trend_quadratic: f64,
    /// Coefficient on the centred `x_0^2` in the adoption log-odds.
    #[serde(default)]
    pub selection_quadratic: f64,
    #[serde(default)]
    pub assignment: Assignment,
    #[serde(default)]
    pub unit_effect_sd: f64,
    /// `phi_1..phi_T`; empty means zero.
    #[serde(default)]
    pub period_effects: Vec<f64>,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub violation_slope: f64,
    /// Redraws allowed when a cohort ends up empty.
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

impl ScenarioSpec {
    /// Cohorts of 41 and 135 units adopting in periods 2 and 3, 6,221
    /// never-treated units, four periods, and effects
    /// `{2.3, 3.1, 3.2}` and `{0.9, 1.5}`. Two covariates drive both adoption
    /// and outcome trends.
    pub fn reference(seed: u64) -> Self {
        let cell = |g, t, value| EffectCell { g, t, value };
        ScenarioSpec {
            seed,
            n_periods: 4,
            cohorts: vec![CohortSize { g: 2, n: 41 }, CohortSize { g: 3, n: 135 }],
            n_never: 6221,
            effect: EffectSpec::Table {
                cells: vec![
                    cell(2, 2, 2.3),
                    cell(2, 3, 3.1),
                    cell(2, 4, 3.2),
                    cell(3, 3, 0.9),
                    cell(3, 4, 1.5),
                ],
            },
            covariates: vec![
                CovariateSpec {
                    name: "deprivation".into(),
                    mean: 0.0,
                    sd: 1.0,
                    level: 2.0,
                    trend: 0.8,
                    selection: 0.7,
                },
                CovariateSpec {
                    name: "list_size".into(),
                    mean: 0.0,
                    sd: 1.0,
                    level: -1.0,
                    trend: -0.4,
                    selection: -0.5,
                },
            ],
            trend_quadratic: 0.0,
            selection_quadratic: 0.0,
            assignment: Assignment::Logistic,
            unit_effect_sd: 5.0,
            period_effects: vec![40.0, 40.6, 41.0, 41.5],
            noise_sd: 1.0,
            violation_slope: 0.0,
            max_attempts: default_attempts(),
        }
    }

    pub fn n_units(&self) -> usize {
        self.n_never + self.cohorts.iter().map(|c| c.n).sum::<usize>()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidScenario(m.to_string()));
        if self.n_periods < 2 {
            return bad("need at least two periods");
        }
        if self.cohorts.is_empty() {
            return bad("need at least one treated cohort");
        }
        if self.n_never == 0 {
            return bad("need never-treated units");
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cohorts {
            if c.g < 2 || c.g > self.n_periods {
                return bad("cohort period must lie in 2..=n_periods");
            }
            if c.n == 0 {
                return bad("cohort sizes must be positive");
            }
            if !seen.insert(c.g) {
                return bad("duplicate cohort");
            }
            for t in c.g..=self.n_periods {
                match self.effect.value(c.g, t) {
                    Some(v) if v.is_finite() => {}
                    _ => {
                        return Err(Error::InvalidScenario(format!(
                            "effect undefined for cell ({}, {t})",
                            c.g
                        )))
                    }
                }
            }
        }
        if !self.period_effects.is_empty() && self.period_effects.len() != self.n_periods {
            return bad("period_effects must be empty or have one entry per period");
        }
        let scalars = [
            self.trend_quadratic,
            self.selection_quadratic,
            self.unit_effect_sd,
            self.noise_sd,
            self.violation_slope,
        ];
        let covs = self
            .covariates
            .iter()
            .flat_map(|c| [c.mean, c.sd, c.level, c.trend, c.selection]);
        if !scalars
            .into_iter()
            .chain(covs)
            .chain(self.period_effects.iter().copied())
            .all(f64::is_finite)
        {
            return bad("parameters must be finite");
        }
        if self.unit_effect_sd < 0.0
            || self.noise_sd < 0.0
            || self.covariates.iter().any(|c| c.sd < 0.0)
        {
            return bad("standard deviations must be non-negative");
        }
        if (self.trend_quadratic != 0.0 || self.selection_quadratic != 0.0)
            && self.covariates.is_empty()
        {
            return bad("quadratic terms need a covariate");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCell {
    pub g: usize,
    pub t: usize,
    pub e: i64,
    pub att: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthGroup {
    pub g: usize,
    pub att: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub e: i64,
    pub att: f64,
}

/// Population targets of a generated panel, computed from the realised
/// cohort sizes. Placebo cells have truth zero; an injected violation moves
/// the estimators, not the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub attempts: usize,
    pub cohort_sizes: Vec<CohortSize>,
    pub n_never: usize,
    pub cells: Vec<TruthCell>,
    pub groups: Vec<TruthGroup>,
    /// Cohort-share weighted mean of group effects.
    pub overall: f64,
    pub events: Vec<TruthEvent>,
    /// Mean effect over all treated unit-periods.
    pub cell_weighted: f64,
    pub violation_slope: f64,
}

impl Truth {
    pub fn cell(&self, g: usize, t: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.g == g && c.t == t)
            .map(|c| c.att)
    }

    pub fn event(&self, e: i64) -> Option<f64> {
        self.events.iter().find(|x| x.e == e).map(|x| x.att)
    }
}

fn compute_truth(spec: &ScenarioSpec, sizes: &[CohortSize], attempts: usize) -> Truth {
    let last = spec.n_periods;
    let tau = |g: usize, t: usize| spec.effect.value(g, t).unwrap_or(f64::NAN);
    let mut cells = Vec::new();
    for c in sizes {
        for t in 2..=last {
            cells.push(TruthCell {
                g: c.g,
                t,
                e: t as i64 - c.g as i64,
                att: tau(c.g, t),
            });
        }
    }
    let groups: Vec<TruthGroup> = sizes
        .iter()
        .map(|c| TruthGroup {
            g: c.g,
            att: (c.g..=last).map(|t| tau(c.g, t)).sum::<f64>() / (last - c.g + 1) as f64,
        })
        .collect();
    let treated: usize = sizes.iter().map(|c| c.n).sum();
    let overall = sizes
        .iter()
        .zip(&groups)
        .map(|(c, gr)| c.n as f64 * gr.att)
        .sum::<f64>()
        / treated as f64;

    let mut events = Vec::new();
    let lo = sizes.iter().map(|c| 2 - c.g as i64).min().unwrap_or(0);
    let hi = sizes
        .iter()
        .map(|c| last as i64 - c.g as i64)
        .max()
        .unwrap_or(-1);
    for e in lo..=hi {
        let (mut num, mut den) = (0.0, 0.0);
        for c in sizes {
            let t = c.g as i64 + e;
            if t >= 2 && t <= last as i64 {
                num += c.n as f64 * tau(c.g, t as usize);
                den += c.n as f64;
            }
        }
        events.push(TruthEvent { e, att: num / den });
    }

    let (mut num, mut den) = (0.0, 0.0);
    for c in sizes {
        for t in c.g..=last {
            num += c.n as f64 * tau(c.g, t);
            den += c.n as f64;
        }
    }
    Truth {
        seed: spec.seed,
        attempts,
        cohort_sizes: sizes.to_vec(),
        n_never: spec.n_units() - treated,
        cells,
        groups,
        overall,
        events,
        cell_weighted: num / den,
        violation_slope: spec.violation_slope,
    }
}

/// Cohort index per unit (`None` = never treated), or the first empty cohort.
fn assign(
    spec: &ScenarioSpec,
    x: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Vec<Option<usize>>, usize> {
    let n = x.len();
    let assigned: Vec<Option<usize>> = match spec.assignment {
        Assignment::Fixed => {
            let mut labels: Vec<Option<usize>> = vec![None; spec.n_never];
            for c in &spec.cohorts {
                labels.extend(std::iter::repeat(Some(c.g)).take(c.n));
            }
            // Fisher-Yates
            for i in (1..n).rev() {
                labels.swap(i, rng.random_range(0..=i));
            }
            labels
        }
        Assignment::Logistic => {
            let intercepts: Vec<f64> = spec
                .cohorts
                .iter()
                .map(|c| (c.n as f64 / spec.n_never as f64).ln())
                .collect();
            x.iter()
                .map(|xi| {
                    let mut index = 0.0;
                    for (c, v) in spec.covariates.iter().zip(xi) {
                        index += c.selection * (v - c.mean);
                    }
                    if let Some(c0) = spec.covariates.first() {
                        let d = xi[0] - c0.mean;
                        index += spec.selection_quadratic * (d * d - c0.sd * c0.sd);
                    }
                    let weights: Vec<f64> = intercepts.iter().map(|a| (a + index).exp()).collect();
                    let total = 1.0 + weights.iter().sum::<f64>();
                    let mut u = rng.random::<f64>() * total;
                    if u < 1.0 {
                        return None;
                    }
                    u -= 1.0;
                    for (c, w) in spec.cohorts.iter().zip(&weights) {
                        if u < *w {
                            return Some(c.g);
                        }
                        u -= w;
                    }
                    spec.cohorts.last().map(|c| c.g)
                })
                .collect()
        }
    };
    for c in &spec.cohorts {
        if !assigned.contains(&Some(c.g)) {
            return Err(c.g);
        }
    }
    Ok(assigned)
}

/// Generate a validated panel and its truth table.
pub fn gen_panel(spec: &ScenarioSpec) -> Result<(PanelDataset, Truth)> {
    spec.validate()?;
    let n = spec.n_units();
    let last = spec.n_periods;
    let mut empty_g = 0;
    for attempt in 0..spec.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt as u64);

        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                spec.covariates
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c.mean + c.sd * z
                    })
                    .collect()
            })
            .collect();
        let cohorts = match assign(spec, &x, &mut rng) {
            Ok(c) => c,
            Err(g) => {
                empty_g = g;
                continue;
            }
        };
        let unit_effect = Normal::new(0.0, spec.unit_effect_sd).expect("validated sd");
        let noise = Normal::new(0.0, spec.noise_sd).expect("validated sd");
        let width = n.to_string().len();

        let mut rows = Vec::with_capacity(n * last);
        for u in 0..n {
            let alpha = unit_effect.sample(&mut rng);
            for t in 1..=last {
                let tf = t as f64;
                let mut y = alpha + spec.period_effects.get(t - 1).copied().unwrap_or(0.0);
                for (c, v) in spec.covariates.iter().zip(&x[u]) {
                    y += (c.level + c.trend * tf) * v;
                }
                if let Some(v) = x[u].first() {
                    y += spec.trend_quadratic * tf * v * v;
                }
                y += noise.sample(&mut rng);
                if let Some(g) = cohorts[u] {
                    y += spec.violation_slope * tf;
                    if t >= g {
                        y += spec.effect.value(g, t).expect("validated effect");
                    }
                }
                rows.push(RawRow {
                    unit: format!("u{u:0width$}"),
                    period: t as i64,
                    outcome: Some(y),
                    cohort: cohorts[u].map(|g| g as i64),
                    covariates: x[u].iter().map(|&v| Some(v)).collect(),
                });
            }
        }
        let panel = validate_panel(&rows, &spec.covariate_names())?;
        let sizes: Vec<CohortSize> = spec
            .cohorts
            .iter()
            .map(|c| CohortSize {
                g: c.g,
                n: cohorts.iter().filter(|&&k| k == Some(c.g)).count(),
            })
            .collect();
        return Ok((panel, compute_truth(spec, &sizes, attempt + 1)));
    }
    Err(Error::EmptyCohort {
        g: empty_g,
        attempts: spec.max_attempts,
    })
}

/// Unadjusted difference in mean outcome changes between cohort `g` and the
/// never-treated, by direct looping over the panel.
pub fn oracle_gtatt(panel: &PanelDataset, g: usize, t: usize) -> Result<f64> {
    let last = panel.n_periods();
    if t < 2 || t > last {
        return Err(Error::PeriodOutOfRange { t, last });
    }
    let base = if t >= g { g - 1 } else { t - 1 };
    let (mut sum_treated, mut n_treated) = (0.0, 0usize);
    let (mut sum_never, mut n_never) = (0.0, 0usize);
    for u in 0..panel.n_units() {
        let change = panel.outcome(u, t) - panel.outcome(u, base);
        match panel.cohort(u) {
            Cohort::First(k) if k == g => {
                sum_treated += change;
                n_treated += 1;
            }
            Cohort::Never => {
                sum_never += change;
                n_never += 1;
            }
            Cohort::First(_) => {}
        }
    }
    if n_treated == 0 || n_never == 0 {
        return Err(Error::EmptyCell { g, t });
    }
    Ok(sum_treated / n_treated as f64 - sum_never / n_never as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwfeBiasReport {
    pub truth_cell_weighted: f64,
    pub truth_overall: f64,
    pub twfe: f64,
    pub cs_simple: f64,
    pub cs_overall: f64,
}

impl TwfeBiasReport {
    pub fn twfe_bias(&self) -> f64 {
        self.twfe - self.truth_cell_weighted
    }

    pub fn cs_bias(&self) -> f64 {
        self.cs_simple - self.truth_cell_weighted
    }
}

/// Pooled TWFE and doubly robust group-time estimates on one panel, against
/// the truth. Both adjust for every scenario covariate.
pub fn twfe_bias_demo(spec: &ScenarioSpec) -> Result<TwfeBiasReport> {
    let (panel, truth) = gen_panel(spec)?;
    let names = spec.covariate_names();
    let twfe = staggered_twfe(&panel, &names)?;
    let design = build_cohort_design(&panel)?;
    let cells = gtatt_table(&panel, &design, &names, Flavor::Dr, Execution::Serial)?;
    let aggregates = aggregate_all(&cells, &design)?;
    Ok(TwfeBiasReport {
        truth_cell_weighted: truth.cell_weighted,
        truth_overall: truth.overall,
        twfe: twfe.estimate,
        cs_simple: agg_simple(&cells, &design)?.estimate,
        cs_overall: aggregates.overall.estimate,
    })
}

/// Mean of Monte Carlo draws with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl McSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = crate::inference::mean(values);
        let sd = crate::inference::std_dev(values);
        McSummary {
            mean,
            se: sd / (n as f64).sqrt(),
            n,
        }
    }

    /// `|mean - target|` in Monte Carlo standard errors.
    pub fn z(&self, target: f64) -> f64 {
        (self.mean - target).abs() / self.se
    }
}

/// Run `f` on `n` replications of `spec`, replication `i` using seed
/// `spec.seed + i`. Results come back in replication order.
pub fn replicate<T, F>(spec: &ScenarioSpec, n: usize, exec: Execution, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(&PanelDataset, &Truth) -> Result<T> + Sync + Send,
{
    map_indexed(exec, n, |i| {
        let mut s = spec.clone();
        s.seed = spec.seed.wrapping_add(i as u64);
        let (panel, truth) = gen_panel(&s)?;
        f(&panel, &truth)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwfeBiasSummary {
    pub twfe_bias: McSummary,
    pub cs_bias: McSummary,
}

/// Monte Carlo version of [`twfe_bias_demo`].
pub fn twfe_bias_monte_carlo(
    spec: &ScenarioSpec,
    n: usize,
    exec: Execution,
) -> Result<TwfeBiasSummary> {
    let reports = map_indexed(exec, n, |i| {
        let mut s = spec.clone();
        s.seed = spec.seed.wrapping_add(i as u64);
        twfe_bias_demo(&s)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let twfe: Vec<f64> = reports.iter().map(TwfeBiasReport::twfe_bias).collect();
    let cs: Vec<f64> = reports.iter().map(TwfeBiasReport::cs_bias).collect();
    Ok(TwfeBiasSummary {
        twfe_bias: McSummary::of(&twfe),
        cs_bias: McSummary::of(&cs),
    })
}

//! Aggregation of group-time effects and bootstrap inference.
//!
//! Every aggregate is a fixed linear combination of cells, so its influence
//! contributions are the same combination of the cells' contributions and
//! its analytic standard error follows directly. Cohort shares are the
//! ever-treated shares `n_g / sum n_g`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csdid::{gtatt_table, Flavor, GtattCell, SeSource};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::inference::{normal_p_value, quantile_sorted, std_dev, Interval};
use crate::panel::{Cohort, CohortDesign, PanelDataset};

pub const MIN_REPLICATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationKind {
    Overall,
    Group {
        g: usize,
    },
    Event {
        e: i64,
    },
    Simple,
    /// Mean of the placebo event-time effects: average trend difference per
    /// period before adoption.
    PreTrendSlope,
}

/// Weight of one component: a cell `(g, t)`, or a whole cohort when `t` is
/// absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeight {
    pub g: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    #[serde(flatten)]
    pub kind: AggregationKind,
    pub estimate: f64,
    pub weights: Vec<ComponentWeight>,
    pub se: f64,
    pub ci: Interval,
    pub p_value: f64,
    pub se_source: SeSource,
    pub ci_percentile: Option<Interval>,
    #[serde(skip)]
    pub bootstrap_draws: Vec<f64>,
    /// Dense per-unit influence contributions.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

impl AggregationResult {
    fn from_parts(
        kind: AggregationKind,
        estimate: f64,
        weights: Vec<ComponentWeight>,
        influence: Vec<f64>,
    ) -> Self {
        let se = influence.iter().map(|v| v * v).sum::<f64>().sqrt();
        AggregationResult {
            kind,
            estimate,
            weights,
            se,
            ci: Interval::normal(estimate, se),
            p_value: normal_p_value(estimate, se),
            se_source: SeSource::Influence,
            ci_percentile: None,
            bootstrap_draws: Vec::new(),
            influence,
        }
    }

    pub fn set_se(&mut self, se: f64, source: SeSource) {
        self.se = se;
        self.ci = Interval::normal(self.estimate, se);
        self.p_value = normal_p_value(self.estimate, se);
        self.se_source = source;
    }
}

fn find_cell(cells: &[GtattCell], g: usize, t: usize) -> Result<&GtattCell> {
    cells
        .iter()
        .find(|c| c.g == g && c.t == t && c.is_ok())
        .ok_or(Error::MissingCell { g, t })
}

/// Combine cells with fixed weights.
fn combine_cells(
    kind: AggregationKind,
    cells: &[GtattCell],
    design: &CohortDesign,
    terms: &[(usize, usize, f64)],
) -> Result<AggregationResult> {
    let mut estimate = 0.0;
    let mut influence = vec![0.0; design.n_units()];
    let mut weights = Vec::with_capacity(terms.len());
    for &(g, t, w) in terms {
        let cell = find_cell(cells, g, t)?;
        estimate += w * cell.estimate;
        cell.influence.accumulate(&mut influence, w);
        weights.push(ComponentWeight {
            g,
            t: Some(t),
            weight: w,
        });
    }
    Ok(AggregationResult::from_parts(
        kind, estimate, weights, influence,
    ))
}

/// Unweighted mean of `ATT(g, t)` over `t = g..=T`.
pub fn agg_group(
    cells: &[GtattCell],
    design: &CohortDesign,
    g: usize,
) -> Result<AggregationResult> {
    let last = design.n_periods;
    if design.size(g).is_none() || g > last {
        return Err(Error::MissingCell { g, t: g });
    }
    let w = 1.0 / (last - g + 1) as f64;
    let terms: Vec<_> = (g..=last).map(|t| (g, t, w)).collect();
    combine_cells(AggregationKind::Group { g }, cells, design, &terms)
}

/// Cohort-share weighted mean of group aggregates.
pub fn agg_overall(
    groups: &[AggregationResult],
    design: &CohortDesign,
) -> Result<AggregationResult> {
    let mut estimate = 0.0;
    let mut influence = vec![0.0; design.n_units()];
    let mut weights = Vec::new();
    for &g in &design.cohorts {
        let group = groups
            .iter()
            .find(|r| r.kind == AggregationKind::Group { g })
            .ok_or(Error::MissingCell { g, t: g })?;
        let w = design.share(g);
        estimate += w * group.estimate;
        if group.influence.len() == influence.len() {
            for (acc, v) in influence.iter_mut().zip(&group.influence) {
                *acc += w * v;
            }
        }
        weights.push(ComponentWeight {
            g,
            t: None,
            weight: w,
        });
    }
    Ok(AggregationResult::from_parts(
        AggregationKind::Overall,
        estimate,
        weights,
        influence,
    ))
}

/// Effect `e` periods after adoption, averaged over cohorts observed at
/// `g + e` with weights proportional to cohort size. Negative `e` averages
/// placebo cells.
pub fn agg_event(cells: &[GtattCell], design: &CohortDesign, e: i64) -> Result<AggregationResult> {
    let eligible: Vec<(usize, usize)> = design
        .cohorts
        .iter()
        .zip(&design.cohort_sizes)
        .filter(|(&g, _)| {
            let t = g as i64 + e;
            t >= 2 && t <= design.n_periods as i64
        })
        .map(|(&g, &n)| (g, n))
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleCohort(e));
    }
    let total: usize = eligible.iter().map(|&(_, n)| n).sum();
    let terms: Vec<_> = eligible
        .iter()
        .map(|&(g, n)| (g, (g as i64 + e) as usize, n as f64 / total as f64))
        .collect();
    combine_cells(AggregationKind::Event { e }, cells, design, &terms)
}

/// All post cells, each weighted by its cohort size.
pub fn agg_simple(cells: &[GtattCell], design: &CohortDesign) -> Result<AggregationResult> {
    let post = design.post_cells();
    let total: f64 = post
        .iter()
        .map(|&(g, _)| design.size(g).unwrap_or(0) as f64)
        .sum();
    let terms: Vec<_> = post
        .iter()
        .map(|&(g, t)| (g, t, design.size(g).unwrap_or(0) as f64 / total))
        .collect();
    combine_cells(AggregationKind::Simple, cells, design, &terms)
}

/// Mean of the placebo event-time aggregates `e = -1, -2, ...`.
pub fn agg_pretrend_slope(cells: &[GtattCell], design: &CohortDesign) -> Result<AggregationResult> {
    let events = placebo_event_times(design);
    if events.is_empty() {
        return Err(Error::NoPrePeriods);
    }
    let mut merged: Vec<(usize, usize, f64)> = Vec::new();
    for &e in &events {
        let ev = agg_event(cells, design, e)?;
        for w in ev.weights {
            merged.push((
                w.g,
                w.t.expect("event weights are per cell"),
                w.weight / events.len() as f64,
            ));
        }
    }
    combine_cells(AggregationKind::PreTrendSlope, cells, design, &merged)
}

/// Event times with at least one eligible cohort, ascending.
pub fn event_times(design: &CohortDesign) -> Vec<i64> {
    let last = design.n_periods as i64;
    let lo = design
        .cohorts
        .iter()
        .map(|&g| 2 - g as i64)
        .min()
        .unwrap_or(0);
    let hi = design
        .cohorts
        .iter()
        .map(|&g| last - g as i64)
        .max()
        .unwrap_or(-1);
    (lo..=hi).collect()
}

fn placebo_event_times(design: &CohortDesign) -> Vec<i64> {
    event_times(design).into_iter().filter(|&e| e < 0).collect()
}

/// The standard aggregate set of an analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub overall: AggregationResult,
    pub groups: Vec<AggregationResult>,
    pub events: Vec<AggregationResult>,
    pub simple: AggregationResult,
    pub pretrend_slope: Option<AggregationResult>,
}

impl Aggregates {
    pub fn iter(&self) -> impl Iterator<Item = &AggregationResult> {
        std::iter::once(&self.overall)
            .chain(&self.groups)
            .chain(&self.events)
            .chain(std::iter::once(&self.simple))
            .chain(&self.pretrend_slope)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut AggregationResult> {
        std::iter::once(&mut self.overall)
            .chain(&mut self.groups)
            .chain(&mut self.events)
            .chain(std::iter::once(&mut self.simple))
            .chain(&mut self.pretrend_slope)
    }

    pub fn event(&self, e: i64) -> Option<&AggregationResult> {
        self.events
            .iter()
            .find(|r| r.kind == AggregationKind::Event { e })
    }

    pub fn group(&self, g: usize) -> Option<&AggregationResult> {
        self.groups
            .iter()
            .find(|r| r.kind == AggregationKind::Group { g })
    }
}

/// Group, overall, event-time (where every eligible cell exists), simple and
/// pre-trend aggregates.
pub fn aggregate_all(cells: &[GtattCell], design: &CohortDesign) -> Result<Aggregates> {
    let groups = design
        .cohorts
        .iter()
        .map(|&g| agg_group(cells, design, g))
        .collect::<Result<Vec<_>>>()?;
    let overall = agg_overall(&groups, design)?;
    let events = event_times(design)
        .into_iter()
        .map(|e| agg_event(cells, design, e))
        .collect::<Result<Vec<_>>>()?;
    let simple = agg_simple(cells, design)?;
    let pretrend_slope = match agg_pretrend_slope(cells, design) {
        Ok(r) => Some(r),
        Err(Error::NoPrePeriods) => None,
        Err(e) => return Err(e),
    };
    Ok(Aggregates {
        overall,
        groups,
        events,
        simple,
        pretrend_slope,
    })
}

/// What to estimate in each bootstrap replicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub covariates: Vec<String>,
    pub flavor: Flavor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub seed: u64,
    /// `cell_draws[c][r]`: cell `c` (table order) in replicate `r`.
    pub cell_draws: Vec<Vec<f64>>,
    /// `aggregate_draws[a][r]`, aggregates in [`Aggregates::iter`] order.
    pub aggregate_draws: Vec<Vec<f64>>,
    /// Replicates in which at least one cell or aggregate failed.
    pub failed_replicates: usize,
}

/// Units grouped by cohort, never-treated first then cohorts ascending.
fn strata(panel: &PanelDataset) -> Vec<Vec<usize>> {
    let mut keys: Vec<Cohort> = panel.cohorts().to_vec();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|k| {
            (0..panel.n_units())
                .filter(|&u| panel.cohort(u) == *k)
                .collect()
        })
        .collect()
}

/// The RNG stream of replicate `r`: ChaCha8 keyed by `seed`, stream `r`.
pub fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

/// Unit indices of bootstrap replicate `r`, resampled within cohort strata.
pub fn resample_units(panel: &PanelDataset, seed: u64, r: usize) -> Vec<usize> {
    let mut rng = replicate_rng(seed, r);
    let mut out = Vec::with_capacity(panel.n_units());
    for stratum in strata(panel) {
        for _ in 0..stratum.len() {
            out.push(stratum[rng.random_range(0..stratum.len())]);
        }
    }
    out
}

/// Stratified unit bootstrap of the full cell table and every aggregate.
///
/// Replicate `r` depends only on `(seed, r)`, so serial and parallel runs
/// give bit-identical draws.
pub fn bootstrap_inference(
    panel: &PanelDataset,
    design: &CohortDesign,
    spec: &EstimatorSpec,
    replicates: usize,
    seed: u64,
    exec: Execution,
) -> Result<BootstrapResult> {
    if replicates < MIN_REPLICATES {
        return Err(Error::TooFewReplicates {
            min: MIN_REPLICATES,
            got: replicates,
        });
    }
    panel.covariate_indices(&spec.covariates)?;
    let n_cells = design.cells().len();
    let draws: Vec<(Vec<f64>, Option<Vec<f64>>)> = map_indexed(exec, replicates, |r| {
        let sample = panel.resample(&resample_units(panel, seed, r));
        let cells = gtatt_table(
            &sample,
            design,
            &spec.covariates,
            spec.flavor,
            Execution::Serial,
        )
        .expect("covariates were resolved above");
        let cell_values: Vec<f64> = cells.iter().map(|c| c.estimate).collect();
        let aggs = aggregate_all(&cells, design)
            .ok()
            .map(|a| a.iter().map(|x| x.estimate).collect());
        (cell_values, aggs)
    });

    let n_aggs = draws
        .iter()
        .find_map(|d| d.1.as_ref().map(Vec::len))
        .unwrap_or(0);
    let mut cell_draws = vec![Vec::with_capacity(replicates); n_cells];
    let mut aggregate_draws = vec![Vec::with_capacity(replicates); n_aggs];
    let mut failed = 0;
    for (cells, aggs) in &draws {
        if aggs.is_none() || cells.iter().any(|v| !v.is_finite()) {
            failed += 1;
        }
        for (c, v) in cells.iter().enumerate() {
            cell_draws[c].push(*v);
        }
        for (a, column) in aggregate_draws.iter_mut().enumerate() {
            column.push(aggs.as_ref().map_or(f64::NAN, |x| x[a]));
        }
    }
    Ok(BootstrapResult {
        replicates,
        seed,
        cell_draws,
        aggregate_draws,
        failed_replicates: failed,
    })
}

fn percentile_interval(draws: &[f64]) -> Option<Interval> {
    let mut finite: Vec<f64> = draws.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return None;
    }
    finite.sort_by(f64::total_cmp);
    Some(Interval::new(
        quantile_sorted(&finite, 0.025),
        quantile_sorted(&finite, 0.975),
    ))
}

impl BootstrapResult {
    /// Replace influence-based standard errors with bootstrap ones and attach
    /// percentile intervals.
    pub fn apply(&self, cells: &mut [GtattCell], aggregates: &mut Aggregates) {
        for (cell, draws) in cells.iter_mut().zip(&self.cell_draws) {
            if cell.is_ok() {
                cell.set_se(std_dev(draws), SeSource::Bootstrap);
                cell.ci_percentile = percentile_interval(draws);
            }
        }
        for (agg, draws) in aggregates.iter_mut().zip(&self.aggregate_draws) {
            agg.set_se(std_dev(draws), SeSource::Bootstrap);
            agg.ci_percentile = percentile_interval(draws);
            agg.bootstrap_draws = draws.clone();
        }
    }
}

//! Parallel-trends sensitivity.
//!
//! Two procedures. The trend comparison fits a two-way fixed effects event
//! model with and without a treated-group linear trend and contrasts the
//! implied effects. The robust intervals widen an event-time confidence
//! interval by the worst-case bias over a violation budget; they are closed
//! form outer bounds and so weakly wider than optimisation-based sets, which
//! is why every grid carries the label [`CONSERVATIVE_LABEL`].

use nalgebra::DVector;
use serde::{Serialize, Serializer};

use crate::aggregate::{resample_units, Aggregates, AggregationKind};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::inference::{std_dev, Interval, Z_95};
use crate::numkit::{
    cluster_robust_vcov, ols_fit, two_way_demean, within_transform, DesignMatrix, FitResult,
};
use crate::panel::{Cohort, PanelDataset};

pub const CONSERVATIVE_LABEL: &str = "conservative variant";
const TREND: &str = "group_trend";

fn post_name(k: usize) -> String {
    format!("post_{k}")
}

/// A point estimate with a standard error and 95% normal interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Inferred {
    pub estimate: f64,
    pub se: f64,
    pub ci: Interval,
}

impl Inferred {
    pub fn new(estimate: f64, se: f64) -> Self {
        Inferred {
            estimate,
            se,
            ci: Interval::normal(estimate, se),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeriodEffect {
    pub t: usize,
    pub estimate: f64,
    pub se: f64,
}

/// Effects with and without a group-specific linear trend.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendComparison {
    pub g: usize,
    pub n_pre_periods: usize,
    /// Mean post-period effect assuming parallel trends.
    pub beta: Inferred,
    /// Mean post-period effect net of a linear trend difference.
    pub beta_prime: Inferred,
    /// Trend difference per period, identified from pre-periods.
    pub theta: Inferred,
    /// `beta - beta_prime`, standard error from a shared unit bootstrap.
    pub difference: Inferred,
    pub beta_k: Vec<PeriodEffect>,
    pub beta_prime_k: Vec<PeriodEffect>,
    pub replicates: usize,
    pub seed: u64,
}

/// Columns of the event model: post-period dummies for treated units, the
/// optional treated-group trend, then covariates.
fn event_columns(
    panel: &PanelDataset,
    treated: &[bool],
    g: usize,
    with_trend: bool,
    covariates: &[usize],
) -> Vec<(String, Vec<f64>)> {
    let n_periods = panel.n_periods();
    let cell = |f: &dyn Fn(bool, usize) -> f64| -> Vec<f64> {
        (0..panel.n_units())
            .flat_map(|u| (1..=n_periods).map(move |t| (u, t)))
            .map(|(u, t)| f(treated[u], t))
            .collect()
    };
    let mut columns: Vec<(String, Vec<f64>)> = (g..=n_periods)
        .map(|k| (post_name(k), cell(&|d, t| f64::from(d && t == k))))
        .collect();
    if with_trend {
        columns.push((
            TREND.to_string(),
            cell(&|d, t| if d { t as f64 } else { 0.0 }),
        ));
    }
    for &j in covariates {
        columns.push((
            panel.covariate_names()[j].clone(),
            panel.covariate_column(j),
        ));
    }
    columns
}

struct EventFit {
    effects: Vec<PeriodEffect>,
    mean: Inferred,
    trend: Option<Inferred>,
}

fn fit_ols(
    panel: &PanelDataset,
    g: usize,
    with_trend: bool,
    covariates: &[usize],
) -> Result<(FitResult, DesignMatrix)> {
    let treated: Vec<bool> = panel.cohorts().iter().map(|c| !c.is_never()).collect();
    let design = within_transform(
        panel,
        &event_columns(panel, &treated, g, with_trend, covariates),
    )?;
    let y = two_way_demean(panel.outcome_column(), panel.n_units(), panel.n_periods());
    Ok((ols_fit(&design, &y)?, design))
}

/// Mean post-period effect only; used inside bootstrap replicates.
fn mean_effect(
    panel: &PanelDataset,
    g: usize,
    with_trend: bool,
    covariates: &[usize],
) -> Result<f64> {
    let (fit, _) = fit_ols(panel, g, with_trend, covariates)?;
    let post = g..=panel.n_periods();
    let n = post.clone().count() as f64;
    post.map(|k| {
        fit.coefficient(&post_name(k))
            .ok_or(Error::AllColumnsDropped)
    })
    .sum::<Result<f64>>()
    .map(|s| s / n)
}

fn fit_event_model(
    panel: &PanelDataset,
    g: usize,
    with_trend: bool,
    covariates: &[usize],
) -> Result<EventFit> {
    let (fit, design) = fit_ols(panel, g, with_trend, covariates)?;
    let vcov = cluster_robust_vcov(&fit, &design)?;
    let position = |name: &str| {
        fit.names
            .iter()
            .position(|n| n == name)
            .ok_or(Error::AllColumnsDropped)
    };

    let post: Vec<usize> = (g..=panel.n_periods()).collect();
    let mut effects = Vec::with_capacity(post.len());
    let mut weights = DVector::zeros(fit.kept.len());
    for &k in &post {
        let p = position(&post_name(k))?;
        effects.push(PeriodEffect {
            t: k,
            estimate: fit.coefficients[p],
            se: vcov[(p, p)].max(0.0).sqrt(),
        });
        weights[p] = 1.0 / post.len() as f64;
    }
    let mean = effects.iter().map(|e| e.estimate).sum::<f64>() / post.len() as f64;
    let mean_var = (weights.transpose() * &vcov * &weights)[(0, 0)];
    let trend = if with_trend {
        let p = position(TREND)?;
        Some(Inferred::new(
            fit.coefficients[p],
            vcov[(p, p)].max(0.0).sqrt(),
        ))
    } else {
        None
    };
    Ok(EventFit {
        effects,
        mean: Inferred::new(mean, mean_var.max(0.0).sqrt()),
        trend,
    })
}

fn single_cohort(panel: &PanelDataset) -> Result<usize> {
    let mut cohorts: Vec<usize> = panel
        .cohorts()
        .iter()
        .filter_map(|c| match c {
            Cohort::First(g) => Some(*g),
            Cohort::Never => None,
        })
        .collect();
    cohorts.sort_unstable();
    cohorts.dedup();
    match cohorts.as_slice() {
        [] => Err(Error::NoTreated),
        [g] => Ok(*g),
        _ => Err(Error::MultipleCohorts(cohorts.len())),
    }
}

/// Compare the parallel-trends effect with the linear-trend-adjusted one on
/// a panel holding one cohort plus never-treated units (see
/// [`PanelDataset::restrict_to_cohort`]).
pub fn bh_compare(
    panel: &PanelDataset,
    covariates: &[String],
    replicates: usize,
    seed: u64,
    exec: Execution,
) -> Result<TrendComparison> {
    let g = single_cohort(panel)?;
    if g < 3 {
        return Err(Error::TooFewPrePeriods(g - 1));
    }
    if replicates < crate::aggregate::MIN_REPLICATES {
        return Err(Error::TooFewReplicates {
            min: crate::aggregate::MIN_REPLICATES,
            got: replicates,
        });
    }
    let indices = panel.covariate_indices(covariates)?;
    let plain = fit_event_model(panel, g, false, &indices)?;
    let trend = fit_event_model(panel, g, true, &indices)?;

    let draws = map_indexed(exec, replicates, |r| {
        let sample = panel.resample(&resample_units(panel, seed, r));
        match (
            mean_effect(&sample, g, false, &indices),
            mean_effect(&sample, g, true, &indices),
        ) {
            (Ok(a), Ok(b)) => a - b,
            _ => f64::NAN,
        }
    });

    Ok(TrendComparison {
        g,
        n_pre_periods: g - 1,
        beta: plain.mean,
        beta_prime: trend.mean,
        theta: trend.trend.expect("trend model carries the trend term"),
        difference: Inferred::new(plain.mean.estimate - trend.mean.estimate, std_dev(&draws)),
        beta_k: plain.effects,
        beta_prime_k: trend.effects,
        replicates,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventEstimate {
    pub e: i64,
    pub estimate: f64,
    pub se: f64,
}

/// Placebo short differences and the per-period pre-trend slope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreTrend {
    pub placebos: Vec<EventEstimate>,
    pub slope: f64,
    pub slope_se: f64,
}

impl PreTrend {
    /// Slope as the plain mean of the placebos, treating them as independent.
    pub fn from_placebos(placebos: Vec<EventEstimate>) -> Result<Self> {
        if placebos.is_empty() {
            return Err(Error::NoPrePeriods);
        }
        let n = placebos.len() as f64;
        let slope = placebos.iter().map(|p| p.estimate).sum::<f64>() / n;
        let slope_se = placebos.iter().map(|p| p.se * p.se).sum::<f64>().sqrt() / n;
        Ok(PreTrend {
            placebos,
            slope,
            slope_se,
        })
    }

    /// Placebo event-time aggregates and the pre-trend slope aggregate, whose
    /// standard error accounts for correlation between placebos.
    pub fn from_aggregates(aggregates: &Aggregates) -> Result<Self> {
        let placebos: Vec<EventEstimate> = aggregates
            .events
            .iter()
            .filter_map(event_estimate)
            .filter(|p| p.e < 0)
            .collect();
        let slope = aggregates
            .pretrend_slope
            .as_ref()
            .ok_or(Error::NoPrePeriods)?;
        if placebos.is_empty() {
            return Err(Error::NoPrePeriods);
        }
        Ok(PreTrend {
            placebos,
            slope: slope.estimate,
            slope_se: slope.se,
        })
    }

    /// Largest absolute per-period violation among the placebos.
    pub fn delta_max(&self) -> f64 {
        self.placebos
            .iter()
            .map(|p| p.estimate.abs())
            .fold(0.0, f64::max)
    }
}

fn event_estimate(r: &crate::aggregate::AggregationResult) -> Option<EventEstimate> {
    match r.kind {
        AggregationKind::Event { e } => Some(EventEstimate {
            e,
            estimate: r.estimate,
            se: r.se,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Restriction {
    /// Post violations at most `M̄` times the largest pre-period violation.
    RelativeMagnitudes,
    /// Trend difference may change slope by at most `M` per period.
    Smoothness,
}

fn serialize_breakdown<S: Serializer>(value: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if value.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustIntervalGrid {
    pub restriction: Restriction,
    pub e: i64,
    pub estimate: f64,
    pub se: f64,
    pub original_ci: Interval,
    pub budgets: Vec<f64>,
    pub intervals: Vec<Interval>,
    /// Smallest budget whose interval contains zero; infinite when no budget
    /// does.
    #[serde(serialize_with = "serialize_breakdown")]
    pub breakdown: f64,
    pub delta_max: Option<f64>,
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    pub label: &'static str,
}

fn check_grid(budgets: &[f64]) -> Result<()> {
    if budgets.iter().all(|b| b.is_finite() && *b >= 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidGrid)
    }
}

/// Robust intervals under relative magnitudes: the cumulative bias at event
/// time `e` is at most `M̄ * delta_max * (e + 1)`.
pub fn rr_relative_magnitudes(
    event: &EventEstimate,
    pre: &PreTrend,
    budgets: &[f64],
) -> Result<RobustIntervalGrid> {
    if pre.placebos.is_empty() {
        return Err(Error::NoPrePeriods);
    }
    if event.e < 0 {
        return Err(Error::InvalidGrid);
    }
    check_grid(budgets)?;
    let delta_max = pre.delta_max();
    let horizon = (event.e + 1) as f64;
    let half = Z_95 * event.se;
    let intervals = budgets
        .iter()
        .map(|&m| {
            let bias = m * delta_max * horizon;
            Interval::new(event.estimate - half - bias, event.estimate + half + bias)
        })
        .collect();
    let original_ci = Interval::normal(event.estimate, event.se);
    let breakdown = if original_ci.contains(0.0) {
        0.0
    } else if delta_max == 0.0 {
        f64::INFINITY
    } else {
        (event.estimate.abs() - half) / (delta_max * horizon)
    };
    Ok(RobustIntervalGrid {
        restriction: Restriction::RelativeMagnitudes,
        e: event.e,
        estimate: event.estimate,
        se: event.se,
        original_ci,
        budgets: budgets.to_vec(),
        intervals,
        breakdown,
        delta_max: Some(delta_max),
        slope: None,
        slope_se: None,
        label: CONSERVATIVE_LABEL,
    })
}

/// Robust intervals under smoothness: the pre-trend slope is extrapolated
/// linearly and its slope may drift by `M` per period, so the bias at event
/// time `e` lies in `s (e+1) ± M (e+1)(e+2)/2`. Slope uncertainty enters in
/// quadrature with the effect's standard error.
pub fn rr_smoothness(
    event: &EventEstimate,
    pre: &PreTrend,
    budgets: &[f64],
) -> Result<RobustIntervalGrid> {
    if pre.placebos.is_empty() {
        return Err(Error::NoPrePeriods);
    }
    if event.e < 0 {
        return Err(Error::InvalidGrid);
    }
    check_grid(budgets)?;
    let horizon = (event.e + 1) as f64;
    let spread = horizon * (horizon + 1.0) / 2.0;
    let center = event.estimate - pre.slope * horizon;
    let se_total = (event.se * event.se + horizon * horizon * pre.slope_se * pre.slope_se).sqrt();
    let half = Z_95 * se_total;
    let intervals = budgets
        .iter()
        .map(|&m| Interval::new(center - m * spread - half, center + m * spread + half))
        .collect();
    let breakdown = ((center.abs() - half) / spread).max(0.0);
    Ok(RobustIntervalGrid {
        restriction: Restriction::Smoothness,
        e: event.e,
        estimate: event.estimate,
        se: event.se,
        original_ci: Interval::normal(event.estimate, event.se),
        budgets: budgets.to_vec(),
        intervals,
        breakdown,
        delta_max: None,
        slope: Some(pre.slope),
        slope_se: Some(pre.slope_se),
        label: CONSERVATIVE_LABEL,
    })
}

/// `n` evenly spaced budgets from 0 to `max` inclusive.
pub fn budget_grid(max: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Both grids for every non-negative event time in `aggregates`.
pub fn robust_grids(
    aggregates: &Aggregates,
    m_grid: &[f64],
    mbar_grid: &[f64],
) -> Result<Vec<RobustIntervalGrid>> {
    let pre = PreTrend::from_aggregates(aggregates)?;
    let mut out = Vec::new();
    for event in aggregates
        .events
        .iter()
        .filter_map(event_estimate)
        .filter(|e| e.e >= 0)
    {
        out.push(rr_smoothness(&event, &pre, m_grid)?);
        out.push(rr_relative_magnitudes(&event, &pre, mbar_grid)?);
    }
    Ok(out)
}

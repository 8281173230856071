//! Two-way fixed effects baselines.
//!
//! Both estimators absorb unit and period effects by double demeaning and
//! report cluster-robust (by unit) standard errors with a normal reference.
//! The staggered indicator model pools every treated cell into one
//! coefficient and is biased when effects vary with time since adoption;
//! results carry that warning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{normal_p_value, Interval};
use crate::numkit::{cluster_robust_vcov, ols_fit, two_way_demean, within_transform};
use crate::panel::{Cohort, PanelDataset};

const TREATMENT: &str = "treatment";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TwfeFlavor {
    TwoByTwo,
    StaggeredIndicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwfeEstimate {
    pub flavor: TwfeFlavor,
    pub estimate: f64,
    pub se: f64,
    pub ci: Interval,
    pub p_value: f64,
    /// Covariate coefficients that survived collinearity screening.
    pub covariate_coefficients: Vec<(String, f64)>,
    pub n_units: usize,
    pub n_clusters: usize,
    /// Set for the staggered indicator model: the pooled coefficient is not
    /// a convex average of cell effects when effects are dynamic.
    pub heterogeneity_bias_warning: bool,
}

fn fit_indicator(
    panel: &PanelDataset,
    covariates: &[String],
    flavor: TwfeFlavor,
) -> Result<TwfeEstimate> {
    let indices = panel.covariate_indices(covariates)?;
    let n_periods = panel.n_periods();
    let indicator: Vec<f64> = (0..panel.n_units())
        .flat_map(|u| (1..=n_periods).map(move |t| (u, t)))
        .map(|(u, t)| f64::from(panel.treated_at(u, t)))
        .collect();
    let mut columns = vec![(TREATMENT.to_string(), indicator)];
    for (&j, name) in indices.iter().zip(covariates) {
        columns.push((name.clone(), panel.covariate_column(j)));
    }
    let design = within_transform(panel, &columns)?;
    let y = two_way_demean(panel.outcome_column(), panel.n_units(), n_periods);
    let fit = ols_fit(&design, &y)?;
    let pos = fit
        .names
        .iter()
        .position(|n| n == TREATMENT)
        .ok_or(Error::AllColumnsDropped)?;
    let vcov = cluster_robust_vcov(&fit, &design)?;
    let estimate = fit.coefficients[pos];
    let se = vcov[(pos, pos)].max(0.0).sqrt();
    Ok(TwfeEstimate {
        flavor,
        estimate,
        se,
        ci: Interval::normal(estimate, se),
        p_value: normal_p_value(estimate, se),
        covariate_coefficients: fit
            .names
            .iter()
            .zip(&fit.coefficients)
            .filter(|(n, _)| *n != TREATMENT)
            .map(|(n, b)| (n.clone(), *b))
            .collect(),
        n_units: panel.n_units(),
        n_clusters: panel.n_units(),
        heterogeneity_bias_warning: flavor == TwfeFlavor::StaggeredIndicator,
    })
}

/// Two-period, one-cohort DiD with covariates entered in both periods.
pub fn two_by_two_did(panel: &PanelDataset, covariates: &[String]) -> Result<TwfeEstimate> {
    if panel.n_periods() != 2 {
        return Err(Error::MoreThanTwoPeriods(panel.n_periods()));
    }
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
    if cohorts.len() != 1 {
        return Err(Error::MultipleCohorts(cohorts.len()));
    }
    fit_indicator(panel, covariates, TwfeFlavor::TwoByTwo)
}

/// Pooled TWFE with a single "has adopted" indicator.
pub fn staggered_twfe(panel: &PanelDataset, covariates: &[String]) -> Result<TwfeEstimate> {
    if !panel.cohorts().iter().any(|c| !c.is_never()) {
        return Err(Error::NoTreated);
    }
    fit_indicator(panel, covariates, TwfeFlavor::StaggeredIndicator)
}

/// Effect as a percentage of the estimated counterfactual mean
/// `observed_treated_mean - att`.
pub fn percent_increase(att: f64, observed_treated_mean: f64) -> Result<f64> {
    let counterfactual = observed_treated_mean - att;
    if !(counterfactual > 0.0) {
        return Err(Error::NonpositiveCounterfactual);
    }
    Ok(100.0 * att / counterfactual)
}

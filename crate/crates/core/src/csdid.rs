//! Group-time average treatment effects.
//!
//! For cohort `g` and period `t` the comparison is between the outcome change
//! of cohort `g` and that of the never-treated units, both measured from the
//! same base period (`g - 1` for post cells, `t - 1` for placebo cells), with
//! covariates frozen at the base period. Three estimators are offered:
//!
//! - outcome regression (OR): subtract a never-treated regression
//!   `m(X) = E[dY | X, never]` from each treated change;
//! - inverse probability weighting (IPW): reweight never-treated changes by
//!   the odds `p(X) / (1 - p(X))` of belonging to cohort `g`;
//! - doubly robust (DR): IPW applied to OR residuals.
//!
//! Control weights are self-normalized (Hajek), so each estimator collapses to
//! a plain difference of mean changes when there are no covariates.
//!
//! Every cell carries per-unit influence contributions `psi_i` such that
//! `estimate - truth ~ sum_i psi_i`, including the first-order effect of
//! estimating the nuisance models. They feed analytic standard errors for
//! cells and for any linear aggregate of cells.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::inference::{normal_p_value, Interval};
use crate::numkit::{logit_fit, ols_fit, DesignMatrix};
use crate::panel::{base_period, delta_slice, CohortDesign, DeltaSlice, PanelDataset};

/// Largest control propensity score the weighting estimators accept.
pub const OVERLAP_LIMIT: f64 = 1.0 - 1e-6;
pub const DEFAULT_OVERLAP_EPS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Flavor {
    Or,
    Ipw,
    #[default]
    Dr,
}

impl Flavor {
    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::Or => "OR",
            Flavor::Ipw => "IPW",
            Flavor::Dr => "DR",
        }
    }
}

impl std::str::FromStr for Flavor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "OR" => Ok(Flavor::Or),
            "IPW" => Ok(Flavor::Ipw),
            "DR" => Ok(Flavor::Dr),
            other => Err(format!("unknown estimator flavor `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeSource {
    Influence,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFlag {
    /// Propensity fit separated; the cell was estimated by outcome regression.
    DowngradedToOr,
    /// A nuisance fit needed the ridge fallback.
    RidgeFallback,
    /// The propensity IRLS hit its iteration cap.
    PscoreNotConverged,
}

impl CellFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            CellFlag::DowngradedToOr => "downgraded_to_or",
            CellFlag::RidgeFallback => "ridge_fallback",
            CellFlag::PscoreNotConverged => "pscore_not_converged",
        }
    }
}

/// Per-unit influence contributions, indexed by panel unit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Influence {
    pub units: Vec<usize>,
    pub values: Vec<f64>,
}

impl Influence {
    pub fn variance(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `dense[unit] += weight * psi_unit`
    pub fn accumulate(&self, dense: &mut [f64], weight: f64) {
        for (&u, &v) in self.units.iter().zip(&self.values) {
            dense[u] += weight * v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtattCell {
    pub g: usize,
    pub t: usize,
    /// `t - g`; negative for placebo cells.
    pub event_time: i64,
    pub base: usize,
    pub requested: Flavor,
    /// Estimator actually used (differs from `requested` after a downgrade).
    pub flavor: Flavor,
    pub estimate: f64,
    pub se: f64,
    pub ci: Interval,
    pub p_value: f64,
    pub se_source: SeSource,
    /// Percentile bootstrap interval, once bootstrap inference has run.
    pub ci_percentile: Option<Interval>,
    pub n_treated: usize,
    pub n_control: usize,
    pub influence: Influence,
    /// Fitted propensity scores of the never-treated rows, when fitted.
    pub control_pscores: Vec<f64>,
    pub flags: Vec<CellFlag>,
    /// Set when the cell could not be estimated; `estimate` is NaN then.
    pub error: Option<Error>,
}

impl GtattCell {
    pub fn is_post(&self) -> bool {
        self.t >= self.g
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none() && self.estimate.is_finite()
    }

    fn failed(g: usize, t: usize, requested: Flavor, error: Error) -> Self {
        GtattCell {
            g,
            t,
            event_time: t as i64 - g as i64,
            base: crate::panel::base_period(g, t).0,
            requested,
            flavor: requested,
            estimate: f64::NAN,
            se: f64::NAN,
            ci: Interval::new(f64::NAN, f64::NAN),
            p_value: f64::NAN,
            se_source: SeSource::Influence,
            ci_percentile: None,
            n_treated: 0,
            n_control: 0,
            influence: Influence::default(),
            control_pscores: Vec::new(),
            flags: Vec::new(),
            error: Some(error),
        }
    }

    /// Replace the standard error and dependent quantities.
    pub fn set_se(&mut self, se: f64, source: SeSource) {
        self.se = se;
        self.ci = Interval::normal(self.estimate, se);
        self.p_value = normal_p_value(self.estimate, se);
        self.se_source = source;
    }
}

/// Covariate design `(1, X_base)` for every slice row.
fn slice_design(slice: &DeltaSlice) -> DMatrix<f64> {
    let k = slice.n_covariates();
    DMatrix::from_fn(slice.len(), k + 1, |r, j| {
        if j == 0 {
            1.0
        } else {
            slice.covariate_row(r)[j - 1]
        }
    })
}

fn design_names(slice: &DeltaSlice) -> Vec<String> {
    std::iter::once("(intercept)".to_string())
        .chain(slice.covariate_names.iter().cloned())
        .collect()
}

/// `v' z_r` over the kept columns of row `r`.
fn kept_dot(z: &DMatrix<f64>, r: usize, kept: &[usize], v: &DVector<f64>) -> f64 {
    kept.iter()
        .enumerate()
        .map(|(a, &j)| v[a] * z[(r, j)])
        .sum()
}

/// `acc += s * z_r` over the kept columns of row `r`.
fn add_kept_row(acc: &mut DVector<f64>, z: &DMatrix<f64>, r: usize, kept: &[usize], s: f64) {
    for (a, &j) in kept.iter().enumerate() {
        acc[a] += s * z[(r, j)];
    }
}

/// Linear outcome-change model fitted on never-treated rows.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    pub names: Vec<String>,
    /// Columns of `(1, X)` that entered the fit.
    pub kept: Vec<usize>,
    pub coefficients: Vec<f64>,
    /// `(Z_c' Z_c)^-1` when the model was estimated from the slice.
    pub bread: Option<DMatrix<f64>>,
}

impl OutcomeModel {
    /// A fixed model with coefficients on the full `(1, X)` design.
    pub fn fixed(coefficients: Vec<f64>) -> Self {
        let p = coefficients.len();
        OutcomeModel {
            names: (0..p).map(|j| format!("z{j}")).collect(),
            kept: (0..p).collect(),
            coefficients,
            bread: None,
        }
    }

    /// `m(x)` for a covariate vector (without the intercept).
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.kept
            .iter()
            .zip(&self.coefficients)
            .map(|(&j, b)| if j == 0 { *b } else { b * x[j - 1] })
            .sum()
    }
}

/// Logistic membership model (cohort `g` vs never treated).
#[derive(Debug, Clone, PartialEq)]
pub struct PscoreModel {
    pub kept: Vec<usize>,
    pub coefficients: Vec<f64>,
    /// Fitted `p(X)` for every slice row.
    pub pscores: Vec<f64>,
    /// Inverse Fisher information when estimated from the slice.
    pub inverse_information: Option<DMatrix<f64>>,
    pub flags: Vec<CellFlag>,
}

impl PscoreModel {
    /// Fixed propensity scores for every slice row.
    pub fn fixed(pscores: Vec<f64>) -> Self {
        PscoreModel {
            kept: Vec::new(),
            coefficients: Vec::new(),
            pscores,
            inverse_information: None,
            flags: Vec::new(),
        }
    }
}

/// Both nuisance models for one cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NuisanceFit {
    pub outcome: Option<OutcomeModel>,
    pub pscore: Option<PscoreModel>,
}

pub fn fit_outcome_change(slice: &DeltaSlice) -> Result<OutcomeModel> {
    let z = slice_design(slice);
    let controls: Vec<usize> = (0..slice.len()).filter(|&r| !slice.treated[r]).collect();
    let needed = z.ncols() + 1;
    if controls.len() < needed {
        return Err(Error::InsufficientControls {
            needed,
            found: controls.len(),
        });
    }
    let zc = DMatrix::from_fn(controls.len(), z.ncols(), |i, j| z[(controls[i], j)]);
    let yc: Vec<f64> = controls.iter().map(|&r| slice.delta[r]).collect();
    let fit = ols_fit(&DesignMatrix::new(design_names(slice), zc)?, &yc)?;
    Ok(OutcomeModel {
        names: fit.names,
        kept: fit.kept,
        coefficients: fit.coefficients,
        bread: Some(fit.bread),
    })
}

pub fn fit_pscore(slice: &DeltaSlice) -> Result<PscoreModel> {
    let n_control = slice.n_control();
    if n_control == 0 {
        return Err(Error::InsufficientControls {
            needed: 1,
            found: 0,
        });
    }
    let z = slice_design(slice);
    let y: Vec<f64> = slice.treated.iter().map(|&d| f64::from(d)).collect();
    let fit = logit_fit(&DesignMatrix::new(design_names(slice), z)?, &y)?;
    let mut flags = Vec::new();
    if let Some(info) = &fit.irls {
        if info.ridge {
            flags.push(CellFlag::RidgeFallback);
        }
        if !info.converged {
            flags.push(CellFlag::PscoreNotConverged);
        }
    }
    Ok(PscoreModel {
        kept: fit.kept,
        coefficients: fit.coefficients,
        pscores: fit.fitted,
        inverse_information: Some(fit.bread),
        flags,
    })
}

struct Weights {
    /// Hajek weight per slice row (0 for treated rows).
    control: Vec<f64>,
}

fn hajek_weights(slice: &DeltaSlice, pscores: &[f64]) -> Result<Weights> {
    let mut max_p = f64::NEG_INFINITY;
    for r in 0..slice.len() {
        if !slice.treated[r] {
            max_p = max_p.max(pscores[r]);
        }
    }
    if max_p >= OVERLAP_LIMIT {
        return Err(Error::OverlapViolation { max_pscore: max_p });
    }
    let odds: Vec<f64> = (0..slice.len())
        .map(|r| {
            if slice.treated[r] {
                0.0
            } else {
                pscores[r] / (1.0 - pscores[r])
            }
        })
        .collect();
    let total: f64 = odds.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InsufficientControls {
            needed: 1,
            found: 0,
        });
    }
    Ok(Weights {
        control: odds.into_iter().map(|o| o / total).collect(),
    })
}

fn treated_mean(slice: &DeltaSlice, values: &[f64]) -> f64 {
    let (s, n) = (0..slice.len())
        .filter(|&r| slice.treated[r])
        .fold((0.0, 0usize), |(s, n), r| (s + values[r], n + 1));
    s / n as f64
}

/// `d att / d beta` contribution: `psi_j += -a' B z_j e_j` over control rows.
fn add_outcome_effect(
    psi: &mut [f64],
    slice: &DeltaSlice,
    z: &DMatrix<f64>,
    model: &OutcomeModel,
    a: &DVector<f64>,
    residuals: &[f64],
) {
    let Some(bread) = &model.bread else { return };
    let ba = bread * a;
    for r in 0..slice.len() {
        if !slice.treated[r] {
            psi[r] -= kept_dot(z, r, &model.kept, &ba) * residuals[r];
        }
    }
}

/// Propensity estimation effect: `psi_i -= g' H^-1 z_i (D_i - p_i)` with
/// `g = sum_j w_j (v_j - tau0) z_j`.
fn add_pscore_effect(
    psi: &mut [f64],
    slice: &DeltaSlice,
    z: &DMatrix<f64>,
    model: &PscoreModel,
    weights: &Weights,
    values: &[f64],
    tau0: f64,
) {
    let Some(inv) = &model.inverse_information else {
        return;
    };
    let k = model.kept.len();
    let mut grad = DVector::zeros(k);
    for r in 0..slice.len() {
        if !slice.treated[r] {
            add_kept_row(
                &mut grad,
                z,
                r,
                &model.kept,
                weights.control[r] * (values[r] - tau0),
            );
        }
    }
    let h = inv * grad;
    for r in 0..slice.len() {
        let d = f64::from(slice.treated[r]);
        psi[r] -= kept_dot(z, r, &model.kept, &h) * (d - model.pscores[r]);
    }
}

fn finish(slice: &DeltaSlice, flavor: Flavor, estimate: f64, psi: Vec<f64>) -> GtattCell {
    let influence = Influence {
        units: slice.units.clone(),
        values: psi,
    };
    let se = influence.variance().sqrt();
    GtattCell {
        g: slice.g,
        t: slice.t,
        event_time: slice.t as i64 - slice.g as i64,
        base: slice.base,
        requested: flavor,
        flavor,
        estimate,
        se,
        ci: Interval::normal(estimate, se),
        p_value: normal_p_value(estimate, se),
        se_source: SeSource::Influence,
        ci_percentile: None,
        n_treated: slice.n_treated(),
        n_control: slice.n_control(),
        influence,
        control_pscores: Vec::new(),
        flags: Vec::new(),
        error: None,
    }
}

fn check_cell(slice: &DeltaSlice) -> Result<()> {
    if slice.n_treated() == 0 || slice.n_control() == 0 {
        return Err(Error::EmptyCell {
            g: slice.g,
            t: slice.t,
        });
    }
    Ok(())
}

/// Outcome-regression ATT: mean over cohort `g` of `dY - m(X)`.
pub fn att_or(slice: &DeltaSlice, model: &OutcomeModel) -> Result<GtattCell> {
    check_cell(slice)?;
    let z = slice_design(slice);
    let n1 = slice.n_treated() as f64;
    let resid: Vec<f64> = (0..slice.len())
        .map(|r| slice.delta[r] - model.predict(slice.covariate_row(r)))
        .collect();
    let tau = treated_mean(slice, &resid);
    let mut psi: Vec<f64> = (0..slice.len())
        .map(|r| {
            if slice.treated[r] {
                (resid[r] - tau) / n1
            } else {
                0.0
            }
        })
        .collect();
    let mut zbar = DVector::zeros(model.kept.len());
    for r in (0..slice.len()).filter(|&r| slice.treated[r]) {
        add_kept_row(&mut zbar, &z, r, &model.kept, 1.0 / n1);
    }
    add_outcome_effect(&mut psi, slice, &z, model, &zbar, &resid);
    Ok(finish(slice, Flavor::Or, tau, psi))
}

/// Hajek inverse-probability-weighted ATT.
pub fn att_ipw(slice: &DeltaSlice, model: &PscoreModel) -> Result<GtattCell> {
    check_cell(slice)?;
    let weights = hajek_weights(slice, &model.pscores)?;
    let z = slice_design(slice);
    let n1 = slice.n_treated() as f64;
    let tau1 = treated_mean(slice, &slice.delta);
    let tau0: f64 = (0..slice.len())
        .map(|r| weights.control[r] * slice.delta[r])
        .sum();
    let mut psi: Vec<f64> = (0..slice.len())
        .map(|r| {
            if slice.treated[r] {
                (slice.delta[r] - tau1) / n1
            } else {
                -weights.control[r] * (slice.delta[r] - tau0)
            }
        })
        .collect();
    add_pscore_effect(&mut psi, slice, &z, model, &weights, &slice.delta, tau0);
    let mut cell = finish(slice, Flavor::Ipw, tau1 - tau0, psi);
    cell.control_pscores = control_pscores(slice, model);
    Ok(cell)
}

/// Doubly robust ATT: Hajek-weighted comparison of outcome-regression
/// residuals.
pub fn att_dr(
    slice: &DeltaSlice,
    outcome: &OutcomeModel,
    pscore: &PscoreModel,
) -> Result<GtattCell> {
    check_cell(slice)?;
    let weights = hajek_weights(slice, &pscore.pscores)?;
    let z = slice_design(slice);
    let n1 = slice.n_treated() as f64;
    let resid: Vec<f64> = (0..slice.len())
        .map(|r| slice.delta[r] - outcome.predict(slice.covariate_row(r)))
        .collect();
    let tau1 = treated_mean(slice, &resid);
    let tau0: f64 = (0..slice.len())
        .map(|r| weights.control[r] * resid[r])
        .sum();
    let mut psi: Vec<f64> = (0..slice.len())
        .map(|r| {
            if slice.treated[r] {
                (resid[r] - tau1) / n1
            } else {
                -weights.control[r] * (resid[r] - tau0)
            }
        })
        .collect();
    // d att / d beta = -(zbar_treated - zbar_weighted)
    let mut a = DVector::zeros(outcome.kept.len());
    for r in 0..slice.len() {
        let s = if slice.treated[r] {
            1.0 / n1
        } else {
            -weights.control[r]
        };
        add_kept_row(&mut a, &z, r, &outcome.kept, s);
    }
    add_outcome_effect(&mut psi, slice, &z, outcome, &a, &resid);
    add_pscore_effect(&mut psi, slice, &z, pscore, &weights, &resid, tau0);
    let mut cell = finish(slice, Flavor::Dr, tau1 - tau0, psi);
    cell.control_pscores = control_pscores(slice, pscore);
    Ok(cell)
}

fn control_pscores(slice: &DeltaSlice, model: &PscoreModel) -> Vec<f64> {
    (0..slice.len())
        .filter(|&r| !slice.treated[r])
        .map(|r| model.pscores[r])
        .collect()
}

/// Estimate one cell, recording failures in the cell instead of returning
/// them. A separated propensity fit downgrades IPW/DR to OR.
pub fn estimate_cell(
    panel: &PanelDataset,
    g: usize,
    t: usize,
    covariates: &[usize],
    flavor: Flavor,
) -> GtattCell {
    estimate_with(panel, g, t, covariates, flavor, None)
}

/// `pscore`, when given, is a propensity fit for the same cohort and base
/// period (and hence the same rows and covariates).
fn estimate_with(
    panel: &PanelDataset,
    g: usize,
    t: usize,
    covariates: &[usize],
    flavor: Flavor,
    pscore: Option<&Result<PscoreModel>>,
) -> GtattCell {
    let attempt = || -> Result<GtattCell> {
        let slice = delta_slice(panel, g, t, covariates)?;
        let fitted;
        let pscore = match flavor {
            Flavor::Or => None,
            Flavor::Ipw | Flavor::Dr => {
                let result = match pscore {
                    Some(shared) => shared,
                    None => {
                        fitted = fit_pscore(&slice);
                        &fitted
                    }
                };
                match result {
                    Ok(model) => Some(model),
                    Err(Error::SeparationDetected) => None,
                    Err(e) => return Err(e.clone()),
                }
            }
        };
        let mut cell = match (flavor, pscore) {
            (Flavor::Ipw, Some(ps)) => att_ipw(&slice, ps)?,
            (Flavor::Dr, Some(ps)) => att_dr(&slice, &fit_outcome_change(&slice)?, ps)?,
            _ => att_or(&slice, &fit_outcome_change(&slice)?)?,
        };
        cell.requested = flavor;
        if flavor != Flavor::Or && pscore.is_none() {
            cell.flags.push(CellFlag::DowngradedToOr);
        }
        if let Some(ps) = pscore {
            cell.flags.extend(ps.flags.iter().copied());
        }
        Ok(cell)
    };
    attempt().unwrap_or_else(|e| GtattCell::failed(g, t, flavor, e))
}

/// All post-treatment and placebo cells of the design, ordered by `(g, t)`.
///
/// Cells sharing a cohort and base period share one propensity fit.
pub fn gtatt_table(
    panel: &PanelDataset,
    design: &CohortDesign,
    covariates: &[String],
    flavor: Flavor,
    exec: Execution,
) -> Result<Vec<GtattCell>> {
    let indices = panel.covariate_indices(covariates)?;
    let cells = design.cells();
    if flavor == Flavor::Or {
        return Ok(map_indexed(exec, cells.len(), |i| {
            let (g, t) = cells[i];
            estimate_cell(panel, g, t, &indices, flavor)
        }));
    }
    let mut keys: Vec<(usize, usize)> = Vec::new();
    let mut key_of = Vec::with_capacity(cells.len());
    for &(g, t) in &cells {
        let key = (g, base_period(g, t).0);
        let k = keys.iter().position(|&x| x == key).unwrap_or_else(|| {
            keys.push(key);
            keys.len() - 1
        });
        key_of.push((k, t));
    }
    let pscores = map_indexed(exec, keys.len(), |k| {
        let (g, _) = keys[k];
        let t = key_of
            .iter()
            .find(|(kk, _)| *kk == k)
            .expect("every key has a cell")
            .1;
        delta_slice(panel, g, t, &indices).and_then(|slice| fit_pscore(&slice))
    });
    Ok(map_indexed(exec, cells.len(), |i| {
        let (g, t) = cells[i];
        estimate_with(panel, g, t, &indices, flavor, Some(&pscores[key_of[i].0]))
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub g: usize,
    pub t: usize,
    pub max_control_pscore: f64,
    /// Share of never-treated rows with `p > 1 - eps`.
    pub share_above: f64,
    pub flagged: bool,
}

/// Overlap diagnostic over every cell that fitted a propensity model.
pub fn overlap_report(cells: &[GtattCell], eps: f64) -> Vec<OverlapRow> {
    cells
        .iter()
        .filter(|c| !c.control_pscores.is_empty())
        .map(|c| {
            let cut = 1.0 - eps;
            let above = c.control_pscores.iter().filter(|&&p| p > cut).count();
            OverlapRow {
                g: c.g,
                t: c.t,
                max_control_pscore: c
                    .control_pscores
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max),
                share_above: above as f64 / c.control_pscores.len() as f64,
                flagged: above > 0,
            }
        })
        .collect()
}

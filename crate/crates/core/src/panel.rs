//! Balanced long-format panels, cohort layout and base-period differencing.
//!
//! A [`PanelDataset`] is built once by [`validate_panel`] and is immutable
//! afterwards. Periods are stored as `1..=T` regardless of the labels found in
//! the input; the original labels are kept in [`PanelDataset::period_labels`].
//!
//! Treatment is absorbing: a unit in cohort `g` is treated in every period
//! `t >= g`. Units that are never treated form the comparison group.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First treated period of a unit, in remapped period indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cohort {
    Never,
    First(usize),
}

impl Cohort {
    pub fn is_never(self) -> bool {
        matches!(self, Cohort::Never)
    }

    /// Treated at period `t` under absorbing adoption.
    pub fn treated_at(self, t: usize) -> bool {
        match self {
            Cohort::Never => false,
            Cohort::First(g) => t >= g,
        }
    }
}

/// One input record before validation. `cohort == None` means never treated;
/// `None` outcome or covariate values are missing and rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub unit: String,
    pub period: i64,
    pub outcome: Option<f64>,
    pub cohort: Option<i64>,
    pub covariates: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    unit_ids: Vec<String>,
    period_labels: Vec<i64>,
    cohorts: Vec<Cohort>,
    covariate_names: Vec<String>,
    // unit-major: index = unit * T + (t - 1)
    outcome: Vec<f64>,
    // index = (unit * T + (t - 1)) * k + j
    covariates: Vec<f64>,
}

/// Validate raw rows into a balanced panel.
///
/// Units are ordered by id and period labels are mapped to `1..=T` in
/// ascending order, so the result does not depend on row order.
pub fn validate_panel(rows: &[RawRow], covariate_names: &[String]) -> Result<PanelDataset> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = covariate_names.len();
    let labels: Vec<i64> = rows
        .iter()
        .map(|r| r.period)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index_of: HashMap<i64, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, i + 1))
        .collect();
    let n_periods = labels.len();

    let mut by_unit: BTreeMap<&str, Vec<&RawRow>> = BTreeMap::new();
    for row in rows {
        if row.covariates.len() != k {
            return Err(Error::CovariateArity {
                expected: k,
                found: row.covariates.len(),
            });
        }
        by_unit.entry(row.unit.as_str()).or_default().push(row);
    }

    let n_units = by_unit.len();
    let mut unit_ids = Vec::with_capacity(n_units);
    let mut cohorts = Vec::with_capacity(n_units);
    let mut outcome = vec![0.0; n_units * n_periods];
    let mut covariates = vec![0.0; n_units * n_periods * k];

    for (u, (unit, unit_rows)) in by_unit.into_iter().enumerate() {
        let cohort_label = unit_rows[0].cohort;
        if unit_rows.iter().any(|r| r.cohort != cohort_label) {
            return Err(Error::NonAbsorbing {
                unit: unit.to_string(),
            });
        }
        let mut seen = vec![false; n_periods];
        for row in &unit_rows {
            let t = index_of[&row.period];
            if std::mem::replace(&mut seen[t - 1], true) {
                return Err(Error::DuplicateObservation {
                    unit: unit.to_string(),
                    period: row.period,
                });
            }
            let missing = |column: &str| Error::MissingValue {
                unit: unit.to_string(),
                period: row.period,
                column: column.to_string(),
            };
            let y = row
                .outcome
                .filter(|v| v.is_finite())
                .ok_or_else(|| missing("outcome"))?;
            outcome[u * n_periods + t - 1] = y;
            for (j, value) in row.covariates.iter().enumerate() {
                let x = value
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| missing(&covariate_names[j]))?;
                covariates[(u * n_periods + t - 1) * k + j] = x;
            }
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(Error::Unbalanced {
                unit: unit.to_string(),
                period: labels[t],
            });
        }
        let cohort = match cohort_label {
            None => Cohort::Never,
            Some(label) => match index_of.get(&label) {
                None => {
                    return Err(Error::UnknownCohortPeriod {
                        unit: unit.to_string(),
                        label,
                    })
                }
                Some(1) => {
                    return Err(Error::CohortAtFirstPeriod {
                        unit: unit.to_string(),
                    })
                }
                Some(&g) => Cohort::First(g),
            },
        };
        unit_ids.push(unit.to_string());
        cohorts.push(cohort);
    }

    if !cohorts.iter().any(|c| c.is_never()) {
        return Err(Error::NoNeverTreated);
    }

    Ok(PanelDataset {
        unit_ids,
        period_labels: labels,
        cohorts,
        covariate_names: covariate_names.to_vec(),
        outcome,
        covariates,
    })
}

impl PanelDataset {
    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.period_labels.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    /// Original period labels; entry `t - 1` is the label of period `t`.
    pub fn period_labels(&self) -> &[i64] {
        &self.period_labels
    }

    pub fn cohorts(&self) -> &[Cohort] {
        &self.cohorts
    }

    pub fn cohort(&self, unit: usize) -> Cohort {
        self.cohorts[unit]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    /// Resolve a list of covariate names to column indices.
    pub fn covariate_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.covariate_index(n)).collect()
    }

    #[inline]
    pub fn outcome(&self, unit: usize, t: usize) -> f64 {
        self.outcome[unit * self.n_periods() + t - 1]
    }

    #[inline]
    pub fn covariate(&self, unit: usize, t: usize, j: usize) -> f64 {
        self.covariates[(unit * self.n_periods() + t - 1) * self.covariate_names.len() + j]
    }

    pub fn treated_at(&self, unit: usize, t: usize) -> bool {
        self.cohorts[unit].treated_at(t)
    }

    /// Outcomes in unit-major order (`unit * T + t - 1`).
    pub fn outcome_column(&self) -> &[f64] {
        &self.outcome
    }

    /// One covariate in unit-major order.
    pub fn covariate_column(&self, j: usize) -> Vec<f64> {
        let k = self.covariate_names.len();
        self.covariates.iter().skip(j).step_by(k).copied().collect()
    }

    /// Back to raw rows with the original period labels. Re-validating the
    /// result reproduces `self`.
    pub fn to_rows(&self) -> Vec<RawRow> {
        let n_periods = self.n_periods();
        let k = self.covariate_names.len();
        let mut rows = Vec::with_capacity(self.n_units() * n_periods);
        for (u, id) in self.unit_ids.iter().enumerate() {
            let cohort = match self.cohorts[u] {
                Cohort::Never => None,
                Cohort::First(g) => Some(self.period_labels[g - 1]),
            };
            for t in 1..=n_periods {
                rows.push(RawRow {
                    unit: id.clone(),
                    period: self.period_labels[t - 1],
                    outcome: Some(self.outcome(u, t)),
                    cohort,
                    covariates: (0..k).map(|j| Some(self.covariate(u, t, j))).collect(),
                });
            }
        }
        rows
    }

    /// Keep cohort `g` and the never-treated units.
    pub fn restrict_to_cohort(&self, g: usize) -> Result<PanelDataset> {
        let keep: Vec<usize> = (0..self.n_units())
            .filter(|&u| {
                matches!(self.cohorts[u], Cohort::Never) || self.cohorts[u] == Cohort::First(g)
            })
            .collect();
        if !keep.iter().any(|&u| self.cohorts[u] == Cohort::First(g)) {
            return Err(Error::EmptyCell { g, t: g });
        }
        Ok(self.take_units(&keep, false))
    }

    /// Keep a strictly increasing subset of periods, renumbered `1..=k`.
    ///
    /// A cohort moves to the first kept period at or after its adoption;
    /// a cohort adopting after the last kept period becomes never treated.
    pub fn select_periods(&self, periods: &[usize]) -> Result<PanelDataset> {
        let n_periods = self.n_periods();
        if periods.is_empty() {
            return Err(Error::EmptyInput);
        }
        for w in periods.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::DimensionMismatch(
                    "periods must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&t) = periods.iter().find(|&&t| t == 0 || t > n_periods) {
            return Err(Error::PeriodOutOfRange { t, last: n_periods });
        }
        let k = self.covariate_names.len();
        let m = periods.len();
        let mut cohorts = Vec::with_capacity(self.n_units());
        for (u, c) in self.cohorts.iter().enumerate() {
            cohorts.push(match *c {
                Cohort::Never => Cohort::Never,
                Cohort::First(g) => match periods.iter().position(|&t| t >= g) {
                    None => Cohort::Never,
                    Some(0) => {
                        return Err(Error::CohortAtFirstPeriod {
                            unit: self.unit_ids[u].clone(),
                        })
                    }
                    Some(i) => Cohort::First(i + 1),
                },
            });
        }
        if !cohorts.iter().any(|c| c.is_never()) {
            return Err(Error::NoNeverTreated);
        }
        let mut outcome = Vec::with_capacity(self.n_units() * m);
        let mut covariates = Vec::with_capacity(self.n_units() * m * k);
        for u in 0..self.n_units() {
            for &t in periods {
                outcome.push(self.outcome(u, t));
                covariates.extend((0..k).map(|j| self.covariate(u, t, j)));
            }
        }
        Ok(PanelDataset {
            unit_ids: self.unit_ids.clone(),
            period_labels: periods.iter().map(|&t| self.period_labels[t - 1]).collect(),
            cohorts,
            covariate_names: self.covariate_names.clone(),
            outcome,
            covariates,
        })
    }

    /// Panel made of the listed units (with repetition allowed). Repeated
    /// units get distinct ids so that the result is still a valid panel.
    pub fn resample(&self, units: &[usize]) -> PanelDataset {
        self.take_units(units, true)
    }

    fn take_units(&self, units: &[usize], relabel: bool) -> PanelDataset {
        let n_periods = self.n_periods();
        let k = self.covariate_names.len();
        let mut outcome = Vec::with_capacity(units.len() * n_periods);
        let mut covariates = Vec::with_capacity(units.len() * n_periods * k);
        for &u in units {
            outcome.extend_from_slice(&self.outcome[u * n_periods..(u + 1) * n_periods]);
            covariates
                .extend_from_slice(&self.covariates[u * n_periods * k..(u + 1) * n_periods * k]);
        }
        let unit_ids = if relabel {
            units
                .iter()
                .enumerate()
                .map(|(i, &u)| format!("{}#{}", self.unit_ids[u], i))
                .collect()
        } else {
            units.iter().map(|&u| self.unit_ids[u].clone()).collect()
        };
        PanelDataset {
            unit_ids,
            period_labels: self.period_labels.clone(),
            cohorts: units.iter().map(|&u| self.cohorts[u]).collect(),
            covariate_names: self.covariate_names.clone(),
            outcome,
            covariates,
        }
    }
}

/// Which base period a group-time cell differences against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaseRule {
    /// Post-treatment cell `t >= g`: long difference against `g - 1`.
    PostBaseGMinus1,
    /// Placebo cell `t < g`: short difference against `t - 1`.
    PreBaseTMinus1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortDesign {
    /// Treated cohorts in ascending order.
    pub cohorts: Vec<usize>,
    /// Unit count per entry of `cohorts`.
    pub cohort_sizes: Vec<usize>,
    pub n_never: usize,
    pub n_periods: usize,
}

pub fn build_cohort_design(panel: &PanelDataset) -> Result<CohortDesign> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut n_never = 0;
    for c in panel.cohorts() {
        match *c {
            Cohort::Never => n_never += 1,
            Cohort::First(g) => *counts.entry(g).or_default() += 1,
        }
    }
    if counts.is_empty() {
        return Err(Error::NoTreated);
    }
    Ok(CohortDesign {
        cohorts: counts.keys().copied().collect(),
        cohort_sizes: counts.values().copied().collect(),
        n_never,
        n_periods: panel.n_periods(),
    })
}

impl CohortDesign {
    pub fn n_treated(&self) -> usize {
        self.cohort_sizes.iter().sum()
    }

    pub fn n_units(&self) -> usize {
        self.n_treated() + self.n_never
    }

    pub fn size(&self, g: usize) -> Option<usize> {
        self.cohorts
            .iter()
            .position(|&c| c == g)
            .map(|i| self.cohort_sizes[i])
    }

    /// `P(G = g | ever treated)`.
    pub fn share(&self, g: usize) -> f64 {
        self.size(g).unwrap_or(0) as f64 / self.n_treated() as f64
    }

    pub fn base_period(&self, g: usize, t: usize) -> (usize, BaseRule) {
        base_period(g, t)
    }

    /// Every estimable `(g, t)` cell, ordered by `g` then `t`: post cells
    /// `g..=T` and placebo cells `2..g`.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.cohorts
            .iter()
            .flat_map(|&g| (2..=self.n_periods).map(move |t| (g, t)))
            .collect()
    }

    pub fn post_cells(&self) -> Vec<(usize, usize)> {
        self.cells().into_iter().filter(|&(g, t)| t >= g).collect()
    }
}

pub fn base_period(g: usize, t: usize) -> (usize, BaseRule) {
    if t >= g {
        (g - 1, BaseRule::PostBaseGMinus1)
    } else {
        (t - 1, BaseRule::PreBaseTMinus1)
    }
}

/// Outcome changes for one `(g, t)` cell over cohort `g` and the
/// never-treated units, with covariates frozen at the base period.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSlice {
    pub g: usize,
    pub t: usize,
    pub base: usize,
    pub rule: BaseRule,
    /// Panel unit index of each row.
    pub units: Vec<usize>,
    /// `Y_t - Y_base`.
    pub delta: Vec<f64>,
    pub treated: Vec<bool>,
    /// Row-major `rows x covariate_names.len()`, taken at the base period.
    pub covariates: Vec<f64>,
    pub covariate_names: Vec<String>,
}

impl DeltaSlice {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_row(&self, r: usize) -> &[f64] {
        let k = self.n_covariates();
        &self.covariates[r * k..(r + 1) * k]
    }

    pub fn n_treated(&self) -> usize {
        self.treated.iter().filter(|&&d| d).count()
    }

    pub fn n_control(&self) -> usize {
        self.len() - self.n_treated()
    }
}

/// Build the differenced slice for cell `(g, t)` using the given covariate
/// columns (indices into the panel's covariates).
pub fn delta_slice(
    panel: &PanelDataset,
    g: usize,
    t: usize,
    covariates: &[usize],
) -> Result<DeltaSlice> {
    let last = panel.n_periods();
    if t < 2 || t > last {
        return Err(Error::PeriodOutOfRange { t, last });
    }
    let (base, rule) = base_period(g, t);
    if base == t {
        return Err(Error::BaseEqualsTarget { g, t });
    }
    let k = covariates.len();
    let mut slice = DeltaSlice {
        g,
        t,
        base,
        rule,
        units: Vec::new(),
        delta: Vec::new(),
        treated: Vec::new(),
        covariates: Vec::new(),
        covariate_names: covariates
            .iter()
            .map(|&j| panel.covariate_names()[j].clone())
            .collect(),
    };
    for (u, cohort) in panel.cohorts().iter().enumerate() {
        let treated = match *cohort {
            Cohort::Never => false,
            Cohort::First(c) if c == g => true,
            Cohort::First(_) => continue,
        };
        slice.units.push(u);
        slice
            .delta
            .push(panel.outcome(u, t) - panel.outcome(u, base));
        slice.treated.push(treated);
        slice
            .covariates
            .extend(covariates.iter().map(|&j| panel.covariate(u, base, j)));
    }
    debug_assert_eq!(slice.covariates.len(), slice.len() * k);
    if slice.n_treated() == 0 {
        return Err(Error::EmptyCell { g, t });
    }
    Ok(slice)
}

//! Least squares, logistic IRLS, two-way demeaning and cluster-robust
//! sandwich covariance.
//!
//! Least squares goes through a column-by-column Householder QR so that
//! exactly collinear columns can be dropped with a fixed rule: a column is
//! dropped when the norm of what is left after projecting out the earlier
//! kept columns is below `1e-10` times its own norm. The earliest column of a
//! collinear set always survives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;

const COLLINEAR_TOL: f64 = 1e-10;
const IRLS_MAX_ITER: usize = 100;
const IRLS_SCORE_TOL: f64 = 1e-8;
const IRLS_STEP_TOL: f64 = 1e-10;
const IRLS_RIDGE: f64 = 1e-8;
const SEPARATION_PROB: f64 = 1e-10;
const SEPARATION_COEF: f64 = 1e3;

/// Parameters absorbed by a within transformation, needed for
/// degrees-of-freedom corrections.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AbsorbedEffects {
    /// All absorbed parameters (unit effects + period effects - 1).
    pub total: usize,
    /// The subset nested within clusters; these do not count against the
    /// cluster-robust small-sample factor.
    pub nested: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    names: Vec<String>,
    values: DMatrix<f64>,
    clusters: Option<Vec<usize>>,
    weights: Option<Vec<f64>>,
    absorbed: AbsorbedEffects,
}

impl DesignMatrix {
    pub fn new(names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self {
            names,
            values,
            clusters: None,
            weights: None,
            absorbed: AbsorbedEffects::default(),
        })
    }

    /// Build from named columns of equal length.
    pub fn from_columns(columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.1.len());
        if columns.iter().any(|c| c.1.len() != n) {
            return Err(Error::DimensionMismatch("columns differ in length".into()));
        }
        let p = columns.len();
        let mut values = DMatrix::zeros(n, p);
        for (j, (_, col)) in columns.iter().enumerate() {
            values.column_mut(j).copy_from_slice(col);
        }
        Self::new(columns.into_iter().map(|c| c.0).collect(), values)
    }

    pub fn with_clusters(mut self, clusters: Vec<usize>) -> Result<Self> {
        if clusters.len() != self.nrows() {
            return Err(Error::DimensionMismatch("cluster ids".into()));
        }
        self.clusters = Some(clusters);
        Ok(self)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.nrows() {
            return Err(Error::DimensionMismatch("row weights".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFiniteInput);
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn with_absorbed(mut self, absorbed: AbsorbedEffects) -> Self {
        self.absorbed = absorbed;
        self
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn clusters(&self) -> Option<&[usize]> {
        self.clusters.as_deref()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn absorbed(&self) -> AbsorbedEffects {
        self.absorbed
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlsInfo {
    pub iterations: usize,
    pub step_norm: f64,
    pub converged: bool,
    /// The weighted cross-product was singular at some iteration and a small
    /// ridge was added to the diagonal.
    pub ridge: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Names of the surviving columns, aligned with `coefficients`.
    pub names: Vec<String>,
    /// Indices of the surviving columns in the original design.
    pub kept: Vec<usize>,
    pub dropped: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Model-based covariance: `s^2 (X'WX)^-1` for least squares, inverse
    /// Fisher information for logistic fits.
    pub covariance: DMatrix<f64>,
    /// `(X'WX)^-1` over the kept columns (IRLS working weights for logit).
    pub bread: DMatrix<f64>,
    /// Response-scale residuals `y - fitted`.
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub irls: Option<IrlsInfo>,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }

    /// Linear index `x'beta` for a full-width row of the original design.
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.kept
            .iter()
            .zip(&self.coefficients)
            .map(|(&j, b)| row[j] * b)
            .sum()
    }

    pub fn n_obs(&self) -> usize {
        self.residuals.len()
    }
}

/// Incremental Householder QR that skips collinear columns.
struct PrunedQr {
    /// Kept column indices.
    kept: Vec<usize>,
    /// `k x k` upper-triangular factor for the kept columns.
    r: DMatrix<f64>,
    /// Householder vectors (full length `n`, zero above their pivot row).
    reflectors: Vec<DVector<f64>>,
}

impl PrunedQr {
    fn new(x: &DMatrix<f64>) -> Self {
        let (n, p) = x.shape();
        let mut a = x.clone();
        let mut kept = Vec::new();
        let mut reflectors: Vec<DVector<f64>> = Vec::new();
        for j in 0..p {
            let k = kept.len();
            if k >= n {
                break;
            }
            let own = x.column(j).norm();
            let rest = a.view((k, j), (n - k, 1)).norm();
            if own == 0.0 || rest <= COLLINEAR_TOL * own {
                continue;
            }
            let alpha = if a[(k, j)] >= 0.0 { -rest } else { rest };
            let mut v = DVector::zeros(n);
            for i in k..n {
                v[i] = a[(i, j)];
            }
            v[k] -= alpha;
            let vnorm2 = v.norm_squared();
            if vnorm2 > 0.0 {
                for c in j..p {
                    let dot: f64 = (k..n).map(|i| v[i] * a[(i, c)]).sum();
                    let s = 2.0 * dot / vnorm2;
                    for i in k..n {
                        a[(i, c)] -= s * v[i];
                    }
                }
            }
            reflectors.push(v);
            kept.push(j);
        }
        let k = kept.len();
        let mut r = DMatrix::zeros(k, k);
        for (col, &j) in kept.iter().enumerate() {
            for row in 0..=col {
                r[(row, col)] = a[(row, j)];
            }
        }
        Self {
            kept,
            r,
            reflectors,
        }
    }

    /// `Q' y`
    fn apply_qt(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = y.clone();
        for (k, v) in self.reflectors.iter().enumerate() {
            let vnorm2 = v.norm_squared();
            if vnorm2 == 0.0 {
                continue;
            }
            let dot: f64 = (k..out.len()).map(|i| v[i] * out[i]).sum();
            let s = 2.0 * dot / vnorm2;
            for i in k..out.len() {
                out[i] -= s * v[i];
            }
        }
        out
    }

    fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        let k = self.kept.len();
        let qty = self.apply_qt(y);
        let mut beta = DVector::zeros(k);
        for i in (0..k).rev() {
            let mut s = qty[i];
            for j in i + 1..k {
                s -= self.r[(i, j)] * beta[j];
            }
            beta[i] = s / self.r[(i, i)];
        }
        beta
    }

    /// `(R'R)^-1 = R^-1 R^-T`
    fn bread(&self) -> DMatrix<f64> {
        let k = self.kept.len();
        let mut rinv = DMatrix::zeros(k, k);
        for c in 0..k {
            rinv[(c, c)] = 1.0 / self.r[(c, c)];
            for i in (0..c).rev() {
                let mut s = 0.0;
                for j in i + 1..=c {
                    s += self.r[(i, j)] * rinv[(j, c)];
                }
                rinv[(i, c)] = -s / self.r[(i, i)];
            }
        }
        symmetrize(&rinv * rinv.transpose())
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

/// Weighted least squares by orthogonal decomposition.
pub fn ols_fit(x: &DesignMatrix, y: &[f64]) -> Result<FitResult> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} responses for {} rows",
            y.len(),
            n
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let sqrt_w: Vec<f64> = (0..n).map(|i| x.weight(i).sqrt()).collect();
    let xw = DMatrix::from_fn(n, x.ncols(), |i, j| x.values[(i, j)] * sqrt_w[i]);
    let yw = DVector::from_iterator(n, y.iter().zip(&sqrt_w).map(|(v, s)| v * s));
    let qr = PrunedQr::new(&xw);
    if qr.kept.is_empty() {
        return Err(Error::AllColumnsDropped);
    }
    let beta = qr.solve(&yw);
    let xk = select_columns(&x.values, &qr.kept);
    let fitted = &xk * &beta;
    let residuals: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    let rss: f64 = residuals
        .iter()
        .enumerate()
        .map(|(i, u)| x.weight(i) * u * u)
        .sum();
    let k = qr.kept.len();
    let df = n.saturating_sub(k + x.absorbed.total).max(1);
    let bread = qr.bread();
    let covariance = &bread * (rss / df as f64);
    Ok(FitResult {
        names: qr.kept.iter().map(|&j| x.names[j].clone()).collect(),
        dropped: (0..x.ncols())
            .filter(|j| !qr.kept.contains(j))
            .map(|j| x.names[j].clone())
            .collect(),
        kept: qr.kept,
        coefficients: beta.iter().copied().collect(),
        covariance,
        bread,
        residuals,
        fitted: fitted.iter().copied().collect(),
        irls: None,
    })
}

/// CR1 cluster-robust sandwich for a fit produced from `x`.
///
/// `V = c * B (sum_c s_c s_c') B` with `s_c = sum_{i in c} w_i x_i u_i`,
/// `B` the fit's bread and `c = C/(C-1) * (n-1)/(n-p)`, where `p` counts kept
/// columns plus absorbed effects that are not nested in clusters.
pub fn cluster_robust_vcov(fit: &FitResult, x: &DesignMatrix) -> Result<DMatrix<f64>> {
    let clusters = x.clusters().ok_or(Error::MissingClusters)?;
    let n = x.nrows();
    if fit.residuals.len() != n {
        return Err(Error::DimensionMismatch(
            "fit does not belong to this design".into(),
        ));
    }
    let k = fit.kept.len();
    let mut index = std::collections::HashMap::new();
    for &c in clusters {
        let next = index.len();
        index.entry(c).or_insert(next);
    }
    let n_clusters = index.len();
    if n_clusters < 2 {
        return Err(Error::SingleCluster);
    }
    let mut scores = DMatrix::<f64>::zeros(k, n_clusters);
    for i in 0..n {
        let c = index[&clusters[i]];
        let wu = x.weight(i) * fit.residuals[i];
        if wu == 0.0 {
            continue;
        }
        for (a, &j) in fit.kept.iter().enumerate() {
            scores[(a, c)] += x.values[(i, j)] * wu;
        }
    }
    let meat = &scores * scores.transpose();
    let p = k + x.absorbed.total - x.absorbed.nested;
    let factor = n_clusters as f64 / (n_clusters as f64 - 1.0) * (n as f64 - 1.0)
        / (n.saturating_sub(p).max(1) as f64);
    Ok(symmetrize(&fit.bread * meat * &fit.bread * factor))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_likelihood(xk: &DMatrix<f64>, beta: &DVector<f64>, y: &[f64], w: &[f64]) -> f64 {
    let eta = xk * beta;
    eta.iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &yi), &wi)| {
            // log(1 + exp(e)) computed stably
            let softplus = if e > 0.0 {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            };
            wi * (yi * e - softplus)
        })
        .sum()
}

/// Logistic regression by iteratively reweighted least squares.
pub fn logit_fit(x: &DesignMatrix, y: &[f64]) -> Result<FitResult> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} responses for {} rows",
            y.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NotBinary);
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::NoVariation);
    }
    let w: Vec<f64> = (0..n).map(|i| x.weight(i)).collect();
    let qr = PrunedQr::new(&x.values);
    if qr.kept.is_empty() {
        return Err(Error::AllColumnsDropped);
    }
    let xk = select_columns(&x.values, &qr.kept);
    let k = qr.kept.len();
    if n < k {
        return Err(Error::Underdetermined { rows: n, cols: k });
    }

    let mut beta = DVector::<f64>::zeros(k);
    let mut ll = log_likelihood(&xk, &beta, y, &w);
    let mut info = IrlsInfo {
        iterations: 0,
        step_norm: f64::NAN,
        converged: false,
        ridge: false,
    };

    for iter in 1..=IRLS_MAX_ITER {
        let probs: Vec<f64> = (&xk * &beta).iter().map(|&e| sigmoid(e)).collect();
        check_separation(&probs, y, &beta)?;
        let score = xk.tr_mul(&DVector::from_iterator(
            n,
            (0..n).map(|i| w[i] * (y[i] - probs[i])),
        ));
        if score.amax() < IRLS_SCORE_TOL {
            info.converged = true;
            break;
        }
        info.iterations = iter;
        let information = weighted_cross_product(&xk, &probs, &w);
        let mut step = match information.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => {
                info.ridge = true;
                let ridged = &information + DMatrix::identity(k, k) * IRLS_RIDGE;
                match ridged.cholesky() {
                    Some(ch) => ch.solve(&score),
                    None => return Err(Error::SeparationDetected),
                }
            }
        };
        // step halving keeps the likelihood monotone
        let mut candidate = &beta + &step;
        let mut cand_ll = log_likelihood(&xk, &candidate, y, &w);
        let mut halvings = 0;
        while cand_ll < ll - 1e-12 * ll.abs().max(1.0) && halvings < 30 {
            step *= 0.5;
            candidate = &beta + &step;
            cand_ll = log_likelihood(&xk, &candidate, y, &w);
            halvings += 1;
        }
        info.step_norm = step.norm();
        beta = candidate;
        ll = cand_ll;
        if info.step_norm <= IRLS_STEP_TOL * beta.norm().max(1e-300) {
            info.converged = true;
            break;
        }
    }

    let fitted: Vec<f64> = (&xk * &beta).iter().map(|&e| sigmoid(e)).collect();
    check_separation(&fitted, y, &beta)?;
    let information = weighted_cross_product(&xk, &fitted, &w);
    let bread = match information.clone().try_inverse() {
        Some(inv) => symmetrize(inv),
        None => {
            info.ridge = true;
            (&information + DMatrix::identity(k, k) * IRLS_RIDGE)
                .try_inverse()
                .map(symmetrize)
                .ok_or(Error::SeparationDetected)?
        }
    };
    Ok(FitResult {
        names: qr.kept.iter().map(|&j| x.names[j].clone()).collect(),
        dropped: (0..x.ncols())
            .filter(|j| !qr.kept.contains(j))
            .map(|j| x.names[j].clone())
            .collect(),
        kept: qr.kept,
        coefficients: beta.iter().copied().collect(),
        covariance: bread.clone(),
        bread,
        residuals: y.iter().zip(&fitted).map(|(a, b)| a - b).collect(),
        fitted,
        irls: Some(info),
    })
}

fn weighted_cross_product(xk: &DMatrix<f64>, probs: &[f64], w: &[f64]) -> DMatrix<f64> {
    let k = xk.ncols();
    let mut m = DMatrix::zeros(k, k);
    for b in 0..k {
        for a in 0..=b {
            let col_a = xk.column(a);
            let col_b = xk.column(b);
            let s: f64 = probs
                .iter()
                .enumerate()
                .map(|(i, p)| w[i] * p * (1.0 - p) * col_a[i] * col_b[i])
                .sum();
            m[(a, b)] = s;
            m[(b, a)] = s;
        }
    }
    m
}

fn check_separation(probs: &[f64], y: &[f64], beta: &DVector<f64>) -> Result<()> {
    if beta.iter().any(|b| b.abs() > SEPARATION_COEF) {
        return Err(Error::SeparationDetected);
    }
    let ones_pinned = y
        .iter()
        .zip(probs)
        .filter(|(&yi, _)| yi == 1.0)
        .all(|(_, &p)| p > 1.0 - SEPARATION_PROB);
    let zeros_pinned = y
        .iter()
        .zip(probs)
        .filter(|(&yi, _)| yi == 0.0)
        .all(|(_, &p)| p < SEPARATION_PROB);
    // A coefficient vector that classifies every row correctly separates
    // the classes, so no finite maximiser exists.
    let classifies_all = y
        .iter()
        .zip(probs)
        .all(|(&yi, &p)| if yi == 1.0 { p > 0.5 } else { p < 0.5 });
    if ones_pinned || zeros_pinned || classifies_all {
        return Err(Error::SeparationDetected);
    }
    Ok(())
}

/// Two-way demeaning of a unit-major `n_units x n_periods` column:
/// `x_it - mean_i - mean_t + mean`.
pub fn two_way_demean(values: &[f64], n_units: usize, n_periods: usize) -> Vec<f64> {
    assert_eq!(values.len(), n_units * n_periods);
    let mut unit_mean = vec![0.0; n_units];
    let mut period_mean = vec![0.0; n_periods];
    for u in 0..n_units {
        for t in 0..n_periods {
            let v = values[u * n_periods + t];
            unit_mean[u] += v;
            period_mean[t] += v;
        }
    }
    unit_mean.iter_mut().for_each(|m| *m /= n_periods as f64);
    period_mean.iter_mut().for_each(|m| *m /= n_units as f64);
    let grand = unit_mean.iter().sum::<f64>() / n_units as f64;
    let mut out = Vec::with_capacity(values.len());
    for u in 0..n_units {
        for t in 0..n_periods {
            out.push(values[u * n_periods + t] - unit_mean[u] - period_mean[t] + grand);
        }
    }
    // Columns that the fixed effects absorb come out as rounding noise;
    // snap them to exact zeros so the collinearity rule drops them.
    let before: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let after: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if after <= 1e-12 * before {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Within-transform named unit-major columns of a balanced panel. Rows are
/// clustered on unit; unit and period effects are recorded as absorbed.
pub fn within_transform(
    panel: &PanelDataset,
    columns: &[(String, Vec<f64>)],
) -> Result<DesignMatrix> {
    let (n_units, n_periods) = (panel.n_units(), panel.n_periods());
    let transformed = columns
        .iter()
        .map(|(name, values)| {
            if values.len() != n_units * n_periods {
                return Err(Error::DimensionMismatch(format!("column {name}")));
            }
            Ok((name.clone(), two_way_demean(values, n_units, n_periods)))
        })
        .collect::<Result<Vec<_>>>()?;
    let design = DesignMatrix::from_columns(transformed)?;
    let clusters = (0..n_units)
        .flat_map(|u| std::iter::repeat(u).take(n_periods))
        .collect();
    Ok(design
        .with_clusters(clusters)?
        .with_absorbed(AbsorbedEffects {
            total: n_units + n_periods - 1,
            nested: n_units,
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design(rows: &[&[f64]]) -> DesignMatrix {
        let p = rows[0].len();
        let values = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        DesignMatrix::new((0..p).map(|j| format!("x{j}")).collect(), values).unwrap()
    }

    fn random_design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DesignMatrix {
        let values = DMatrix::from_fn(n, p, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.random_range(-2.0..2.0)
            }
        });
        DesignMatrix::new((0..p).map(|j| format!("x{j}")).collect(), values).unwrap()
    }

    /// Normal equations with an explicit inverse; independent of the QR path.
    fn normal_equations(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
        let xtx = x.transpose() * x;
        let inv = xtx.try_inverse().unwrap();
        inv * x.transpose() * DVector::from_column_slice(y)
    }

    #[test]
    fn exact_linear_data() {
        let x = design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0]]);
        let fit = ols_fit(&x, &[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.coefficients[1], 1.0, epsilon = 1e-14);
        assert!(fit.residuals.iter().all(|u| u.abs() < 1e-14));
    }

    #[test]
    fn duplicate_column_is_dropped() {
        let x = design(&[
            &[1.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0],
            &[1.0, 2.0, 2.0],
            &[1.0, 4.0, 4.0],
        ]);
        let y = [1.0, 2.5, 2.9, 5.2];
        let fit = ols_fit(&x, &y).unwrap();
        assert_eq!(fit.dropped, vec!["x2".to_string()]);
        assert_eq!(fit.kept, vec![0, 1]);
        let base = ols_fit(
            &design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 4.0]]),
            &y,
        )
        .unwrap();
        for (a, b) in fit.coefficients.iter().zip(&base.coefficients) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ols_errors() {
        let zero = design(&[&[0.0], &[0.0]]);
        assert_eq!(
            ols_fit(&zero, &[1.0, 2.0]).unwrap_err(),
            Error::AllColumnsDropped
        );
        let x = design(&[&[1.0], &[1.0]]);
        assert_eq!(
            ols_fit(&x, &[1.0, f64::NAN]).unwrap_err(),
            Error::NonFiniteInput
        );
        assert!(
            DesignMatrix::new(vec!["a".into()], DMatrix::from_element(2, 1, f64::INFINITY))
                .is_err()
        );
    }

    #[test]
    fn matches_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_design(&mut rng, 50, 4);
        let y: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
        let fit = ols_fit(&x, &y).unwrap();
        let oracle = normal_equations(x.values(), &y);
        for (a, b) in fit.coefficients.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn weighted_fit_matches_weighted_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_design(&mut rng, 40, 3);
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w: Vec<f64> = (0..40).map(|_| rng.random_range(0.1..3.0)).collect();
        let fit = ols_fit(&x.clone().with_weights(w.clone()).unwrap(), &y).unwrap();
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w));
        let xv = x.values();
        let oracle = (xv.transpose() * &wm * xv).try_inverse().unwrap()
            * xv.transpose()
            * &wm
            * DVector::from_column_slice(&y);
        for (a, b) in fit.coefficients.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn cluster_vcov_zero_for_perfect_fit() {
        let x = design(&[&[1.0, 0.0], &[1.0, 1.0], &[1.0, 2.0], &[1.0, 5.0]])
            .with_clusters(vec![0, 0, 1, 1])
            .unwrap();
        let fit = ols_fit(&x, &[1.0, 3.0, 5.0, 11.0]).unwrap();
        let v = cluster_robust_vcov(&fit, &x).unwrap();
        assert!(v.iter().all(|e| e.abs() < 1e-20));
    }

    #[test]
    fn cluster_vcov_two_cluster_hand_case() {
        // y = [1,1,3,3], intercept only: beta = 2, u = [-1,-1,1,1]
        // scores per cluster: -2, 2 -> meat 8; bread 1/4; factor 2/1 * 3/3
        let x = design(&[&[1.0], &[1.0], &[1.0], &[1.0]])
            .with_clusters(vec![7, 7, 9, 9])
            .unwrap();
        let fit = ols_fit(&x, &[1.0, 1.0, 3.0, 3.0]).unwrap();
        let v = cluster_robust_vcov(&fit, &x).unwrap();
        assert_abs_diff_eq!(v[(0, 0)], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn singleton_clusters_reduce_to_hc() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let x = random_design(&mut rng, n, 3)
            .with_clusters((0..n).collect())
            .unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = ols_fit(&x, &y).unwrap();
        let v = cluster_robust_vcov(&fit, &x).unwrap();

        let xv = x.values();
        let inv = (xv.transpose() * xv).try_inverse().unwrap();
        let mut meat = DMatrix::zeros(3, 3);
        for i in 0..n {
            let r = xv.row(i).transpose();
            meat += &r * r.transpose() * fit.residuals[i].powi(2);
        }
        let factor = n as f64 / (n as f64 - 1.0) * (n as f64 - 1.0) / (n as f64 - 3.0);
        let hc = &inv * meat * &inv * factor;
        for (a, b) in v.iter().zip(hc.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // PSD up to rounding
        let eig = v.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > -1e-10));
    }

    #[test]
    fn cluster_vcov_errors() {
        let x = design(&[&[1.0], &[1.0], &[1.0]]);
        let fit = ols_fit(&x, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(
            cluster_robust_vcov(&fit, &x).unwrap_err(),
            Error::MissingClusters
        );
        let x = x.with_clusters(vec![1, 1, 1]).unwrap();
        assert_eq!(
            cluster_robust_vcov(&fit, &x).unwrap_err(),
            Error::SingleCluster
        );
    }

    #[test]
    fn logit_intercept_only_balanced() {
        let n = 100;
        let x = DesignMatrix::new(vec!["(intercept)".into()], DMatrix::from_element(n, 1, 1.0))
            .unwrap();
        let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let fit = logit_fit(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-12);
        assert!(fit.fitted.iter().all(|p| (p - 0.5).abs() < 1e-12));
        assert!(fit.irls.as_ref().unwrap().converged);
    }

    #[test]
    fn logit_intercept_only_matches_share() {
        let n = 37;
        let x = DesignMatrix::new(vec!["(intercept)".into()], DMatrix::from_element(n, 1, 1.0))
            .unwrap();
        let y: Vec<f64> = (0..n).map(|i| if i < 5 { 1.0 } else { 0.0 }).collect();
        let fit = logit_fit(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.fitted[0], 5.0 / 37.0, epsilon = 1e-12);
    }

    #[test]
    fn logit_detects_separation() {
        let x = design(&[
            &[1.0, -2.0],
            &[1.0, -1.0],
            &[1.0, -0.5],
            &[1.0, 0.5],
            &[1.0, 1.0],
            &[1.0, 2.0],
        ]);
        let y = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(logit_fit(&x, &y).unwrap_err(), Error::SeparationDetected);
    }

    #[test]
    fn logit_input_errors() {
        let x = design(&[&[1.0], &[1.0]]);
        assert_eq!(logit_fit(&x, &[1.0, 1.0]).unwrap_err(), Error::NoVariation);
        assert_eq!(logit_fit(&x, &[1.0, 0.5]).unwrap_err(), Error::NotBinary);
    }

    fn bernoulli_loglik(x: &DMatrix<f64>, y: &[f64], b0: f64, b1: f64) -> f64 {
        (0..y.len())
            .map(|i| {
                let p = sigmoid(b0 + b1 * x[(i, 1)]);
                y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln()
            })
            .sum()
    }

    #[test]
    fn logit_recovers_simulated_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 200;
        let values = DMatrix::from_fn(n, 2, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            }
        });
        let y: Vec<f64> = (0..n)
            .map(|i| {
                if rng.random::<f64>() < sigmoid(0.5 - 1.0 * values[(i, 1)]) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let x = DesignMatrix::new(vec!["(intercept)".into(), "x".into()], values.clone()).unwrap();
        let fit = logit_fit(&x, &y).unwrap();

        // grid-search oracle: coarse pass then two refinements
        let (mut c0, mut c1, mut step) = (0.0, 0.0, 0.05);
        let mut half = 60;
        for _ in 0..3 {
            let mut best = (f64::NEG_INFINITY, c0, c1);
            for a in -half..=half {
                for b in -half..=half {
                    let (b0, b1) = (c0 + a as f64 * step, c1 + b as f64 * step);
                    let ll = bernoulli_loglik(&values, &y, b0, b1);
                    if ll > best.0 {
                        best = (ll, b0, b1);
                    }
                }
            }
            c0 = best.1;
            c1 = best.2;
            step /= 20.0;
            half = 25;
        }
        assert_abs_diff_eq!(fit.coefficients[0], c0, epsilon = 5e-4);
        assert_abs_diff_eq!(fit.coefficients[1], c1, epsilon = 5e-4);

        let se0 = fit.covariance[(0, 0)].sqrt();
        let se1 = fit.covariance[(1, 1)].sqrt();
        assert!((fit.coefficients[0] - 0.5).abs() < 3.0 * se0);
        assert!((fit.coefficients[1] + 1.0).abs() < 3.0 * se1);

        // score equation with intercept: mean fitted probability = prevalence
        let prevalence = y.iter().sum::<f64>() / n as f64;
        let mean_p = fit.fitted.iter().sum::<f64>() / n as f64;
        assert_abs_diff_eq!(mean_p, prevalence, epsilon = 1e-8);
    }

    #[test]
    fn two_way_demeaning_hand_case() {
        // x = [[1,2],[3,5]] (units x periods)
        let out = two_way_demean(&[1.0, 2.0, 3.0, 5.0], 2, 2);
        let expect = [0.25, -0.25, -0.25, 0.25];
        for (a, b) in out.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
        assert!(two_way_demean(&[4.0; 6], 2, 3).iter().all(|&v| v == 0.0));
    }

    fn dummy_panel(
        n_units: usize,
        n_periods: usize,
        seed: u64,
    ) -> (PanelDataset, Vec<f64>, Vec<f64>) {
        use crate::panel::{validate_panel, RawRow};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for u in 0..n_units {
            for t in 1..=n_periods {
                rows.push(RawRow {
                    unit: format!("u{u}"),
                    period: t as i64,
                    outcome: Some(rng.random_range(-3.0..3.0)),
                    cohort: if u == 0 { None } else { Some(2) },
                    covariates: vec![
                        Some(rng.random_range(-1.0..1.0)),
                        Some(rng.random_range(-1.0..1.0)),
                    ],
                });
            }
        }
        let panel = validate_panel(&rows, &["a".into(), "b".into()]).unwrap();
        let x0 = panel.covariate_column(0);
        let x1 = panel.covariate_column(1);
        (panel, x0, x1)
    }

    #[test]
    fn within_estimator_matches_dummy_regression() {
        let (panel, x0, x1) = dummy_panel(5, 3, 9);
        let (n, t) = (5, 3);
        let y = panel.outcome_column().to_vec();
        let within = within_transform(
            &panel,
            &[("a".into(), x0.clone()), ("b".into(), x1.clone())],
        )
        .unwrap();
        let y_tilde = two_way_demean(&y, n, t);
        let fit = ols_fit(&within, &y_tilde).unwrap();

        // dummy-variable oracle: [a, b, unit dummies (all), period dummies 2..T]
        let p = 2 + n + (t - 1);
        let xd = DMatrix::from_fn(n * t, p, |r, c| {
            let (u, s) = (r / t, r % t);
            match c {
                0 => x0[r],
                1 => x1[r],
                c if c < 2 + n => f64::from(u == c - 2),
                c => f64::from(s == c - 2 - n + 1),
            }
        });
        let oracle = normal_equations(&xd, &y);
        assert_abs_diff_eq!(fit.coefficients[0], oracle[0], epsilon = 1e-8);
        assert_abs_diff_eq!(fit.coefficients[1], oracle[1], epsilon = 1e-8);
        for i in 0..n * t {
            let dummy_resid = y[i] - (xd.row(i) * &oracle)[0];
            assert_abs_diff_eq!(fit.residuals[i], dummy_resid, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn demeaned_margins_vanish(values in prop::collection::vec(-100.0f64..100.0, 12)) {
            let out = two_way_demean(&values, 4, 3);
            for u in 0..4 {
                let m: f64 = out[u * 3..u * 3 + 3].iter().sum::<f64>() / 3.0;
                prop_assert!(m.abs() < 1e-10);
            }
            for t in 0..3 {
                let m: f64 = (0..4).map(|u| out[u * 3 + t]).sum::<f64>() / 4.0;
                prop_assert!(m.abs() < 1e-10);
            }
        }

        #[test]
        fn ols_ignores_row_order(seed in any::<u64>(), shift in 1usize..29) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_design(&mut rng, 30, 3);
            let y: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
            let perm: Vec<usize> = (0..30).map(|i| (i + shift) % 30).collect();
            let xp = DMatrix::from_fn(30, 3, |i, j| x.values()[(perm[i], j)]);
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let a = ols_fit(&x, &y).unwrap();
            let b = ols_fit(&DesignMatrix::new(x.names().to_vec(), xp).unwrap(), &yp).unwrap();
            for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
                prop_assert!((u - v).abs() < 1e-10);
            }
        }
    }
}

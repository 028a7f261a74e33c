//! Comparison methods for feature reconstruction and prediction: principal
//! component analysis, factor analysis, per-patient polynomial trends and
//! last-value carry-forward, scored by mean absolute percentage error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Rows of features with missing cells.
pub type Table = [Vec<Option<f64>>];

/// Column means over observed cells; a column with none observed gets 0.
pub fn column_means(x: &Table, p: usize) -> Vec<f64> {
    let mut sum = vec![0.0; p];
    let mut n = vec![0usize; p];
    for row in x {
        for (j, v) in row.iter().enumerate().take(p) {
            if let Some(v) = v {
                sum[j] += v;
                n[j] += 1;
            }
        }
    }
    sum.iter().zip(&n).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect()
}

/// Replaces each missing cell with its column mean.
pub fn mean_impute(x: &Table) -> Result<DMatrix<f64>> {
    let n = x.len();
    let p = x.first().map_or(0, Vec::len);
    if n == 0 || p == 0 {
        return Err(Error::Data("empty feature table".into()));
    }
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::Data("feature rows differ in length".into()));
    }
    let means = column_means(x, p);
    Ok(DMatrix::from_fn(n, p, |i, j| x[i][j].unwrap_or(means[j])))
}

fn center(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let means = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut c = x.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (means, c)
}

/// Eigenpairs of a symmetric matrix in descending eigenvalue order.
fn sorted_eigen(s: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect::<Vec<_>>());
    (values, vectors)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaModel {
    pub means: Vec<f64>,
    /// p × k, orthonormal columns.
    pub components: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
}

/// Principal components of the mean-imputed table. Directions with
/// (numerically) zero variance are dropped, so fewer than `k` components
/// may be returned.
pub fn pca_fit(x: &Table, k: usize) -> Result<PcaModel> {
    let m = mean_impute(x)?;
    let (n, p) = m.shape();
    if n < 2 {
        return Err(Error::Data("PCA needs at least two rows".into()));
    }
    if k == 0 || k > p {
        return Err(Error::Config(format!("k = {k} must lie in 1..={p}")));
    }
    let (means, c) = center(&m);
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    let scale = cov.diagonal().max().max(0.0);
    let (values, vectors) = sorted_eigen(cov);
    let keep = values
        .iter()
        .take(k)
        .take_while(|&&v| v > 1e-12 * scale.max(f64::MIN_POSITIVE))
        .count();
    Ok(PcaModel {
        means: means.iter().copied().collect(),
        components: vectors.columns(0, keep).into_owned(),
        explained_variance: values[..keep].to_vec(),
    })
}

/// Mean plus the projection onto the retained components.
pub fn pca_reconstruct(model: &PcaModel, x: &Table) -> Result<DMatrix<f64>> {
    let m = mean_impute_with(x, &model.means)?;
    let mu = DVector::from_column_slice(&model.means);
    let mut c = m;
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let v = &model.components;
    let mut r = &c * v * v.transpose();
    for mut row in r.row_iter_mut() {
        row += mu.transpose();
    }
    Ok(r)
}

/// Imputes with supplied column means.
fn mean_impute_with(x: &Table, means: &[f64]) -> Result<DMatrix<f64>> {
    let p = means.len();
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::Data("feature rows do not match the fitted width".into()));
    }
    Ok(DMatrix::from_fn(x.len(), p, |i, j| x[i][j].unwrap_or(means[j])))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaModel {
    pub means: Vec<f64>,
    /// p × k.
    pub loadings: DMatrix<f64>,
    pub uniquenesses: Vec<f64>,
    /// Log-likelihood after each EM iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

pub const FA_MAX_ITER: usize = 1000;
pub const FA_REL_TOL: f64 = 1e-8;

fn gaussian_log_lik(n: f64, s: &DMatrix<f64>, lambda: &DMatrix<f64>, psi: &[f64]) -> f64 {
    let p = s.nrows();
    let mut sigma = lambda * lambda.transpose();
    for j in 0..p {
        sigma[(j, j)] += psi[j];
    }
    let Some(ch) = sigma.cholesky() else {
        return f64::NEG_INFINITY;
    };
    let log_det = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = (ch.inverse() * s).trace();
    -0.5 * n * (p as f64 * crate::stats::LN_2PI + log_det + trace)
}

/// Factor analysis by expectation-maximization on the mean-imputed table.
pub fn fa_fit(x: &Table, k: usize) -> Result<FaModel> {
    let m = mean_impute(x)?;
    let (n, p) = m.shape();
    if n < 2 {
        return Err(Error::Data("factor analysis needs at least two rows".into()));
    }
    if k == 0 || k > p {
        return Err(Error::Config(format!("k = {k} must lie in 1..={p}")));
    }
    let nf = n as f64;
    let (means, c) = center(&m);
    let s = c.transpose() * &c / nf;
    let floor: Vec<f64> = s.diagonal().iter().map(|v| (1e-9 * v).max(1e-12)).collect();

    // Start from the scaled leading principal directions.
    let (values, vectors) = sorted_eigen(s.clone());
    let mut lambda = DMatrix::from_fn(p, k, |i, j| vectors[(i, j)] * (0.5 * values[j].max(0.0)).sqrt());
    let mut psi: Vec<f64> = (0..p)
        .map(|j| (s[(j, j)] - lambda.row(j).norm_squared()).max(0.1 * s[(j, j)]).max(floor[j]))
        .collect();

    let mut lls = vec![gaussian_log_lik(nf, &s, &lambda, &psi)];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..FA_MAX_ITER {
        iterations += 1;
        // E-step: beta = Λᵀ Σ⁻¹ and the second moment of the factors.
        let mut sigma = &lambda * lambda.transpose();
        for j in 0..p {
            sigma[(j, j)] += psi[j];
        }
        let Some(ch) = sigma.cholesky() else {
            return Err(Error::Diagnostic("factor model covariance lost positive definiteness".into()));
        };
        let beta = ch.solve(&lambda).transpose();
        let ezz = DMatrix::identity(k, k) - &beta * &lambda + &beta * &s * beta.transpose();
        // M-step.
        let sb = &s * beta.transpose();
        let Some(ezz_inv) = ezz.try_inverse() else {
            return Err(Error::Diagnostic("factor second moment is singular".into()));
        };
        lambda = &sb * ezz_inv;
        let lbs = &lambda * sb.transpose();
        for j in 0..p {
            psi[j] = (s[(j, j)] - lbs[(j, j)]).max(floor[j]);
        }
        let ll = gaussian_log_lik(nf, &s, &lambda, &psi);
        let prev = *lls.last().expect("initial log-likelihood recorded");
        lls.push(ll);
        if ((ll - prev) / prev.abs().max(1e-300)).abs() < FA_REL_TOL {
            converged = true;
            break;
        }
    }
    // Sign convention: the largest-magnitude entry of each factor is positive.
    for mut col in lambda.column_iter_mut() {
        let big = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if big < 0.0 {
            col.neg_mut();
        }
    }
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("EM stopped after {iterations} iterations without converging"));
    }
    Ok(FaModel {
        means: means.iter().copied().collect(),
        loadings: lambda,
        uniquenesses: psi,
        log_likelihoods: lls,
        iterations,
        converged,
        warnings,
    })
}

impl FaModel {
    /// `Λ Λᵀ + diag(ψ)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut sigma = &self.loadings * self.loadings.transpose();
        for (j, u) in self.uniquenesses.iter().enumerate() {
            sigma[(j, j)] += u;
        }
        sigma
    }

    /// Posterior factor means `E[z | x]` for each row.
    pub fn factor_scores(&self, x: &Table) -> Result<DMatrix<f64>> {
        let m = mean_impute_with(x, &self.means)?;
        let ch = self
            .covariance()
            .cholesky()
            .ok_or_else(|| Error::Diagnostic("factor model covariance is not positive definite".into()))?;
        let beta = ch.solve(&self.loadings).transpose();
        let mu = DVector::from_column_slice(&self.means);
        let mut c = m;
        for mut row in c.row_iter_mut() {
            row -= mu.transpose();
        }
        Ok(c * beta.transpose())
    }
}

/// Mean plus loadings times the posterior factor means.
pub fn fa_reconstruct(model: &FaModel, x: &Table) -> Result<DMatrix<f64>> {
    let scores = model.factor_scores(x)?;
    let mut r = scores * model.loadings.transpose();
    let mu = DVector::from_column_slice(&model.means);
    for mut row in r.row_iter_mut() {
        row += mu.transpose();
    }
    Ok(r)
}

/// Least-squares polynomial coefficients, lowest order first.
pub fn poly_fit(t: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if t.len() != y.len() || t.len() <= degree {
        return Err(Error::Data(format!("{} points cannot determine a degree-{degree} fit", t.len())));
    }
    let a = DMatrix::from_fn(t.len(), degree + 1, |i, k| t[i].powi(k as i32));
    let b = DVector::from_column_slice(y);
    let coef = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Data(format!("polynomial fit failed: {e}")))?;
    Ok(coef.iter().copied().collect())
}

fn poly_eval(coef: &[f64], t: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMethod {
    Linear,
    Quadratic,
    Latest,
}

impl TrajectoryMethod {
    pub const ALL: [TrajectoryMethod; 3] = [TrajectoryMethod::Linear, TrajectoryMethod::Quadratic, TrajectoryMethod::Latest];

    pub fn label(self) -> &'static str {
        match self {
            TrajectoryMethod::Linear => "linear",
            TrajectoryMethod::Quadratic => "quadratic",
            TrajectoryMethod::Latest => "latest",
        }
    }
}

/// One scored feature cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub patient: usize,
    pub t: usize,
    pub feature: usize,
    pub predicted: f64,
    pub actual: f64,
}

/// Fits each patient's feature series on bins `< train_window` and predicts
/// every observed cell at later bins. Polynomial predictions are clipped to
/// the range of that feature over all training cells; series too short for
/// the fit, and Latest without any training value, use the training mean.
pub fn trajectory_baselines(data: &Dataset, train_window: usize, method: TrajectoryMethod) -> Result<Vec<CellPrediction>> {
    if train_window == 0 {
        return Err(Error::Config("training window must be positive".into()));
    }
    let d = data.d;
    let mut sum = vec![0.0; d];
    let mut count = vec![0usize; d];
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in &data.patients {
        for row in p.features.iter().take(train_window) {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    sum[j] += v;
                    count[j] += 1;
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
    }
    if count.iter().all(|&c| c == 0) {
        return Err(Error::Config("training window contains no observed features".into()));
    }
    let pop_mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let tau = |t: usize| t as f64 * data.delta;

    let mut out = Vec::new();
    for (i, p) in data.patients.iter().enumerate() {
        for j in 0..d {
            let (ts, ys): (Vec<f64>, Vec<f64>) = p
                .features
                .iter()
                .enumerate()
                .take(train_window)
                .filter_map(|(t, row)| row[j].map(|v| (tau(t), v)))
                .unzip();
            let coef = match method {
                TrajectoryMethod::Linear if ts.len() >= 2 => Some(poly_fit(&ts, &ys, 1)?),
                TrajectoryMethod::Quadratic if ts.len() >= 3 => Some(poly_fit(&ts, &ys, 2)?),
                _ => None,
            };
            for (t, row) in p.features.iter().enumerate().skip(train_window) {
                let Some(actual) = row[j] else { continue };
                let predicted = match (&coef, method) {
                    (Some(c), _) => poly_eval(c, tau(t)).clamp(lo[j], hi[j]),
                    (None, TrajectoryMethod::Latest) => ys.last().copied().unwrap_or(pop_mean[j]),
                    (None, _) => pop_mean[j],
                };
                out.push(CellPrediction {
                    patient: i,
                    t,
                    feature: j,
                    predicted,
                    actual,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// `None` when no cell could be scored.
    pub percent: Option<f64>,
    pub scored: usize,
    pub zero_actual: usize,
}

/// Mean absolute percentage error over cells whose feature is in `subset`
/// (all features when `None`). Cells with a zero actual value are skipped
/// and counted.
pub fn mape(cells: &[CellPrediction], subset: Option<&[usize]>) -> Mape {
    let mut total = 0.0;
    let mut scored = 0;
    let mut zero_actual = 0;
    for c in cells {
        if subset.is_some_and(|s| !s.contains(&c.feature)) {
            continue;
        }
        if c.actual == 0.0 {
            zero_actual += 1;
            continue;
        }
        total += ((c.predicted - c.actual) / c.actual).abs();
        scored += 1;
    }
    Mape {
        percent: (scored > 0).then(|| 100.0 * total / scored as f64),
        scored,
        zero_actual,
    }
}

/// Scores a reconstruction against the observed cells of `x`.
pub fn reconstruction_cells(x: &Table, recon: &DMatrix<f64>) -> Vec<CellPrediction> {
    let mut out = Vec::new();
    for (i, row) in x.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if let Some(actual) = *v {
                out.push(CellPrediction {
                    patient: i,
                    t: 0,
                    feature: j,
                    predicted: recon[(i, j)],
                    actual,
                });
            }
        }
    }
    out
}

/// Visit-level rows: the first `n_visits` visits of each patient with at
/// least that many, one row per visit. Returns the rows and the patient
/// index of each row.
pub fn visit_level_rows(data: &Dataset, n_visits: usize) -> (Vec<Vec<Option<f64>>>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    for (i, p) in data.patients.iter().enumerate() {
        let bins: Vec<usize> = p.visit_bins().take(n_visits).collect();
        if bins.len() < n_visits {
            continue;
        }
        for t in bins {
            rows.push(p.features[t].clone());
            owner.push(i);
        }
    }
    (rows, owner)
}

/// Patient-level rows: the first `n_visits` visits concatenated.
pub fn patient_level_rows(data: &Dataset, n_visits: usize) -> (Vec<Vec<Option<f64>>>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut owner = Vec::new();
    for (i, p) in data.patients.iter().enumerate() {
        let bins: Vec<usize> = p.visit_bins().take(n_visits).collect();
        if bins.len() < n_visits {
            continue;
        }
        rows.push(bins.iter().flat_map(|&t| p.features[t].iter().copied()).collect());
        owner.push(i);
    }
    (rows, owner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(rows: &[&[f64]]) -> Vec<Vec<Option<f64>>> {
        rows.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect()
    }

    #[test]
    fn mean_imputation_fills_missing() {
        let x = vec![vec![Some(1.0), None], vec![Some(3.0), Some(4.0)]];
        let m = mean_impute(&x).unwrap();
        assert_eq!(m[(0, 1)], 4.0);
    }

    #[test]
    fn constant_rows_give_no_components() {
        let x = full(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let m = pca_fit(&x, 1).unwrap();
        assert_eq!(m.components.ncols(), 0);
        let r = pca_reconstruct(&m, &x).unwrap();
        assert_eq!(r[(1, 1)], 2.0);
    }

    #[test]
    fn poly_eval_horner() {
        assert_eq!(poly_eval(&[1.0, 2.0, 3.0], 2.0), 17.0);
    }

    #[test]
    fn mape_excludes_zero_actuals() {
        let c = |p, a| CellPrediction { patient: 0, t: 0, feature: 0, predicted: p, actual: a };
        let m = mape(&[c(1.0, 0.0), c(2.0, 1.0)], None);
        assert_eq!(m.percent, Some(100.0));
        assert_eq!(m.zero_actual, 1);
        assert_eq!(mape(&[], None).percent, None);
    }
}

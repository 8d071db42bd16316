use nalgebra::{DMatrix, DVector};

use super::{EvalError, FeatureMatrix, Regressor};

/// Linear model `y = x . coefficients + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

impl Regressor for RidgeModel {
    fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Multinomial logistic model; row `k` of `weights` scores `classes[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub classes: Vec<i64>,
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub lambda: f64,
}

impl LogisticModel {
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.intercepts)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        softmax(&scores)
    }

    /// Most probable class; ties go to the first listed.
    pub fn predict_class(&self, x: &[f64]) -> i64 {
        let p = self.probabilities(x);
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        self.classes[best]
    }

    pub fn accuracy(&self, x: &FeatureMatrix, labels: &[i64]) -> f64 {
        let hits = (0..x.rows())
            .filter(|&i| self.predict_class(x.row(i)) == labels[i])
            .count();
        hits as f64 / x.rows().max(1) as f64
    }
}

/// Either probe kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeModel {
    Ridge(RidgeModel),
    Logistic(LogisticModel),
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn column_means(x: &FeatureMatrix) -> Vec<f64> {
    let mut means = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    let n = x.rows() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    means
}

/// Ridge regression with an unpenalised intercept: solves
/// `(Xc'Xc + lambda I) b = Xc'yc` on centred data.
pub fn ridge_fit(x: &FeatureMatrix, y: &[f64], lambda: f64) -> Result<RidgeModel, EvalError> {
    let (n, q) = (x.rows(), x.cols());
    if n == 0 || y.len() != n {
        return Err(EvalError::Shape(format!("{n} rows but {} targets", y.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EvalError::Shape(format!("regularisation must be >= 0, got {lambda}")));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite { row: i, col: q });
    }
    let means = column_means(x);
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, q, |i, j| x.get(i, j) - means[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut gram = xc.transpose() * &xc;
    for j in 0..q {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let chol = gram.clone().cholesky().ok_or(EvalError::Singular)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d * d), hi.max(d * d)));
    if q > 0 && lo <= hi * 1e-13 {
        return Err(EvalError::Singular);
    }
    let beta = chol.solve(&rhs);
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean - coefficients.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    Ok(RidgeModel {
        coefficients,
        intercept,
        lambda,
    })
}

/// Gradient-descent settings for [`logistic_fit_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticOptions {
    pub iterations: usize,
    pub step: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            iterations: 2000,
            step: 1.0,
        }
    }
}

pub fn logistic_fit(x: &FeatureMatrix, labels: &[i64], lambda: f64) -> Result<LogisticModel, EvalError> {
    logistic_fit_with(x, labels, lambda, LogisticOptions::default())
}

/// Multinomial logistic regression by full-batch gradient descent on the
/// mean cross-entropy plus `lambda/2 |W|^2`. Features are standardised
/// internally; the returned weights act on raw features. Starts from zero,
/// so the result is deterministic.
pub fn logistic_fit_with(
    x: &FeatureMatrix,
    labels: &[i64],
    lambda: f64,
    options: LogisticOptions,
) -> Result<LogisticModel, EvalError> {
    let (n, q) = (x.rows(), x.cols());
    if n == 0 || labels.len() != n {
        return Err(EvalError::Shape(format!("{n} rows but {} labels", labels.len())));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(EvalError::SingleClass(classes.len()));
    }
    let k = classes.len();
    let target: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("collected above"))
        .collect();

    let means = column_means(x);
    let scales: Vec<f64> = (0..q)
        .map(|j| {
            let var = (0..n).map(|i| (x.get(i, j) - means[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let z: Vec<f64> = (0..n)
        .flat_map(|i| (0..q).map(move |j| (i, j)))
        .map(|(i, j)| (x.get(i, j) - means[j]) / scales[j])
        .collect();

    let mut w = vec![0.0; k * q];
    let mut b = vec![0.0; k];
    let mut grad_w = vec![0.0; k * q];
    let mut grad_b = vec![0.0; k];
    let mut scores = vec![0.0; k];
    for _ in 0..options.iterations {
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        grad_b.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let zi = &z[i * q..(i + 1) * q];
            for c in 0..k {
                scores[c] = b[c] + w[c * q..(c + 1) * q].iter().zip(zi).map(|(a, v)| a * v).sum::<f64>();
            }
            let p = softmax(&scores);
            for c in 0..k {
                let r = p[c] - if target[i] == c { 1.0 } else { 0.0 };
                grad_b[c] += r;
                for (g, v) in grad_w[c * q..(c + 1) * q].iter_mut().zip(zi) {
                    *g += r * v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        for (wi, gi) in w.iter_mut().zip(&grad_w) {
            *wi -= options.step * (gi * inv + lambda * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&grad_b) {
            *bi -= options.step * gi * inv;
        }
    }

    let weights: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..q).map(|j| w[c * q + j] / scales[j]).collect())
        .collect();
    let intercepts = (0..k)
        .map(|c| b[c] - (0..q).map(|j| w[c * q + j] * means[j] / scales[j]).sum::<f64>())
        .collect();
    Ok(LogisticModel {
        classes,
        weights,
        intercepts,
        lambda,
    })
}

pub fn mse(predictions: &[f64], targets: &[f64]) -> f64 {
    predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / targets.len().max(1) as f64
}

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::folds::stratified_assignment;
use super::{FittedModel, LearnerSpec, Task};
use crate::error::{Error, Result};
use crate::rng;

const PGD_MAX_ITER: usize = 20_000;
const PGD_TOL: f64 = 1e-15;

/// Convex combination of candidate learners chosen by cross-validated squared error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleFit {
    pub task: Task,
    pub candidates: Vec<LearnerSpec>,
    /// Simplex weights, one per candidate; failed candidates get 0.
    pub weights: Vec<f64>,
    /// Cross-validated weighted MSE per candidate (`NaN` for failures).
    pub cv_risk: Vec<f64>,
    pub ensemble_cv_risk: f64,
    #[serde(skip)]
    pub models: Vec<Option<FittedModel>>,
    pub failures: Vec<(usize, String)>,
}

impl EnsembleFit {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let mut out = Array1::zeros(x.nrows());
        for (w, m) in self.weights.iter().zip(&self.models) {
            if *w > 0.0 {
                if let Some(m) = m {
                    out.scaled_add(*w, &m.predict(x));
                }
            }
        }
        out
    }
}

/// Weighted mean squared error of the combination `preds · alpha`.
pub fn simplex_objective(preds: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>, alpha: &[f64]) -> f64 {
    let total: f64 = w.sum();
    let mut s = 0.0;
    for (i, row) in preds.axis_iter(Axis(0)).enumerate() {
        let fit: f64 = row.iter().zip(alpha).map(|(p, a)| p * a).sum();
        s += w[i] * (y[i] - fit).powi(2);
    }
    s / total
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &mut [f64]) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Minimizes weighted squared error over the probability simplex by
/// accelerated projected gradient descent, then keeps the best of that
/// solution and the simplex vertices.
pub fn simplex_weights(preds: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, w: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
    let (n, l) = preds.dim();
    if l == 0 {
        return Err(Error::invalid("simplex weights need at least one column"));
    }
    if y.len() != n || w.len() != n {
        return Err(Error::invalid("simplex weights: dimension mismatch"));
    }
    let total: f64 = w.sum();
    if !(total > 0.0) {
        return Err(Error::invalid("simplex weights: zero total weight"));
    }
    if l == 1 {
        return Ok(vec![1.0]);
    }
    // quadratic form f(α) = αᵀQα − 2bᵀα + c
    let mut q = DMatrix::<f64>::zeros(l, l);
    let mut b = DVector::<f64>::zeros(l);
    for i in 0..n {
        let wi = w[i] / total;
        for r in 0..l {
            b[r] += wi * preds[[i, r]] * y[i];
            for c in 0..=r {
                q[(r, c)] += wi * preds[[i, r]] * preds[[i, c]];
            }
        }
    }
    for r in 0..l {
        for c in 0..r {
            q[(c, r)] = q[(r, c)];
        }
    }
    let lmax = SymmetricEigen::new(q.clone()).eigenvalues.max().max(0.0);
    let objective = |a: &DVector<f64>| (a.transpose() * &q * a)[0] - 2.0 * b.dot(a);

    let mut alpha = DVector::from_element(l, 1.0 / l as f64);
    if lmax > 0.0 {
        let step = 1.0 / (2.0 * lmax);
        let mut y_k = alpha.clone();
        let mut t = 1.0f64;
        let mut f_alpha = objective(&alpha);
        for _ in 0..PGD_MAX_ITER {
            let grad = 2.0 * (&q * &y_k - &b);
            let mut next: Vec<f64> = (&y_k - step * grad).iter().copied().collect();
            project_simplex(&mut next);
            let next = DVector::from_vec(next);
            let f_next = objective(&next);
            if f_next > f_alpha && t > 1.0 {
                // restart momentum when the accelerated step goes uphill
                y_k = alpha.clone();
                t = 1.0;
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let delta = (&next - &alpha).amax();
            y_k = &next + ((t - 1.0) / t_next) * (&next - &alpha);
            alpha = next;
            f_alpha = f_next;
            t = t_next;
            if delta <= PGD_TOL {
                break;
            }
        }
    }
    let mut best: Vec<f64> = alpha.iter().copied().collect();
    let mut best_obj = simplex_objective(preds, y, w, &best);
    for k in 0..l {
        let mut e = vec![0.0; l];
        e[k] = 1.0;
        let f = simplex_objective(preds, y, w, &e);
        if f < best_obj {
            best_obj = f;
            best = e;
        }
    }
    Ok(best)
}

fn select_rows(x: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

fn select_vec(v: ArrayView1<'_, f64>, rows: &[usize]) -> Array1<f64> {
    rows.iter().map(|&i| v[i]).collect()
}

/// Cross-validated convex stacking over `candidates`.
///
/// Candidates that fail in any inner fold get weight zero and are recorded.
/// With fewer than two rows no cross-validation is possible and the first
/// candidate that fits receives all weight.
pub fn fit_superlearner(
    task: Task,
    candidates: &[LearnerSpec],
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    w: ArrayView1<'_, f64>,
    inner_folds: usize,
    seed: u64,
) -> Result<EnsembleFit> {
    if candidates.is_empty() {
        return Err(Error::config("superlearner needs at least one candidate"));
    }
    if inner_folds < 2 {
        return Err(Error::config("superlearner needs at least 2 inner folds"));
    }
    let n = y.len();
    if x.nrows() != n || w.len() != n {
        return Err(Error::invalid("superlearner: dimension mismatch"));
    }
    let l = candidates.len();
    let mut failures: Vec<(usize, String)> = Vec::new();

    let v = inner_folds.min(n);
    let mut cv_pred = Array2::<f64>::zeros((n, l));
    let mut ok = vec![true; l];
    if v >= 2 {
        let strata: Vec<usize> = match task {
            Task::Binary => y.iter().map(|&v| usize::from(v > 0.5)).collect(),
            Task::RegressionNonneg => vec![0; n],
        };
        let mut r = rng::stream(seed, &[0x5EED]);
        let fold_of = stratified_assignment(&strata, v, &mut r);
        for fold in 0..v {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
            if test.is_empty() {
                continue;
            }
            let (xt, yt, wt) = (select_rows(x, &train), select_vec(y, &train), select_vec(w, &train));
            let xv = select_rows(x, &test);
            for (c, spec) in candidates.iter().enumerate() {
                if !ok[c] {
                    continue;
                }
                match spec.fit(task, xt.view(), yt.view(), wt.view()) {
                    Ok(m) => {
                        let p = m.predict(xv.view());
                        for (t, &i) in test.iter().enumerate() {
                            cv_pred[[i, c]] = p[t];
                        }
                    }
                    Err(e) => {
                        ok[c] = false;
                        failures.push((c, format!("inner fold {fold}: {e}")));
                    }
                }
            }
        }
    }

    let mut models: Vec<Option<FittedModel>> = vec![None; l];
    for (c, spec) in candidates.iter().enumerate() {
        if !ok[c] {
            continue;
        }
        match spec.fit(task, x, y, w) {
            Ok(m) => models[c] = Some(m),
            Err(e) => {
                ok[c] = false;
                failures.push((c, format!("full refit: {e}")));
            }
        }
    }
    let active: Vec<usize> = (0..l).filter(|&c| ok[c]).collect();
    if active.is_empty() {
        return Err(Error::numerical(format!("every candidate learner failed: {failures:?}")));
    }

    let mut weights = vec![0.0; l];
    let mut cv_risk = vec![f64::NAN; l];
    let ensemble_cv_risk;
    if v >= 2 {
        let sub = cv_pred.select(Axis(1), &active);
        for (k, &c) in active.iter().enumerate() {
            let mut e = vec![0.0; active.len()];
            e[k] = 1.0;
            cv_risk[c] = simplex_objective(sub.view(), y, w, &e);
        }
        let alpha = simplex_weights(sub.view(), y, w)?;
        ensemble_cv_risk = simplex_objective(sub.view(), y, w, &alpha);
        for (k, &c) in active.iter().enumerate() {
            weights[c] = alpha[k];
        }
    } else {
        weights[active[0]] = 1.0;
        for &c in &active {
            cv_risk[c] = 0.0;
        }
        ensemble_cv_risk = 0.0;
    }
    Ok(EnsembleFit { task, candidates: candidates.to_vec(), weights, cv_risk, ensemble_cv_risk, models, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_lands_on_simplex() {
        let mut v = vec![0.5, 2.0, -1.0, 0.3];
        project_simplex(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|x| *x >= 0.0));
        assert_eq!(v, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn exact_column_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 80;
        let y: Array1<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let p = Array2::from_shape_fn((n, 3), |(i, c)| if c == 1 { y[i] } else { rng.random_range(0.0..3.0) });
        let a = simplex_weights(p.view(), y.view(), Array1::ones(n).view()).unwrap();
        assert!((a[1] - 1.0).abs() <= 1e-6, "{a:?}");
    }

    #[test]
    fn duplicate_columns_tie() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50;
        let y: Array1<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let col: Vec<f64> = (0..n).map(|i| y[i] + rng.random_range(-0.5..0.5)).collect();
        let p = Array2::from_shape_fn((n, 2), |(i, _)| col[i]);
        let w = Array1::ones(n);
        let a = simplex_weights(p.view(), y.view(), w.view()).unwrap();
        let single = simplex_objective(p.view(), y.view(), w.view(), &[1.0, 0.0]);
        assert!((simplex_objective(p.view(), y.view(), w.view(), &a) - single).abs() <= 1e-12);
    }

    #[test]
    fn matches_grid_search_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let y: Array1<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let p = Array2::from_shape_fn((n, 3), |(i, c)| y[i] * (0.5 + 0.3 * c as f64) + rng.random_range(-0.3..0.3));
        let w: Array1<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let a = simplex_weights(p.view(), y.view(), w.view()).unwrap();
        let got = simplex_objective(p.view(), y.view(), w.view(), &a);
        let mut grid_best = f64::INFINITY;
        for i in 0..=100 {
            for j in 0..=(100 - i) {
                let alpha = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
                grid_best = grid_best.min(simplex_objective(p.view(), y.view(), w.view(), &alpha));
            }
        }
        assert!(got <= grid_best + 1e-6, "pgd {got} grid {grid_best}");
        assert!(grid_best - got <= 1e-3, "pgd {got} grid {grid_best}");
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12 && a.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn single_candidate_has_unit_weight() {
        let n = 30;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let y = Array1::from_iter((0..n).map(|i| (i % 4) as f64));
        let fit = fit_superlearner(Task::RegressionNonneg, &[LearnerSpec::SampleMean], x.view(), y.view(), Array1::ones(n).view(), 5, 1).unwrap();
        assert_eq!(fit.weights, vec![1.0]);
    }

    #[test]
    fn recovers_log_linear_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 500;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let y: Array1<f64> = (0..n).map(|i| (1.0f64 + 0.8 * x[[i, 0]] - 0.5 * x[[i, 1]]).exp()).collect();
        let fit = fit_superlearner(
            Task::RegressionNonneg,
            &LearnerSpec::default_regression_menu(),
            x.view(),
            y.view(),
            Array1::ones(n).view(),
            5,
            4,
        )
        .unwrap();
        assert!(fit.weights[1] >= 0.9, "{:?}", fit.weights);
        let min_single = fit.cv_risk.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(fit.ensemble_cv_risk <= min_single + 1e-8);
    }

    #[test]
    fn failing_candidate_gets_zero_weight() {
        // duplicated column makes the unpenalized GLM singular
        let n = 40;
        let x = Array2::from_shape_fn((n, 2), |(i, _)| (i % 7) as f64);
        let y = Array1::from_iter((0..n).map(|i| 1.0 + (i % 3) as f64));
        let fit = fit_superlearner(
            Task::RegressionNonneg,
            &[LearnerSpec::SampleMean, LearnerSpec::GlmLogLink],
            x.view(),
            y.view(),
            Array1::ones(n).view(),
            5,
            0,
        )
        .unwrap();
        assert_eq!(fit.weights, vec![1.0, 0.0]);
        assert!(!fit.failures.is_empty());
    }
}

//! Weighted Poisson-log and Bernoulli-logit GLMs with offsets and ridge
//! penalty, solved by Newton/IRLS with step-halving, plus the one-parameter
//! fluctuation solvers used for targeting.
//!
//! Every fit includes an unpenalized intercept as coefficient 0; `design`
//! holds the remaining columns only.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Cap on coefficient magnitude (linear-predictor scale) for degenerate likelihoods.
pub const COEF_CAP: f64 = 40.0;
pub const MAX_ITER: usize = 100;
pub const SCORE_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 30;
const ETA_MAX: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Poisson,
    Logistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_score_norm: f64,
    /// Penalized objective after each accepted iteration, starting with the initial value.
    pub objective_trace: Vec<f64>,
}

impl GlmFit {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.coefficients[0] + row.iter().zip(&self.coefficients[1..]).map(|(x, b)| x * b).sum::<f64>()
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct Problem<'a> {
    family: Family,
    design: ArrayView2<'a, f64>,
    y: ArrayView1<'a, f64>,
    weights: ArrayView1<'a, f64>,
    offset: ArrayView1<'a, f64>,
    ridge: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.design.ncols() + 1
    }

    fn eta(&self, i: usize, beta: &[f64]) -> f64 {
        let row = self.design.row(i);
        let mut e = self.offset[i] + beta[0];
        for (x, b) in row.iter().zip(&beta[1..]) {
            e += x * b;
        }
        e.min(ETA_MAX)
    }

    fn objective(&self, beta: &[f64]) -> f64 {
        let mut f = 0.0;
        for i in 0..self.y.len() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let eta = self.eta(i, beta);
            f += w * match self.family {
                Family::Poisson => eta.exp() - self.y[i] * eta,
                Family::Logistic => softplus(eta) - self.y[i] * eta,
            };
        }
        f + 0.5 * self.ridge * beta[1..].iter().map(|b| b * b).sum::<f64>()
    }

    /// Gradient and Hessian of the penalized objective.
    fn derivatives(&self, beta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        let mut xi = vec![0.0; d];
        xi[0] = 1.0;
        for i in 0..self.y.len() {
            let w = self.weights[i];
            if w == 0.0 {
                continue;
            }
            let eta = self.eta(i, beta);
            let (mu, var) = match self.family {
                Family::Poisson => {
                    let m = eta.exp();
                    (m, m)
                }
                Family::Logistic => {
                    let p = expit(eta);
                    (p, p * (1.0 - p))
                }
            };
            for (k, x) in self.design.row(i).iter().enumerate() {
                xi[k + 1] = *x;
            }
            let r = w * (mu - self.y[i]);
            let h = w * var;
            for a in 0..d {
                grad[a] += r * xi[a];
                for b in 0..=a {
                    hess[(a, b)] += h * xi[a] * xi[b];
                }
            }
        }
        for a in 1..d {
            grad[a] += self.ridge * beta[a];
            hess[(a, a)] += self.ridge;
        }
        for a in 0..d {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        (grad, hess)
    }
}

fn check_inputs(p: &Problem<'_>) -> Result<f64> {
    let n = p.y.len();
    if p.design.nrows() != n || p.weights.len() != n || p.offset.len() != n {
        return Err(Error::invalid("glm: dimension mismatch"));
    }
    if !(p.ridge >= 0.0 && p.ridge.is_finite()) {
        return Err(Error::invalid("glm: ridge must be finite and nonnegative"));
    }
    if p.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("glm: weights must be finite and nonnegative"));
    }
    if p.y.iter().any(|v| !v.is_finite()) || p.offset.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("glm: non-finite response or offset"));
    }
    if p.design.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("glm: non-finite design entry"));
    }
    let total: f64 = p.weights.sum();
    if total <= 0.0 {
        return Err(Error::invalid("glm: total weight must be positive"));
    }
    Ok(total)
}

/// Rejects designs whose weighted Gram matrix (with intercept and ridge) is
/// numerically rank deficient.
fn check_rank(p: &Problem<'_>) -> Result<()> {
    let d = p.dim();
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut xi = vec![1.0; d];
    for i in 0..p.y.len() {
        let w = p.weights[i];
        if w == 0.0 {
            continue;
        }
        for (k, x) in p.design.row(i).iter().enumerate() {
            xi[k + 1] = *x;
        }
        for a in 0..d {
            for b in 0..d {
                gram[(a, b)] += w * xi[a] * xi[b];
            }
        }
    }
    for a in 1..d {
        gram[(a, a)] += p.ridge;
    }
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-12 * hi) {
        return Err(Error::numerical("glm: singular working system (rank-deficient design)"));
    }
    Ok(())
}

/// Newton direction, damped when the curvature vanishes (fitted
/// probabilities or means collapsing towards the boundary).
fn newton_step(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let scale = hess.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut damping = 0.0;
    loop {
        let mut h = hess.clone();
        for a in 0..h.nrows() {
            h[(a, a)] += damping;
        }
        if let Some(chol) = h.cholesky() {
            return chol.solve(&(-grad));
        }
        damping = if damping == 0.0 { 1e-12 * scale.max(1e-300) } else { damping * 100.0 };
        if !damping.is_finite() {
            return -grad;
        }
    }
}

fn fit(p: Problem<'_>) -> Result<GlmFit> {
    let total_weight = check_inputs(&p)?;
    check_rank(&p)?;
    let d = p.dim();
    let tol = SCORE_TOL * total_weight;

    // start at the intercept-only root ignoring offsets, which is finite unless the response is degenerate
    let ybar = p.y.iter().zip(p.weights.iter()).map(|(y, w)| y * w).sum::<f64>() / total_weight;
    let mut beta = vec![0.0; d];
    beta[0] = match p.family {
        Family::Poisson => ybar.max(1e-300).ln(),
        Family::Logistic => logit(ybar.clamp(1e-12, 1.0 - 1e-12)),
    }
    .clamp(-COEF_CAP, COEF_CAP);
    if p.offset.iter().any(|&o| o != 0.0) {
        beta[0] = 0.0;
    }

    let mut obj = p.objective(&beta);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut score_norm = f64::INFINITY;

    while iterations < MAX_ITER {
        let (grad, hess) = p.derivatives(&beta);
        score_norm = grad.norm();
        let step = newton_step(&hess, &grad);
        let step_max = step.amax();
        let beta_max = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if score_norm <= tol && step_max <= 1e-6 * (1.0 + beta_max) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| (b + t * s).clamp(-COEF_CAP, COEF_CAP))
                .collect();
            let f = p.objective(&cand);
            // tolerate rounding-level increases so Newton can finish polishing the score
            if f <= obj + 16.0 * f64::EPSILON * (obj.abs() + 1.0) {
                accepted = Some((cand, f));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, f)) = accepted else {
            // no descent possible at working precision
            break;
        };
        let moved = cand.iter().zip(&beta).any(|(a, b)| a != b);
        let at_cap = cand.iter().any(|b| b.abs() >= COEF_CAP);
        beta = cand;
        obj = f;
        trace.push(obj);
        if !moved {
            break;
        }
        if at_cap {
            let (g2, _) = p.derivatives(&beta);
            // pinned against the cap with the gradient still pushing outward
            let pushing = beta
                .iter()
                .zip(g2.iter())
                .any(|(b, g)| (*b >= COEF_CAP && *g < 0.0) || (*b <= -COEF_CAP && *g > 0.0));
            if pushing {
                score_norm = g2.norm();
                break;
            }
        }
    }
    if !converged {
        let (grad, _) = p.derivatives(&beta);
        score_norm = grad.norm();
    }
    let capped = beta.iter().any(|b| b.abs() >= COEF_CAP);
    Ok(GlmFit {
        coefficients: beta,
        converged: converged && !capped,
        iterations,
        final_score_norm: score_norm,
        objective_trace: trace,
    })
}

/// Weighted Poisson regression with log link, offset and ridge on non-intercept coefficients.
pub fn fit_weighted_poisson(
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    weights: ArrayView1<'_, f64>,
    offset: ArrayView1<'_, f64>,
    ridge: f64,
) -> Result<GlmFit> {
    if y.iter().any(|v| *v < 0.0) {
        return Err(Error::invalid("poisson glm: response must be nonnegative"));
    }
    fit(Problem { family: Family::Poisson, design, y, weights, offset, ridge })
}

/// Weighted logistic regression with offset and ridge on non-intercept coefficients.
pub fn fit_weighted_logistic(
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    weights: ArrayView1<'_, f64>,
    offset: ArrayView1<'_, f64>,
    ridge: f64,
) -> Result<GlmFit> {
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::invalid("logistic glm: response must be 0/1"));
    }
    fit(Problem { family: Family::Logistic, design, y, weights, offset, ridge })
}

/// Penalized objective of a weighted GLM, exposed for external gradient checks.
pub fn glm_objective(
    family: Family,
    design: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    weights: ArrayView1<'_, f64>,
    offset: ArrayView1<'_, f64>,
    ridge: f64,
    beta: &[f64],
) -> f64 {
    Problem { family, design, y, weights, offset, ridge }.objective(beta)
}

/// Exact root `exp(β) = Σ wᵢyᵢ / Σ wᵢmᵢ` of the intercept-only Poisson score with offset `log mᵢ`.
pub fn solve_fluct_poisson(y: &[f64], offset_mean: &[f64], weights: &[f64]) -> Result<f64> {
    if y.len() != offset_mean.len() || y.len() != weights.len() {
        return Err(Error::invalid("fluctuation: dimension mismatch"));
    }
    let num: f64 = y.iter().zip(weights).map(|(y, w)| w * y).sum();
    let den: f64 = offset_mean.iter().zip(weights).map(|(m, w)| w * m).sum();
    if !(den > 0.0) || !den.is_finite() || !num.is_finite() {
        return Err(Error::numerical("fluctuation undefined: zero weighted offset mean"));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticFluct {
    pub beta: f64,
    /// Response degenerate under the weights; `beta` sits at `±COEF_CAP`.
    pub capped: bool,
}

/// Root in `β` of `Σ wᵢ (yᵢ − expit(oᵢ + β)) = 0` by safeguarded Newton.
pub fn solve_fluct_logistic(y: &[f64], offset_logit: &[f64], weights: &[f64]) -> Result<LogisticFluct> {
    if y.len() != offset_logit.len() || y.len() != weights.len() {
        return Err(Error::invalid("fluctuation: dimension mismatch"));
    }
    if offset_logit.iter().any(|o| !o.is_finite()) || weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("fluctuation: non-finite offset or invalid weight"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::numerical("fluctuation undefined: zero total weight"));
    }
    let wy: f64 = y.iter().zip(weights).map(|(y, w)| w * y).sum();
    if wy <= 0.0 {
        return Ok(LogisticFluct { beta: -COEF_CAP, capped: true });
    }
    if wy >= total {
        return Ok(LogisticFluct { beta: COEF_CAP, capped: true });
    }
    let score = |b: f64| -> (f64, f64) {
        let mut s = 0.0;
        let mut h = 0.0;
        for ((y, o), w) in y.iter().zip(offset_logit).zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let p = expit(o + b);
            s += w * (y - p);
            h += w * p * (1.0 - p);
        }
        (s, h)
    };
    let (mut lo, mut hi) = (-2.0 * COEF_CAP, 2.0 * COEF_CAP);
    let mut b = 0.0;
    let mut best = (f64::INFINITY, 0.0);
    let tol = SCORE_TOL * total;
    let mut polish = 0;
    for _ in 0..200 {
        let (s, h) = score(b);
        if s.abs() < best.0 {
            best = (s.abs(), b);
        }
        if s.abs() <= tol {
            // a few extra Newton steps drive the score to working precision
            polish += 1;
            if polish > 3 || s == 0.0 {
                break;
            }
        }
        if s > 0.0 {
            lo = b;
        } else {
            hi = b;
        }
        let mut next = if h > 0.0 { b + s / h } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == b {
            break;
        }
        b = next;
    }
    let beta = best.1;
    if best.0 > tol {
        return Err(Error::numerical(format!("logistic fluctuation did not converge (|score| = {:.3e})", best.0)));
    }
    let capped = beta.abs() >= COEF_CAP;
    Ok(LogisticFluct { beta: beta.clamp(-COEF_CAP, COEF_CAP), capped })
}

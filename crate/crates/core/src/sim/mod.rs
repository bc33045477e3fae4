//! Simulation of preferentially sampled, zero-inflated multivariate outcomes
//! with a known covariate-adjusted fold-difference, plus replicate studies.

pub mod quadrature;
pub mod study;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::centering::{center_value, CenteringSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::{FoldAssignment, NuisanceFits};
use crate::pipeline::EstimateOptions;
use crate::rng;

pub use quadrature::{gauss_legendre, integrate, Quadrature};
pub use study::{run_study, run_study_with, CategorySummary, MethodSummary, NuisanceSource, ReplicateRecord, SimMethod, SimReport};

/// Shape parameters of the Beta covariate law.
pub const X_SHAPE: (f64, f64) = (0.7, 1.0);
/// Relative tolerance on every truth integral.
pub const QUAD_TOL: f64 = 1e-8;

const STREAM_PERMUTATIONS: u64 = 0x9E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MeanKind {
    /// Log-linear mean, whose covariate effect cancels in the fold-difference.
    #[default]
    #[serde(rename = "gamma_A")]
    GammaA,
    /// Log-nonlinear mean with an exposure-covariate interaction.
    #[serde(rename = "gamma_B")]
    GammaB,
}

impl fmt::Display for MeanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeanKind::GammaA => "gamma_A",
            MeanKind::GammaB => "gamma_B",
        })
    }
}

impl FromStr for MeanKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "gamma_a" | "a" => Ok(MeanKind::GammaA),
            "gamma_b" | "b" => Ok(MeanKind::GammaB),
            other => Err(Error::config(format!("unknown mean function '{other}' (expected gamma_A or gamma_B)"))),
        }
    }
}

impl MeanKind {
    /// γ_j(a, x) for the 1-based category index `j` out of `jn`.
    pub fn gamma(self, j: usize, jn: usize, a: u8, x: f64) -> f64 {
        let (jf, jnf, af) = (j as f64, jn as f64, f64::from(a));
        match self {
            MeanKind::GammaA => {
                (5.0 + 0.5 * jf.ln() + af * 2.0 * (2.0 * jf / jnf).ln() - 0.5 * (jf / jnf).ln() * x).exp()
            }
            MeanKind::GammaB => {
                ((1.0 + 5.0 * jf / jnf) + af * (x * 2.0 * jf / jnf).exp() - (PI * (x + jf / jnf)).sin()).exp()
            }
        }
    }
}

/// P(A = 1 | X = x).
pub fn propensity(x: f64) -> f64 {
    0.95 * ((6.0 * (x - 0.3)).atan() / PI + 0.5) + 0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub j: usize,
    pub mean_kind: MeanKind,
    /// Negative binomial size of the nonzero part.
    pub nb_size: f64,
    /// Endpoints of the equally spaced grid of nonzero probabilities.
    pub sparsity_grid: (f64, f64),
    /// Uniform bounds of S, indexed by arm.
    pub s_bounds: [(f64, f64); 2],
    pub e_shape: f64,
    pub seed: u64,
    pub replicates: usize,
    /// Draw the sparsity and efficiency permutations once per study rather
    /// than once per replicate.
    pub fix_permutations: bool,
    /// Fitting settings; estimand, method, centering and seed are set per
    /// replicate by the study.
    pub estimator: EstimateOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            j: 11,
            mean_kind: MeanKind::GammaA,
            nb_size: 2.0,
            sparsity_grid: (0.1, 0.9),
            s_bounds: [(0.1, 0.4), (0.0, 0.3)],
            e_shape: 20.0,
            seed: 1,
            replicates: 300,
            fix_permutations: false,
            estimator: EstimateOptions::default(),
        }
    }
}

impl SimConfig {
    /// The larger setting: 51 categories and 500 replicates.
    pub fn full_scale(mean_kind: MeanKind) -> Self {
        Self { j: 51, replicates: 500, mean_kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config(format!("n must be at least 2, got {}", self.n)));
        }
        if self.j < 1 {
            return Err(Error::config("J must be at least 1"));
        }
        let (lo, hi) = self.sparsity_grid;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("sparsity grid [{lo}, {hi}] must be ordered within (0, 1]")));
        }
        for (a, (lo, hi)) in self.s_bounds.iter().enumerate() {
            if !(*lo >= 0.0 && lo <= hi && *hi > 0.0 && hi.is_finite()) {
                return Err(Error::config(format!("S bounds for arm {a} must satisfy 0 <= lo <= hi, hi > 0")));
            }
        }
        if !(self.nb_size > 0.0 && self.nb_size.is_finite()) {
            return Err(Error::config("negative binomial size must be positive"));
        }
        if !(self.e_shape > 0.0 && self.e_shape.is_finite()) {
            return Err(Error::config("efficiency shape must be positive"));
        }
        Ok(())
    }

    /// E[S | A = a].
    pub fn s_mean(&self, a: u8) -> f64 {
        let (lo, hi) = self.s_bounds[usize::from(a)];
        0.5 * (lo + hi)
    }

    /// Equally spaced nonzero probabilities before permutation.
    pub fn sparsity_levels(&self) -> Vec<f64> {
        let (lo, hi) = self.sparsity_grid;
        if self.j == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..self.j).map(|k| lo + (hi - lo) * k as f64 / (self.j - 1) as f64).collect()
    }

    /// Rate of the Gamma law of E_j given its efficiency rank `jt` in 1..=J.
    pub fn e_rate(&self, jt: usize) -> f64 {
        let jn = self.j as f64;
        if self.j == 1 {
            return self.e_shape;
        }
        self.e_shape * (jn / (jn + 1.0 - jt as f64)).powf(4.0 / jn.ln())
    }
}

/// Unobserved quantities behind one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDraw {
    pub v: Array2<u64>,
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    /// Nonzero probability p_j of each category.
    pub p: Vec<f64>,
    /// Efficiency rank of each category, 1-based.
    pub j_tilde: Vec<usize>,
}

impl LatentDraw {
    /// W = V ∘ (S ⊗ E).
    pub fn observed(&self) -> Array2<f64> {
        Array2::from_shape_fn(self.v.dim(), |(i, j)| self.v[[i, j]] as f64 * self.s[i] * self.e[j])
    }
}

fn permutations(cfg: &SimConfig, rng: &mut impl Rng) -> (Vec<f64>, Vec<usize>) {
    let mut p = cfg.sparsity_levels();
    p.shuffle(rng);
    let mut jt: Vec<usize> = (1..=cfg.j).collect();
    jt.shuffle(rng);
    (p, jt)
}

/// Seed for replicate `r` of a study.
pub fn replicate_seed(cfg: &SimConfig, r: usize) -> u64 {
    rng::derive_seed(cfg.seed, &[r as u64, 0])
}

/// Draws one dataset. With `fix_permutations` the p_j and efficiency ranks
/// come from the study seed instead of the replicate seed.
pub fn draw_dataset(cfg: &SimConfig, replicate_seed: u64) -> Result<(Dataset, LatentDraw)> {
    cfg.validate()?;
    let (n, jn) = (cfg.n, cfg.j);
    let mut rng = rng::stream(replicate_seed, &[]);
    let (p, j_tilde) = if cfg.fix_permutations {
        permutations(cfg, &mut rng::stream(cfg.seed, &[STREAM_PERMUTATIONS]))
    } else {
        permutations(cfg, &mut rng)
    };
    let e: Vec<f64> = j_tilde
        .iter()
        .map(|&jt| Gamma::new(cfg.e_shape, 1.0 / cfg.e_rate(jt)).map(|g| g.sample(&mut rng)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|err| Error::numerical(format!("efficiency law: {err}")))?;

    let beta = Beta::new(X_SHAPE.0, X_SHAPE.1).map_err(|err| Error::numerical(err.to_string()))?;
    let x: Vec<f64> = (0..n).map(|_| beta.sample(&mut rng)).collect();
    let a: Vec<u8> = x.iter().map(|&xi| u8::from(rng.random::<f64>() < propensity(xi))).collect();
    let s: Vec<f64> = a
        .iter()
        .map(|&ai| {
            let (lo, hi) = cfg.s_bounds[usize::from(ai)];
            lo + (hi - lo) * rng.random::<f64>()
        })
        .collect();

    let mut v = Array2::<u64>::zeros((n, jn));
    for i in 0..n {
        for j in 0..jn {
            if rng.random::<f64>() >= p[j] {
                continue;
            }
            let mean = cfg.mean_kind.gamma(j + 1, jn, a[i], x[i]) / p[j];
            let lambda = Gamma::new(cfg.nb_size, mean / cfg.nb_size)
                .map_err(|err| Error::numerical(format!("count law: {err}")))?
                .sample(&mut rng);
            if lambda > 0.0 {
                let k: f64 = Poisson::new(lambda).map_err(|err| Error::numerical(format!("count law: {err}")))?.sample(&mut rng);
                v[[i, j]] = k as u64;
            }
        }
    }

    let latent = LatentDraw { v, s, e, p, j_tilde };
    let w = latent.observed();
    let d = Dataset::with_labels(
        w,
        a,
        Array2::from_shape_vec((n, 1), x).expect("n x 1"),
        (1..=jn).map(|k| format!("c{k}")).collect(),
        (1..=n).map(|k| format!("s{k}")).collect(),
        vec!["x".to_string()],
    )?;
    Ok((d, latent))
}

/// True conditional nuisances of a drawn dataset: the propensity, the
/// probability of a positive outcome and the mean given positive.
pub fn oracle_nuisances(cfg: &SimConfig, d: &Dataset, latent: &LatentDraw, folds: FoldAssignment) -> Result<NuisanceFits> {
    let (n, jn) = (d.n(), d.n_categories());
    let x = d.covariates().column(0).to_owned();
    let pi = x.mapv(propensity);
    let mut q = [Array2::zeros((n, jn)), Array2::zeros((n, jn))];
    let mut m = [Array2::zeros((n, jn)), Array2::zeros((n, jn))];
    for a in 0..2u8 {
        let k = usize::from(a);
        for i in 0..n {
            for j in 0..jn {
                let (mu, qij) = oracle_point(cfg, latent, j, a, x[i]);
                q[k][[i, j]] = qij;
                m[k][[i, j]] = mu / qij;
            }
        }
    }
    NuisanceFits::from_parts(folds, pi, q, m)
}

/// (E[W_j | A=a, X=x], P(W_j > 0 | A=a, X=x)) given the replicate's E_j.
pub fn oracle_point(cfg: &SimConfig, latent: &LatentDraw, j: usize, a: u8, x: f64) -> (f64, f64) {
    let g = cfg.mean_kind.gamma(j + 1, cfg.j, a, x);
    let p = latent.p[j];
    let r = cfg.nb_size;
    let zero_nb = (r / (r + g / p)).powf(r);
    let mut q = p * (1.0 - zero_nb);
    // S = 0 has probability zero unless the arm's bounds collapse to 0
    if cfg.s_bounds[usize::from(a)].1 <= 0.0 {
        q = 0.0;
    }
    (g * cfg.s_mean(a) * latent.e[j], q)
}

/// True parameter values, computed by quadrature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    /// Unadjusted log fold-difference of the latent V.
    pub psi1_v: Vec<f64>,
    /// Adjusted log fold-difference (identical for V and, up to the constant
    /// log E[S|1]/E[S|0], for W).
    pub psi2: Vec<f64>,
    pub psi2g: Vec<f64>,
    pub psi1g: Vec<f64>,
    /// log E[S|A=1] / E[S|A=0], the offset between latent and observed scales.
    pub log_s_ratio: f64,
    pub centering: CenteringSpec,
    pub max_rel_error: f64,
    pub max_panels: usize,
}

impl TrueParams {
    /// Unadjusted target on the observed scale.
    pub fn psi1_observed(&self) -> Vec<f64> {
        self.psi1_v.iter().map(|v| v + self.log_s_ratio).collect()
    }

    /// Adjusted target on the observed scale.
    pub fn psi2_observed(&self) -> Vec<f64> {
        self.psi2.iter().map(|v| v + self.log_s_ratio).collect()
    }
}

/// ∫₀¹ h(x) f_X(x) dx with x = t¹⁰, which turns the Beta(0.7, 1) density
/// into the smooth weight 7t⁶.
pub fn beta_expectation<F: Fn(f64) -> f64>(h: F) -> Result<Quadrature> {
    let c = X_SHAPE.0 * 10.0;
    let pow = c - 1.0;
    integrate(|t: f64| h(t.powi(10)) * c * t.powf(pow), 0.0, 1.0, QUAD_TOL)
}

/// True parameters of the configured mean function, centered with `g`.
pub fn true_psi(cfg: &SimConfig, g: &CenteringSpec) -> Result<TrueParams> {
    cfg.validate()?;
    let mk = cfg.mean_kind;
    let jn = cfg.j;
    let mut rel = 0.0f64;
    let mut panels = 0usize;
    let mut track = |q: Quadrature| {
        rel = rel.max(q.rel_error);
        panels = panels.max(q.panels);
        q.value
    };
    let arm_prob = [beta_expectation(|x| 1.0 - propensity(x))?, beta_expectation(propensity)?];
    let p_arm = [track(arm_prob[0]), track(arm_prob[1])];
    let mut psi1_v = Vec::with_capacity(jn);
    let mut psi2 = Vec::with_capacity(jn);
    for j in 1..=jn {
        let g0 = track(beta_expectation(|x| mk.gamma(j, jn, 0, x))?);
        let g1 = track(beta_expectation(|x| mk.gamma(j, jn, 1, x))?);
        psi2.push((g1 / g0).ln());
        let h0 = track(beta_expectation(|x| mk.gamma(j, jn, 0, x) * (1.0 - propensity(x)))?) / p_arm[0];
        let h1 = track(beta_expectation(|x| mk.gamma(j, jn, 1, x) * propensity(x))?) / p_arm[1];
        psi1_v.push((h1 / h0).ln());
    }
    let center = |v: &[f64]| -> Result<Vec<f64>> {
        let c = center_value(g, v)?;
        Ok(v.iter().map(|x| x - c).collect())
    };
    Ok(TrueParams {
        psi2g: center(&psi2)?,
        psi1g: center(&psi1_v)?,
        psi1_v,
        psi2,
        log_s_ratio: (cfg.s_mean(1) / cfg.s_mean(0)).ln(),
        centering: *g,
        max_rel_error: rel,
        max_panels: panels,
    })
}

/// Covariates of a drawn dataset as a vector.
pub fn covariate(d: &Dataset) -> Array1<f64> {
    d.covariates().column(0).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centering::CenteringSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_a_truth_is_analytic() {
        let cfg = SimConfig { j: 51, ..SimConfig::default() };
        let t = true_psi(&cfg, &CenteringSpec::Mean).unwrap();
        for (k, v) in t.psi2.iter().enumerate() {
            let j = (k + 1) as f64;
            assert!((v - 2.0 * (2.0 * j / 51.0).ln()).abs() <= 1e-8, "j={}", k + 1);
        }
        assert!((t.psi2[50] - 1.3862943611198906).abs() < 1e-8);
        assert!((t.psi2[25] - 0.0388).abs() < 1e-4);
        assert!(t.max_rel_error <= QUAD_TOL);
        assert!(t.psi2g.iter().sum::<f64>().abs() < 1e-10);
        assert!((t.log_s_ratio - 0.6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn centered_truth_ignores_arm_scale() {
        // scaling γ_j(a, ·) by c_a for every j shifts each Ψ_j by log(c_1/c_0)
        let cfg = SimConfig { j: 7, mean_kind: MeanKind::GammaB, ..SimConfig::default() };
        let g = CenteringSpec::SmoothedMedian { eps: 0.1 };
        let t = true_psi(&cfg, &g).unwrap();
        let c = [2.0, 5.0];
        let scaled: Vec<f64> = (1..=7)
            .map(|j| {
                let e = |a: u8| beta_expectation(|x| c[usize::from(a)] * MeanKind::GammaB.gamma(j, 7, a, x)).unwrap().value;
                (e(1) / e(0)).ln()
            })
            .collect();
        let shift = center_value(&g, &scaled).unwrap();
        for (k, v) in scaled.iter().enumerate() {
            assert!((v - t.psi2[k] - 2.5f64.ln()).abs() < 1e-10);
            assert!((v - shift - t.psi2g[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn beta_density_integrates_to_one() {
        let q = beta_expectation(|_| 1.0).unwrap();
        assert!((q.value - 1.0).abs() < 1e-14);
        let m = beta_expectation(|x| x).unwrap();
        assert!((m.value - 0.7 / 1.7).abs() < 1e-14);
    }

    #[test]
    fn gamma_b_truth_matches_monte_carlo() {
        let cfg = SimConfig { j: 5, mean_kind: MeanKind::GammaB, ..SimConfig::default() };
        let t = true_psi(&cfg, &CenteringSpec::None).unwrap();
        let beta = Beta::new(0.7, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 10_000_000;
        let j = 3;
        let (mut s0, mut s1, mut ss0, mut ss1, mut s01) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..draws {
            let x = beta.sample(&mut rng);
            let (a, b) = (MeanKind::GammaB.gamma(j, 5, 0, x), MeanKind::GammaB.gamma(j, 5, 1, x));
            s0 += a;
            s1 += b;
            ss0 += a * a;
            ss1 += b * b;
            s01 += a * b;
        }
        let nf = draws as f64;
        let (m0, m1) = (s0 / nf, s1 / nf);
        let (v0, v1, c01) = (ss0 / nf - m0 * m0, ss1 / nf - m1 * m1, s01 / nf - m0 * m1);
        // delta method for log(m1 / m0)
        let se = ((v1 / (m1 * m1) + v0 / (m0 * m0) - 2.0 * c01 / (m0 * m1)) / nf).sqrt();
        let mc = (m1 / m0).ln();
        assert!((mc - t.psi2[j - 1]).abs() <= 3.0 * se, "mc {mc} quad {} se {se}", t.psi2[j - 1]);
    }

    #[test]
    fn draw_is_deterministic_and_consistent() {
        let cfg = SimConfig { n: 50, j: 6, ..SimConfig::default() };
        let (d1, l1) = draw_dataset(&cfg, 7).unwrap();
        let (d2, l2) = draw_dataset(&cfg, 7).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(d1.outcomes(), d2.outcomes());
        assert_eq!(d1.outcomes(), l1.observed().view());
        let (_, l3) = draw_dataset(&cfg, 8).unwrap();
        assert_ne!(l1.v, l3.v);
        let mut p = l1.p.clone();
        p.sort_by(f64::total_cmp);
        assert_eq!(p, cfg.sparsity_levels());
    }

    #[test]
    fn fixed_permutations_are_shared() {
        let cfg = SimConfig { n: 20, j: 8, fix_permutations: true, ..SimConfig::default() };
        let (_, a) = draw_dataset(&cfg, 1).unwrap();
        let (_, b) = draw_dataset(&cfg, 2).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.j_tilde, b.j_tilde);
    }

    #[test]
    fn efficiency_range_is_about_fifty_five() {
        let cfg = SimConfig { j: 51, ..SimConfig::default() };
        let means: Vec<f64> = (1..=51).map(|jt| cfg.e_shape / cfg.e_rate(jt)).collect();
        let ratio = means.iter().copied().fold(f64::MIN, f64::max) / means.iter().copied().fold(f64::MAX, f64::min);
        assert!((ratio - 4f64.exp()).abs() < 1e-9);
        assert!((ratio - 55.0).abs() < 0.5);
    }

    #[test]
    fn sample_scale_ratio() {
        let cfg = SimConfig { n: 200_000, j: 1, ..SimConfig::default() };
        let (d, l) = draw_dataset(&cfg, 3).unwrap();
        let mut sums = [0.0; 2];
        let mut counts = [0.0; 2];
        for (s, &a) in l.s.iter().zip(d.exposure()) {
            sums[usize::from(a)] += s;
            counts[usize::from(a)] += 1.0;
        }
        let ratio = (sums[1] / counts[1]) / (sums[0] / counts[0]);
        assert!((ratio - 0.6).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn latent_mean_matches_gamma() {
        // E[V_j | A=a] = E[γ_j(a, X) | A=a] by the zero-inflated mean identity
        let cfg = SimConfig { n: 400_000, j: 3, ..SimConfig::default() };
        let (d, l) = draw_dataset(&cfg, 11).unwrap();
        let x = covariate(&d);
        for j in 0..3 {
            for arm in 0..2u8 {
                let rows: Vec<usize> = (0..d.n()).filter(|&i| d.exposure()[i] == arm).collect();
                let nf = rows.len() as f64;
                let v: Vec<f64> = rows.iter().map(|&i| l.v[[i, j]] as f64).collect();
                let g: Vec<f64> = rows.iter().map(|&i| MeanKind::GammaA.gamma(j + 1, 3, arm, x[i])).collect();
                let diff: Vec<f64> = v.iter().zip(&g).map(|(a, b)| a - b).collect();
                let md = diff.iter().sum::<f64>() / nf;
                let sd = (diff.iter().map(|z| (z - md).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
                assert!(md.abs() <= 4.0 * sd / nf.sqrt(), "j={j} a={arm} diff {md} se {}", sd / nf.sqrt());
            }
        }
    }

    #[test]
    fn oracle_presence_matches_frequency() {
        let cfg = SimConfig { n: 100_000, j: 2, ..SimConfig::default() };
        let (d, l) = draw_dataset(&cfg, 5).unwrap();
        let folds = crate::learners::make_folds(d.n(), 2, d.exposure(), 0).unwrap();
        let o = oracle_nuisances(&cfg, &d, &l, folds).unwrap();
        for j in 0..2 {
            let obs = d.outcome_column(j).iter().filter(|v| **v > 0.0).count() as f64 / d.n() as f64;
            let pred: f64 = (0..d.n()).map(|i| o.presence[usize::from(d.exposure()[i])][[i, j]]).sum::<f64>() / d.n() as f64;
            assert!((obs - pred).abs() < 0.01, "{obs} vs {pred}");
        }
    }
}

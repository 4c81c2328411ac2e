//! Synthetic designs 1–6 and the Monte Carlo replication engine.
//!
//! Designs 1–3 draw a continuous response from a varying-coefficient linear
//! model; designs 4–6 reuse their covariates with a logistic treatment and a
//! quadratic outcome. Every replication owns a ChaCha stream keyed by
//! `(seed, rep_index)`, so datasets do not depend on thread count or order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::data::{Column, Dataset, Role};
use crate::dependence::{DependenceConfig, Reference};
use crate::error::{Error, Result};
use crate::par;
use crate::causal::{ate, AteConfig, Variant};
use crate::cv::{refine, CvMode, RefineConfig};
use crate::screening::screen_columns;
use crate::stats::{mean, sd};

/// How to read the second parameter of `N(0.3, 0.7)` for `U_g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpreadReading {
    #[default]
    Variance,
    StandardDeviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub design: u8,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub reps: usize,
    #[serde(default)]
    pub u_g_spread: SpreadReading,
    /// Force the treatment-effect coefficients to zero (designs 4–6).
    #[serde(default)]
    pub null_effect: bool,
}

impl DesignSpec {
    pub fn new(design: u8, n: usize, p: usize, seed: u64, reps: usize) -> Self {
        DesignSpec {
            design,
            n,
            p,
            seed,
            reps,
            u_g_spread: SpreadReading::Variance,
            null_effect: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.design) {
            return Err(Error::InvalidConfig(format!("design must be 1..6, got {}", self.design)));
        }
        if self.p < 6 || self.p % 2 != 0 {
            return Err(Error::InvalidConfig(format!("p must be even and at least 6, got {}", self.p)));
        }
        if self.n < 4 {
            return Err(Error::InvalidConfig(format!("n must be at least 4, got {}", self.n)));
        }
        Ok(())
    }

    pub fn is_treatment_design(&self) -> bool {
        self.design >= 4
    }

    /// Covariate design (1–3) underlying this design.
    pub fn covariate_design(&self) -> u8 {
        if self.design > 3 {
            self.design - 3
        } else {
            self.design
        }
    }
}

/// Column layout shared by every design.
pub mod layout {
    /// Continuous covariate `j` (0-based): `x{j+1}c`.
    pub fn xc(j: usize) -> usize {
        j
    }
    /// Discrete covariate `j` (0-based): `x{j+1}d`.
    pub fn xd(p: usize, j: usize) -> usize {
        p / 2 + j
    }
    pub fn w(p: usize) -> usize {
        p
    }
    pub fn y(p: usize) -> usize {
        p + 1
    }
    /// Treatment column (designs 4–6 only).
    pub fn d(p: usize) -> usize {
        p + 2
    }
    /// Directly relevant set `{X1c, X2c, X1d}`.
    pub fn relevant(p: usize) -> Vec<usize> {
        vec![xc(0), xc(1), xd(p, 0)]
    }
    /// Outcome-relevant set `{X1c, X3c, X1d}` (designs 4–6).
    pub fn outcome_relevant(p: usize) -> Vec<usize> {
        vec![xc(0), xc(2), xd(p, 0)]
    }
}

/// Raw covariates: `p/2` continuous, `p/2` discrete (atoms −1, 0, 1), scalar `W`.
#[derive(Debug, Clone)]
pub struct Covariates {
    pub xc: Vec<Vec<f64>>,
    pub xd: Vec<Vec<f64>>,
    pub w: Vec<f64>,
}

/// One simulated replication with its ground truth.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    /// True propensity scores (designs 4–6).
    pub propensity: Option<Vec<f64>>,
    /// True `g0` and `g1` at each observation (designs 4–6).
    pub g0: Option<Vec<f64>>,
    pub g1: Option<Vec<f64>>,
    /// Per-replication treatment-effect coefficients `U_ψ`.
    pub u_psi: Option<Vec<f64>>,
}

/// Stream for replication `rep` of a study seeded with `seed`.
pub fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

fn quantile(p: f64) -> f64 {
    NormalDist::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// `−1·1(Φ(e) ≤ lo) + 1(Φ(e) > hi)` via the equivalent normal quantiles.
fn discretize(e: f64, lo_q: f64, hi_q: f64) -> f64 {
    if e <= lo_q {
        -1.0
    } else if e > hi_q {
        1.0
    } else {
        0.0
    }
}

/// `k` standard normals with pairwise correlation 0.25 (or independent).
fn draw_vector(rng: &mut ChaCha8Rng, k: usize, equicorrelated: bool, out: &mut Vec<f64>) {
    out.clear();
    if equicorrelated {
        let z0: f64 = StandardNormal.sample(rng);
        let a = 0.75f64.sqrt();
        for _ in 0..k {
            let z: f64 = StandardNormal.sample(rng);
            out.push(0.5 * z0 + a * z);
        }
    } else {
        for _ in 0..k {
            out.push(StandardNormal.sample(rng));
        }
    }
}

/// Draws `n` rows of the covariate design (1, 2 or 3).
pub fn gen_covariates(design: u8, n: usize, p: usize, rng: &mut ChaCha8Rng) -> Covariates {
    let half = p / 2;
    let mut xc = vec![Vec::with_capacity(n); half];
    let mut xd = vec![Vec::with_capacity(n); half];
    let mut w = Vec::with_capacity(n);
    let (q13, q34, q23, q14) = (quantile(1.0 / 3.0), quantile(0.75), quantile(2.0 / 3.0), quantile(0.25));
    let mut e = Vec::with_capacity(p + 1);
    let mut e2 = Vec::with_capacity(3);
    for _ in 0..n {
        match design {
            2 => {
                draw_vector(rng, p - 2, true, &mut e);
                draw_vector(rng, 3, true, &mut e2);
                w.push(e[p - 3]);
                xc[0].push(e2[0]);
                xc[1].push(e2[1]);
                xd[0].push(discretize(e2[2], q14, q23));
                for j in 1..=half - 2 {
                    xc[j + 1].push(e[j - 1]);
                }
                for j in 1..=half - 1 {
                    xd[j].push(discretize(e[j + half - 3], q13, q23));
                }
            }
            _ => {
                draw_vector(rng, p + 1, design == 3, &mut e);
                w.push(e[p]);
                for j in 0..half {
                    xc[j].push(e[j]);
                    xd[j].push(discretize(e[j + half], q13, q34));
                }
            }
        }
    }
    Covariates { xc, xd, w }
}

/// Linear index `X^c'β^c(W) + X^d'β^d(W)` shared by the response and propensity.
pub fn varying_index(cov: &Covariates, i: usize) -> f64 {
    let w = cov.w[i];
    cov.xc[0][i] * (0.4 * w + 0.5)
        + cov.xc[1][i] * ((2.0 * std::f64::consts::PI * w).sin() + 0.5)
        + cov.xd[0][i] * (0.5 * w + 0.7)
}

/// The 9 second-degree terms of `(a, b, c)`: linear, squares, pairwise products.
pub fn phi(a: f64, b: f64, c: f64) -> [f64; 9] {
    [a, b, c, a * a, b * b, c * c, a * b, a * c, b * c]
}

fn phi_at(cov: &Covariates, i: usize) -> [f64; 9] {
    phi(cov.xc[0][i], cov.xc[2][i], cov.xd[0][i])
}

/// Draws `(U_g, U_ψ)` for one replication.
pub fn draw_coefficients(spec: &DesignSpec, rng: &mut ChaCha8Rng) -> ([f64; 9], [f64; 9]) {
    let spread = match spec.u_g_spread {
        SpreadReading::Variance => 0.7f64.sqrt(),
        SpreadReading::StandardDeviation => 0.7,
    };
    let ng = Normal::new(0.3, spread).unwrap();
    let up = Uniform::new(0.1, 0.22).unwrap();
    let mut ug = [0.0; 9];
    let mut upsi = [0.0; 9];
    for k in 0..9 {
        ug[k] = ng.sample(rng);
    }
    for k in 0..9 {
        upsi[k] = if spec.null_effect { 0.0 } else { up.sample(rng) };
    }
    (ug, upsi)
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Generates replication `rep` of `spec`.
pub fn gen_design(spec: &DesignSpec, rep: u64) -> Result<Simulated> {
    spec.validate()?;
    let mut rng = rep_rng(spec.seed, rep);
    let (n, p) = (spec.n, spec.p);
    let cov = gen_covariates(spec.covariate_design(), n, p, &mut rng);
    let index: Vec<f64> = (0..n).map(|i| varying_index(&cov, i)).collect();
    let mut columns = Vec::with_capacity(p + 3);
    for (j, x) in cov.xc.iter().enumerate() {
        columns.push(Column::continuous(format!("x{}c", j + 1), Role::Candidate, x.clone()));
    }
    for (j, x) in cov.xd.iter().enumerate() {
        columns.push(Column::discrete_from_values(format!("x{}d", j + 1), Role::Candidate, x));
    }
    columns.push(Column::continuous("w", Role::PreselectedW, cov.w.clone()));

    if !spec.is_treatment_design() {
        let y: Vec<f64> = index
            .iter()
            .map(|s| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                s + eps
            })
            .collect();
        columns.push(Column::continuous("y", Role::Response, y));
        return Ok(Simulated {
            data: Dataset::new(columns)?,
            propensity: None,
            g0: None,
            g1: None,
            u_psi: None,
        });
    }

    let (ug, upsi) = draw_coefficients(spec, &mut rng);
    let (mu, s) = (mean(&index), sd(&index));
    let m: Vec<f64> = index.iter().map(|v| logistic(2.0 * (v - mu) / s)).collect();
    let d: Vec<f64> = m
        .iter()
        .map(|mi| if rng.random::<f64>() < *mi { 1.0 } else { 0.0 })
        .collect();
    let mut g0 = Vec::with_capacity(n);
    let mut g1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let f = phi_at(&cov, i);
        let w = cov.w[i];
        let base: f64 = w * f.iter().zip(&ug).map(|(a, b)| a * b).sum::<f64>();
        let effect: f64 = w * f.iter().zip(&upsi).map(|(a, b)| a * b).sum::<f64>();
        g0.push(base);
        g1.push(base + effect);
        let eps: f64 = StandardNormal.sample(&mut rng);
        y.push(base + effect * d[i] + eps);
    }
    columns.push(Column::continuous("y", Role::Response, y));
    columns.push(Column::discrete_from_values("d", Role::Treatment, &d));
    Ok(Simulated {
        data: Dataset::new(columns)?,
        propensity: Some(m),
        g0: Some(g0),
        g1: Some(g1),
        u_psi: Some(upsi.to_vec()),
    })
}

/// Monte Carlo moments `E[W·φ_k]` for the covariate design of `spec`, from
/// `draws` rows on a dedicated stream. The true ATE of a replication is
/// `Σ_k U_ψk · E[W·φ_k]`.
pub fn effect_moments(spec: &DesignSpec, draws: usize) -> [f64; 9] {
    let mut rng = rep_rng(spec.seed ^ 0x5eed_0f_7e57, u64::MAX);
    let mut acc = [0.0; 9];
    let chunk = 100_000;
    let mut done = 0;
    while done < draws {
        let m = chunk.min(draws - done);
        let cov = gen_covariates(spec.covariate_design(), m, spec.p, &mut rng);
        for i in 0..m {
            let f = phi_at(&cov, i);
            for k in 0..9 {
                acc[k] += cov.w[i] * f[k];
            }
        }
        done += m;
    }
    acc.map(|v| v / draws as f64)
}

/// `Σ_k U_ψk · moments_k`.
pub fn true_ate(u_psi: &[f64], moments: &[f64; 9]) -> f64 {
    u_psi.iter().zip(moments).map(|(u, m)| u * m).sum()
}

/// Screening statistic used in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningMethod {
    Median,
    Quantile,
    Binary,
}

impl ScreeningMethod {
    pub fn reference(&self) -> Reference {
        match self {
            ScreeningMethod::Median => Reference::Median,
            ScreeningMethod::Quantile => Reference::default_quantiles(),
            ScreeningMethod::Binary => Reference::BinaryTreatment,
        }
    }
}

/// Recovery rate of one relevant covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRate {
    pub name: String,
    pub rate: f64,
}

/// Bias, RMSE, mean interval length and coverage of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub variant: String,
    pub bias: f64,
    pub rmse: f64,
    /// Population standard deviation of the estimates.
    pub sd: f64,
    pub il: f64,
    pub cp: f64,
    pub failures: usize,
}

impl EstimatorMetrics {
    /// Summarizes `(estimate, truth, ci_lower, ci_upper)` tuples.
    pub fn from_draws(variant: &str, draws: &[(f64, f64, f64, f64)], failures: usize) -> Self {
        let k = draws.len().max(1) as f64;
        let errs: Vec<f64> = draws.iter().map(|(e, t, _, _)| e - t).collect();
        let bias = errs.iter().sum::<f64>() / k;
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / k;
        let var = errs.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / k;
        let il = draws.iter().map(|(_, _, lo, hi)| hi - lo).sum::<f64>() / k;
        let cp = draws.iter().filter(|(_, t, lo, hi)| lo <= t && t <= hi).count() as f64 / k;
        EstimatorMetrics {
            variant: variant.to_string(),
            bias,
            rmse: mse.sqrt(),
            sd: var.sqrt(),
            il,
            cp,
            failures,
        }
    }
}

/// Aggregate Monte Carlo metrics of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub design: u8,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub seed: u64,
    pub method: Option<ScreeningMethod>,
    pub crr: Vec<CovariateRate>,
    pub all_crr: Option<f64>,
    pub exact_recovery: Option<f64>,
    pub estimators: Vec<EstimatorMetrics>,
    pub warnings: Vec<String>,
}

/// Response column screened in `spec`: `Y` for designs 1–3, `D` for 4–6.
fn screening_target(spec: &DesignSpec) -> usize {
    if spec.is_treatment_design() {
        layout::d(spec.p)
    } else {
        layout::y(spec.p)
    }
}

fn candidates(p: usize) -> Vec<usize> {
    (0..p).collect()
}

/// Screens one replication and returns the retained candidate columns.
pub fn screen_replication(spec: &DesignSpec, cfg: &DependenceConfig, p_tilde: usize, rep: u64) -> Result<Vec<usize>> {
    let sim = gen_design(spec, rep)?;
    let out = screen_columns(
        &sim.data,
        screening_target(spec),
        &candidates(spec.p),
        &[layout::w(spec.p)],
        cfg,
        p_tilde,
    )?;
    Ok(out.retained)
}

/// Correct recovery rates of `{X1c, X2c, X1d}` in the top `p_tilde − 1` block.
pub fn run_screening_study(spec: &DesignSpec, method: ScreeningMethod, p_tilde: usize) -> Result<MetricsReport> {
    let cfg = DependenceConfig::with_reference(method.reference());
    run_screening_study_with(spec, method, &cfg, p_tilde)
}

/// As [`run_screening_study`] with explicit screening settings; the
/// reference in `cfg` is replaced by the one implied by `method`.
pub fn run_screening_study_with(
    spec: &DesignSpec,
    method: ScreeningMethod,
    cfg: &DependenceConfig,
    p_tilde: usize,
) -> Result<MetricsReport> {
    spec.validate()?;
    if (method == ScreeningMethod::Binary) != spec.is_treatment_design() {
        return Err(Error::InvalidConfig(
            "binary screening applies to designs 4-6 only, median/quantile to 1-3".into(),
        ));
    }
    let cfg = DependenceConfig {
        reference: method.reference(),
        ..cfg.clone()
    };
    let relevant = layout::relevant(spec.p);
    let kept = par::map_range(spec.reps, |r| screen_replication(spec, &cfg, p_tilde, r as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let k = spec.reps.max(1) as f64;
    let names = ["x1c", "x2c", "x1d"];
    let crr = relevant
        .iter()
        .zip(names)
        .map(|(c, name)| CovariateRate {
            name: name.to_string(),
            rate: kept.iter().filter(|set| set.contains(c)).count() as f64 / k,
        })
        .collect();
    let all = kept
        .iter()
        .filter(|set| relevant.iter().all(|c| set.contains(c)))
        .count() as f64
        / k;
    Ok(MetricsReport {
        design: spec.design,
        n: spec.n,
        p: spec.p,
        reps: spec.reps,
        seed: spec.seed,
        method: Some(method),
        crr,
        all_crr: Some(all),
        ..Default::default()
    })
}

/// Screens and refines one replication; returns the included non-`W` columns.
pub fn refine_replication(
    spec: &DesignSpec,
    dep: &DependenceConfig,
    refine_cfg: &RefineConfig,
    p_tilde: usize,
    rep: u64,
) -> Result<Vec<usize>> {
    let sim = gen_design(spec, rep)?;
    let target = screening_target(spec);
    let w = [layout::w(spec.p)];
    let screened = screen_columns(&sim.data, target, &candidates(spec.p), &w, dep, p_tilde)?;
    let out = refine(&sim.data, &screened, target, refine_cfg)?;
    let mut inc: Vec<usize> = out.selection.included().into_iter().filter(|c| !w.contains(c)).collect();
    inc.sort_unstable();
    Ok(inc)
}

/// Probability that screening plus refinement selects exactly `{X1c, X2c, X1d}`
/// (with `W` kept in the search). Designs 1–3 use median screening of `Y`,
/// designs 4–6 binary screening of `D`.
pub fn run_refine_study(spec: &DesignSpec, p_tilde: usize, scale_grid: &[f64]) -> Result<MetricsReport> {
    spec.validate()?;
    let method = if spec.is_treatment_design() {
        ScreeningMethod::Binary
    } else {
        ScreeningMethod::Median
    };
    let dep = DependenceConfig::with_reference(method.reference());
    let refine_cfg = RefineConfig {
        mode: if spec.is_treatment_design() { CvMode::BinaryD } else { CvMode::ContinuousY },
        kernel: dep.kernel,
        scale_grid: scale_grid.to_vec(),
        protect_w: true,
        ..RefineConfig::default()
    };
    let mut relevant = layout::relevant(spec.p);
    relevant.sort_unstable();
    let sets = par::map_range(spec.reps, |r| refine_replication(spec, &dep, &refine_cfg, p_tilde, r as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let k = spec.reps.max(1) as f64;
    let exact = sets.iter().filter(|s| **s == relevant).count() as f64 / k;
    Ok(MetricsReport {
        design: spec.design,
        n: spec.n,
        p: spec.p,
        reps: spec.reps,
        seed: spec.seed,
        method: Some(method),
        exact_recovery: Some(exact),
        ..Default::default()
    })
}

const SPLIT_SALT: u64 = 0x5b11_7f01_d5ee_d000;

/// `(estimate, ci_lower, ci_upper)` per requested variant; `None` marks a failed fit.
type AteDraws = Vec<Option<(f64, f64, f64)>>;

/// Runs the cross-fitted estimator for each variant on one replication and
/// returns the true effect with the estimates.
pub fn ate_replication(
    spec: &DesignSpec,
    variants: &[Variant],
    base: &AteConfig,
    moments: &[f64; 9],
    rep: u64,
) -> Result<(f64, AteDraws)> {
    let sim = gen_design(spec, rep)?;
    let u_psi = sim.u_psi.as_deref().ok_or_else(|| Error::InvalidConfig("design has no treatment effect".into()))?;
    let truth = true_ate(u_psi, moments);
    let split_seed = rep_rng(spec.seed ^ SPLIT_SALT, rep).random::<u64>();
    // psi4 shares psi3's kernel nuisances
    let key = |v: Variant| if v == Variant::Psi4 { Variant::Psi3 } else { v };
    let mut fits: Vec<(Variant, Option<(f64, f64, f64)>)> = Vec::new();
    for &v in variants {
        let k = key(v);
        if fits.iter().all(|(f, _)| *f != k) {
            let cfg = AteConfig { variant: k, split_seed, ..base.clone() };
            let r = ate(&sim.data, &cfg).ok().map(|a| (a.psi_hat, a.ci95.0, a.ci95.1));
            fits.push((k, r));
        }
    }
    let draws = variants
        .iter()
        .map(|&v| fits.iter().find(|(f, _)| *f == key(v)).and_then(|(_, r)| *r))
        .collect();
    Ok((truth, draws))
}

/// Bias, RMSE, interval length and coverage of each variant over `spec.reps`
/// replications of a treatment design. The true effect uses coefficient
/// moments estimated once per study from `truth_draws` draws.
pub fn run_ate_study(spec: &DesignSpec, variants: &[Variant], base: &AteConfig, truth_draws: usize) -> Result<MetricsReport> {
    spec.validate()?;
    if !spec.is_treatment_design() {
        return Err(Error::InvalidConfig("ATE studies need design 4, 5 or 6".into()));
    }
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no estimator variants requested".into()));
    }
    let moments = effect_moments(spec, truth_draws);
    let reps = par::map_range(spec.reps, |r| ate_replication(spec, variants, base, &moments, r as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    let estimators = variants
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let draws: Vec<(f64, f64, f64, f64)> = reps
                .iter()
                .filter_map(|(t, d)| d[k].map(|(e, lo, hi)| (e, *t, lo, hi)))
                .collect();
            let failures = spec.reps - draws.len();
            if failures > 0 {
                warnings.push(format!("{}: {failures} replications failed and were skipped", v.name()));
            }
            EstimatorMetrics::from_draws(v.name(), &draws, failures)
        })
        .collect();
    Ok(MetricsReport {
        design: spec.design,
        n: spec.n,
        p: spec.p,
        reps: spec.reps,
        seed: spec.seed,
        method: Some(ScreeningMethod::Binary),
        estimators,
        warnings,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design1_discrete_frequencies() {
        let mut rng = rep_rng(1, 0);
        let cov = gen_covariates(1, 100_000, 6, &mut rng);
        let x = &cov.xd[0];
        let f = |v: f64| x.iter().filter(|a| **a == v).count() as f64 / x.len() as f64;
        assert!((f(-1.0) - 1.0 / 3.0).abs() < 0.01);
        assert!((f(0.0) - 5.0 / 12.0).abs() < 0.01);
        assert!((f(1.0) - 0.25).abs() < 0.01);
    }

    #[test]
    fn design2_correlation_and_thresholds() {
        let mut rng = rep_rng(2, 0);
        let cov = gen_covariates(2, 100_000, 8, &mut rng);
        let (a, b) = (&cov.xc[2], &cov.xc[3]);
        let (ma, mb) = (mean(a), mean(b));
        let c = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0);
        assert!((c / (sd(a) * sd(b)) - 0.25).abs() < 0.01);
        let x1d = &cov.xd[0];
        let f = |v: f64| x1d.iter().filter(|a| **a == v).count() as f64 / x1d.len() as f64;
        assert!((f(-1.0) - 0.25).abs() < 0.01);
        assert!((f(1.0) - 1.0 / 3.0).abs() < 0.01);
        let x2d = &cov.xd[1];
        let g = |v: f64| x2d.iter().filter(|a| **a == v).count() as f64 / x2d.len() as f64;
        assert!((g(-1.0) - 1.0 / 3.0).abs() < 0.01);
        assert!((g(1.0) - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn design3_equicorrelated_with_w() {
        let mut rng = rep_rng(3, 0);
        let cov = gen_covariates(3, 100_000, 6, &mut rng);
        let (a, w) = (&cov.xc[0], &cov.w);
        let c = a.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
        assert!((c - 0.25).abs() < 0.01);
    }

    #[test]
    fn reproducible_by_rep_index() {
        let spec = DesignSpec::new(4, 50, 6, 9, 3);
        let a = gen_design(&spec, 2).unwrap();
        let b = gen_design(&spec, 2).unwrap();
        let c = gen_design(&spec, 1).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        let m = a.propensity.unwrap();
        assert!(m.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn independent_w_gives_zero_effect_moments() {
        let spec = DesignSpec::new(4, 10, 6, 1, 1);
        let m = effect_moments(&spec, 200_000);
        assert!(m.iter().all(|v| v.abs() < 0.02), "{m:?}");
        let spec6 = DesignSpec::new(6, 10, 6, 1, 1);
        let m6 = effect_moments(&spec6, 200_000);
        // E[W·X1c] = 0.25 under equicorrelation.
        assert!((m6[0] - 0.25).abs() < 0.01);
    }

    #[test]
    fn null_effect_zeroes_coefficients() {
        let mut spec = DesignSpec::new(5, 30, 6, 1, 1);
        spec.null_effect = true;
        let s = gen_design(&spec, 0).unwrap();
        assert!(s.u_psi.unwrap().iter().all(|u| *u == 0.0));
        assert_eq!(s.g0, s.g1);
    }

    #[test]
    fn rejects_odd_p() {
        assert!(gen_design(&DesignSpec::new(1, 10, 7, 0, 1), 0).is_err());
        assert!(gen_design(&DesignSpec::new(7, 10, 8, 0, 1), 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn rmse_decomposes(draws in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..2.0), 1..60)) {
            let d: Vec<(f64, f64, f64, f64)> = draws.iter().map(|(e, t, w)| (*e, *t, e - w, e + w)).collect();
            let m = EstimatorMetrics::from_draws("x", &d, 0);
            let lhs = m.rmse * m.rmse;
            let rhs = m.bias * m.bias + m.sd * m.sd;
            proptest::prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs));
            proptest::prop_assert!(m.rmse + 1e-12 >= m.bias.abs());
            proptest::prop_assert!((0.0..=1.0).contains(&m.cp));
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn studies_ignore_thread_count() {
        let spec = DesignSpec::new(1, 120, 6, 3, 6);
        let run = |t: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| run_screening_study(&spec, ScreeningMethod::Quantile, 4).unwrap())
        };
        let one = run(1);
        assert_eq!(one, run(3));
        let all = one.all_crr.unwrap();
        assert!((0.0..=1.0).contains(&all));
        assert!(one.crr.iter().all(|c| (0.0..=1.0).contains(&c.rate)));
        let spec = DesignSpec::new(4, 80, 6, 3, 2);
        let ate_run = |t: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| run_ate_study(&spec, &[Variant::Psi3], &AteConfig::default(), 5_000).unwrap())
        };
        assert_eq!(ate_run(1), ate_run(4));
    }
}

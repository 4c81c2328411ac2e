//! Doubly robust average treatment effect with kernel nuisances on a
//! screened-and-refined covariate set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cde::{fit_regression_cv, query_rows, regression_spec, CdeModel, LocalFit};
use crate::cv::{iterate_procedure, IterateConfig, DEFAULT_SCALE_GRID};
use crate::data::{check_binary, Dataset};
use crate::dependence::{DependenceConfig, Reference};
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::par;
use crate::stats::{mean, sd, welch_t_test};

/// Keep an observation when `lower <= m̂ <= upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimRule {
    pub lower: f64,
    pub upper: f64,
}

impl TrimRule {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && upper < 1.0 && lower < upper) {
            return Err(Error::InvalidConfig(format!(
                "trim bounds must satisfy 0 < lower < upper < 1, got [{lower}, {upper}]"
            )));
        }
        Ok(TrimRule { lower, upper })
    }

    /// `[0.1, 0.9]`.
    pub fn simulation() -> Self {
        TrimRule { lower: 0.1, upper: 0.9 }
    }

    /// `[0.05, 0.95]`.
    pub fn analysis() -> Self {
        TrimRule { lower: 0.05, upper: 0.95 }
    }

    pub fn keeps(&self, m: f64) -> bool {
        self.lower <= m && m <= self.upper
    }
}

/// Per-observation doubly robust scores
/// `ĝ₁ − ĝ₀ + D(Y − ĝ₁)/m̂ − (1 − D)(Y − ĝ₀)/(1 − m̂)`.
pub fn dr_scores(y: &[f64], d: &[f64], m: &[f64], g0: &[f64], g1: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    if [d.len(), m.len(), g0.len(), g1.len()].iter().any(|&l| l != n) {
        return Err(Error::InvalidConfig("nuisance vectors differ in length".into()));
    }
    (0..n)
        .map(|i| {
            if !(m[i] > 0.0 && m[i] < 1.0) {
                return Err(Error::PropensityBoundary { index: i, value: m[i] });
            }
            Ok(g1[i] - g0[i] + d[i] * (y[i] - g1[i]) / m[i] - (1.0 - d[i]) * (y[i] - g0[i]) / (1.0 - m[i]))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full-set propensity and outcome regressions.
    Psi1,
    /// Reduced-set propensity, full-set outcome regressions.
    Psi2,
    /// Reduced-set propensity and outcome regressions.
    #[default]
    Psi3,
    /// Same kernel nuisances as `Psi3`.
    Psi4,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Psi1 => "psi1",
            Variant::Psi2 => "psi2",
            Variant::Psi3 => "psi3",
            Variant::Psi4 => "psi4",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psi1" => Ok(Variant::Psi1),
            "psi2" => Ok(Variant::Psi2),
            "psi3" => Ok(Variant::Psi3),
            "psi4" => Ok(Variant::Psi4),
            _ => Err(Error::InvalidConfig(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossFit {
    /// Fit on the first half, score the second.
    #[default]
    Split,
    /// Also fit on the second half and score the first; pool both folds.
    SwapAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteConfig {
    pub variant: Variant,
    pub trim: TrimRule,
    pub hajek: bool,
    pub cross_fit: CrossFit,
    pub split_seed: u64,
    /// Screening and refinement for the propensity covariates.
    pub selection: IterateConfig,
    pub p_tilde: usize,
    /// Bandwidth constants searched by leave-one-out for the outcome regressions.
    pub regression_scales: Vec<f64>,
    /// Local fit of the reduced-set outcome regressions.
    pub outcome_fit: LocalFit,
    /// Rule-of-thumb constant for full-set nuisances.
    pub full_set_scale: f64,
}

impl Default for AteConfig {
    fn default() -> Self {
        AteConfig {
            variant: Variant::Psi3,
            trim: TrimRule::analysis(),
            hajek: false,
            cross_fit: CrossFit::Split,
            split_seed: 0,
            selection: IterateConfig::new(DependenceConfig::with_reference(Reference::BinaryTreatment)),
            p_tilde: 5,
            regression_scales: DEFAULT_SCALE_GRID.to_vec(),
            outcome_fit: LocalFit::Constant,
            full_set_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NuisanceDiagnostics {
    /// Names of the covariates the propensity model conditions on.
    pub propensity_covariates: Vec<String>,
    pub outcome_covariates: Vec<String>,
    pub propensity_min: f64,
    pub propensity_max: f64,
    pub propensity_fallbacks: usize,
    pub outcome_fallbacks: usize,
    pub sparsity_doubt: bool,
    pub p_tilde: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub psi_hat: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    pub n_scored: usize,
    pub n_effective: usize,
    pub trim_fraction: f64,
    /// Scores of the kept observations; their mean is `psi_hat`.
    pub scores: Vec<f64>,
    pub diagnostics: NuisanceDiagnostics,
    pub caveat: Option<String>,
}

const TRIM_CAVEAT: &str = "trimming changes the estimand to the average effect on the kept subpopulation; \
                           ci95 is the unadjusted interval for that subpopulation";

/// Averages doubly robust scores over observations kept by `trim`
/// (`None` keeps all). With `hajek` the two weighted residual terms are
/// normalized within each arm.
pub fn ate_from_nuisances(
    y: &[f64],
    d: &[f64],
    m: &[f64],
    g0: &[f64],
    g1: &[f64],
    trim: Option<TrimRule>,
    hajek: bool,
) -> Result<AteResult> {
    let n = y.len();
    let keep: Vec<usize> = (0..n).filter(|&i| trim.is_none_or(|t| t.keeps(m[i]))).collect();
    let pick = |v: &[f64]| -> Vec<f64> { keep.iter().map(|&i| v[i]).collect() };
    let (yk, dk, mk, g0k, g1k) = (pick(y), pick(d), pick(m), pick(g0), pick(g1));
    let treated = dk.iter().filter(|v| **v == 1.0).count();
    if treated == 0 {
        return Err(Error::DegenerateTreatment { arm: 1 });
    }
    if treated == dk.len() {
        return Err(Error::DegenerateTreatment { arm: 0 });
    }
    let mut scores = dr_scores(&yk, &dk, &mk, &g0k, &g1k)?;
    if hajek {
        let k = scores.len() as f64;
        let s1: f64 = (0..dk.len()).map(|i| dk[i] / mk[i]).sum();
        let s0: f64 = (0..dk.len()).map(|i| (1.0 - dk[i]) / (1.0 - mk[i])).sum();
        for i in 0..scores.len() {
            let w1 = dk[i] / mk[i] / s1;
            let w0 = (1.0 - dk[i]) / (1.0 - mk[i]) / s0;
            scores[i] = g1k[i] - g0k[i] + k * (w1 * (yk[i] - g1k[i]) - w0 * (yk[i] - g0k[i]));
        }
    }
    let (lo, hi) = mk.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok(summarize(scores, n, NuisanceDiagnostics { propensity_min: lo, propensity_max: hi, ..Default::default() }))
}

fn summarize(scores: Vec<f64>, n_scored: usize, diagnostics: NuisanceDiagnostics) -> AteResult {
    let k = scores.len();
    let psi_hat = mean(&scores);
    let se = sd(&scores) / (k as f64).sqrt();
    let trim_fraction = 1.0 - k as f64 / n_scored as f64;
    AteResult {
        psi_hat,
        se,
        ci95: (psi_hat - 1.96 * se, psi_hat + 1.96 * se),
        n_scored,
        n_effective: k,
        trim_fraction,
        scores,
        caveat: (trim_fraction > 0.0).then(|| TRIM_CAVEAT.to_string()),
        diagnostics,
    }
}

/// Deterministic half split of `0..n`.
pub fn split_folds(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = n / 2;
    let mut a = idx[..half].to_vec();
    let mut b = idx[half..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Nuisance predictions on a scoring fold.
#[derive(Debug, Clone)]
pub struct Nuisances {
    pub m: Vec<f64>,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    pub diagnostics: NuisanceDiagnostics,
}

fn names(data: &Dataset, cols: &[usize]) -> Vec<String> {
    cols.iter().map(|&c| data.column(c).name.clone()).collect()
}

/// Fits the variant's nuisances on `fit` and predicts them on `score`.
pub fn fit_nuisances(fit: &Dataset, score: &Dataset, cfg: &AteConfig) -> Result<Nuisances> {
    let y = fit.require_response()?;
    let t = fit.require_treatment()?;
    let kernel: Kernel = cfg.selection.dependence.kernel;
    if !kernel.is_nonnegative() {
        return Err(Error::InvalidConfig("ATE nuisances need a second-order kernel".into()));
    }
    let mut all: Vec<usize> = fit.candidates();
    all.extend(fit.preselected());

    let full_set = matches!(cfg.variant, Variant::Psi1);
    let (m_model, reduced, sparsity_doubt, p_tilde) = if full_set {
        let spec = regression_spec(fit, &all, &all, kernel, cfg.full_set_scale)?;
        (CdeModel::fit_regression(fit, spec, None, Some(t))?, all.clone(), false, 0)
    } else {
        let mut sel = cfg.selection.clone();
        sel.dependence.reference = Reference::BinaryTreatment;
        let it = iterate_procedure(fit, &sel, cfg.p_tilde)?;
        (it.model, it.cv.selection.included(), it.sparsity_doubt, it.p_tilde)
    };
    let m_pred = m_model.propensity_many(&query_rows(score, m_model.spec()))?;

    let outcome_full = matches!(cfg.variant, Variant::Psi1 | Variant::Psi2);
    let outcome_cols = if outcome_full { all.clone() } else { reduced.clone() };
    let mut g = Vec::with_capacity(2);
    let mut outcome_fallbacks = 0;
    for arm in [0u8, 1] {
        let model = if outcome_full {
            let rows: Vec<usize> = (0..fit.n()).filter(|&i| fit.column(t).values[i] == arm as f64).collect();
            let arm_data = fit.select_rows(&rows);
            let spec = regression_spec(&arm_data, &outcome_cols, &outcome_cols, kernel, cfg.full_set_scale)?;
            CdeModel::fit_regression(&arm_data, spec, Some(y), None)?
        } else {
            fit_regression_cv(fit, &outcome_cols, y, t, arm, kernel, cfg.outcome_fit, &cfg.regression_scales)?.model
        };
        let p = model.regress_many(&query_rows(score, model.spec()), None)?;
        outcome_fallbacks += p.fallbacks;
        g.push(p.values);
    }
    let g1 = g.pop().expect("two arms");
    let g0 = g.pop().expect("two arms");
    let (lo, hi) = m_pred.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    Ok(Nuisances {
        m: m_pred.values,
        g0,
        g1,
        diagnostics: NuisanceDiagnostics {
            propensity_covariates: names(fit, &reduced),
            outcome_covariates: names(fit, &outcome_cols),
            propensity_min: lo,
            propensity_max: hi,
            propensity_fallbacks: m_pred.fallbacks,
            outcome_fallbacks,
            sparsity_doubt,
            p_tilde,
        },
    })
}

fn fold_scores(fit: &Dataset, score: &Dataset, cfg: &AteConfig) -> Result<(AteResult, NuisanceDiagnostics)> {
    let nu = fit_nuisances(fit, score, cfg)?;
    let y = &score.column(score.require_response()?).values;
    let d = &score.column(score.require_treatment()?).values;
    let r = ate_from_nuisances(y, d, &nu.m, &nu.g0, &nu.g1, Some(cfg.trim), cfg.hajek)?;
    Ok((r, nu.diagnostics))
}

/// Cross-fitted doubly robust ATE.
pub fn ate(data: &Dataset, cfg: &AteConfig) -> Result<AteResult> {
    data.require_response()?;
    check_binary(&data.column(data.require_treatment()?).values)?;
    let n = data.n();
    if n < 8 {
        return Err(Error::TooFewObservations { needed: 8, got: n });
    }
    let (a, b) = split_folds(n, cfg.split_seed);
    let (i1, i2) = (data.select_rows(&a), data.select_rows(&b));
    let (first, diag) = fold_scores(&i1, &i2, cfg)?;
    match cfg.cross_fit {
        CrossFit::Split => Ok(summarize(first.scores, first.n_scored, diag)),
        CrossFit::SwapAverage => {
            let (second, diag2) = fold_scores(&i2, &i1, cfg)?;
            let mut scores = first.scores;
            scores.extend(second.scores);
            let mut diag = diag;
            diag.propensity_min = diag.propensity_min.min(diag2.propensity_min);
            diag.propensity_max = diag.propensity_max.max(diag2.propensity_max);
            diag.propensity_fallbacks += diag2.propensity_fallbacks;
            diag.outcome_fallbacks += diag2.outcome_fallbacks;
            diag.sparsity_doubt |= diag2.sparsity_doubt;
            Ok(summarize(scores, first.n_scored + second.n_scored, diag))
        }
    }
}

/// One Welch test of a covariate within a propensity subclass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub lower: f64,
    pub upper: f64,
    pub covariate: String,
    pub n_treated: usize,
    pub n_control: usize,
    pub t: Option<f64>,
    pub p_value: Option<f64>,
}

/// Welch t-tests of each covariate between arms within subclasses
/// `[edges[k], edges[k+1])` of `m_hat` (the last subclass is closed).
pub fn balance_test(
    data: &Dataset,
    treatment: usize,
    m_hat: &[f64],
    edges: &[f64],
    covariates: &[usize],
) -> Result<Vec<BalanceRow>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig("subclass edges must be increasing, at least two".into()));
    }
    if m_hat.len() != data.n() {
        return Err(Error::InvalidConfig("propensity vector length differs from the data".into()));
    }
    let d = &data.column(treatment).values;
    let last = edges.len() - 2;
    let mut out = Vec::new();
    for k in 0..=last {
        let (lo, hi) = (edges[k], edges[k + 1]);
        let inside = |m: f64| lo <= m && (m < hi || (k == last && m <= hi));
        for &c in covariates {
            let v = &data.column(c).values;
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for i in (0..data.n()).filter(|&i| inside(m_hat[i])) {
                if d[i] == 1.0 { a.push(v[i]) } else { b.push(v[i]) }
            }
            let test = welch_t_test(&a, &b);
            out.push(BalanceRow {
                lower: lo,
                upper: hi,
                covariate: data.column(c).name.clone(),
                n_treated: a.len(),
                n_control: b.len(),
                t: test.map(|t| t.t),
                p_value: test.map(|t| t.p_value),
            });
        }
    }
    Ok(out)
}

/// Synthetic draw with `ψ = 1`: `m(Z) = logistic(0.5·Z1)`,
/// `Y = 1 + Z1 + D(1 + 0.5·Z2) + ε`.
#[derive(Debug, Clone)]
pub struct DrDesign {
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub m: Vec<f64>,
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
}

pub fn dr_design(n: usize, seed: u64, rep: u64) -> DrDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    let mut out = DrDesign { y: vec![], d: vec![], m: vec![], g0: vec![], g1: vec![] };
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let eps: f64 = rng.sample(StandardNormal);
        let m = 1.0 / (1.0 + (-0.5 * z1).exp());
        let d = (rng.random::<f64>() < m) as u8 as f64;
        let g0 = 1.0 + z1;
        let g1 = g0 + 1.0 + 0.5 * z2;
        out.y.push(if d == 1.0 { g1 } else { g0 } + eps);
        out.d.push(d);
        out.m.push(m);
        out.g0.push(g0);
        out.g1.push(g1);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrReport {
    pub wrong_g: bool,
    pub wrong_m: bool,
    pub n: usize,
    pub reps: usize,
    pub bias: f64,
    pub rmse: f64,
}

/// Bias of the untrimmed estimator when `ĝ ≡ 0` (`wrong_g`) and/or
/// `m̂ ≡ mean(D)` (`wrong_m`); the other nuisance is the truth.
pub fn double_robustness_check(n: usize, reps: usize, seed: u64, wrong_g: bool, wrong_m: bool) -> Result<DrReport> {
    let est = par::map_range(reps, |r| {
        let s = dr_design(n, seed, r as u64);
        let (g0, g1) = if wrong_g { (vec![0.0; n], vec![0.0; n]) } else { (s.g0.clone(), s.g1.clone()) };
        let m = if wrong_m { vec![mean(&s.d); n] } else { s.m.clone() };
        ate_from_nuisances(&s.y, &s.d, &m, &g0, &g1, None, false).map(|a| a.psi_hat)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let k = reps.max(1) as f64;
    Ok(DrReport {
        wrong_g,
        wrong_m,
        n,
        reps,
        bias: est.iter().map(|e| e - 1.0).sum::<f64>() / k,
        rmse: (est.iter().map(|e| (e - 1.0).powi(2)).sum::<f64>() / k).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Role};
    use proptest::{prop_assert, proptest};

    #[test]
    fn plug_in_example() {
        let y = [1.0, 2.0, -0.5, 3.0];
        let d = [1.0, 0.0, 1.0, 0.0];
        let s = dr_scores(&y, &d, &[0.5; 4], &[0.0; 4], &[0.0; 4]).unwrap();
        for i in 0..4 {
            assert_eq!(s[i], 2.0 * y[i] * (2.0 * d[i] - 1.0));
        }
    }

    #[test]
    fn exact_fit_leaves_contrast() {
        let g0 = [0.2, 1.0, -1.0];
        let g1 = [1.2, 0.5, 0.0];
        let d = [1.0, 0.0, 1.0];
        let y: Vec<f64> = (0..3).map(|i| if d[i] == 1.0 { g1[i] } else { g0[i] }).collect();
        let s = dr_scores(&y, &d, &[0.3, 0.6, 0.9], &g0, &g1).unwrap();
        for i in 0..3 {
            assert!((s[i] - (g1[i] - g0[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_oracle_six() {
        let y = [2.0, 1.0, 0.5, 3.0, -1.0, 0.0];
        let d = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let m = [0.5, 0.25, 0.8, 0.4, 0.5, 0.2];
        let g0 = [0.0, 1.0, 0.0, 2.0, 0.0, 0.5];
        let g1 = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let want = [
            1.0 + 1.0 / 0.5,
            0.0 + 0.0 / 0.25,
            1.0 + (-0.5) / 0.8,
            -1.0 - 1.0 / 0.6,
            1.0 - (-1.0) / 0.5,
            0.5 - (-0.5) / 0.8,
        ];
        let s = dr_scores(&y, &d, &m, &g0, &g1).unwrap();
        for i in 0..6 {
            assert!((s[i] - want[i]).abs() < 1e-12);
        }
        let r = ate_from_nuisances(&y, &d, &m, &g0, &g1, None, false).unwrap();
        assert!((r.psi_hat - want.iter().sum::<f64>() / 6.0).abs() < 1e-12);
        assert!((r.ci95.1 - r.psi_hat - 1.96 * r.se).abs() < 1e-15);
        assert_eq!(r.caveat, None);
    }

    #[test]
    fn boundary_propensity() {
        let r = dr_scores(&[1.0], &[1.0], &[1.0], &[0.0], &[0.0]);
        assert!(matches!(r, Err(Error::PropensityBoundary { index: 0, .. })));
    }

    #[test]
    fn trim_rule_validation() {
        assert!(TrimRule::new(0.0, 0.9).is_err());
        assert!(TrimRule::new(0.6, 0.4).is_err());
        assert!(TrimRule::new(0.1, 0.9).unwrap().keeps(0.1));
        assert!(!TrimRule::analysis().keeps(0.97));
    }

    #[test]
    fn near_identity_trim_matches_untrimmed() {
        let s = dr_design(200, 4, 0);
        let a = ate_from_nuisances(&s.y, &s.d, &s.m, &s.g0, &s.g1, None, false).unwrap();
        let t = TrimRule::new(1e-12, 1.0 - 1e-12).unwrap();
        let b = ate_from_nuisances(&s.y, &s.d, &s.m, &s.g0, &s.g1, Some(t), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trimmed_arm_vanishes() {
        let y = [1.0, 2.0, 3.0, 4.0];
        let d = [1.0, 1.0, 0.0, 0.0];
        let m = [0.95, 0.97, 0.5, 0.5];
        let r = ate_from_nuisances(&y, &d, &m, &[0.0; 4], &[0.0; 4], Some(TrimRule::simulation()), false);
        assert!(matches!(r, Err(Error::DegenerateTreatment { arm: 1 })));
    }

    #[test]
    fn dr_identity_small() {
        let good_m = double_robustness_check(2000, 20, 3, true, false).unwrap();
        let good_g = double_robustness_check(2000, 20, 3, false, true).unwrap();
        let both = double_robustness_check(2000, 20, 3, true, true).unwrap();
        assert!(good_m.bias.abs() < 0.1);
        assert!(good_g.bias.abs() < 0.1);
        assert!(both.bias.abs() > 0.3);
    }

    #[test]
    fn welch_balance_closed_form() {
        let data = Dataset::new(vec![
            Column::continuous("x", Role::Candidate, vec![1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]),
            Column::continuous("d", Role::Treatment, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        ])
        .unwrap();
        let m = [0.5; 8];
        let rows = balance_test(&data, 1, &m, &[0.0, 0.5, 1.0], &[0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].n_treated, 0);
        assert_eq!(rows[0].p_value, None);
        // means 2.5 vs 5, variances 5/3 and 20/3
        let t = (2.5 - 5.0) / (5.0f64 / 12.0 + 20.0 / 12.0).sqrt();
        assert!((rows[1].t.unwrap() - t).abs() < 1e-12);
        let df = (25.0f64 / 12.0).powi(2) / ((5.0f64 / 12.0).powi(2) / 3.0 + (20.0f64 / 12.0).powi(2) / 3.0);
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let p = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().cdf(-t.abs());
        assert!((rows[1].p_value.unwrap() - p).abs() < 1e-10);
    }

    fn randomized(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| d[i] + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        Dataset::new(vec![
            Column::continuous("x", Role::Candidate, x),
            Column::continuous("noise", Role::Candidate, noise),
            Column::continuous("w", Role::PreselectedW, w),
            Column::continuous("y", Role::Response, y),
            Column::continuous("d", Role::Treatment, d),
        ])
        .unwrap()
    }

    #[test]
    fn randomized_pipeline_recovers_unit_effect() {
        let data = randomized(400, 1);
        for variant in [Variant::Psi1, Variant::Psi2, Variant::Psi3] {
            let cfg = AteConfig { variant, p_tilde: 2, ..AteConfig::default() };
            let r = ate(&data, &cfg).unwrap();
            assert!((r.psi_hat - 1.0).abs() < 4.0 * r.se + 0.05, "{variant:?} {}", r.psi_hat);
            assert!(r.n_effective <= 200);
        }
        let cfg = AteConfig { cross_fit: CrossFit::SwapAverage, hajek: true, p_tilde: 2, ..AteConfig::default() };
        let r = ate(&data, &cfg).unwrap();
        assert_eq!(r.n_scored, 400);
        assert!((r.psi_hat - 1.0).abs() < 0.2);
    }

    #[test]
    fn psi3_and_psi4_coincide() {
        let data = randomized(200, 2);
        let a = ate(&data, &AteConfig { variant: Variant::Psi3, p_tilde: 2, ..AteConfig::default() }).unwrap();
        let b = ate(&data, &AteConfig { variant: Variant::Psi4, p_tilde: 2, ..AteConfig::default() }).unwrap();
        assert_eq!(a.psi_hat.to_bits(), b.psi_hat.to_bits());
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split_folds(11, 9);
        assert_eq!(a.len(), 5);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(split_folds(11, 9), (a, b));
    }

    proptest! {
        #[test]
        fn hajek_weights_sum_to_one(ms in proptest::collection::vec(0.02f64..0.98, 10..40), seed in 0u64..1000) {
            let n = ms.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d: Vec<f64> = (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
            d[0] = 1.0;
            d[1] = 0.0;
            let trim = TrimRule::new(0.01, 0.99).unwrap();
            let kept: Vec<usize> = (0..n).filter(|&i| trim.keeps(ms[i])).collect();
            let s1: f64 = kept.iter().map(|&i| d[i] / ms[i]).sum();
            let s0: f64 = kept.iter().map(|&i| (1.0 - d[i]) / (1.0 - ms[i])).sum();
            let w1: f64 = kept.iter().map(|&i| d[i] / ms[i] / s1).sum();
            let w0: f64 = kept.iter().map(|&i| (1.0 - d[i]) / (1.0 - ms[i]) / s0).sum();
            prop_assert!((w1 - 1.0).abs() < 1e-12 && (w0 - 1.0).abs() < 1e-12);
            // with ĝ ≡ 0 and Y ≡ 1 each Hájek residual term is exactly 1
            let y = vec![1.0; n];
            let r = ate_from_nuisances(&y, &d, &ms, &vec![0.0; n], &vec![0.0; n], Some(trim), true).unwrap();
            prop_assert!(r.psi_hat.abs() < 1e-12);
        }

        #[test]
        fn wider_trim_keeps_more(ms in proptest::collection::vec(0.001f64..0.999, 20), a in 0.01f64..0.3, b in 0.0f64..0.2) {
            let mut d = vec![0.0; 20];
            for v in d.iter_mut().step_by(2) { *v = 1.0; }
            let narrow = TrimRule::new(a + b, 1.0 - a - b).unwrap();
            let wide = TrimRule::new(a, 1.0 - a).unwrap();
            let y = vec![0.0; 20];
            let z = vec![0.0; 20];
            let kept = |t: TrimRule| ms.iter().filter(|m| t.keeps(**m)).count();
            prop_assert!(kept(wide) >= kept(narrow));
            if let (Ok(n), Ok(w)) = (
                ate_from_nuisances(&y, &d, &ms, &z, &z, Some(narrow), false),
                ate_from_nuisances(&y, &d, &ms, &z, &z, Some(wide), false),
            ) {
                prop_assert!(w.n_effective >= n.n_effective);
            }
        }
    }
}

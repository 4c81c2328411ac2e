//! Kernel-smoothed Kolmogorov–Smirnov conditional dependence measure.
//!
//! For a candidate `X`, `Λ̂_j` is the largest gap between the conditional CDF
//! of `X` at `(y_j, w_j)` and at a reference `(y*, w_j)`, and `ρ̂` averages
//! `Λ̂_j` over the sample. The weight differences `ω_j − ω*_j` depend only on
//! `(Y, W)`, so [`DependenceEngine`] builds them once and evaluates any number
//! of candidates at `O(n²)` each after an `O(n log n)` sort.

use serde::{Deserialize, Serialize};

use crate::data::{check_binary, ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::kernel::{rot_bandwidths, Kernel, KernelSpec, ProductKernel, Smoothing};
use crate::par;
use crate::stats::quantile_type7;

/// Reference point for the response coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    /// `y*` is the sample median of `Y`.
    Median,
    /// Maximum over `y*` at each listed sample quantile of `Y`.
    Quantiles { probs: Vec<f64> },
    /// Binary `Y`: compare the arm-wise CDFs `F̂_1` and `F̂_0`.
    BinaryTreatment,
}

impl Reference {
    pub fn default_quantiles() -> Self {
        Reference::Quantiles {
            probs: vec![0.25, 0.5, 0.75],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Reference::Quantiles { probs } = self {
            if probs.is_empty() {
                return Err(Error::InvalidConfig("empty quantile reference set".into()));
            }
            if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                return Err(Error::InvalidConfig(
                    "quantile probabilities must lie strictly inside (0, 1)".into(),
                ));
            }
            if probs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidConfig(
                    "quantile probabilities must be sorted and distinct".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Default multiplier on the screening bandwidths `sd·n^(−1/den)`.
pub const DEFAULT_SCREENING_SCALE: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceConfig {
    pub reference: Reference,
    pub kernel: Kernel,
    /// Multiplier on the rule-of-thumb bandwidths.
    pub scale: f64,
    /// Retain per-observation `Λ̂` values in results.
    pub keep_lambda: bool,
}

impl Default for DependenceConfig {
    fn default() -> Self {
        DependenceConfig {
            reference: Reference::Median,
            kernel: Kernel::default(),
            scale: DEFAULT_SCREENING_SCALE,
            keep_lambda: false,
        }
    }
}

impl DependenceConfig {
    pub fn with_reference(reference: Reference) -> Self {
        DependenceConfig {
            reference,
            ..Default::default()
        }
    }
}

/// `ρ̂` for a single candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    pub rho: f64,
    pub lambda: Option<Vec<f64>>,
    /// Observations whose conditioning row had no kernel mass (`Λ̂ = 0`).
    pub zero_mass_rows: usize,
}

/// `ρ̂` for a set of candidates sharing one conditioning block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceResult {
    pub candidates: Vec<usize>,
    pub rho: Vec<f64>,
    pub lambda: Option<Vec<Vec<f64>>>,
    pub zero_mass_rows: usize,
    pub spec: KernelSpec,
    pub reference_values: Vec<f64>,
    /// Number of weight accumulations performed, a machine-independent cost.
    pub pair_operations: u64,
}

/// Empirical conditional CDF as a right-continuous step function.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCdf {
    /// Distinct sample values in increasing order.
    pub points: Vec<f64>,
    /// `F̂` at each point.
    pub values: Vec<f64>,
}

impl StepCdf {
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.points.partition_point(|p| *p <= x);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }
}

/// Stable ascending order of `x` plus flags marking the last index of each
/// run of tied values.
#[derive(Debug, Clone)]
pub struct SortedColumn {
    order: Vec<usize>,
    group_end: Vec<bool>,
}

impl SortedColumn {
    pub fn new(x: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let n = order.len();
        let group_end = (0..n)
            .map(|k| k + 1 == n || x[order[k]] != x[order[k + 1]])
            .collect();
        SortedColumn { order, group_end }
    }

    /// `max_x |Σ_{i: x_i ≤ x} delta_i|` over sample points, clamped to `[0, 1]`.
    /// The last group is skipped: both CDFs equal one there.
    #[inline]
    pub fn max_abs_cumsum(&self, delta: &[f64]) -> f64 {
        let mut s = 0.0;
        let mut m: f64 = 0.0;
        let last = self.order.len().saturating_sub(1);
        for (&i, &end) in self.order[..last].iter().zip(&self.group_end) {
            s += delta[i];
            if end {
                m = m.max(s.abs());
            }
        }
        m.min(1.0)
    }
}

/// Conditional CDF of `x` under nonnegative weights (normalized internally).
pub fn conditional_cdf(x: &[f64], weights: &[f64]) -> Result<StepCdf> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMassRow { row: 0 });
    }
    let sorted = SortedColumn::new(x);
    let mut points = Vec::new();
    let mut values = Vec::new();
    let mut s = 0.0;
    for (&i, &end) in sorted.order.iter().zip(&sorted.group_end) {
        s += weights[i] / total;
        if end {
            points.push(x[i]);
            values.push(s);
        }
    }
    // The full cumulative sum is one by construction.
    if let Some(last) = values.last_mut() {
        *last = 1.0;
    }
    Ok(StepCdf { points, values })
}

/// `F̂(· | y, w)` for candidate column `x_col` given the conditioning block
/// described by `spec` (response smoothed with `spec.h_y` when `y` is set).
pub fn conditional_cdf_at(
    data: &Dataset,
    x_col: usize,
    response: Option<usize>,
    spec: &KernelSpec,
    y: Option<f64>,
    w: &[f64],
) -> Result<StepCdf> {
    spec.validate()?;
    let mut vars: Vec<(&[f64], Smoothing)> = Vec::new();
    let mut query = Vec::new();
    if let (Some(r), Some(h), Some(y)) = (response, spec.h_y, y) {
        vars.push((&data.column(r).values, Smoothing::Continuous(h)));
        query.push(y);
    }
    if w.len() != spec.covariates.len() {
        return Err(Error::InvalidConfig(format!(
            "conditioning point has {} covariates, spec has {}",
            w.len(),
            spec.covariates.len()
        )));
    }
    for (c, v) in spec.covariates.iter().zip(w) {
        vars.push((&data.column(c.column).values, c.smoothing));
        query.push(*v);
    }
    let k = ProductKernel::new(spec.kernel, &vars, false)?;
    let q = k.project(&query);
    let weights: Vec<f64> = (0..data.n()).map(|i| k.weight(i, &q)).collect();
    conditional_cdf(&data.column(x_col).values, &weights).map_err(|_| Error::ZeroMassQuery)
}

/// Screening bandwidth denominator: `2r + q^c + 1` for a continuous response,
/// `2r + q^c` for a binary treatment.
pub fn screening_exponent_den(order: u32, q_c: usize, binary: bool) -> f64 {
    let base = 2.0 * order as f64 + q_c as f64;
    if binary {
        base
    } else {
        base + 1.0
    }
}

/// Shared per-`(Y, W)` state: stacked difference rows `ω_j − ω*_j`, one per
/// reference value.
#[derive(Debug, Clone)]
pub struct DependenceEngine {
    n: usize,
    refs: usize,
    delta: Vec<f64>,
    zero_mass: Vec<bool>,
    spec: KernelSpec,
    reference_values: Vec<f64>,
}

impl DependenceEngine {
    /// Builds the engine with rule-of-thumb screening bandwidths.
    pub fn new(data: &Dataset, response: usize, w: &[usize], cfg: &DependenceConfig) -> Result<Self> {
        cfg.reference.validate()?;
        let binary = cfg.reference == Reference::BinaryTreatment;
        let q_c = w
            .iter()
            .filter(|&&c| data.column(c).kind == ColumnKind::Continuous)
            .count();
        let den = screening_exponent_den(cfg.kernel.order, q_c, binary);
        Self::check_response(data, response, binary)?;
        let spec = rot_bandwidths(
            data,
            if binary { None } else { Some(response) },
            w,
            cfg.kernel,
            den,
            cfg.scale,
        )?;
        Self::with_spec(data, response, &cfg.reference, spec)
    }

    fn check_response(data: &Dataset, response: usize, binary: bool) -> Result<()> {
        let col = data.column(response);
        if binary {
            check_binary(&col.values)
        } else if col.kind != ColumnKind::Continuous {
            Err(Error::InvalidResponse(format!(
                "response '{}' must be continuous for a median or quantile reference",
                col.name
            )))
        } else {
            Ok(())
        }
    }

    /// Builds the engine with explicit smoothing; `spec.covariates` is the
    /// `W` block and `spec.h_y` smooths the response (ignored when binary).
    pub fn with_spec(data: &Dataset, response: usize, reference: &Reference, spec: KernelSpec) -> Result<Self> {
        reference.validate()?;
        spec.validate()?;
        let n = data.n();
        let binary = *reference == Reference::BinaryTreatment;
        Self::check_response(data, response, binary)?;
        let y = &data.column(response).values[..];
        let w_vars: Vec<(&[f64], Smoothing)> = spec
            .covariates
            .iter()
            .map(|c| (&data.column(c.column).values[..], c.smoothing))
            .collect();
        let kw = ProductKernel::new(spec.kernel, &w_vars, false)?;
        let reference_values = match reference {
            Reference::Median => vec![quantile_type7(y, 0.5)],
            Reference::Quantiles { probs } => probs.iter().map(|p| quantile_type7(y, *p)).collect(),
            Reference::BinaryTreatment => Vec::new(),
        };
        let refs = reference_values.len().max(1);
        let mut delta = vec![0.0; n * refs * n];
        let mut zero_mass = vec![false; n];

        if binary {
            par::for_each_chunk(&mut delta, n.max(1), |j, row| {
                let q = kw.query_of(j);
                let (mut s1, mut s0) = (0.0, 0.0);
                for (i, v) in row.iter_mut().enumerate() {
                    let b = kw.weight(i, &q);
                    *v = b;
                    if y[i] == 1.0 {
                        s1 += b;
                    } else {
                        s0 += b;
                    }
                }
                if s1 > 0.0 && s0 > 0.0 {
                    let (i1, i0) = (1.0 / s1, 1.0 / s0);
                    for (i, v) in row.iter_mut().enumerate() {
                        *v *= if y[i] == 1.0 { i1 } else { -i0 };
                    }
                } else {
                    row.iter_mut().for_each(|v| *v = f64::NAN);
                }
            });
        } else {
            let h_y = spec.h_y.ok_or_else(|| {
                Error::InvalidConfig("a continuous response needs a response bandwidth".into())
            })?;
            let ky = ProductKernel::new(spec.kernel, &[(y, Smoothing::Continuous(h_y))], false)?;
            let ky_ref: Vec<Vec<f64>> = reference_values
                .iter()
                .map(|r| (0..n).map(|i| ky.weight(i, &[*r])).collect())
                .collect();
            let mut both: Vec<(&[f64], Smoothing)> = vec![(y, Smoothing::Continuous(h_y))];
            both.extend(w_vars.iter().copied());
            let kyw = ProductKernel::new(spec.kernel, &both, false)?;
            par::for_each_chunk(&mut delta, (refs * n).max(1), |j, block| {
                let q = kyw.query_of(j);
                let qw = kw.query_of(j);
                let mut b = vec![0.0; n];
                let mut bw = vec![0.0; n];
                for i in 0..n {
                    b[i] = kyw.weight(i, &q);
                    bw[i] = kw.weight(i, &qw);
                }
                let s: f64 = b.iter().sum();
                for (r, row) in block.chunks_mut(n.max(1)).enumerate() {
                    let kr = &ky_ref[r];
                    let s_ref: f64 = (0..n).map(|i| kr[i] * bw[i]).sum();
                    if s > 0.0 && s_ref > 0.0 {
                        let (inv, inv_ref) = (1.0 / s, 1.0 / s_ref);
                        for i in 0..n {
                            row[i] = b[i] * inv - kr[i] * bw[i] * inv_ref;
                        }
                    } else {
                        row.iter_mut().for_each(|v| *v = f64::NAN);
                    }
                }
            });
        }
        for (j, z) in zero_mass.iter_mut().enumerate() {
            *z = delta[j * refs * n..(j + 1) * refs * n].iter().any(|v| v.is_nan());
        }
        Ok(DependenceEngine {
            n,
            refs,
            delta,
            zero_mass,
            spec,
            reference_values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn reference_values(&self) -> &[f64] {
        &self.reference_values
    }

    pub fn zero_mass_rows(&self) -> usize {
        self.zero_mass.iter().filter(|z| **z).count()
    }

    /// Difference row `ω_j − ω*_j` for reference index `r`.
    pub fn delta_row(&self, j: usize, r: usize) -> &[f64] {
        let start = (j * self.refs + r) * self.n;
        &self.delta[start..start + self.n]
    }

    /// `Λ̂_j` for a pre-sorted candidate.
    pub fn lambda_hat(&self, sorted: &SortedColumn, j: usize) -> f64 {
        if self.zero_mass[j] {
            return 0.0;
        }
        (0..self.refs)
            .map(|r| sorted.max_abs_cumsum(self.delta_row(j, r)))
            .fold(0.0, f64::max)
    }

    /// `ρ̂` for candidate values `x` (length `n`).
    pub fn evaluate(&self, x: &[f64], keep_lambda: bool) -> Result<RhoEstimate> {
        if x.len() != self.n {
            return Err(Error::InvalidConfig(format!(
                "candidate has {} values, expected {}",
                x.len(),
                self.n
            )));
        }
        let sorted = SortedColumn::new(x);
        let lambda: Vec<f64> = (0..self.n).map(|j| self.lambda_hat(&sorted, j)).collect();
        let rho = if self.n == 0 {
            0.0
        } else {
            (lambda.iter().sum::<f64>() / self.n as f64).clamp(0.0, 1.0)
        };
        Ok(RhoEstimate {
            rho,
            lambda: keep_lambda.then_some(lambda),
            zero_mass_rows: self.zero_mass_rows(),
        })
    }

    fn pair_operations(&self) -> u64 {
        (self.n as u64) * (self.n as u64) * self.refs as u64
    }
}

/// `ρ̂` of `x_col` given response `response` and conditioning block `w`.
pub fn rho_hat(
    data: &Dataset,
    x_col: usize,
    response: usize,
    w: &[usize],
    cfg: &DependenceConfig,
) -> Result<RhoEstimate> {
    let engine = DependenceEngine::new(data, response, w, cfg)?;
    engine.evaluate(&data.column(x_col).values, cfg.keep_lambda)
}

/// Binary-treatment `ρ̂`: compares `F̂_1(x|w_i)` and `F̂_0(x|w_i)`.
pub fn rho_hat_binary(
    data: &Dataset,
    x_col: usize,
    treatment: usize,
    w: &[usize],
    kernel: Kernel,
    scale: f64,
) -> Result<RhoEstimate> {
    let cfg = DependenceConfig {
        reference: Reference::BinaryTreatment,
        kernel,
        scale,
        keep_lambda: false,
    };
    rho_hat(data, x_col, treatment, w, &cfg)
}

/// `ρ̂` for every candidate, sharing the conditioning block.
pub fn rho_hat_all(
    data: &Dataset,
    candidates: &[usize],
    response: usize,
    w: &[usize],
    cfg: &DependenceConfig,
) -> Result<DependenceResult> {
    let engine = DependenceEngine::new(data, response, w, cfg)?;
    rho_hat_all_with(&engine, data, candidates, cfg.keep_lambda)
}

/// As [`rho_hat_all`] with a prebuilt engine.
pub fn rho_hat_all_with(
    engine: &DependenceEngine,
    data: &Dataset,
    candidates: &[usize],
    keep_lambda: bool,
) -> Result<DependenceResult> {
    let estimates = par::map_range(candidates.len(), |k| {
        engine.evaluate(&data.column(candidates[k]).values, keep_lambda)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let rho = estimates.iter().map(|e| e.rho).collect();
    let lambda = keep_lambda.then(|| estimates.into_iter().filter_map(|e| e.lambda).collect());
    Ok(DependenceResult {
        candidates: candidates.to_vec(),
        rho,
        lambda,
        zero_mass_rows: engine.zero_mass_rows(),
        spec: engine.spec.clone(),
        reference_values: engine.reference_values.clone(),
        pair_operations: engine.pair_operations() * candidates.len() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, Role};
    use crate::kernel::{aitchison_aitken, Bandwidth, CovariateSmoothing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let x: Vec<f64> = (0..n).map(|i| y[i] + rng.random::<f64>()).collect();
        let xd: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        Dataset::new(vec![
            Column::continuous("y", Role::Response, y),
            Column::continuous("w", Role::PreselectedW, w),
            Column::discrete_from_values("d", Role::PreselectedW, &d),
            Column::continuous("x", Role::Candidate, x),
            Column::discrete_from_values("xd", Role::Candidate, &xd),
        ])
        .unwrap()
    }

    fn b_naive(data: &Dataset, spec: &KernelSpec, y_query: f64, j: usize, i: usize) -> f64 {
        let y = &data.column(0).values;
        let mut b = spec.kernel.eval(y_query - y[i], spec.h_y.unwrap()).unwrap();
        for c in &spec.covariates {
            let v = &data.column(c.column).values;
            b *= match c.smoothing {
                Smoothing::Continuous(h) => spec.kernel.eval(v[j] - v[i], h).unwrap(),
                Smoothing::Discrete { lambda, atoms } => aitchison_aitken(v[j], v[i], lambda, atoms).unwrap(),
            };
        }
        b
    }

    fn cdf_naive(data: &Dataset, spec: &KernelSpec, x: &[f64], y_query: f64, j: usize, at: f64) -> f64 {
        let n = data.n();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let b = b_naive(data, spec, y_query, j, i);
            den += b;
            if x[i] <= at {
                num += b;
            }
        }
        num / den
    }

    fn rho_naive(data: &Dataset, spec: &KernelSpec, x: &[f64], refs: &[f64]) -> f64 {
        let n = data.n();
        let y = &data.column(0).values;
        let mut total = 0.0;
        for j in 0..n {
            let mut lam: f64 = 0.0;
            for &r in refs {
                for &at in x {
                    let d = cdf_naive(data, spec, x, y[j], j, at) - cdf_naive(data, spec, x, r, j, at);
                    lam = lam.max(d.abs());
                }
            }
            total += lam;
        }
        total / n as f64
    }

    #[test]
    fn fast_pipeline_matches_triple_loop() {
        for seed in 0..5 {
            let data = toy(seed, 10);
            for reference in [Reference::Median, Reference::default_quantiles()] {
                let cfg = DependenceConfig::with_reference(reference);
                let engine = DependenceEngine::new(&data, 0, &[1, 2], &cfg).unwrap();
                for x_col in [3, 4] {
                    let x = &data.column(x_col).values;
                    let fast = engine.evaluate(x, false).unwrap().rho;
                    let slow = rho_naive(&data, engine.spec(), x, engine.reference_values());
                    assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
                }
            }
        }
    }

    #[test]
    fn binary_matches_arm_cdf_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10;
        let dvals: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let x: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 4.0).floor()).collect();
        let data = Dataset::new(vec![
            Column::discrete_from_values("D", Role::Treatment, &dvals),
            Column::continuous("w", Role::PreselectedW, w.clone()),
            Column::continuous("x", Role::Candidate, x.clone()),
        ])
        .unwrap();
        let est = rho_hat_binary(&data, 2, 0, &[1], Kernel::default(), 1.0).unwrap();
        let h = rot_bandwidths(&data, None, &[1], Kernel::default(), 5.0, 1.0).unwrap();
        let Smoothing::Continuous(bw) = h.covariates[0].smoothing else { unreachable!() };
        let k = Kernel::default();
        let mut total = 0.0;
        for j in 0..n {
            let mut lam: f64 = 0.0;
            for &at in &x {
                let mut f = [0.0; 2];
                for arm in 0..2 {
                    let (mut num, mut den) = (0.0, 0.0);
                    for i in 0..n {
                        if dvals[i] as usize == arm {
                            let b = k.eval(w[j] - w[i], bw).unwrap();
                            den += b;
                            if x[i] <= at {
                                num += b;
                            }
                        }
                    }
                    f[arm] = num / den;
                }
                lam = lam.max((f[1] - f[0]).abs());
            }
            total += lam;
        }
        assert!((est.rho - total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn constant_treatment_is_degenerate() {
        let data = Dataset::new(vec![
            Column::continuous("D", Role::Treatment, vec![1.0; 5]),
            Column::continuous("x", Role::Candidate, vec![1.0, 2.0, 3.0, 4.0, 5.0]),
        ])
        .unwrap();
        let r = rho_hat_binary(&data, 1, 0, &[], Kernel::default(), 1.0);
        assert!(matches!(r, Err(Error::DegenerateTreatment { .. })));
        let data = Dataset::new(vec![
            Column::continuous("D", Role::Treatment, vec![1.0, 0.5, 0.0, 1.0, 0.0]),
            Column::continuous("x", Role::Candidate, vec![1.0, 2.0, 3.0, 4.0, 5.0]),
        ])
        .unwrap();
        let r = rho_hat_binary(&data, 1, 0, &[], Kernel::default(), 1.0);
        assert!(matches!(r, Err(Error::InvalidResponse(_))));
    }

    #[test]
    fn constant_candidate_gives_zero() {
        let data = toy(1, 12);
        let engine = DependenceEngine::new(&data, 0, &[1], &DependenceConfig::default()).unwrap();
        let est = engine.evaluate(&[2.5; 12], true).unwrap();
        assert_eq!(est.rho, 0.0);
        assert!(est.lambda.unwrap().iter().all(|l| *l == 0.0));
    }

    #[test]
    fn lambda_is_zero_when_y_equals_reference() {
        let y = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let data = Dataset::new(vec![
            Column::continuous("y", Role::Response, y),
            Column::continuous("x", Role::Candidate, vec![5.0, 1.0, 3.0, 2.0, 4.0]),
        ])
        .unwrap();
        let engine = DependenceEngine::new(&data, 0, &[], &DependenceConfig::default()).unwrap();
        assert_eq!(engine.reference_values(), &[2.0]);
        let sorted = SortedColumn::new(&data.column(1).values);
        assert_eq!(engine.lambda_hat(&sorted, 2), 0.0);
        assert!(engine.lambda_hat(&sorted, 0) > 0.0);
    }

    #[test]
    fn cdf_reduces_to_ecdf_and_ends_at_one() {
        let data = toy(2, 6);
        let spec = KernelSpec {
            kernel: Kernel::default(),
            h_y: Some(Bandwidth::SmoothOut),
            covariates: vec![CovariateSmoothing { column: 1, smoothing: Smoothing::Continuous(Bandwidth::SmoothOut) }],
        };
        let cdf = conditional_cdf_at(&data, 3, Some(0), &spec, Some(0.3), &[0.1]).unwrap();
        let x = &data.column(3).values;
        for &at in x {
            let ecdf = x.iter().filter(|v| **v <= at).count() as f64 / 6.0;
            assert!((cdf.eval(at) - ecdf).abs() < 1e-15);
        }
        assert_eq!(*cdf.values.last().unwrap(), 1.0);
        assert_eq!(cdf.eval(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn cdf_matches_direct_formula() {
        let data = toy(4, 6);
        let spec = rot_bandwidths(&data, Some(0), &[1, 2], Kernel::default(), 6.0, 1.0).unwrap();
        let (yq, wq, dq) = (0.2, 0.5, 1.0);
        let cdf = conditional_cdf_at(&data, 3, Some(0), &spec, Some(yq), &[wq, dq]).unwrap();
        let y = &data.column(0).values;
        let w = &data.column(1).values;
        let d = &data.column(2).values;
        let x = &data.column(3).values;
        let Smoothing::Continuous(hw) = spec.covariates[0].smoothing else { unreachable!() };
        let Smoothing::Discrete { lambda, atoms } = spec.covariates[1].smoothing else { unreachable!() };
        for &at in x {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..6 {
                let b = spec.kernel.eval(yq - y[i], spec.h_y.unwrap()).unwrap()
                    * spec.kernel.eval(wq - w[i], hw).unwrap()
                    * aitchison_aitken(dq, d[i], lambda, atoms).unwrap();
                den += b;
                if x[i] <= at {
                    num += b;
                }
            }
            assert!((cdf.eval(at) - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_exponent() {
        assert_eq!(screening_exponent_den(2, 1, false), 6.0);
        assert_eq!(screening_exponent_den(2, 1, true), 5.0);
    }

    #[test]
    fn rejects_bad_quantiles() {
        for probs in [vec![], vec![0.0, 0.5], vec![0.5, 0.25], vec![0.5, 0.5]] {
            assert!(Reference::Quantiles { probs }.validate().is_err());
        }
    }

    #[test]
    fn independent_and_dependent_large_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2000;
        let normal = |rng: &mut ChaCha8Rng| -> f64 {
            use rand_distr::{Distribution, StandardNormal};
            StandardNormal.sample(rng)
        };
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let data = Dataset::new(vec![
            Column::continuous("y", Role::Response, y.clone()),
            Column::continuous("x", Role::Candidate, x),
            Column::continuous("copy", Role::Candidate, y),
        ])
        .unwrap();
        let res = rho_hat_all(&data, &[1, 2], 0, &[], &DependenceConfig::default()).unwrap();
        assert!(res.rho[0] < 0.1, "{}", res.rho[0]);
        assert!(res.rho[1] > 0.5, "{}", res.rho[1]);
    }
}

//! Post-selection kernel estimators: conditional density, propensity score
//! and Nadaraya–Watson regression on a chosen covariate set.

use serde::{Deserialize, Serialize};

use crate::data::{check_binary, Dataset};
use crate::error::{Error, Result};
use crate::kernel::{lambda_cap, Bandwidth, CovariateSmoothing, Kernel, KernelSpec, ProductKernel, Smoothing};
use crate::par;

/// Behaviour when a query point has no kernel mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// Return the unconditional estimate (KDE, sample share or mean).
    #[default]
    Unconditional,
    /// Fail with `ZeroMassQuery`.
    Error,
}

/// Local fit used by the regression estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalFit {
    /// Nadaraya–Watson (local constant).
    #[default]
    Constant,
    /// Local linear in the continuous covariates; discrete covariates enter
    /// through their kernel weights only.
    Linear,
}

/// Batch predictions with the number of queries that used the fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub values: Vec<f64>,
    pub fallbacks: usize,
}

/// Fitted post-selection smoother. Covariates appear in `spec.covariates`
/// order; smoothed-out covariates are kept but never read.
#[derive(Debug, Clone, PartialEq)]
pub struct CdeModel {
    spec: KernelSpec,
    names: Vec<String>,
    x: Vec<Vec<f64>>,
    y: Option<Vec<f64>>,
    d: Option<Vec<f64>>,
    policy: FallbackPolicy,
    local: LocalFit,
}

impl CdeModel {
    /// Copies the training columns named by `spec` (plus response and
    /// treatment when given) out of `data`.
    pub fn fit(data: &Dataset, spec: KernelSpec, response: Option<usize>, treatment: Option<usize>) -> Result<Self> {
        spec.validate()?;
        if let Some(t) = treatment {
            check_binary(&data.column(t).values)?;
        }
        if response.is_some() && spec.h_y.is_none() {
            return Err(Error::InvalidConfig("density estimation needs a response bandwidth".into()));
        }
        Ok(CdeModel {
            names: spec.covariates.iter().map(|c| data.column(c.column).name.clone()).collect(),
            x: spec.covariates.iter().map(|c| data.column(c.column).values.clone()).collect(),
            y: response.map(|r| data.column(r).values.clone()),
            d: treatment.map(|t| data.column(t).values.clone()),
            spec,
            policy: FallbackPolicy::default(),
            local: LocalFit::Constant,
        })
    }

    /// Propensity or regression model with no response bandwidth.
    pub fn fit_regression(data: &Dataset, spec: KernelSpec, response: Option<usize>, treatment: Option<usize>) -> Result<Self> {
        let mut m = Self::fit(data, KernelSpec { h_y: None, ..spec }, None, treatment)?;
        m.y = response.map(|r| data.column(r).values.clone());
        Ok(m)
    }

    pub fn with_policy(mut self, policy: FallbackPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Switches the regression estimators to `local`. Density and propensity
    /// estimates are unaffected.
    pub fn with_local_fit(mut self, local: LocalFit) -> Self {
        self.local = local;
        self
    }

    pub fn local_fit(&self) -> LocalFit {
        self.local
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.x
            .first()
            .map(Vec::len)
            .or_else(|| self.y.as_ref().map(Vec::len))
            .or_else(|| self.d.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    /// Names of covariates that are not smoothed out.
    pub fn selected(&self) -> Vec<String> {
        self.spec
            .covariates
            .iter()
            .zip(&self.names)
            .filter(|(c, _)| !c.smoothing.is_smoothed_out())
            .map(|(_, n)| n.clone())
            .collect()
    }

    fn product_kernel(&self) -> Result<ProductKernel<'_>> {
        let vars: Vec<(&[f64], Smoothing)> = self
            .spec
            .covariates
            .iter()
            .zip(&self.x)
            .map(|(c, col)| (&col[..], c.smoothing))
            .collect();
        ProductKernel::new(self.spec.kernel, &vars, false)
    }

    fn check_row(&self, x_row: &[f64]) -> Result<()> {
        if x_row.len() != self.x.len() {
            return Err(Error::InvalidConfig(format!(
                "query has {} covariates, model has {}",
                x_row.len(),
                self.x.len()
            )));
        }
        Ok(())
    }

    fn y(&self) -> Result<&[f64]> {
        self.y
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("model was fitted without a response".into()))
    }

    fn d(&self) -> Result<&[f64]> {
        self.d
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("model was fitted without a treatment".into()))
    }

    /// Unconditional KDE of the response at `y`, skipping `skip`.
    fn marginal_density(&self, y: f64, skip: Option<usize>) -> Result<f64> {
        let ys = self.y()?;
        let h = self.spec.h_y.unwrap_or(Bandwidth::SmoothOut);
        let mut s = 0.0;
        let mut m = 0usize;
        for (i, yi) in ys.iter().enumerate() {
            if Some(i) != skip {
                s += self.spec.kernel.eval(y - yi, h)?;
                m += 1;
            }
        }
        Ok(if m == 0 { 0.0 } else { s / m as f64 })
    }

    fn density_impl(&self, k: &ProductKernel<'_>, y: f64, q: &[f64], skip: Option<usize>) -> Result<(f64, bool)> {
        let ys = self.y()?;
        let h = self.spec.h_y.unwrap_or(Bandwidth::SmoothOut);
        let (mut num, mut den) = (0.0, 0.0);
        for (i, yi) in ys.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            let w = k.weight(i, q);
            if w != 0.0 {
                num += w * self.spec.kernel.eval(y - yi, h)?;
                den += w;
            }
        }
        if den > 0.0 {
            Ok((num / den, false))
        } else {
            match self.policy {
                FallbackPolicy::Error => Err(Error::ZeroMassQuery),
                FallbackPolicy::Unconditional => Ok((self.marginal_density(y, skip)?, true)),
            }
        }
    }

    /// `f̂(y | x)`.
    pub fn density_at(&self, y: f64, x_row: &[f64]) -> Result<f64> {
        self.check_row(x_row)?;
        let k = self.product_kernel()?;
        Ok(self.density_impl(&k, y, &k.project(x_row), None)?.0)
    }

    /// Leave-one-out `f̂₋ᵢ(y_i | x_i)`.
    pub fn density_loo(&self, i: usize) -> Result<f64> {
        let k = self.product_kernel()?;
        Ok(self.density_impl(&k, self.y()?[i], &k.query_of(i), Some(i))?.0)
    }

    /// Weighted mean of `target` over observations passing `keep`.
    fn ratio_impl(
        &self,
        k: &ProductKernel<'_>,
        q: &[f64],
        target: &[f64],
        arm: Option<&[f64]>,
        arm_value: f64,
        skip: Option<usize>,
    ) -> Result<(f64, bool)> {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, t) in target.iter().enumerate() {
            if Some(i) == skip || arm.is_some_and(|a| a[i] != arm_value) {
                continue;
            }
            let w = k.weight(i, q);
            num += w * t;
            den += w;
        }
        if den > 0.0 {
            return Ok((num / den, false));
        }
        if self.policy == FallbackPolicy::Error {
            return Err(Error::ZeroMassQuery);
        }
        let (mut s, mut m) = (0.0, 0usize);
        for (i, t) in target.iter().enumerate() {
            if Some(i) != skip && arm.is_none_or(|a| a[i] == arm_value) {
                s += t;
                m += 1;
            }
        }
        if m == 0 {
            return Err(Error::ZeroMassQuery);
        }
        Ok((s / m as f64, true))
    }

    fn check_propensity_kernel(&self) -> Result<()> {
        if !self.spec.kernel.is_nonnegative() {
            return Err(Error::InvalidConfig(
                "propensity estimation needs a nonnegative (order 2) kernel".into(),
            ));
        }
        Ok(())
    }

    /// `m̂(x)`, the kernel-weighted share of treated observations.
    pub fn propensity_at(&self, x_row: &[f64]) -> Result<f64> {
        self.check_row(x_row)?;
        self.check_propensity_kernel()?;
        let k = self.product_kernel()?;
        Ok(self.ratio_impl(&k, &k.project(x_row), self.d()?, None, 0.0, None)?.0)
    }

    pub fn propensity_loo(&self, i: usize) -> Result<f64> {
        self.check_propensity_kernel()?;
        let k = self.product_kernel()?;
        Ok(self.ratio_impl(&k, &k.query_of(i), self.d()?, None, 0.0, Some(i))?.0)
    }

    /// `ĝ(x)`, optionally restricted to treatment arm `arm`.
    pub fn regress_at(&self, x_row: &[f64], arm: Option<u8>) -> Result<f64> {
        self.check_row(x_row)?;
        let k = self.product_kernel()?;
        let (a, v) = self.arm_filter(arm)?;
        Ok(self.regress_impl(&k, &k.project(x_row), self.y()?, a, v, None)?.0)
    }

    pub fn regress_loo(&self, i: usize, arm: Option<u8>) -> Result<f64> {
        let k = self.product_kernel()?;
        let (a, v) = self.arm_filter(arm)?;
        Ok(self.regress_impl(&k, &k.query_of(i), self.y()?, a, v, Some(i))?.0)
    }

    fn regress_impl(
        &self,
        k: &ProductKernel<'_>,
        q: &[f64],
        target: &[f64],
        arm: Option<&[f64]>,
        arm_value: f64,
        skip: Option<usize>,
    ) -> Result<(f64, bool)> {
        if self.local == LocalFit::Linear && k.continuous_count() > 0 {
            if let Some(v) = local_linear(k, q, target, arm, arm_value, skip) {
                return Ok((v, false));
            }
        }
        self.ratio_impl(k, q, target, arm, arm_value, skip)
    }

    fn arm_filter(&self, arm: Option<u8>) -> Result<(Option<&[f64]>, f64)> {
        match arm {
            None => Ok((None, 0.0)),
            Some(a) => Ok((Some(self.d()?), a as f64)),
        }
    }

    fn batch<F>(&self, rows: &[Vec<f64>], f: F) -> Result<Predictions>
    where
        F: Fn(&ProductKernel<'_>, &[f64]) -> Result<(f64, bool)> + Sync + Send,
    {
        for r in rows {
            self.check_row(r)?;
        }
        let k = self.product_kernel()?;
        let out = par::map_range(rows.len(), |j| f(&k, &k.project(&rows[j])))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictions {
            fallbacks: out.iter().filter(|(_, fb)| *fb).count(),
            values: out.into_iter().map(|(v, _)| v).collect(),
        })
    }

    pub fn density_many(&self, ys: &[f64], rows: &[Vec<f64>]) -> Result<Predictions> {
        if ys.len() != rows.len() {
            return Err(Error::InvalidConfig("response and row counts differ".into()));
        }
        let idx: Vec<Vec<f64>> = rows.to_vec();
        let pairs: Vec<(f64, usize)> = ys.iter().copied().zip(0..).collect();
        let k = self.product_kernel()?;
        let out = par::map_range(pairs.len(), |j| {
            self.density_impl(&k, pairs[j].0, &k.project(&idx[pairs[j].1]), None)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Predictions {
            fallbacks: out.iter().filter(|(_, fb)| *fb).count(),
            values: out.into_iter().map(|(v, _)| v).collect(),
        })
    }

    pub fn propensity_many(&self, rows: &[Vec<f64>]) -> Result<Predictions> {
        self.check_propensity_kernel()?;
        let d = self.d()?;
        self.batch(rows, |k, q| self.ratio_impl(k, q, d, None, 0.0, None))
    }

    pub fn regress_many(&self, rows: &[Vec<f64>], arm: Option<u8>) -> Result<Predictions> {
        let y = self.y()?;
        let (a, v) = self.arm_filter(arm)?;
        self.batch(rows, |k, q| self.regress_impl(k, q, y, a, v, None))
    }
}

/// Weighted least squares of `target` on `(1, x − q)` over the continuous
/// query coordinates; returns the intercept. `None` when the local design is
/// singular, in which case the caller falls back to the local constant.
fn local_linear(
    k: &ProductKernel<'_>,
    q: &[f64],
    target: &[f64],
    arm: Option<&[f64]>,
    arm_value: f64,
    skip: Option<usize>,
) -> Option<f64> {
    let p = k.continuous_count() + 1;
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    let mut z = vec![0.0; p];
    z[0] = 1.0;
    for (i, t) in target.iter().enumerate() {
        if Some(i) == skip || arm.is_some_and(|d| d[i] != arm_value) {
            continue;
        }
        let w = k.weight(i, q);
        if w == 0.0 {
            continue;
        }
        for c in 1..p {
            z[c] = k.continuous_value(c - 1, i) - q[c - 1];
        }
        for r in 0..p {
            let wz = w * z[r];
            b[r] += wz * t;
            for c in r..p {
                a[r * p + c] += wz * z[c];
            }
        }
    }
    for r in 0..p {
        for c in 0..r {
            a[r * p + c] = a[c * p + r];
        }
    }
    solve_spd(&mut a, &mut b, p).map(|x| x[0])
}

/// Cholesky solve of a small symmetric positive definite system in place.
fn solve_spd(a: &mut [f64], b: &mut [f64], p: usize) -> Option<Vec<f64>> {
    let scale = (0..p).map(|i| a[i * p + i]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if !(d > 1e-10 * scale) {
            return None;
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / d;
        }
    }
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * p + k] * b[k];
        }
        b[i] = s / a[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in i + 1..p {
            s -= a[k * p + i] * b[k];
        }
        b[i] = s / a[i * p + i];
    }
    Some(b.to_vec())
}

/// Covariate rows of `data` for the columns of `spec`, one row per observation.
pub fn query_rows(data: &Dataset, spec: &KernelSpec) -> Vec<Vec<f64>> {
    (0..data.n())
        .map(|i| spec.covariates.iter().map(|c| data.column(c.column).values[i]).collect())
        .collect()
}

/// Regression bandwidths `h = c·sd·n^(−1/(2r+p^c))`, `λ = min(c·n^(−r/(2r+p^c)), cap)`
/// on `cols`, every other covariate in `all` smoothed out.
pub fn regression_spec(data: &Dataset, all: &[usize], cols: &[usize], kernel: Kernel, scale: f64) -> Result<KernelSpec> {
    let n = data.n();
    let p_c = cols
        .iter()
        .filter(|&&c| data.column(c).kind == crate::data::ColumnKind::Continuous)
        .count();
    let den = 2.0 * kernel.order as f64 + p_c as f64;
    let covariates = all
        .iter()
        .map(|&c| {
            let col = data.column(c);
            let on = cols.contains(&c);
            let smoothing = match col.kind {
                crate::data::ColumnKind::Continuous => {
                    if on {
                        let sd = col.sd();
                        if !(sd > 0.0) {
                            return Err(Error::DegenerateColumn(col.name.clone()));
                        }
                        Smoothing::Continuous(Bandwidth::Finite(crate::kernel::rot_bandwidth(sd, n, den, scale)))
                    } else {
                        Smoothing::Continuous(Bandwidth::SmoothOut)
                    }
                }
                crate::data::ColumnKind::Discrete => {
                    let atoms = col.atoms().max(2);
                    let lambda = if on {
                        crate::kernel::rot_lambda(n, kernel.order, den, scale, atoms)
                    } else {
                        lambda_cap(atoms)
                    };
                    Smoothing::Discrete { lambda, atoms }
                }
            };
            Ok(CovariateSmoothing { column: c, smoothing })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelSpec {
        kernel,
        h_y: None,
        covariates,
    })
}

/// Outcome of a leave-one-out least-squares bandwidth search.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub model: CdeModel,
    pub scale: f64,
    pub cv: f64,
}

/// Arm-specific NW regression of `response` on `cols`, with the bandwidth
/// scale chosen from `scale_grid` by leave-one-out squared error within the arm.
pub fn fit_regression_cv(
    data: &Dataset,
    cols: &[usize],
    response: usize,
    treatment: usize,
    arm: u8,
    kernel: Kernel,
    local: LocalFit,
    scale_grid: &[f64],
) -> Result<RegressionFit> {
    if scale_grid.is_empty() {
        return Err(Error::InvalidConfig("empty scale grid".into()));
    }
    let d = &data.column(treatment).values;
    let rows: Vec<usize> = (0..data.n()).filter(|&i| d[i] == arm as f64).collect();
    if rows.len() < 2 {
        return Err(Error::DegenerateTreatment { arm });
    }
    let arm_data = data.select_rows(&rows);
    let y = &arm_data.column(response).values;
    let mut best: Option<RegressionFit> = None;
    for &c in scale_grid {
        let spec = regression_spec(&arm_data, cols, cols, kernel, c)?;
        let model = CdeModel::fit_regression(&arm_data, spec, Some(response), None)?.with_local_fit(local);
        let k = model.product_kernel()?;
        let errs = par::map_range(rows.len(), |i| {
            model
                .regress_impl(&k, &k.query_of(i), y, None, 0.0, Some(i))
                .map(|(g, _)| (y[i] - g) * (y[i] - g))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let cv = errs.iter().sum::<f64>() / rows.len() as f64;
        if best.as_ref().is_none_or(|b| cv < b.cv) {
            best = Some(RegressionFit { model, scale: c, cv });
        }
    }
    Ok(best.expect("nonempty grid"))
}

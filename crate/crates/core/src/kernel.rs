//! Kernel functions, rule-of-thumb bandwidths and pairwise weight matrices.
//!
//! Continuous covariates use a scaled kernel `K_h(u) = K(u/h)/h`; discrete
//! covariates use the Aitchison–Aitken kernel. A continuous bandwidth may be
//! [`Bandwidth::SmoothOut`], which gives every pair the weight 1 and so removes
//! the covariate from any ratio estimator. A discrete covariate at its upper
//! limit `(r-1)/r` contributes the constant `1/r` for every pair.

use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::par;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Gaussian,
    Epanechnikov,
}

/// A symmetric kernel of a given family and (even) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    pub order: u32,
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel {
            family: KernelFamily::Gaussian,
            order: 2,
        }
    }
}

impl Kernel {
    pub fn new(family: KernelFamily, order: u32) -> Result<Self> {
        if order != 2 && order != 4 {
            return Err(Error::InvalidConfig(format!(
                "kernel order must be 2 or 4, got {order}"
            )));
        }
        Ok(Kernel { family, order })
    }

    /// Unscaled kernel `K(u)`.
    pub fn shape(&self, u: f64) -> f64 {
        match (self.family, self.order) {
            (KernelFamily::Gaussian, 2) => INV_SQRT_2PI * (-0.5 * u * u).exp(),
            (KernelFamily::Gaussian, _) => {
                (1.5 - 0.5 * u * u) * INV_SQRT_2PI * (-0.5 * u * u).exp()
            }
            (KernelFamily::Epanechnikov, 2) => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            (KernelFamily::Epanechnikov, _) => {
                if u.abs() <= 1.0 {
                    let u2 = u * u;
                    15.0 / 32.0 * (3.0 - 10.0 * u2 + 7.0 * u2 * u2)
                } else {
                    0.0
                }
            }
        }
    }

    /// `K_h(u) = K(u/h)/h`; `SmoothOut` evaluates to 1 for every `u`.
    pub fn eval(&self, u: f64, h: Bandwidth) -> Result<f64> {
        match h {
            Bandwidth::SmoothOut => Ok(1.0),
            Bandwidth::Finite(h) => {
                if !(h > 0.0) || !h.is_finite() {
                    return Err(Error::InvalidBandwidth(format!("h = {h}")));
                }
                Ok(self.shape(u / h) / h)
            }
        }
    }

    /// Whether every weight the kernel produces is nonnegative.
    pub fn is_nonnegative(&self) -> bool {
        self.order == 2
    }

    /// Support radius in units of `h` beyond which the kernel is negligible
    /// (below 1e-17 relative to the peak for the Gaussian).
    pub fn effective_radius(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => 9.0,
            KernelFamily::Epanechnikov => 1.0,
        }
    }
}

/// Continuous bandwidth. `SmoothOut` stands in for an infinite bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Finite(f64),
    SmoothOut,
}

impl Bandwidth {
    pub fn is_smooth_out(&self) -> bool {
        matches!(self, Bandwidth::SmoothOut)
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Bandwidth::Finite(h) => Some(*h),
            Bandwidth::SmoothOut => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Bandwidth::Finite(h) if !(*h > 0.0) || !h.is_finite() => {
                Err(Error::InvalidBandwidth(format!("h = {h}")))
            }
            _ => Ok(()),
        }
    }
}

/// Upper limit `(r-1)/r` of the Aitchison–Aitken smoothing parameter.
pub fn lambda_cap(atoms: usize) -> f64 {
    (atoms as f64 - 1.0) / atoms as f64
}

fn check_lambda(lambda: f64, atoms: usize) -> Result<()> {
    if atoms < 2 {
        return Err(Error::InvalidBandwidth(format!(
            "discrete covariate needs at least 2 atoms, got {atoms}"
        )));
    }
    if !(0.0..=lambda_cap(atoms)).contains(&lambda) {
        return Err(Error::InvalidBandwidth(format!(
            "lambda = {lambda} outside [0, {}]",
            lambda_cap(atoms)
        )));
    }
    Ok(())
}

/// Aitchison–Aitken kernel: `1 - lambda` on a match, `lambda/(r-1)` otherwise.
/// At the cap both branches return exactly `1/r`.
pub fn aitchison_aitken(w1: f64, w2: f64, lambda: f64, atoms: usize) -> Result<f64> {
    check_lambda(lambda, atoms)?;
    Ok(aa_factors(lambda, atoms).map_or(1.0 / atoms as f64, |(hit, miss)| {
        if w1 == w2 {
            hit
        } else {
            miss
        }
    }))
}

/// `(match, mismatch)` weights, or `None` when lambda sits at the cap.
fn aa_factors(lambda: f64, atoms: usize) -> Option<(f64, f64)> {
    if lambda >= lambda_cap(atoms) {
        None
    } else {
        Some((1.0 - lambda, lambda / (atoms as f64 - 1.0)))
    }
}

/// Smoothing for one conditioning covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    Continuous(Bandwidth),
    Discrete { lambda: f64, atoms: usize },
}

impl Smoothing {
    /// True at the upper extreme: `SmoothOut` or `lambda = (r-1)/r`.
    pub fn is_smoothed_out(&self) -> bool {
        match *self {
            Smoothing::Continuous(b) => b.is_smooth_out(),
            Smoothing::Discrete { lambda, atoms } => lambda >= lambda_cap(atoms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateSmoothing {
    pub column: usize,
    pub smoothing: Smoothing,
}

/// Kernel plus per-variable smoothing parameters for one smoother.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel: Kernel,
    /// Response bandwidth, when the response is smoothed.
    pub h_y: Option<Bandwidth>,
    pub covariates: Vec<CovariateSmoothing>,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(h) = self.h_y {
            h.validate()?;
        }
        for c in &self.covariates {
            match c.smoothing {
                Smoothing::Continuous(b) => b.validate()?,
                Smoothing::Discrete { lambda, atoms } => check_lambda(lambda, atoms)?,
            }
        }
        Ok(())
    }
}

/// `scale * sd * n^(-1/den)`.
pub fn rot_bandwidth(sd: f64, n: usize, exponent_den: f64, scale: f64) -> f64 {
    scale * sd * (n as f64).powf(-1.0 / exponent_den)
}

/// `min(scale * n^(-r/den), (r_l-1)/r_l)`.
pub fn rot_lambda(n: usize, order: u32, exponent_den: f64, scale: f64, atoms: usize) -> f64 {
    (scale * (n as f64).powf(-(order as f64) / exponent_den)).min(lambda_cap(atoms))
}

/// Rule-of-thumb smoothing for `response` (if given) and `cond` columns.
pub fn rot_bandwidths(
    data: &Dataset,
    response: Option<usize>,
    cond: &[usize],
    kernel: Kernel,
    exponent_den: f64,
    scale: f64,
) -> Result<KernelSpec> {
    if !(exponent_den > 0.0) || !(scale > 0.0) {
        return Err(Error::InvalidBandwidth(format!(
            "exponent denominator {exponent_den} and scale {scale} must be positive"
        )));
    }
    let n = data.n();
    let continuous_bw = |idx: usize| -> Result<Bandwidth> {
        let col = data.column(idx);
        let sd = col.sd();
        if !(sd > 0.0) {
            return Err(Error::DegenerateColumn(col.name.clone()));
        }
        Ok(Bandwidth::Finite(rot_bandwidth(sd, n, exponent_den, scale)))
    };
    let h_y = response.map(continuous_bw).transpose()?;
    let covariates = cond
        .iter()
        .map(|&idx| {
            let col = data.column(idx);
            let smoothing = match col.kind {
                ColumnKind::Continuous => Smoothing::Continuous(continuous_bw(idx)?),
                ColumnKind::Discrete => {
                    let atoms = col.atoms();
                    if atoms < 2 {
                        return Err(Error::DegenerateColumn(col.name.clone()));
                    }
                    Smoothing::Discrete {
                        lambda: rot_lambda(n, kernel.order, exponent_den, scale, atoms),
                        atoms,
                    }
                }
            };
            Ok(CovariateSmoothing {
                column: idx,
                smoothing,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KernelSpec {
        kernel,
        h_y,
        covariates,
    })
}

/// Pairwise product kernel over a set of variables.
///
/// Weights are computed between a query point (values in variable order) and
/// a stored observation. Smoothed-out variables never read their column, so
/// permuting such a column cannot change any weight.
#[derive(Debug, Clone)]
pub(crate) struct ProductKernel<'a> {
    kernel: Kernel,
    cont: Vec<(&'a [f64], f64)>,
    disc: Vec<(&'a [f64], f64, f64)>,
    active: Vec<usize>,
    constant: f64,
}

impl<'a> ProductKernel<'a> {
    /// `vars` pairs each column slice with its smoothing. With `normalized`
    /// the `1/h` and `1/r` constants are applied, giving exact `K_h` products.
    pub fn new(kernel: Kernel, vars: &[(&'a [f64], Smoothing)], normalized: bool) -> Result<Self> {
        let mut cont = Vec::new();
        let mut disc = Vec::new();
        let mut cont_idx = Vec::new();
        let mut disc_idx = Vec::new();
        let mut constant = 1.0;
        for (v, &(col, sm)) in vars.iter().enumerate() {
            match sm {
                Smoothing::Continuous(Bandwidth::SmoothOut) => {}
                Smoothing::Continuous(Bandwidth::Finite(h)) => {
                    Bandwidth::Finite(h).validate()?;
                    cont.push((col, 1.0 / h));
                    cont_idx.push(v);
                    if normalized {
                        constant /= h;
                    }
                }
                Smoothing::Discrete { lambda, atoms } => {
                    check_lambda(lambda, atoms)?;
                    match aa_factors(lambda, atoms) {
                        Some((hit, miss)) => {
                            disc.push((col, hit, miss));
                            disc_idx.push(v);
                        }
                        None => {
                            if normalized {
                                constant /= atoms as f64
                            }
                        }
                    }
                }
            }
        }
        if normalized && kernel.family == KernelFamily::Gaussian {
            constant *= INV_SQRT_2PI.powi(cont.len() as i32);
        }
        cont_idx.extend(disc_idx);
        Ok(ProductKernel {
            kernel,
            cont,
            disc,
            active: cont_idx,
            constant,
        })
    }

    /// Maps values given for every variable (in construction order) onto the
    /// query layout used by [`ProductKernel::weight`].
    pub fn project(&self, full: &[f64]) -> Vec<f64> {
        self.active.iter().map(|&v| full[v]).collect()
    }

    /// Values of observation `j` in variable order (continuous then discrete).
    pub fn query_of(&self, j: usize) -> Vec<f64> {
        self.cont
            .iter()
            .map(|(c, _)| c[j])
            .chain(self.disc.iter().map(|(c, _, _)| c[j]))
            .collect()
    }

    /// Number of finite-bandwidth continuous variables; they lead the query layout.
    pub fn continuous_count(&self) -> usize {
        self.cont.len()
    }

    /// Value of observation `i` for the `k`-th finite-bandwidth continuous variable.
    pub fn continuous_value(&self, k: usize, i: usize) -> f64 {
        self.cont[k].0[i]
    }

    /// Weight between stored observation `i` and `query`.
    #[inline]
    pub fn weight(&self, i: usize, query: &[f64]) -> f64 {
        let nc = self.cont.len();
        let mut w = self.constant;
        match (self.kernel.family, self.kernel.order) {
            (KernelFamily::Gaussian, order) => {
                let mut s = 0.0;
                let mut poly = 1.0;
                for (k, (col, inv_h)) in self.cont.iter().enumerate() {
                    let u = (query[k] - col[i]) * inv_h;
                    let u2 = u * u;
                    s += u2;
                    if order == 4 {
                        poly *= 1.5 - 0.5 * u2;
                    }
                }
                if nc > 0 {
                    w *= poly * (-0.5 * s).exp();
                }
            }
            (KernelFamily::Epanechnikov, _) => {
                for (k, (col, inv_h)) in self.cont.iter().enumerate() {
                    let u = (query[k] - col[i]) * inv_h;
                    w *= self.kernel.shape(u);
                }
            }
        }
        for (k, (col, hit, miss)) in self.disc.iter().enumerate() {
            w *= if query[nc + k] == col[i] { *hit } else { *miss };
        }
        w
    }
}

/// Dense `n x n` weight matrix; row `j` holds the weights of every sample
/// observation `i` relative to conditioning point `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    data: Vec<f64>,
    row_sums: Vec<f64>,
    normalized: bool,
}

impl WeightMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.data[j * self.n + i]
    }

    /// Raw row masses `b_j.` (kept after normalization).
    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Divides each row by its mass. Rows of zero mass are left at zero and
    /// their indices returned.
    pub fn normalize_lenient(&mut self) -> Vec<usize> {
        let n = self.n;
        let sums = &self.row_sums;
        par::for_each_chunk(&mut self.data, n.max(1), |j, row| {
            let s = sums[j];
            if s > 0.0 {
                let inv = 1.0 / s;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        });
        self.normalized = true;
        (0..n).filter(|&j| !(self.row_sums[j] > 0.0)).collect()
    }

    /// Normalizes rows to sum to one; a zero-mass row is an error.
    pub fn normalize(mut self) -> Result<Self> {
        if let Some(row) = self.row_sums.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::ZeroMassRow { row });
        }
        self.normalize_lenient();
        Ok(self)
    }
}

/// Builds the unnormalized matrix `b_ji` over the response (when `spec.h_y`
/// and `response` are both set) and `spec.covariates`. `reference` replaces
/// the response value of every conditioning row, giving `b*_ji`.
pub fn raw_weight_matrix(
    data: &Dataset,
    spec: &KernelSpec,
    response: Option<usize>,
    reference: Option<f64>,
) -> Result<WeightMatrix> {
    spec.validate()?;
    let n = data.n();
    let (y_col, h_y) = match (response, spec.h_y) {
        (Some(r), Some(h)) => (Some(&data.column(r).values[..]), Some(h)),
        _ => (None, None),
    };
    let vars: Vec<(&[f64], Smoothing)> = spec
        .covariates
        .iter()
        .map(|c| (&data.column(c.column).values[..], c.smoothing))
        .collect();
    let cond = ProductKernel::new(spec.kernel, &vars, true)?;
    let y_kernel = match (y_col, h_y) {
        (Some(y), Some(h)) => {
            let vars = [(y, Smoothing::Continuous(h))];
            Some(ProductKernel::new(spec.kernel, &vars, true)?)
        }
        _ => None,
    };
    // Reference rows share one response factor per observation.
    let y_ref: Option<Vec<f64>> = match (&y_kernel, reference) {
        (Some(k), Some(r)) => Some((0..n).map(|i| k.weight(i, &[r])).collect()),
        _ => None,
    };
    let mut data_buf = vec![0.0; n * n];
    par::for_each_chunk(&mut data_buf, n.max(1), |j, row| {
        let q = cond.query_of(j);
        let yq = y_col.map(|y| [y[j]]);
        for (i, v) in row.iter_mut().enumerate() {
            let mut w = cond.weight(i, &q);
            if let Some(yr) = &y_ref {
                w *= yr[i];
            } else if let (Some(k), Some(yq)) = (&y_kernel, &yq) {
                w *= k.weight(i, yq);
            }
            *v = w;
        }
    });
    let row_sums = (0..n)
        .map(|j| data_buf[j * n..(j + 1) * n].iter().sum())
        .collect();
    Ok(WeightMatrix {
        n,
        data: data_buf,
        row_sums,
        normalized: false,
    })
}

/// Row-normalized weight matrix `omega_ji = b_ji / b_j.`.
pub fn weight_matrix(
    data: &Dataset,
    spec: &KernelSpec,
    response: Option<usize>,
    reference: Option<f64>,
) -> Result<WeightMatrix> {
    raw_weight_matrix(data, spec, response, reference)?.normalize()
}

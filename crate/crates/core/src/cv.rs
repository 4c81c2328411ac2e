//! Cross-validated refinement of a screened covariate set.
//!
//! Every inclusion pattern over the screened set is scored at rate-optimal
//! bandwidths (times a small grid of constants); excluded covariates sit at
//! their smoothing upper limits, so the search is discrete.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cde::CdeModel;
use crate::data::{check_binary, ColumnKind, Dataset};
use crate::dependence::{rho_hat_all, DependenceConfig, Reference};
use crate::error::{Error, Result};
use crate::kernel::{
    lambda_cap, rot_bandwidth, rot_lambda, Bandwidth, CovariateSmoothing, Kernel, KernelFamily, KernelSpec,
    ProductKernel, Smoothing,
};
use crate::par;
use crate::screening::{from_dependence, ScreeningOutcome};

/// Largest screened set the exhaustive search accepts.
pub const SEARCH_CAP: usize = 20;
/// Largest `n` for which [`CvMethod::Auto`] uses the exact `O(n³)` criterion.
pub const EXACT_MAX_N: usize = 150;

const RIDGE: f64 = 1e-12;
const DROP_FRACTION: f64 = 1e-10;
const BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    /// Conditional density of a continuous response.
    #[default]
    ContinuousY,
    /// Conditional probability of a binary treatment.
    BinaryD,
}

/// How the response self-convolution integral is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CvMethod {
    /// Exact for a second-order Gaussian kernel and `n <= EXACT_MAX_N`, grid otherwise.
    #[default]
    Auto,
    /// Closed-form Gaussian convolution, `O(n³)`.
    Exact,
    /// Quadrature on a response grid, `O(n²·m)` for `m` grid points.
    Grid,
}

/// Inclusion flags over a screened set, continuous columns first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SelectionVector {
    pub columns: Vec<usize>,
    pub flags: Vec<bool>,
}

impl SelectionVector {
    pub fn new(columns: Vec<usize>, flags: Vec<bool>) -> Result<Self> {
        if columns.len() != flags.len() {
            return Err(Error::InvalidConfig("selection flags and columns differ in length".into()));
        }
        Ok(SelectionVector { columns, flags })
    }

    /// Reorders `cols` into the continuous-then-discrete layout.
    pub fn layout(data: &Dataset, cols: &[usize]) -> Vec<usize> {
        let (mut c, d): (Vec<usize>, Vec<usize>) =
            cols.iter().partition(|&&k| data.column(k).kind == ColumnKind::Continuous);
        c.extend(d);
        c
    }

    /// Bit `k` of `mask` sets flag `k`.
    pub fn from_mask(columns: Vec<usize>, mask: u32) -> Self {
        let flags = (0..columns.len()).map(|k| mask >> k & 1 == 1).collect();
        SelectionVector { columns, flags }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    pub fn included(&self) -> Vec<usize> {
        self.columns.iter().zip(&self.flags).filter(|(_, f)| **f).map(|(c, _)| *c).collect()
    }

    pub fn excluded(&self) -> Vec<usize> {
        self.columns.iter().zip(&self.flags).filter(|(_, f)| !**f).map(|(c, _)| *c).collect()
    }

    /// Included continuous and discrete counts.
    pub fn counts(&self, data: &Dataset) -> (usize, usize) {
        let inc = self.included();
        let pc = inc.iter().filter(|&&c| data.column(c).kind == ColumnKind::Continuous).count();
        (pc, inc.len() - pc)
    }

    /// All vectors over `columns` whose flags agree with `forced` where it is set.
    pub fn enumerate(columns: &[usize], forced: &[bool]) -> Vec<SelectionVector> {
        let free: Vec<usize> = (0..columns.len()).filter(|&k| !forced[k]).collect();
        (0u64..1 << free.len())
            .map(|m| {
                let mut flags = forced.to_vec();
                for (b, &k) in free.iter().enumerate() {
                    flags[k] = m >> b & 1 == 1;
                }
                SelectionVector { columns: columns.to_vec(), flags }
            })
            .collect()
    }
}

/// A CV value with its two components and the number of rows dropped for
/// near-zero leave-one-out mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvValue {
    pub value: f64,
    pub i_n1: f64,
    pub i_n2: f64,
    pub dropped: usize,
}

fn covariate_vars<'a>(data: &'a Dataset, spec: &KernelSpec) -> Vec<(&'a [f64], Smoothing)> {
    spec.covariates
        .iter()
        .map(|c| (&data.column(c.column).values[..], c.smoothing))
        .collect()
}

/// Averages per-row `(mass, n1, n2)` with the ridge guard, dropping rows whose
/// mass is below a fraction of the mean mass.
fn finish(rows: &[(f64, f64, f64)]) -> CvValue {
    let n = rows.len() as f64;
    let max_mass = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let mean_mass = rows.iter().map(|r| r.0).sum::<f64>() / n;
    let delta = RIDGE * max_mass;
    let floor = DROP_FRACTION * mean_mass;
    let (mut s1, mut s2, mut kept) = (0.0, 0.0, 0usize);
    for &(m, a, b) in rows {
        if m >= floor && m > 0.0 {
            let d = m + delta;
            s1 += a / (d * d);
            s2 += b / d;
            kept += 1;
        }
    }
    let dropped = rows.len() - kept;
    if kept == 0 {
        return CvValue { value: f64::INFINITY, i_n1: f64::INFINITY, i_n2: 0.0, dropped };
    }
    let (i1, i2) = (s1 / kept as f64, s2 / kept as f64);
    CvValue { value: i1 - 2.0 * i2, i_n1: i1, i_n2: i2, dropped }
}

/// Leave-one-out criterion `Î_n1 − 2Î_n2` for the conditional density of
/// `response` under the smoothing in `bw`.
pub fn cv_value(data: &Dataset, response: usize, bw: &KernelSpec, method: CvMethod) -> Result<CvValue> {
    let n = data.n();
    if n < 3 {
        return Err(Error::TooFewObservations { needed: 3, got: n });
    }
    bw.validate()?;
    let h = match bw.h_y {
        Some(Bandwidth::Finite(h)) => h,
        _ => return Err(Error::InvalidConfig("CV needs a finite response bandwidth".into())),
    };
    let kernel = bw.kernel;
    let y = &data.column(response).values;
    let vars = covariate_vars(data, bw);
    let pk = ProductKernel::new(kernel, &vars, false)?;
    let gauss2 = kernel.family == KernelFamily::Gaussian && kernel.order == 2;
    let exact = match method {
        CvMethod::Exact if !gauss2 => {
            return Err(Error::InvalidConfig(
                "the exact CV criterion needs a second-order Gaussian kernel".into(),
            ))
        }
        CvMethod::Exact => true,
        CvMethod::Grid => false,
        CvMethod::Auto => gauss2 && n <= EXACT_MAX_N,
    };
    let ky = |d: f64| kernel.shape(d / h) / h;

    let rows = if exact {
        let c = 1.0 / (2.0 * h * std::f64::consts::PI.sqrt());
        let conv = Array2::from_shape_fn((n, n), |(j, k)| {
            let d = y[j] - y[k];
            c * (-d * d / (4.0 * h * h)).exp()
        });
        par::map_range(n, |i| {
            let q = pk.query_of(i);
            let mut w = ndarray::Array1::zeros(n);
            let mut n2 = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                w[j] = pk.weight(j, &q);
                n2 += w[j] * ky(y[i] - y[j]);
            }
            (w.sum(), w.dot(&conv.dot(&w)), n2)
        })
    } else {
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let r = kernel.effective_radius();
        let step = match kernel.family {
            KernelFamily::Gaussian => h / 2.0,
            KernelFamily::Epanechnikov => h / 64.0,
        };
        let start = lo - r * h;
        let m = ((hi + r * h - start) / step).ceil() as usize + 1;
        let kmat = Array2::from_shape_fn((n, m), |(j, g)| ky(start + g as f64 * step - y[j]));
        let blocks = n.div_ceil(BLOCK);
        par::map_range(blocks, |b| {
            let rows: Vec<usize> = (b * BLOCK..((b + 1) * BLOCK).min(n)).collect();
            let mut w = Array2::<f64>::zeros((rows.len(), n));
            let mut out = Vec::with_capacity(rows.len());
            for (r, &i) in rows.iter().enumerate() {
                let q = pk.query_of(i);
                let mut n2 = 0.0;
                let mut mass = 0.0;
                for j in (0..n).filter(|&j| j != i) {
                    let wij = pk.weight(j, &q);
                    w[[r, j]] = wij;
                    mass += wij;
                    n2 += wij * ky(y[i] - y[j]);
                }
                out.push((mass, n2));
            }
            let s = w.dot(&kmat);
            out.into_iter()
                .enumerate()
                .map(|(r, (mass, n2))| (mass, step * s.row(r).iter().map(|v| v * v).sum::<f64>(), n2))
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    };
    Ok(finish(&rows))
}

/// Least-squares CV for the conditional probability of a binary `treatment`:
/// `Î_n1 = mean Σ_d p̂₋ᵢ(d|xᵢ)²`, `Î_n2 = mean p̂₋ᵢ(Dᵢ|xᵢ)`.
pub fn cv_value_binary(data: &Dataset, treatment: usize, bw: &KernelSpec) -> Result<CvValue> {
    let n = data.n();
    if n < 3 {
        return Err(Error::TooFewObservations { needed: 3, got: n });
    }
    bw.validate()?;
    let d = &data.column(treatment).values;
    check_binary(d)?;
    let vars = covariate_vars(data, bw);
    let pk = ProductKernel::new(bw.kernel, &vars, false)?;
    let rows = par::map_range(n, |i| {
        let q = pk.query_of(i);
        let (mut m, mut m1) = (0.0, 0.0);
        for j in (0..n).filter(|&j| j != i) {
            let w = pk.weight(j, &q);
            m += w;
            m1 += w * d[j];
        }
        (m, m1)
    });
    let max_mass = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let mean_mass = rows.iter().map(|r| r.0).sum::<f64>() / n as f64;
    let delta = RIDGE * max_mass;
    let floor = DROP_FRACTION * mean_mass;
    let (mut s1, mut s2, mut kept) = (0.0, 0.0, 0usize);
    for (i, &(m, m1)) in rows.iter().enumerate() {
        if m >= floor && m > 0.0 {
            let p1 = m1 / (m + delta);
            let p0 = (m - m1) / (m + delta);
            s1 += p1 * p1 + p0 * p0;
            s2 += if d[i] == 1.0 { p1 } else { p0 };
            kept += 1;
        }
    }
    let dropped = n - kept;
    if kept == 0 {
        return Ok(CvValue { value: f64::INFINITY, i_n1: f64::INFINITY, i_n2: 0.0, dropped });
    }
    let (i1, i2) = (s1 / kept as f64, s2 / kept as f64);
    Ok(CvValue { value: i1 - 2.0 * i2, i_n1: i1, i_n2: i2, dropped })
}

/// Exponent denominator `p^c_I + 1 + 2r` (continuous response) or `p^c_I + 2r`.
pub fn refine_exponent_den(mode: CvMode, order: u32, p_c: usize) -> f64 {
    let base = 2.0 * order as f64 + p_c as f64;
    match mode {
        CvMode::ContinuousY => base + 1.0,
        CvMode::BinaryD => base,
    }
}

/// One bandwidth vector per scale in `scale_grid` for selection `sel`.
pub fn optimal_bandwidths_for(
    data: &Dataset,
    sel: &SelectionVector,
    response: Option<usize>,
    mode: CvMode,
    kernel: Kernel,
    scale_grid: &[f64],
) -> Result<Vec<KernelSpec>> {
    if scale_grid.is_empty() || scale_grid.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
        return Err(Error::InvalidConfig("scale grid must be nonempty and positive".into()));
    }
    let n = data.n();
    let (p_c, _) = sel.counts(data);
    let den = refine_exponent_den(mode, kernel.order, p_c);
    let sd_of = |c: usize| -> Result<f64> {
        let col = data.column(c);
        let sd = col.sd();
        if sd > 0.0 {
            Ok(sd)
        } else {
            Err(Error::DegenerateColumn(col.name.clone()))
        }
    };
    let y_sd = match (mode, response) {
        (CvMode::ContinuousY, Some(r)) => Some(sd_of(r)?),
        (CvMode::ContinuousY, None) => {
            return Err(Error::InvalidConfig("continuous mode needs a response".into()))
        }
        (CvMode::BinaryD, _) => None,
    };
    scale_grid
        .iter()
        .map(|&c| {
            let covariates = sel
                .columns
                .iter()
                .zip(&sel.flags)
                .map(|(&col, &on)| {
                    let column = data.column(col);
                    let smoothing = match column.kind {
                        ColumnKind::Continuous if on => {
                            Smoothing::Continuous(Bandwidth::Finite(rot_bandwidth(sd_of(col)?, n, den, c)))
                        }
                        ColumnKind::Continuous => Smoothing::Continuous(Bandwidth::SmoothOut),
                        ColumnKind::Discrete => {
                            let atoms = column.atoms().max(2);
                            let lambda = if on { rot_lambda(n, kernel.order, den, c, atoms) } else { lambda_cap(atoms) };
                            Smoothing::Discrete { lambda, atoms }
                        }
                    };
                    Ok(CovariateSmoothing { column: col, smoothing })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(KernelSpec {
                kernel,
                h_y: y_sd.map(|s| Bandwidth::Finite(rot_bandwidth(s, n, den, c))),
                covariates,
            })
        })
        .collect()
}

/// Bandwidth scales searched by default: 2^(k/2) for k = -2..=2.
pub const DEFAULT_SCALE_GRID: [f64; 5] = [0.5, std::f64::consts::FRAC_1_SQRT_2, 1.0, std::f64::consts::SQRT_2, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub mode: CvMode,
    pub kernel: Kernel,
    pub scale_grid: Vec<f64>,
    /// Keep every pre-selected column included.
    pub protect_w: bool,
    pub method: CvMethod,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            mode: CvMode::ContinuousY,
            kernel: Kernel::default(),
            scale_grid: DEFAULT_SCALE_GRID.to_vec(),
            protect_w: false,
            method: CvMethod::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub flags: Vec<bool>,
    pub scale: f64,
    pub cv: f64,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub selection: SelectionVector,
    pub bandwidths: KernelSpec,
    pub scale: f64,
    pub cv: f64,
    pub table: Vec<CvEntry>,
    /// Screened (non-`W`) covariates left out of the selection.
    pub smoothed_out: usize,
}

/// Scores every selection over `columns` (optionally forcing `w` in) and
/// returns the minimizer, ties going to fewer inclusions, then lower flags.
pub fn refine_columns(
    data: &Dataset,
    columns: &[usize],
    w: &[usize],
    response: usize,
    cfg: &RefineConfig,
) -> Result<CvOutcome> {
    if columns.len() > SEARCH_CAP {
        return Err(Error::SearchTooLarge { p_tilde: columns.len(), cap: SEARCH_CAP });
    }
    let layout = SelectionVector::layout(data, columns);
    let forced: Vec<bool> = layout.iter().map(|c| cfg.protect_w && w.contains(c)).collect();
    if cfg.mode == CvMode::BinaryD {
        check_binary(&data.column(response).values)?;
    }
    let y = (cfg.mode == CvMode::ContinuousY).then_some(response);
    let mut table = Vec::new();
    let mut best: Option<(CvEntry, SelectionVector, KernelSpec)> = None;
    for sel in SelectionVector::enumerate(&layout, &forced) {
        let specs = optimal_bandwidths_for(data, &sel, y, cfg.mode, cfg.kernel, &cfg.scale_grid)?;
        for (spec, &scale) in specs.into_iter().zip(&cfg.scale_grid) {
            let v = match cfg.mode {
                CvMode::ContinuousY => cv_value(data, response, &spec, cfg.method)?,
                CvMode::BinaryD => cv_value_binary(data, response, &spec)?,
            };
            let entry = CvEntry { flags: sel.flags.clone(), scale, cv: v.value, dropped: v.dropped };
            let better = match &best {
                None => true,
                Some((b, bs, _)) => entry
                    .cv
                    .total_cmp(&b.cv)
                    .then(sel.popcount().cmp(&bs.popcount()))
                    .then(sel.flags.cmp(&bs.flags))
                    .is_lt(),
            };
            if better {
                best = Some((entry.clone(), sel.clone(), spec));
            }
            table.push(entry);
        }
    }
    let (entry, selection, bandwidths) = best.expect("enumeration is never empty");
    let smoothed_out = selection.excluded().iter().filter(|c| !w.contains(c)).count();
    Ok(CvOutcome { selection, bandwidths, scale: entry.scale, cv: entry.cv, table, smoothed_out })
}

/// Refines the working set of a screening outcome.
pub fn refine(data: &Dataset, screened: &ScreeningOutcome, response: usize, cfg: &RefineConfig) -> Result<CvOutcome> {
    refine_columns(data, &screened.working_set(), &screened.w, response, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateConfig {
    pub dependence: DependenceConfig,
    pub refine: RefineConfig,
    pub p_tilde_cap: usize,
}

impl IterateConfig {
    /// Screening and refinement share the kernel; the refinement mode follows the reference.
    pub fn new(dependence: DependenceConfig) -> Self {
        let mode = if dependence.reference == Reference::BinaryTreatment {
            CvMode::BinaryD
        } else {
            CvMode::ContinuousY
        };
        IterateConfig {
            refine: RefineConfig { mode, kernel: dependence.kernel, ..RefineConfig::default() },
            dependence,
            p_tilde_cap: 10,
        }
    }
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self::new(DependenceConfig::default())
    }
}

#[derive(Debug, Clone)]
pub struct IterateOutcome {
    pub screening: ScreeningOutcome,
    pub cv: CvOutcome,
    pub p_tilde: usize,
    /// No screened covariate was ever smoothed out before the cap.
    pub sparsity_doubt: bool,
    pub model: CdeModel,
}

/// Screens, refines and widens the screened block one covariate at a time
/// until the refinement drops at least one screened covariate.
pub fn iterate_procedure(data: &Dataset, cfg: &IterateConfig, p_tilde_init: usize) -> Result<IterateOutcome> {
    let binary = cfg.dependence.reference == Reference::BinaryTreatment;
    let response = if binary { data.require_treatment()? } else { data.require_response()? };
    let w = data.preselected();
    if p_tilde_init < w.len() + 1 {
        return Err(Error::InvalidPTilde(format!(
            "initial p_tilde = {p_tilde_init} must be at least {}",
            w.len() + 1
        )));
    }
    let candidates = data.candidates();
    let dep = rho_hat_all(data, &candidates, response, &w, &cfg.dependence)?;
    let mut refine_cfg = cfg.refine.clone();
    refine_cfg.mode = if binary { CvMode::BinaryD } else { CvMode::ContinuousY };
    let mut p = p_tilde_init;
    loop {
        let screening = from_dependence(dep.clone(), w.clone(), p)?;
        let cv = refine(data, &screening, response, &refine_cfg)?;
        let exhausted = screening.retained.len() >= candidates.len();
        if cv.smoothed_out > 0 || p >= cfg.p_tilde_cap || exhausted {
            let sparsity_doubt = cv.smoothed_out == 0;
            let model = if binary {
                CdeModel::fit_regression(data, cv.bandwidths.clone(), None, Some(response))?
            } else {
                CdeModel::fit(data, cv.bandwidths.clone(), Some(response), None)?
            };
            return Ok(IterateOutcome { screening, cv, p_tilde: p, sparsity_doubt, model });
        }
        p += 1;
    }
}

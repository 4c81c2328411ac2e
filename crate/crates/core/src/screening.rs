//! Ranking candidates by `ρ̂` and keeping the top block.

use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, Dataset};
use crate::dependence::{rho_hat_all, DependenceConfig, DependenceResult, Reference};
use crate::error::{Error, Result};

/// Threshold diagnostic `C·n^(−r/(2r+q^c+1))·log n` and the candidates clearing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDiagnostic {
    pub c: f64,
    pub threshold: f64,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningOutcome {
    /// `(column, ρ̂)` in decreasing `ρ̂`, ties by lower column index.
    pub ranked: Vec<(usize, f64)>,
    /// Retained candidate columns, in rank order.
    pub retained: Vec<usize>,
    /// Pre-selected columns, always kept.
    pub w: Vec<usize>,
    pub p_tilde: usize,
    pub threshold: Option<ThresholdDiagnostic>,
    pub dependence: DependenceResult,
}

impl ScreeningOutcome {
    /// Working set: retained candidates followed by `W`.
    pub fn working_set(&self) -> Vec<usize> {
        self.retained.iter().chain(&self.w).copied().collect()
    }

    /// Re-applies the top-block rule for another `p̃` without recomputing `ρ̂`.
    pub fn with_p_tilde(&self, p_tilde: usize) -> Result<Self> {
        from_dependence(self.dependence.clone(), self.w.clone(), p_tilde)
    }

    pub fn add_threshold(&mut self, c: f64, n: usize, order: u32, q_c: usize) {
        let threshold = threshold_value(c, n, order, q_c);
        let members = threshold_set(&self.dependence, c, n, order, q_c);
        self.threshold = Some(ThresholdDiagnostic {
            c,
            threshold,
            members,
        });
    }
}

/// Positions of the `keep` largest values, ties to the lower position.
pub fn top_positions(rho: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rho.len()).collect();
    idx.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx
}

/// Builds the outcome from precomputed `ρ̂` values.
pub fn from_dependence(dependence: DependenceResult, w: Vec<usize>, p_tilde: usize) -> Result<ScreeningOutcome> {
    if p_tilde <= w.len() {
        return Err(Error::InvalidPTilde(format!(
            "p_tilde = {p_tilde} must exceed the {} pre-selected covariates",
            w.len()
        )));
    }
    let order = top_positions(&dependence.rho, dependence.rho.len());
    let ranked: Vec<(usize, f64)> = order
        .iter()
        .map(|&k| (dependence.candidates[k], dependence.rho[k]))
        .collect();
    let keep = (p_tilde - w.len()).min(ranked.len());
    let retained = ranked[..keep].iter().map(|(c, _)| *c).collect();
    Ok(ScreeningOutcome {
        ranked,
        retained,
        w,
        p_tilde,
        threshold: None,
        dependence,
    })
}

/// Screens explicit candidate and `W` columns against `response`.
pub fn screen_columns(
    data: &Dataset,
    response: usize,
    candidates: &[usize],
    w: &[usize],
    cfg: &DependenceConfig,
    p_tilde: usize,
) -> Result<ScreeningOutcome> {
    if p_tilde <= w.len() {
        return Err(Error::InvalidPTilde(format!(
            "p_tilde = {p_tilde} must exceed the {} pre-selected covariates",
            w.len()
        )));
    }
    let dep = rho_hat_all(data, candidates, response, w, cfg)?;
    from_dependence(dep, w.to_vec(), p_tilde)
}

/// Screens the dataset's candidate columns using its roles: the response
/// (or the treatment for a binary reference) and the pre-selected `W`.
pub fn screen(data: &Dataset, cfg: &DependenceConfig, p_tilde: usize) -> Result<ScreeningOutcome> {
    let response = if cfg.reference == Reference::BinaryTreatment {
        data.require_treatment()?
    } else {
        data.require_response()?
    };
    screen_columns(data, response, &data.candidates(), &data.preselected(), cfg, p_tilde)
}

/// `C·n^(−r/(2r+q^c+1))·log n`.
pub fn threshold_value(c: f64, n: usize, order: u32, q_c: usize) -> f64 {
    let r = order as f64;
    c * (n as f64).powf(-r / (2.0 * r + q_c as f64 + 1.0)) * (n as f64).ln()
}

/// Candidate columns whose `ρ̂` clears the threshold.
pub fn threshold_set(rho: &DependenceResult, c: f64, n: usize, order: u32, q_c: usize) -> Vec<usize> {
    let t = threshold_value(c, n, order, q_c);
    rho.candidates
        .iter()
        .zip(&rho.rho)
        .filter(|(_, r)| **r >= t)
        .map(|(c, _)| *c)
        .collect()
}

/// Number of continuous columns among `cols`.
pub fn count_continuous(data: &Dataset, cols: &[usize]) -> usize {
    cols.iter()
        .filter(|&&c| data.column(c).kind == ColumnKind::Continuous)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Kernel, KernelSpec};

    fn fake(rho: Vec<f64>) -> DependenceResult {
        DependenceResult {
            candidates: (10..10 + rho.len()).collect(),
            rho,
            lambda: None,
            zero_mass_rows: 0,
            spec: KernelSpec {
                kernel: Kernel::default(),
                h_y: None,
                covariates: vec![],
            },
            reference_values: vec![],
            pair_operations: 0,
        }
    }

    #[test]
    fn keeps_largest() {
        assert_eq!(top_positions(&[0.5, 0.1, 0.4, 0.3, 0.2], 2), vec![0, 2]);
        let out = from_dependence(fake(vec![0.5, 0.1, 0.4, 0.3, 0.2]), vec![99], 3).unwrap();
        assert_eq!(out.retained, vec![10, 12]);
        assert_eq!(out.working_set(), vec![10, 12, 99]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(top_positions(&[0.2, 0.3, 0.3, 0.3], 2), vec![1, 2]);
    }

    #[test]
    fn keeps_everything_when_p_is_small() {
        let out = from_dependence(fake(vec![0.0, 0.9]), vec![], 5).unwrap();
        assert_eq!(out.retained, vec![11, 10]);
    }

    #[test]
    fn p_tilde_must_exceed_w() {
        assert!(matches!(
            from_dependence(fake(vec![0.1]), vec![1, 2], 2),
            Err(Error::InvalidPTilde(_))
        ));
    }

    #[test]
    fn threshold_arithmetic() {
        let t = threshold_value(0.5, 1000, 2, 1);
        assert!((t - 0.5 * 1000f64.powf(-1.0 / 3.0) * 1000f64.ln()).abs() < 1e-15);
        assert!((t - 0.3454).abs() < 1e-4);
        let dep = fake(vec![0.5, 0.0, 0.3, 0.35]);
        assert_eq!(threshold_set(&dep, 0.5, 1000, 2, 1), vec![10, 13]);
        assert!(threshold_set(&dep, 1e300, 1000, 2, 1).is_empty());
        assert_eq!(threshold_set(&dep, 1e-300, 1000, 2, 1), vec![10, 12, 13]);
    }
}

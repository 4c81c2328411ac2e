//! The role-tagged dataset every stage consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Candidate,
    PreselectedW,
    Response,
    Treatment,
    Ignore,
}

/// One column. Discrete values are stored as atom codes `0..atoms` in `values`
/// with the original labels kept in `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub role: Role,
    pub values: Vec<f64>,
    pub labels: Vec<String>,
}

impl Column {
    pub fn continuous(name: impl Into<String>, role: Role, values: Vec<f64>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Continuous,
            role,
            values,
            labels: Vec::new(),
        }
    }

    /// Recodes arbitrary numeric atoms to `0..r` in ascending order.
    pub fn discrete_from_values(name: impl Into<String>, role: Role, raw: &[f64]) -> Self {
        let mut atoms: Vec<f64> = raw.to_vec();
        atoms.sort_by(|a, b| a.total_cmp(b));
        atoms.dedup();
        let values = raw
            .iter()
            .map(|v| atoms.iter().position(|a| a == v).unwrap() as f64)
            .collect();
        Column {
            name: name.into(),
            kind: ColumnKind::Discrete,
            role,
            values,
            labels: atoms.iter().map(|a| format_atom(*a)).collect(),
        }
    }

    /// Codes text labels to `0..r`, ordering numerically when every label
    /// parses as a number and lexicographically otherwise.
    pub fn discrete_from_labels(name: impl Into<String>, role: Role, raw: &[String]) -> Self {
        let nums: Option<Vec<f64>> = raw.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
        if let Some(nums) = nums {
            return Self::discrete_from_values(name, role, &nums);
        }
        let mut labels: Vec<String> = raw.to_vec();
        labels.sort();
        labels.dedup();
        let values = raw
            .iter()
            .map(|v| labels.binary_search(v).expect("label present") as f64)
            .collect();
        Column {
            name: name.into(),
            kind: ColumnKind::Discrete,
            role,
            values,
            labels,
        }
    }

    /// Label of row `i` for discrete columns, the value otherwise.
    pub fn label(&self, i: usize) -> String {
        match self.kind {
            ColumnKind::Discrete => self.labels[self.values[i] as usize].clone(),
            ColumnKind::Continuous => format!("{}", self.values[i]),
        }
    }

    /// Number of distinct atoms (discrete) or zero (continuous).
    pub fn atoms(&self) -> usize {
        match self.kind {
            ColumnKind::Continuous => 0,
            ColumnKind::Discrete => self.labels.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sd(&self) -> f64 {
        stats::sd(&self.values)
    }
}

fn format_atom(a: f64) -> String {
    if a.fract() == 0.0 && a.abs() < 1e15 {
        format!("{}", a as i64)
    } else {
        format!("{a}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<Column>,
    /// Rows removed at ingestion because a used column was missing.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        if let Some(first) = columns.first() {
            let n = first.len();
            if let Some(bad) = columns.iter().find(|c| c.len() != n) {
                return Err(Error::InvalidConfig(format!(
                    "column `{}` has {} rows, expected {}",
                    bad.name,
                    bad.len(),
                    n
                )));
            }
        }
        Ok(Dataset {
            columns,
            dropped_rows: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn column(&self, idx: usize) -> &Column {
        &self.columns[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    fn with_role(&self, role: Role) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    /// Candidate covariate columns, in column order.
    pub fn candidates(&self) -> Vec<usize> {
        self.with_role(Role::Candidate)
    }

    /// Pre-selected conditioning covariates `W`, in column order.
    pub fn preselected(&self) -> Vec<usize> {
        self.with_role(Role::PreselectedW)
    }

    pub fn response(&self) -> Option<usize> {
        self.with_role(Role::Response).first().copied()
    }

    pub fn treatment(&self) -> Option<usize> {
        self.with_role(Role::Treatment).first().copied()
    }

    pub fn require_response(&self) -> Result<usize> {
        self.response()
            .ok_or_else(|| Error::InvalidResponse("dataset has no response column".into()))
    }

    /// Treatment column, validated to be 0/1 with both arms present.
    pub fn require_treatment(&self) -> Result<usize> {
        let t = self
            .treatment()
            .ok_or_else(|| Error::InvalidResponse("dataset has no treatment column".into()))?;
        check_binary(&self.columns[t].values)?;
        Ok(t)
    }

    /// Row subset, preserving column metadata.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                values: rows.iter().map(|&r| c.values[r]).collect(),
                ..c.clone()
            })
            .collect();
        Dataset {
            columns,
            dropped_rows: 0,
        }
    }
}

/// Checks a column is coded 0/1 with both arms non-empty.
pub fn check_binary(values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidResponse(format!(
            "treatment must be coded 0/1, found {v}"
        )));
    }
    let ones = values.iter().filter(|v| **v == 1.0).count();
    if ones == 0 {
        return Err(Error::DegenerateTreatment { arm: 1 });
    }
    if ones == values.len() {
        return Err(Error::DegenerateTreatment { arm: 0 });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrete_recoding_is_sorted() {
        let c = Column::discrete_from_values("d", Role::Candidate, &[-1.0, 1.0, 0.0, 1.0]);
        assert_eq!(c.values, vec![0.0, 2.0, 1.0, 2.0]);
        assert_eq!(c.atoms(), 3);
        assert_eq!(c.labels, vec!["-1", "0", "1"]);
    }

    #[test]
    fn binary_checks() {
        assert!(check_binary(&[0.0, 1.0, 1.0]).is_ok());
        assert!(matches!(
            check_binary(&[1.0, 1.0]),
            Err(Error::DegenerateTreatment { arm: 0 })
        ));
        assert!(matches!(check_binary(&[0.0, 2.0]), Err(Error::InvalidResponse(_))));
    }
}

//! CSV ingestion against a column manifest, run configuration and the JSON
//! report format.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cv::DEFAULT_SCALE_GRID;
use crate::data::{Column, ColumnKind, Dataset, Role};
use crate::error::{Error, Result};

/// Cell contents treated as missing.
pub const MISSING_TOKENS: [&str; 6] = ["", "NA", "NaN", "nan", "N/A", "."];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub columns: Vec<ColumnSpec>,
    #[serde(default = "default_max_atoms")]
    pub max_atoms: usize,
}

fn default_max_atoms() -> usize {
    20
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Describes an existing dataset.
    pub fn of(data: &Dataset) -> Self {
        Manifest {
            columns: data
                .columns
                .iter()
                .map(|c| ColumnSpec { name: c.name.clone(), kind: c.kind, role: c.role })
                .collect(),
            max_atoms: default_max_atoms().max(data.columns.iter().map(Column::atoms).max().unwrap_or(0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::ManifestMismatch(format!("column `{}` listed twice", c.name)));
            }
        }
        for role in [Role::Response, Role::Treatment] {
            if self.columns.iter().filter(|c| c.role == role).count() > 1 {
                return Err(Error::ManifestMismatch(format!("more than one {role:?} column")));
            }
        }
        if !self.columns.iter().any(|c| matches!(c.role, Role::Response | Role::Treatment)) {
            return Err(Error::ManifestMismatch("no response or treatment column".into()));
        }
        if self.max_atoms < 2 {
            return Err(Error::ManifestMismatch("max_atoms must be at least 2".into()));
        }
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    MISSING_TOKENS.contains(&cell.trim())
}

/// Reads a headed CSV. Every CSV column must appear in the manifest and vice
/// versa. Rows with a missing cell in any non-ignored column are dropped and
/// counted in `dropped_rows`.
pub fn ingest_reader<R: Read>(reader: R, manifest: &Manifest) -> Result<Dataset> {
    manifest.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    for spec in &manifest.columns {
        if !header.contains(&spec.name) {
            return Err(Error::ManifestMismatch(format!("manifest column `{}` is not in the CSV", spec.name)));
        }
    }
    if let Some(extra) = header.iter().find(|h| manifest.columns.iter().all(|c| &c.name != *h)) {
        return Err(Error::ManifestMismatch(format!("CSV column `{extra}` is not in the manifest")));
    }
    let used: Vec<(usize, &ColumnSpec)> = manifest
        .columns
        .iter()
        .filter(|c| c.role != Role::Ignore)
        .map(|c| (header.iter().position(|h| *h == c.name).expect("checked"), c))
        .collect();
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); used.len()];
    let mut dropped = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if used.iter().any(|(k, _)| rec.get(*k).is_none_or(is_missing)) {
            dropped += 1;
            continue;
        }
        for (slot, (k, spec)) in used.iter().enumerate() {
            let cell = rec.get(*k).expect("checked").trim();
            if spec.kind == ColumnKind::Continuous || spec.role == Role::Treatment {
                if cell.parse::<f64>().map_or(true, |v| !v.is_finite()) {
                    return Err(Error::ParseError { row: row + 1, col: spec.name.clone(), value: cell.to_string() });
                }
            }
            cells[slot].push(cell.to_string());
        }
    }
    let columns = used
        .iter()
        .zip(cells)
        .map(|((_, spec), raw)| {
            let col = match spec.kind {
                ColumnKind::Continuous => Column::continuous(
                    spec.name.clone(),
                    spec.role,
                    raw.iter().map(|c| c.parse::<f64>().expect("validated")).collect(),
                ),
                ColumnKind::Discrete => Column::discrete_from_labels(spec.name.clone(), spec.role, &raw),
            };
            if col.atoms() > manifest.max_atoms {
                return Err(Error::ManifestMismatch(format!(
                    "discrete column `{}` has {} distinct values, more than max_atoms = {}",
                    spec.name,
                    col.atoms(),
                    manifest.max_atoms
                )));
            }
            Ok(col)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Dataset::new(columns)?;
    data.dropped_rows = dropped;
    Ok(data)
}

pub fn ingest(csv_path: &Path, manifest: &Manifest) -> Result<Dataset> {
    ingest_reader(std::fs::File::open(csv_path)?, manifest)
}

/// Writes `data` as CSV; discrete columns use their labels.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(data.columns.iter().map(|c| c.name.as_str()))?;
    for i in 0..data.n() {
        w.write_record(data.columns.iter().map(|c| c.label(i)))?;
    }
    w.flush()?;
    Ok(())
}

/// Query rows for the covariates of `spec`, matched by name against a headed
/// CSV. Discrete cells are mapped through the training labels; covariates the
/// spec smooths out may be absent. When `response` names a column present in
/// the file its values are returned too.
pub fn read_query<R: Read>(
    reader: R,
    data: &Dataset,
    spec: &crate::kernel::KernelSpec,
    response: Option<&str>,
) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let pos = |name: &str| header.iter().position(|h| h == name);
    let mut slots = Vec::new();
    for c in &spec.covariates {
        let col = data.column(c.column);
        match pos(&col.name) {
            Some(k) => slots.push(Some(k)),
            None if c.smoothing.is_smoothed_out() => slots.push(None),
            None => return Err(Error::ManifestMismatch(format!("query file lacks column `{}`", col.name))),
        }
    }
    let y_pos = response.and_then(pos);
    let (mut rows, mut ys) = (Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |name: &str, v: &str| Error::ParseError { row: r + 1, col: name.to_string(), value: v.to_string() };
        let mut row = Vec::with_capacity(slots.len());
        for (c, slot) in spec.covariates.iter().zip(&slots) {
            let col = data.column(c.column);
            let v = match slot {
                None => 0.0,
                Some(k) => {
                    let cell = rec.get(*k).unwrap_or("").trim();
                    match col.kind {
                        ColumnKind::Continuous => cell.parse::<f64>().map_err(|_| parse_err(&col.name, cell))?,
                        ColumnKind::Discrete => {
                            let num = cell.parse::<f64>().ok();
                            col.labels
                                .iter()
                                .position(|l| l == cell || (num.is_some() && l.parse::<f64>().ok() == num))
                                .ok_or_else(|| parse_err(&col.name, cell))? as f64
                        }
                    }
                }
            };
            row.push(v);
        }
        if let Some(k) = y_pos {
            let cell = rec.get(k).unwrap_or("").trim();
            ys.push(cell.parse::<f64>().map_err(|_| parse_err(response.unwrap_or(""), cell))?);
        }
        rows.push(row);
    }
    Ok((rows, y_pos.map(|_| ys)))
}

/// Settings shared by the command-line subcommands; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kernel_family: crate::kernel::KernelFamily,
    pub kernel_order: u32,
    /// Multiplier on screening rule-of-thumb bandwidths.
    pub screening_scale: f64,
    /// Bandwidth constants searched by the refinement.
    pub scale_grid: Vec<f64>,
    /// `median`, `quantiles` or `binary`; defaults by subcommand.
    pub reference: Option<String>,
    pub quantile_probs: Option<Vec<f64>>,
    pub p_tilde_init: usize,
    pub p_tilde_cap: usize,
    pub protect_w: bool,
    pub trim_lower: f64,
    pub trim_upper: f64,
    pub hajek: bool,
    pub swap_folds: bool,
    pub split_seed: u64,
    pub reps: usize,
    pub threads: Option<usize>,
    pub threshold_c: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kernel_family: Default::default(),
            kernel_order: 2,
            screening_scale: crate::dependence::DEFAULT_SCREENING_SCALE,
            scale_grid: DEFAULT_SCALE_GRID.to_vec(),
            reference: None,
            quantile_probs: None,
            p_tilde_init: 5,
            p_tilde_cap: 10,
            protect_w: false,
            trim_lower: 0.05,
            trim_upper: 0.95,
            hajek: false,
            swap_folds: false,
            split_seed: 0,
            reps: 200,
            threads: None,
            threshold_c: None,
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        crate::kernel::Kernel::new(self.kernel_family, self.kernel_order)?;
        if !(self.screening_scale > 0.0) || !self.screening_scale.is_finite() {
            return bad(format!("screening_scale must be positive, got {}", self.screening_scale));
        }
        if self.scale_grid.is_empty() || self.scale_grid.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return bad("scale_grid must be a nonempty list of positive numbers".into());
        }
        crate::causal::TrimRule::new(self.trim_lower, self.trim_upper)?;
        if self.p_tilde_init == 0 || self.p_tilde_cap < self.p_tilde_init {
            return bad("need 0 < p_tilde_init <= p_tilde_cap".into());
        }
        if self.p_tilde_cap > crate::cv::SEARCH_CAP {
            return bad(format!("p_tilde_cap may not exceed {}", crate::cv::SEARCH_CAP));
        }
        if self.threads == Some(0) || self.reps == 0 {
            return bad("threads and reps must be positive".into());
        }
        if let Some(r) = &self.reference {
            if !matches!(r.as_str(), "median" | "quantiles" | "binary") {
                return bad(format!("unknown reference `{r}`"));
            }
        }
        self.reference_for(false)?.validate()?;
        Ok(())
    }

    pub fn kernel(&self) -> Result<crate::kernel::Kernel> {
        crate::kernel::Kernel::new(self.kernel_family, self.kernel_order)
    }

    /// Reference point; `binary_default` picks the treatment reference when none is set.
    pub fn reference_for(&self, binary_default: bool) -> Result<crate::dependence::Reference> {
        use crate::dependence::Reference;
        let name = self
            .reference
            .as_deref()
            .unwrap_or(if binary_default { "binary" } else { "median" });
        Ok(match name {
            "binary" => Reference::BinaryTreatment,
            "quantiles" => match &self.quantile_probs {
                Some(p) => Reference::Quantiles { probs: p.clone() },
                None => Reference::default_quantiles(),
            },
            _ => Reference::Median,
        })
    }
}

/// Report envelope: `{meta, warnings, result}`.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub meta: Meta,
    pub warnings: Vec<String>,
    pub result: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_echo: Value,
}

impl Report {
    pub fn new(command: &str, seed: Option<u64>, config_echo: Value, result: Value, warnings: Vec<String>) -> Self {
        Report {
            meta: Meta { version: env!("CARGO_PKG_VERSION").to_string(), command: command.to_string(), seed, config_echo },
            warnings,
            result,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(to_json_string(&serde_json::to_value(self)?))
    }
}

/// Pretty JSON in which every non-integer number carries 17 significant digits.
pub fn to_json_string(v: &Value) -> String {
    let mut out = String::new();
    write_value(v, 0, &mut out);
    out.push('\n');
    out
}

pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    if x == 0.0 {
        return "0.0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') { s } else { format!("{s}.0") }
    } else {
        format!("{x:.16e}")
    }
}

fn write_value(v: &Value, depth: usize, out: &mut String) {
    let pad = |d: usize| "  ".repeat(d);
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&v.to_string()),
        Value::Number(n) => match (n.as_i64(), n.as_u64(), n.as_f64()) {
            (Some(i), _, _) => out.push_str(&i.to_string()),
            (_, Some(u), _) => out.push_str(&u.to_string()),
            (_, _, Some(f)) => out.push_str(&format_float(f)),
            _ => out.push_str(&n.to_string()),
        },
        Value::Array(a) if a.is_empty() => out.push_str("[]"),
        Value::Array(a) => {
            out.push_str("[\n");
            for (k, x) in a.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                write_value(x, depth + 1, out);
                out.push_str(if k + 1 < a.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push(']');
        }
        Value::Object(o) if o.is_empty() => out.push_str("{}"),
        Value::Object(o) => {
            out.push_str("{\n");
            for (k, (key, x)) in o.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                out.push_str(&Value::String(key.clone()).to_string());
                out.push_str(": ");
                write_value(x, depth + 1, out);
                out.push_str(if k + 1 < o.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest::from_json(
            r#"{"columns": [
                {"name": "y", "kind": "continuous", "role": "response"},
                {"name": "x", "kind": "continuous", "role": "candidate"},
                {"name": "g", "kind": "discrete", "role": "candidate"},
                {"name": "note", "kind": "discrete", "role": "ignore"}
            ]}"#,
        )
        .unwrap()
    }

    #[test]
    fn toy_discrete_labels() {
        let csv = "y,x,g,note\n1.5,0.1,a,\n2.0,0.2,b,z\n-1,0.3,a,q\n";
        let d = ingest_reader(csv.as_bytes(), &manifest()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.columns.len(), 3);
        let g = d.column(d.index_of("g").unwrap());
        assert_eq!(g.values, vec![0.0, 1.0, 0.0]);
        assert_eq!(g.atoms(), 2);
        assert_eq!(d.dropped_rows, 0);
    }

    #[test]
    fn missing_cells_drop_rows() {
        let csv = "y,x,g,note\n1.5,NA,a,\n2.0,0.2,b,\n-1,0.3,.,\n4,0.5,a,\n";
        let d = ingest_reader(csv.as_bytes(), &manifest()).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.dropped_rows, 2);
    }

    #[test]
    fn manifest_mismatches() {
        let csv = "y,x,note\n1,2,3\n";
        assert!(matches!(ingest_reader(csv.as_bytes(), &manifest()), Err(Error::ManifestMismatch(_))));
        let csv = "y,x,g,note,extra\n1,2,a,3,4\n";
        assert!(matches!(ingest_reader(csv.as_bytes(), &manifest()), Err(Error::ManifestMismatch(_))));
        assert!(Manifest::from_json(r#"{"columns": [{"name": "x", "kind": "continuous", "role": "candidate"}]}"#).is_err());
    }

    #[test]
    fn parse_error_reports_position() {
        let csv = "y,x,g,note\n1,2,a,\n1,abc,a,\n";
        match ingest_reader(csv.as_bytes(), &manifest()) {
            Err(Error::ParseError { row, col, value }) => {
                assert_eq!((row, col.as_str(), value.as_str()), (2, "x", "abc"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_many_atoms() {
        let mut m = manifest();
        m.max_atoms = 2;
        let csv = "y,x,g,note\n1,2,a,\n1,3,b,\n1,4,c,\n";
        assert!(matches!(ingest_reader(csv.as_bytes(), &m), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn round_trip() {
        let csv = "y,x,g,note\n1.5,0.1,b,\n2.0,-0.2,a,\n-1e-7,0.30000000000000004,c,\n";
        let d = ingest_reader(csv.as_bytes(), &manifest()).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let again = ingest_reader(&buf[..], &Manifest::of(&d)).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn numeric_discrete_ordering() {
        let c = Column::discrete_from_labels("z", Role::Candidate, &["10".into(), "9".into(), "10".into()]);
        assert_eq!(c.values, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn float_formatting() {
        assert_eq!(format_float(0.1), "0.10000000000000001");
        assert_eq!(format_float(1.0), "1.0000000000000000");
        assert_eq!(format_float(-2.5e-9), "-2.5000000000000001e-9");
        assert_eq!(format_float(f64::NAN), "null");
        for x in [0.1, 1.0 / 3.0, 12345.678, 1e-300, -7.25e20] {
            let back: f64 = format_float(x).parse().unwrap();
            assert_eq!(back, x);
        }
        let v = serde_json::json!({"a": 1, "b": [0.5, true], "c": {}});
        let s = to_json_string(&v);
        let parsed: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(parsed["b"][0].as_f64(), Some(0.5));
        assert_eq!(parsed["a"].as_i64(), Some(1));
    }

    #[test]
    fn run_config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = RunConfig { trim_lower: 0.96, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { scale_grid: vec![], ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let c: std::result::Result<RunConfig, _> = serde_json::from_str(r#"{"nope": 1}"#);
        assert!(c.is_err());
        let c: RunConfig = serde_json::from_str(r#"{"reps": 5}"#).unwrap();
        assert_eq!(c.reps, 5);
        assert_eq!(c.scale_grid, DEFAULT_SCALE_GRID.to_vec());
    }
}

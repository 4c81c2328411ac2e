//! Browser bindings for the demo page. Every entry point simulates a design,
//! runs one stage of the pipeline and returns a JSON string.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use densift::causal::{ate, AteConfig, TrimRule};
use densift::cv::{iterate_procedure, IterateConfig};
use densift::dependence::{DependenceConfig, Reference};
use densift::screening::screen;
use densift::simulate::{effect_moments, gen_design, layout, true_ate, DesignSpec, Simulated};
use densift::Dataset;

fn fail(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn simulate(design: u8, n: usize, p: usize, seed: u32) -> Result<(DesignSpec, Simulated), JsValue> {
    let spec = DesignSpec::new(design, n, p, seed as u64, 1);
    let sim = gen_design(&spec, 0).map_err(fail)?;
    Ok((spec, sim))
}

fn reference(spec: &DesignSpec) -> Reference {
    if spec.is_treatment_design() {
        Reference::BinaryTreatment
    } else {
        Reference::Median
    }
}

fn names(data: &Dataset, cols: &[usize]) -> Vec<String> {
    cols.iter().map(|&c| data.column(c).name.clone()).collect()
}

/// ρ̂ for every candidate of one simulated sample, with the retained block.
#[wasm_bindgen]
pub fn screen_design(design: u8, n: usize, p: usize, p_tilde: usize, seed: u32) -> Result<String, JsValue> {
    let (spec, sim) = simulate(design, n, p, seed)?;
    let dep = DependenceConfig::with_reference(reference(&spec));
    let out = screen(&sim.data, &dep, p_tilde).map_err(fail)?;
    let ranked: Vec<Value> = out
        .ranked
        .iter()
        .map(|(c, r)| json!({"column": sim.data.column(*c).name, "rho": r}))
        .collect();
    let relevant = layout::relevant(p);
    Ok(json!({
        "ranked": ranked,
        "retained": names(&sim.data, &out.retained),
        "relevant": names(&sim.data, &relevant),
    })
    .to_string())
}

/// Screening followed by the cross-validated subset search.
#[wasm_bindgen]
pub fn refine_design(design: u8, n: usize, p: usize, p_tilde: usize, seed: u32) -> Result<String, JsValue> {
    let (spec, sim) = simulate(design, n, p, seed)?;
    let mut cfg = IterateConfig::new(DependenceConfig::with_reference(reference(&spec)));
    cfg.refine.protect_w = true;
    let it = iterate_procedure(&sim.data, &cfg, p_tilde).map_err(fail)?;
    let cols = &it.cv.selection.columns;
    let table: Vec<Value> = it
        .cv
        .table
        .iter()
        .map(|e| {
            let inc: Vec<&str> = cols
                .iter()
                .zip(&e.flags)
                .filter(|(_, f)| **f)
                .map(|(c, _)| sim.data.column(*c).name.as_str())
                .collect();
            json!({"included": inc, "scale": e.scale, "cv": e.cv})
        })
        .collect();
    Ok(json!({
        "p_tilde": it.p_tilde,
        "screened": names(&sim.data, cols),
        "selected": names(&sim.data, &it.cv.selection.included()),
        "smoothed_out": names(&sim.data, &it.cv.selection.excluded()),
        "cv": it.cv.cv,
        "sparsity_doubt": it.sparsity_doubt,
        "table": table,
    })
    .to_string())
}

/// Cross-fitted doubly robust ATE on one treatment-design sample.
#[wasm_bindgen]
pub fn ate_design(design: u8, n: usize, p: usize, seed: u32, trim_lower: f64, trim_upper: f64) -> Result<String, JsValue> {
    let (spec, sim) = simulate(design, n, p, seed)?;
    if !spec.is_treatment_design() {
        return Err(fail("pick design 4, 5 or 6"));
    }
    let cfg = AteConfig {
        trim: TrimRule::new(trim_lower, trim_upper).map_err(fail)?,
        split_seed: seed as u64,
        ..AteConfig::default()
    };
    let res = ate(&sim.data, &cfg).map_err(fail)?;
    let truth = sim
        .u_psi
        .as_deref()
        .map(|u| true_ate(u, &effect_moments(&spec, 200_000)))
        .unwrap_or(0.0);
    Ok(json!({
        "psi_hat": res.psi_hat,
        "se": res.se,
        "ci95": [res.ci95.0, res.ci95.1],
        "truth": truth,
        "trim_fraction": res.trim_fraction,
        "propensity_covariates": res.diagnostics.propensity_covariates,
        "true_propensity": sim.propensity,
    })
    .to_string())
}

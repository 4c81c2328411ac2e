use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use densift::causal::{ate, balance_test, AteConfig, CrossFit, TrimRule, Variant};
use densift::cv::{iterate_procedure, CvMethod, CvMode, IterateConfig, IterateOutcome, RefineConfig};
use densift::dependence::{DependenceConfig, Reference};
use densift::io::{ingest, read_query, Manifest, Report, RunConfig};
use densift::screening::screen;
use densift::simulate::{run_ate_study, run_refine_study, run_screening_study_with, DesignSpec, ScreeningMethod};
use densift::{Dataset, Error, ErrorClass};

#[derive(Parser, Debug)]
#[command(name = "densift", version, about = "Kernel dependence screening, CV refinement and doubly robust ATE")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (falls back to DENSIFT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Input {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum RefArg {
    Median,
    Quantiles,
    Binary,
}

impl RefArg {
    fn name(self) -> &'static str {
        match self {
            RefArg::Median => "median",
            RefArg::Quantiles => "quantiles",
            RefArg::Binary => "binary",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum Study {
    Screening,
    Refine,
    Ate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank candidates by conditional dependence and keep the top block.
    Screen {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        p_tilde: Option<usize>,
        #[arg(long, value_enum)]
        reference: Option<RefArg>,
        /// Also report candidates clearing C·n^(−r/(2r+q^c+1))·log n.
        #[arg(long)]
        threshold_c: Option<f64>,
    },
    /// Screen, then pick the covariate subset and bandwidths by cross-validation.
    Refine {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        p_tilde: Option<usize>,
        #[arg(long, value_enum)]
        reference: Option<RefArg>,
        #[arg(long)]
        protect_w: bool,
    },
    /// Conditional density of the response on the refined covariates.
    Cde {
        #[command(flatten)]
        input: Input,
        /// CSV of query covariates; a response column gives point evaluations.
        #[arg(long)]
        query: Option<PathBuf>,
        /// Response grid size used for query rows without a response value.
        #[arg(long, default_value_t = 50)]
        grid_points: usize,
        #[arg(long)]
        p_tilde: Option<usize>,
    },
    /// Propensity score on the refined covariates.
    Pscore {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        query: Option<PathBuf>,
        #[arg(long)]
        p_tilde: Option<usize>,
    },
    /// Cross-fitted doubly robust average treatment effect.
    Ate {
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value = "psi3")]
        variant: String,
        /// Trim bounds `lower,upper`.
        #[arg(long)]
        trim: Option<String>,
        #[arg(long)]
        hajek: bool,
        /// Fit on each half and pool both folds.
        #[arg(long)]
        swap: bool,
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long)]
        p_tilde: Option<usize>,
        /// Propensity subclass edges for the balance table.
        #[arg(long)]
        balance_edges: Option<String>,
    },
    /// Monte Carlo studies on the synthetic designs.
    Simulate {
        #[arg(long)]
        design: u8,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        p: usize,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "screening")]
        study: Study,
        /// Screening statistic for designs 1–3 (`median` or `quantiles`).
        #[arg(long, value_enum)]
        reference: Option<RefArg>,
        #[arg(long, default_value_t = 5)]
        p_tilde: usize,
        /// Comma-separated estimator variants for `--study ate`.
        #[arg(long, default_value = "psi3")]
        variants: String,
        #[arg(long, default_value_t = 1_000_000)]
        truth_draws: usize,
        /// Trim bounds `lower,upper` for `--study ate`.
        #[arg(long, default_value = "0.1,0.9")]
        trim: String,
    },
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::InvalidConfig(format!("bad {what} value `{t}`"))))
        .collect()
}

fn load(input: &Input) -> Result<Dataset, Error> {
    let manifest = Manifest::from_path(&input.manifest)?;
    ingest(&input.csv, &manifest)
}

fn dependence_config(cfg: &RunConfig, binary_default: bool) -> Result<DependenceConfig, Error> {
    Ok(DependenceConfig {
        reference: cfg.reference_for(binary_default)?,
        kernel: cfg.kernel()?,
        scale: cfg.screening_scale,
        keep_lambda: false,
    })
}

fn iterate_config(cfg: &RunConfig, binary: bool) -> Result<IterateConfig, Error> {
    let dependence = dependence_config(cfg, binary)?;
    let binary = dependence.reference == Reference::BinaryTreatment;
    Ok(IterateConfig {
        refine: RefineConfig {
            mode: if binary { CvMode::BinaryD } else { CvMode::ContinuousY },
            kernel: dependence.kernel,
            scale_grid: cfg.scale_grid.clone(),
            protect_w: cfg.protect_w,
            method: CvMethod::Auto,
        },
        dependence,
        p_tilde_cap: cfg.p_tilde_cap,
    })
}

fn names(data: &Dataset, cols: &[usize]) -> Vec<String> {
    cols.iter().map(|&c| data.column(c).name.clone()).collect()
}

fn refine_json(data: &Dataset, it: &IterateOutcome) -> Value {
    let spec = &it.cv.bandwidths;
    let bandwidths: Vec<Value> = spec
        .covariates
        .iter()
        .map(|c| json!({"column": data.column(c.column).name, "smoothing": c.smoothing}))
        .collect();
    let table: Vec<Value> = it
        .cv
        .table
        .iter()
        .map(|e| {
            let inc: Vec<&String> = it.cv.selection.columns.iter().zip(&e.flags).filter(|(_, f)| **f).map(|(c, _)| &data.column(*c).name).collect();
            json!({"included": inc, "scale": e.scale, "cv": e.cv, "dropped": e.dropped})
        })
        .collect();
    json!({
        "p_tilde": it.p_tilde,
        "screened": names(data, &it.screening.working_set()),
        "selected": names(data, &it.cv.selection.included()),
        "smoothed_out": names(data, &it.cv.selection.excluded()),
        "flags": it.cv.selection.flags,
        "cv": it.cv.cv,
        "scale": it.cv.scale,
        "response_bandwidth": spec.h_y,
        "bandwidths": bandwidths,
        "sparsity_doubt": it.sparsity_doubt,
        "cv_table": table,
    })
}

fn sparsity_warning(it: &IterateOutcome, warnings: &mut Vec<String>) {
    if it.sparsity_doubt {
        warnings.push(format!(
            "no screened covariate was smoothed out up to p_tilde = {}; the sparsity assumption may not hold",
            it.p_tilde
        ));
    }
}

fn dropped_warning(data: &Dataset, warnings: &mut Vec<String>) {
    if data.dropped_rows > 0 {
        warnings.push(format!("{} rows with missing values were dropped", data.dropped_rows));
    }
}

fn run(cli: &Cli, cfg: &mut RunConfig) -> Result<(String, Option<u64>, Value, Vec<String>), Error> {
    let mut warnings = Vec::new();
    match &cli.command {
        Command::Screen { input, p_tilde, reference, threshold_c } => {
            if let Some(r) = reference {
                cfg.reference = Some(r.name().into());
            }
            if let Some(p) = p_tilde {
                cfg.p_tilde_init = *p;
            }
            if threshold_c.is_some() {
                cfg.threshold_c = *threshold_c;
            }
            cfg.validate()?;
            let data = load(input)?;
            dropped_warning(&data, &mut warnings);
            let dep = dependence_config(cfg, false)?;
            let mut out = screen(&data, &dep, cfg.p_tilde_init)?;
            if let Some(c) = cfg.threshold_c {
                let q_c = densift::screening::count_continuous(&data, &out.w);
                out.add_threshold(c, data.n(), dep.kernel.order, q_c);
            }
            if out.dependence.zero_mass_rows > 0 {
                warnings.push(format!("{} conditioning rows had zero kernel mass", out.dependence.zero_mass_rows));
            }
            let ranked: Vec<Value> = out
                .ranked
                .iter()
                .map(|(c, r)| json!({"column": data.column(*c).name, "rho": r}))
                .collect();
            let result = json!({
                "n": data.n(),
                "dropped_rows": data.dropped_rows,
                "reference_values": out.dependence.reference_values,
                "ranked": ranked,
                "retained": names(&data, &out.retained),
                "preselected": names(&data, &out.w),
                "threshold": out.threshold.as_ref().map(|t| json!({"c": t.c, "value": t.threshold, "members": names(&data, &t.members)})),
            });
            Ok(("screen".into(), None, result, warnings))
        }
        Command::Refine { input, p_tilde, reference, protect_w } => {
            if let Some(r) = reference {
                cfg.reference = Some(r.name().into());
            }
            if let Some(p) = p_tilde {
                cfg.p_tilde_init = *p;
            }
            cfg.protect_w |= protect_w;
            cfg.validate()?;
            let data = load(input)?;
            dropped_warning(&data, &mut warnings);
            let it = iterate_procedure(&data, &iterate_config(cfg, false)?, cfg.p_tilde_init)?;
            sparsity_warning(&it, &mut warnings);
            Ok(("refine".into(), None, refine_json(&data, &it), warnings))
        }
        Command::Cde { input, query, grid_points, p_tilde } => {
            if let Some(p) = p_tilde {
                cfg.p_tilde_init = *p;
            }
            if cfg.reference.as_deref() == Some("binary") {
                return Err(Error::InvalidConfig("cde needs a continuous-response reference".into()));
            }
            cfg.validate()?;
            let data = load(input)?;
            dropped_warning(&data, &mut warnings);
            let y_col = data.require_response()?;
            let it = iterate_procedure(&data, &iterate_config(cfg, false)?, cfg.p_tilde_init)?;
            sparsity_warning(&it, &mut warnings);
            let spec = it.model.spec().clone();
            let y_name = data.column(y_col).name.clone();
            let (rows, ys) = match query {
                Some(q) => read_query(std::fs::File::open(q)?, &data, &spec, Some(&y_name))?,
                None => (
                    densift::cde::query_rows(&data, &spec),
                    Some(data.column(y_col).values.clone()),
                ),
            };
            let evaluations = match ys {
                Some(ys) => {
                    let p = it.model.density_many(&ys, &rows)?;
                    if p.fallbacks > 0 {
                        warnings.push(format!("{} query points had zero kernel mass; unconditional density used", p.fallbacks));
                    }
                    json!({"y": ys, "density": p.values})
                }
                None => {
                    let y = &data.column(y_col).values;
                    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                    let k = (*grid_points).max(2);
                    let grid: Vec<f64> = (0..k).map(|g| lo + (hi - lo) * g as f64 / (k - 1) as f64).collect();
                    let mut dens = Vec::new();
                    let mut fallbacks = 0;
                    for row in &rows {
                        let reps: Vec<Vec<f64>> = vec![row.clone(); k];
                        let p = it.model.density_many(&grid, &reps)?;
                        fallbacks += p.fallbacks;
                        dens.push(p.values);
                    }
                    if fallbacks > 0 {
                        warnings.push(format!("{fallbacks} grid points had zero kernel mass; unconditional density used"));
                    }
                    json!({"y_grid": grid, "density": dens})
                }
            };
            let mut result = refine_json(&data, &it);
            result["evaluations"] = evaluations;
            Ok(("cde".into(), None, result, warnings))
        }
        Command::Pscore { input, query, p_tilde } => {
            if let Some(p) = p_tilde {
                cfg.p_tilde_init = *p;
            }
            cfg.reference = Some("binary".into());
            cfg.validate()?;
            let data = load(input)?;
            dropped_warning(&data, &mut warnings);
            let it = iterate_procedure(&data, &iterate_config(cfg, true)?, cfg.p_tilde_init)?;
            sparsity_warning(&it, &mut warnings);
            let spec = it.model.spec().clone();
            let rows = match query {
                Some(q) => read_query(std::fs::File::open(q)?, &data, &spec, None)?.0,
                None => densift::cde::query_rows(&data, &spec),
            };
            let p = it.model.propensity_many(&rows)?;
            if p.fallbacks > 0 {
                warnings.push(format!("{} query points had zero kernel mass; sample share used", p.fallbacks));
            }
            let mut result = refine_json(&data, &it);
            result["propensity"] = json!(p.values);
            Ok(("pscore".into(), None, result, warnings))
        }
        Command::Ate { input, variant, trim, hajek, swap, split_seed, p_tilde, balance_edges } => {
            if let Some(t) = trim {
                let v = parse_list(t, "trim")?;
                if v.len() != 2 {
                    return Err(Error::InvalidConfig("--trim takes `lower,upper`".into()));
                }
                cfg.trim_lower = v[0];
                cfg.trim_upper = v[1];
            }
            cfg.hajek |= hajek;
            cfg.swap_folds |= swap;
            if let Some(s) = split_seed {
                cfg.split_seed = *s;
            }
            if let Some(p) = p_tilde {
                cfg.p_tilde_init = *p;
            }
            cfg.reference = Some("binary".into());
            cfg.validate()?;
            let variant: Variant = variant.parse()?;
            let data = load(input)?;
            dropped_warning(&data, &mut warnings);
            let trim = TrimRule::new(cfg.trim_lower, cfg.trim_upper)?;
            let selection = iterate_config(cfg, true)?;
            let ate_cfg = AteConfig {
                variant,
                trim,
                hajek: cfg.hajek,
                cross_fit: if cfg.swap_folds { CrossFit::SwapAverage } else { CrossFit::Split },
                split_seed: cfg.split_seed,
                selection: selection.clone(),
                p_tilde: cfg.p_tilde_init,
                regression_scales: cfg.scale_grid.clone(),
                ..AteConfig::default()
            };
            let res = ate(&data, &ate_cfg)?;
            if res.diagnostics.sparsity_doubt {
                warnings.push("propensity refinement kept every screened covariate; the sparsity assumption may not hold".into());
            }
            if res.diagnostics.propensity_fallbacks + res.diagnostics.outcome_fallbacks > 0 {
                warnings.push(format!(
                    "zero-mass fallbacks: {} propensity, {} outcome",
                    res.diagnostics.propensity_fallbacks, res.diagnostics.outcome_fallbacks
                ));
            }
            if let Some(c) = &res.caveat {
                warnings.push(c.clone());
            }
            // balance is checked on the full sample with an in-sample propensity fit
            let full = iterate_procedure(&data, &selection, cfg.p_tilde_init)?;
            let m_hat = full.model.propensity_many(&densift::cde::query_rows(&data, full.model.spec()))?.values;
            let edges = match balance_edges {
                Some(e) => parse_list(e, "balance edge")?,
                None => (0..=5).map(|k| trim.lower + (trim.upper - trim.lower) * k as f64 / 5.0).collect(),
            };
            let mut covs = data.candidates();
            covs.extend(data.preselected());
            let balance = balance_test(&data, data.require_treatment()?, &m_hat, &edges, &covs)?;
            let result = json!({
                "variant": variant.name(),
                "psi_hat": res.psi_hat,
                "se": res.se,
                "ci95": [res.ci95.0, res.ci95.1],
                "n_scored": res.n_scored,
                "n_effective": res.n_effective,
                "trim_fraction": res.trim_fraction,
                "estimand": if res.trim_fraction > 0.0 { "trimmed_subpopulation" } else { "population" },
                "diagnostics": res.diagnostics,
                "scores": res.scores,
                "balance": balance,
            });
            Ok(("ate".into(), None, result, warnings))
        }
        Command::Simulate { design, n, p, reps, seed, study, reference, p_tilde, variants, truth_draws, trim } => {
            if let Some(r) = reps {
                cfg.reps = *r;
            }
            if let Some(r) = reference {
                cfg.reference = Some(r.name().into());
            }
            cfg.validate()?;
            let spec = DesignSpec::new(*design, *n, *p, *seed, cfg.reps);
            spec.validate()?;
            let report = match study {
                Study::Screening => {
                    let method = if spec.is_treatment_design() {
                        ScreeningMethod::Binary
                    } else if cfg.reference.as_deref() == Some("quantiles") {
                        ScreeningMethod::Quantile
                    } else {
                        ScreeningMethod::Median
                    };
                    let dep = dependence_config(cfg, spec.is_treatment_design())?;
                    run_screening_study_with(&spec, method, &dep, *p_tilde)?
                }
                Study::Refine => run_refine_study(&spec, *p_tilde, &cfg.scale_grid)?,
                Study::Ate => {
                    let vs = variants
                        .split(',')
                        .map(|v| v.trim().parse::<Variant>())
                        .collect::<Result<Vec<_>, _>>()?;
                    let t = parse_list(trim, "trim")?;
                    if t.len() != 2 {
                        return Err(Error::InvalidConfig("--trim takes `lower,upper`".into()));
                    }
                    cfg.trim_lower = t[0];
                    cfg.trim_upper = t[1];
                    let mut selection = iterate_config(cfg, true)?;
                    selection.refine.protect_w = true;
                    let base = AteConfig {
                        trim: TrimRule::new(cfg.trim_lower, cfg.trim_upper)?,
                        hajek: cfg.hajek,
                        selection,
                        p_tilde: *p_tilde,
                        regression_scales: cfg.scale_grid.clone(),
                        ..AteConfig::default()
                    };
                    run_ate_study(&spec, &vs, &base, *truth_draws)?
                }
            };
            warnings.extend(report.warnings.iter().cloned());
            Ok(("simulate".into(), Some(*seed), serde_json::to_value(&report)?, warnings))
        }
    }
}

fn threads(cli: &Cli, cfg: &RunConfig) -> Result<Option<usize>, Error> {
    if let Some(t) = cli.threads.or(cfg.threads) {
        return Ok(Some(t));
    }
    match std::env::var("DENSIFT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("DENSIFT_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = threads(&cli, &cfg)? {
        if t == 0 {
            return Err(Error::InvalidConfig("--threads must be positive".into()));
        }
        cfg.threads = Some(t);
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let (command, seed, result, warnings) = run(&cli, &mut cfg)?;
    let mut echo = serde_json::to_value(&cfg)?;
    // thread count never changes results, so it stays out of the echo
    echo.as_object_mut().map(|o| o.remove("threads"));
    let report = Report::new(&command, seed, echo, result, warnings);
    let text = report.to_json()?;
    match &cli.out {
        Some(p) => write_out(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn write_out(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}

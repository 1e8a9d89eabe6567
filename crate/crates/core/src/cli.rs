//! Command-line front end. Results go to stdout as JSON (or plain text for
//! `polysys build`); diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical or
//! experiment failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::divergence::{divergences, QuadratureSpec};
use crate::error::{MoeError, Result};
use crate::estimator::{fit_mle, FitConfig};
use crate::experiments::{run_experiment, well_separated_fixture, ExperimentConfig, Regime};
use crate::io::{self, KeyValues};
use crate::model::{Interval, ThetaBox};
use crate::polysys::{build_system, evaluate_system, search_nontrivial, SearchConfig};
use crate::voronoi::{loss_d1, loss_d2, TranslationBox, TranslationSolverConfig};

const EXPERIMENT_KEYS: &str = "\
Config keys (file lines or --set overrides), with defaults:
  experiment.regime          exact | over                  [exact]
  experiment.k               fitted experts                 [k* for exact, k*+1 for over]
  experiment.n_grid          comma-separated sample sizes   [1000,2000,4000,8000,16000,32000]
  experiment.replicates      replicates per n               [20]
  experiment.seed            master seed                    [0]
  experiment.truth           measure document path          [built-in two-expert fixture]
  fit.restarts               EM restarts                    [4]
  fit.max_em_iters           EM iterations per restart      [300]
  fit.em_tol                 relative log-likelihood tol    [1e-9]
  fit.gating_inner_iters     gating ascent steps per M-step [5]
  fit.gating_step            initial gating step            [4]
  solver.iterations          translation solver iterations  [10000]
  solver.stages              fixed-step stages              [25]
  solver.step                initial step                   [0.01 * (1 + max |parameter|)]
  quadrature.x_samples       Monte Carlo covariate draws    [400]
  quadrature.nodes           minimum y-grid nodes           [1001]
  quadrature.half_width      y-grid half-width              [automatic]
  theta.beta0|beta1|a|b      parameter bounds lo,hi         [-5,5]
  theta.sigma                variance bounds lo,hi          [0.05,10]
  theta.x                    covariate bounds lo,hi         [-1,1]";

#[derive(Debug, Parser)]
#[command(name = "softmoe", version, about = "Softmax-gated Gaussian mixture of experts toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a dataset from a measure document.
    Simulate {
        #[arg(long)]
        measure: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Covariate box `lo,hi` applied to every coordinate.
        #[arg(long, default_value = "-1,1")]
        x_range: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the maximum likelihood estimate by EM.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        restarts: usize,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Covariate box `lo,hi` applied to every coordinate.
        #[arg(long, default_value = "-1,1")]
        x_range: String,
        /// Also write the fitted measure document here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Voronoi loss between a fitted and a reference measure.
    Loss {
        #[arg(long, value_enum)]
        mode: LossMode,
        #[arg(long)]
        g: PathBuf,
        #[arg(long)]
        gstar: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
    },
    /// Squared Hellinger and total-variation distances.
    Divergence {
        #[arg(long)]
        g: PathBuf,
        #[arg(long)]
        h: PathBuf,
        #[arg(long, default_value_t = 1000)]
        x_samples: usize,
        #[arg(long, default_value_t = 1001)]
        nodes: usize,
        /// y-grid half-width; automatic when omitted.
        #[arg(long)]
        half_width: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Covariate box `lo,hi` applied to every coordinate.
        #[arg(long, default_value = "-1,1")]
        x_range: String,
    },
    /// Build, check or search the polynomial system.
    Polysys {
        #[command(subcommand)]
        action: PolyAction,
    },
    /// Run a convergence-rate experiment.
    #[command(after_help = EXPERIMENT_KEYS)]
    Experiment {
        /// Key/value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override, repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Master seed; overrides `experiment.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory receiving raw.csv and summary.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossMode {
    D1,
    D2,
}

#[derive(Debug, Args)]
struct SystemArgs {
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long)]
    r: u32,
}

#[derive(Debug, Subcommand)]
enum PolyAction {
    /// Print every equation.
    Build(SystemArgs),
    /// Residuals of a solution file.
    Check {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Multi-start search for a non-trivial solution.
    Search {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, default_value_t = 10_000)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Lower bound on |p5_j| / max |p5|.
        #[arg(long, default_value_t = 0.5)]
        p5_floor: f64,
    },
}

fn x_box(spec: &str, dim: usize) -> Result<Vec<Interval>> {
    let v: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| MoeError::InvalidConfig(format!("--x-range '{spec}' is not lo,hi")))?;
    match v[..] {
        [lo, hi] => Ok(vec![Interval::new(lo, hi)?; dim]),
        _ => Err(MoeError::InvalidConfig(format!("--x-range '{spec}' is not lo,hi"))),
    }
}

fn estimate_json(e: crate::divergence::Estimate) -> Value {
    json!({ "value": e.value, "se": e.se })
}

/// Builds an experiment configuration from key/value pairs. Relative
/// `experiment.truth` paths resolve against `base`.
pub fn experiment_config(mut kv: KeyValues, base: &Path) -> Result<ExperimentConfig> {
    let regime: Regime = kv.optional::<String>("experiment.regime")?.as_deref().unwrap_or("exact").parse()?;
    let truth = match kv.optional::<String>("experiment.truth")? {
        Some(p) => io::read_measure(&base.join(p))?,
        None => well_separated_fixture(),
    };
    let theta = io::take_theta(&mut kv, truth.dim())?;
    let mut cfg = ExperimentConfig::new(regime);
    cfg.quadrature.covariates = theta.covariates.clone();
    cfg.truth = truth;
    cfg.theta = theta;
    cfg.k = match (kv.optional("experiment.k")?, regime) {
        (Some(k), _) => k,
        (None, Regime::Exact) => cfg.truth.k(),
        (None, Regime::Over) => cfg.truth.k() + 1,
    };
    if let Some(v) = kv.optional_array("experiment.n_grid")? {
        cfg.n_grid = v
            .iter()
            .map(|&x| {
                if x >= 1.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(MoeError::InvalidConfig(format!("experiment.n_grid entry {x} is not a positive integer")))
                }
            })
            .collect::<Result<_>>()?;
    }
    macro_rules! set {
        ($key:literal, $field:expr) => {
            if let Some(v) = kv.optional($key)? {
                $field = v;
            }
        };
    }
    set!("experiment.replicates", cfg.replicates);
    set!("experiment.seed", cfg.seed);
    set!("fit.restarts", cfg.fit.restarts);
    set!("fit.max_em_iters", cfg.fit.max_em_iters);
    set!("fit.em_tol", cfg.fit.em_tol);
    set!("fit.gating_inner_iters", cfg.fit.gating_inner_iters);
    set!("fit.gating_step", cfg.fit.gating_step);
    set!("solver.iterations", cfg.solver.iterations);
    set!("solver.stages", cfg.solver.stages);
    set!("quadrature.x_samples", cfg.quadrature.x_samples);
    set!("quadrature.nodes", cfg.quadrature.nodes);
    if let Some(v) = kv.optional("solver.step")? {
        cfg.solver.step = Some(v);
    }
    if let Some(v) = kv.optional("quadrature.half_width")? {
        cfg.quadrature.half_width = Some(v);
    }
    cfg.fit.k = cfg.k;
    kv.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Simulate {
            measure,
            n,
            seed,
            x_range,
            out,
        } => {
            let g = io::read_measure(&measure)?;
            let data = g.sample(&x_box(&x_range, g.dim())?, n, seed)?;
            io::write_dataset(&data, fs::File::create(&out)?)?;
            Ok(json!({ "rows": data.n(), "dim": data.dim(), "seed": seed, "out": out }))
        }
        Command::Fit {
            data,
            k,
            restarts,
            max_iters,
            seed,
            x_range,
            out,
        } => {
            let data = io::read_dataset(&data)?;
            let mut theta = ThetaBox::new(data.dim());
            theta.covariates = x_box(&x_range, data.dim())?;
            let cfg = FitConfig {
                k,
                restarts,
                max_em_iters: max_iters,
                seed,
                ..FitConfig::default()
            };
            let fit = fit_mle(&data, &theta, &cfg)?;
            let doc = io::write_measure(&fit.measure);
            if let Some(path) = out {
                fs::write(path, &doc)?;
            }
            Ok(json!({
                "loglik": fit.final_loglik,
                "converged": fit.converged,
                "iterations": fit.iterations,
                "restart": fit.restart,
                "measure": doc,
            }))
        }
        Command::Loss {
            mode,
            g,
            gstar,
            iterations,
        } => {
            let (g, gstar) = (io::read_measure(&g)?, io::read_measure(&gstar)?);
            let cfg = TranslationSolverConfig {
                iterations,
                bounds: Some(TranslationBox::feasible(&gstar, &ThetaBox::new(gstar.dim()))?),
                ..TranslationSolverConfig::default()
            };
            let v = match mode {
                LossMode::D1 => loss_d1(&g, &gstar, &cfg)?,
                LossMode::D2 => loss_d2(&g, &gstar, &cfg)?,
            };
            Ok(json!({ "value": v.value, "t1": v.t1, "t2": v.t2, "cells": v.assignment.cells }))
        }
        Command::Divergence {
            g,
            h,
            x_samples,
            nodes,
            half_width,
            seed,
            x_range,
        } => {
            let (g, h) = (io::read_measure(&g)?, io::read_measure(&h)?);
            let spec = QuadratureSpec {
                covariates: x_box(&x_range, g.dim())?,
                x_samples,
                half_width,
                nodes,
                seed,
            };
            let d = divergences(&g, &h, &spec)?;
            Ok(json!({
                "hellinger_sq": estimate_json(d.hellinger_sq),
                "total_variation": estimate_json(d.total_variation),
            }))
        }
        Command::Polysys { action } => run_polysys(action),
        Command::Experiment {
            config,
            overrides,
            seed,
            out,
        } => {
            let (mut kv, base) = match &config {
                Some(p) => (
                    KeyValues::parse(&fs::read_to_string(p)?)?,
                    p.parent().map(Path::to_path_buf).unwrap_or_default(),
                ),
                None => (KeyValues::default(), PathBuf::from(".")),
            };
            for o in &overrides {
                kv.set_override(o)?;
            }
            if let Some(s) = seed {
                kv.set_override(&format!("experiment.seed={s}"))?;
            }
            let cfg = experiment_config(kv, &base)?;
            let res = run_experiment(&cfg)?;
            res.write_to_dir(&out)?;
            let slopes: serde_json::Map<String, Value> = res
                .quantities
                .iter()
                .map(|q| (q.name.to_string(), json!({ "slope": q.fit.slope, "r2": q.fit.r2 })))
                .collect();
            Ok(json!({
                "regime": res.regime.name(),
                "failures": res.failures,
                "slopes": slopes,
                "raw": out.join("raw.csv"),
                "summary": out.join("summary.csv"),
            }))
        }
    }
}

fn run_polysys(action: PolyAction) -> Result<Value> {
    match action {
        PolyAction::Build(s) => {
            let sys = build_system(s.m, s.d, s.r)?;
            let lines: Vec<String> = sys.equations.iter().map(|e| e.display()).collect();
            Ok(Value::String(lines.join("\n")))
        }
        PolyAction::Check { system: s, solution } => {
            let sys = build_system(s.m, s.d, s.r)?;
            let sol = io::parse_solution(&fs::read_to_string(solution)?)?;
            if sol.m() != s.m {
                return Err(MoeError::InvalidInput(format!(
                    "solution has {} groups but --m is {}",
                    sol.m(),
                    s.m
                )));
            }
            let res = evaluate_system(&sys, &sol)?;
            let rows: Vec<Value> = sys
                .equations
                .iter()
                .zip(&res)
                .map(|(e, r)| json!({ "l1": e.ell1, "l2": e.ell2, "residual": r }))
                .collect();
            let max = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Ok(json!({ "residuals": rows, "max_abs_residual": max, "nontrivial": crate::polysys::is_nontrivial(&sol) }))
        }
        PolyAction::Search {
            system: s,
            restarts,
            seed,
            p5_floor,
        } => {
            let cfg = SearchConfig {
                restarts,
                seed,
                p5_floor,
                ..SearchConfig::default()
            };
            let out = search_nontrivial(s.m, s.d, s.r, &cfg)?;
            Ok(json!({
                "verdict": out.verdict(),
                "found": out.solution.is_some(),
                "found_at_restart": out.found_at,
                "best_residual": out.best_residual,
                "restarts_run": out.restarts_run,
                "best_candidate": io::write_solution(&out.best_candidate),
            }))
        }
    }
}

fn exit_code(e: &MoeError) -> i32 {
    match e {
        MoeError::NonFinite(_) | MoeError::Quadrature(_) | MoeError::Experiment(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(Value::String(text)) => {
            println!("{text}");
            0
        }
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json values serialise"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

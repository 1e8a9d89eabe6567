//! Monte Carlo convergence-rate harness.
//!
//! For every sample size `n` and replicate: draw data from the true measure,
//! fit the MLE, then record the Voronoi loss, the Hellinger distance and the
//! per-cell parameter errors. Slopes come from least squares on
//! `(log n, log mean)` over the replicate means.

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::divergence::{divergences, hellinger_from_sq, QuadratureSpec};
use crate::error::{MoeError, Result};
use crate::estimator::{fit_mle, FitConfig};
use crate::model::{ExpertComponent, MixingMeasure, ThetaBox};
use crate::voronoi::{loss_d1, loss_d2, TranslationBox, TranslationSolverConfig, VoronoiAssignment};

/// Fraction of failed replicates at one `n` that aborts the experiment.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Fit with `k = k*`; track the exact-fitted loss.
    Exact,
    /// Fit with `k > k*`; track the over-fitted loss.
    Over,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Exact => "exact",
            Regime::Over => "over",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = MoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Regime::Exact),
            "over" => Ok(Regime::Over),
            other => Err(MoeError::InvalidConfig(format!(
                "unknown regime '{other}' (expected exact or over)"
            ))),
        }
    }
}

/// Two experts in one dimension, far enough apart that EM restarts reach
/// the global basin: gating slopes +-2, expert slopes -1 and 1, variances
/// 0.3 and 0.5.
pub fn well_separated_fixture() -> MixingMeasure {
    MixingMeasure::new(vec![
        ExpertComponent::new(0.0, vec![2.0], vec![-1.0], 1.0, 0.3),
        ExpertComponent::new(0.0, vec![-2.0], vec![1.0], -1.0, 0.5),
    ])
    .expect("fixture is valid")
}

/// `{1, 2, 4, 8, 16, 32} * 1000`.
pub fn default_n_grid() -> Vec<usize> {
    (0..6).map(|i| 1000 << i).collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub truth: MixingMeasure,
    pub theta: ThetaBox,
    pub regime: Regime,
    /// Number of fitted experts; overrides `fit.k`.
    pub k: usize,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub fit: FitConfig,
    pub solver: TranslationSolverConfig,
    pub quadrature: QuadratureSpec,
    pub seed: u64,
}

impl ExperimentConfig {
    /// The well-separated fixture on the default box and grid.
    pub fn new(regime: Regime) -> Self {
        let truth = well_separated_fixture();
        let theta = ThetaBox::new(1);
        let k = match regime {
            Regime::Exact => truth.k(),
            Regime::Over => truth.k() + 1,
        };
        let mut quadrature = QuadratureSpec::new(theta.covariates.clone());
        quadrature.x_samples = 400;
        Self {
            truth,
            k,
            regime,
            n_grid: default_n_grid(),
            replicates: 20,
            fit: FitConfig {
                k,
                restarts: 4,
                max_em_iters: 300,
                ..FitConfig::default()
            },
            solver: TranslationSolverConfig::default(),
            quadrature,
            theta,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MoeError::InvalidConfig(m));
        self.truth.validate_as_truth()?;
        self.theta.validate()?;
        self.theta.check_measure(&self.truth)?;
        self.fit.validate()?;
        self.solver.validate()?;
        self.quadrature.validate()?;
        if self.truth.dim() != self.theta.dim() {
            return Err(MoeError::DimensionMismatch {
                expected: self.theta.dim(),
                got: self.truth.dim(),
            });
        }
        if self.replicates < 3 {
            return bad("experiment.replicates must be at least 3".into());
        }
        if self.n_grid.len() < 4 {
            return bad("experiment.n_grid needs at least 4 sample sizes".into());
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) || self.n_grid[0] == 0 {
            return bad("experiment.n_grid must be positive and strictly increasing".into());
        }
        match self.regime {
            Regime::Exact if self.k != self.truth.k() => {
                bad(format!("exact regime needs k = {} (got {})", self.truth.k(), self.k))
            }
            Regime::Over if self.k <= self.truth.k() => {
                bad(format!("over regime needs k > {} (got {})", self.truth.k(), self.k))
            }
            _ => Ok(()),
        }
    }
}

/// Worst per-cell errors of one fit after the loss translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupErrors {
    /// `max_{i in A_j} ||(beta1_i - beta1*_j - t2, b_i - b*_j)||`.
    pub beta1_b: f64,
    /// `max_{i in A_j} ||(a_i - a*_j, sigma_i - sigma*_j)||`.
    pub a_sigma: f64,
    /// `|sum_{i in A_j} exp(beta0_i) - exp(beta0*_j + t1)|`.
    pub weight: f64,
}

/// Errors per true component `j`. Empty cells report zero parameter errors
/// and the full weight gap.
pub fn parameter_group_errors(
    ghat: &MixingMeasure,
    gstar: &MixingMeasure,
    asg: &VoronoiAssignment,
    t1: f64,
    t2: &[f64],
) -> Vec<GroupErrors> {
    asg.cells
        .iter()
        .enumerate()
        .map(|(j, cell)| {
            let s = &gstar.components()[j];
            let mut out = GroupErrors {
                beta1_b: 0.0,
                a_sigma: 0.0,
                weight: 0.0,
            };
            let mut mass = 0.0;
            for &i in cell {
                let c = &ghat.components()[i];
                mass += c.beta0.exp();
                let db: f64 = c
                    .beta1
                    .iter()
                    .zip(&s.beta1)
                    .zip(t2)
                    .map(|((u, v), t)| (u - v - t).powi(2))
                    .sum::<f64>()
                    + (c.b - s.b).powi(2);
                let da: f64 =
                    c.a.iter().zip(&s.a).map(|(u, v)| (u - v).powi(2)).sum::<f64>() + (c.sigma - s.sigma).powi(2);
                out.beta1_b = out.beta1_b.max(db.sqrt());
                out.a_sigma = out.a_sigma.max(da.sqrt());
            }
            out.weight = (mass - (s.beta0 + t1).exp()).abs();
            out
        })
        .collect()
}

/// Translates `ghat` in the gating bias so its total weight
/// `sum_i exp(beta0_i)` equals that of `gstar`.
///
/// The likelihood cannot see a common shift of the gating biases, but the
/// Voronoi losses scale with `exp(beta0)`, so the MLE representative is
/// fixed this way before any loss is computed.
pub fn match_total_weight(ghat: &MixingMeasure, gstar: &MixingMeasure) -> Result<MixingMeasure> {
    let lse = |g: &MixingMeasure| {
        let b: Vec<f64> = g.components().iter().map(|c| c.beta0).collect();
        let m = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + b.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    ghat.translate(lse(gstar) - lse(ghat), &vec![0.0; ghat.dim()])
}

/// One replicate. Numeric fields are `None` when the replicate failed.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    pub loglik: Option<f64>,
    pub converged: bool,
    pub loss: Option<f64>,
    pub hellinger: Option<f64>,
    /// Worst `(beta1, b)` error over the cells.
    pub beta1_b: Option<f64>,
    pub a_sigma: Option<f64>,
    pub weight: Option<f64>,
    pub error: Option<String>,
}

impl RawRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    fn quantity(&self, q: Quantity) -> Option<f64> {
        match q {
            Quantity::Loss => self.loss,
            Quantity::Hellinger => self.hellinger,
            Quantity::Beta1B => self.beta1_b,
            Quantity::ASigma => self.a_sigma,
            Quantity::Weight => self.weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Loss,
    Hellinger,
    Beta1B,
    ASigma,
    Weight,
}

impl Quantity {
    pub const ALL: [Quantity; 5] = [
        Quantity::Loss,
        Quantity::Hellinger,
        Quantity::Beta1B,
        Quantity::ASigma,
        Quantity::Weight,
    ];

    pub fn name(self, regime: Regime) -> &'static str {
        match (self, regime) {
            (Quantity::Loss, Regime::Exact) => "d1",
            (Quantity::Loss, Regime::Over) => "d2",
            (Quantity::Hellinger, _) => "hellinger",
            (Quantity::Beta1B, _) => "beta1_b",
            (Quantity::ASigma, _) => "a_sigma",
            (Quantity::Weight, _) => "weight",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `log value` on `log n`.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 4 {
        return Err(MoeError::InvalidInput(format!(
            "slope fit needs at least 4 points (got {})",
            points.len()
        )));
    }
    if let Some((n, v)) = points.iter().find(|(n, v)| !(*n > 0.0 && *v > 0.0)) {
        return Err(MoeError::InvalidInput(format!(
            "slope fit needs positive n and values (got n={n}, value={v})"
        )));
    }
    let m = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(MoeError::InvalidInput("slope fit needs at least two distinct n".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(SlopeFit { slope, intercept, r2 })
}

/// True when `v` rises at most once from one entry to the next.
pub fn nonincreasing_with_one_inversion(v: &[f64]) -> bool {
    v.windows(2).filter(|w| w[1] > w[0]).count() <= 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantityRate {
    pub name: &'static str,
    pub fit: SlopeFit,
    pub means: Vec<f64>,
    pub ses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    pub regime: Regime,
    pub n_grid: Vec<usize>,
    pub failures: Vec<usize>,
    pub quantities: Vec<QuantityRate>,
    pub rows: Vec<RawRow>,
}

impl RateResult {
    pub fn quantity(&self, name: &str) -> Option<&QuantityRate> {
        self.quantities.iter().find(|q| q.name == name)
    }

    /// `raw.csv`: one row per replicate; failed rows leave numeric fields
    /// empty and carry the error message.
    pub fn write_raw(&self, w: impl std::io::Write) -> Result<()> {
        let mut w = w;
        writeln!(w, "format=1")?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "n", "replicate", "seed", "loglik", "converged", "failed", "loss", "hellinger", "beta1_b", "a_sigma",
            "weight", "error",
        ])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            csv.write_record([
                r.n.to_string(),
                r.replicate.to_string(),
                r.seed.to_string(),
                f(r.loglik),
                r.converged.to_string(),
                r.failed().to_string(),
                f(r.loss),
                f(r.hellinger),
                f(r.beta1_b),
                f(r.a_sigma),
                f(r.weight),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }

    /// `summary.csv`: one row per `(quantity, n)` with the replicate mean and
    /// SE, the quantity's fitted slope, intercept and R², and the failure count.
    pub fn write_summary(&self, w: impl std::io::Write) -> Result<()> {
        let mut w = w;
        writeln!(w, "format=1")?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["quantity", "n", "mean", "se", "slope", "intercept", "r2", "failures"])?;
        for q in &self.quantities {
            for (i, n) in self.n_grid.iter().enumerate() {
                csv.write_record([
                    q.name.to_string(),
                    n.to_string(),
                    q.means[i].to_string(),
                    q.ses[i].to_string(),
                    q.fit.slope.to_string(),
                    q.fit.intercept.to_string(),
                    q.fit.r2.to_string(),
                    self.failures[i].to_string(),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    }

    /// Writes `raw.csv` and `summary.csv` into `dir`, creating it if needed.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_raw(fs::File::create(dir.join("raw.csv"))?)?;
        self.write_summary(fs::File::create(dir.join("summary.csv"))?)?;
        Ok(())
    }
}

/// Seed of replicate `counter`, drawn from stream `counter` of the master seed.
pub fn replicate_seed(master: u64, counter: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(counter);
    rng.next_u64()
}

struct Measured {
    loglik: f64,
    converged: bool,
    loss: f64,
    hellinger: f64,
    groups: Vec<GroupErrors>,
}

fn run_replicate(cfg: &ExperimentConfig, bounds: &TranslationBox, n: usize, seed: u64) -> Result<Measured> {
    let data = cfg.truth.sample(&cfg.theta.covariates, n, seed)?;
    let fit_cfg = FitConfig {
        k: cfg.k,
        seed: seed.wrapping_add(1),
        ..cfg.fit.clone()
    };
    let fit = fit_mle(&data, &cfg.theta, &fit_cfg)?;
    let ghat = match_total_weight(&fit.measure, &cfg.truth)?;
    let solver = TranslationSolverConfig {
        bounds: Some(bounds.clone()),
        ..cfg.solver.clone()
    };
    let loss = match cfg.regime {
        Regime::Exact => loss_d1(&ghat, &cfg.truth, &solver)?,
        Regime::Over => loss_d2(&ghat, &cfg.truth, &solver)?,
    };
    let quad = QuadratureSpec {
        seed: seed.wrapping_add(2),
        ..cfg.quadrature.clone()
    };
    let hel = hellinger_from_sq(divergences(&fit.measure, &cfg.truth, &quad)?.hellinger_sq);
    let groups = parameter_group_errors(&ghat, &cfg.truth, &loss.assignment, loss.t1, &loss.t2);
    Ok(Measured {
        loglik: fit.final_loglik,
        converged: fit.converged,
        loss: loss.value,
        hellinger: hel.value,
        groups,
    })
}

/// Runs every `(n, replicate)` pair, then fits the slopes.
///
/// Deterministic given `cfg.seed`. Fails when more than
/// [`MAX_FAILURE_RATE`] of the replicates at any `n` fail.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RateResult> {
    cfg.validate()?;
    let bounds = TranslationBox::feasible(&cfg.truth, &cfg.theta)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        let batch: Vec<RawRow> = (0..cfg.replicates)
            .into_par_iter()
            .map(|rep| {
                let seed = replicate_seed(cfg.seed, (ni * cfg.replicates + rep) as u64);
                let mut row = RawRow {
                    n,
                    replicate: rep,
                    seed,
                    loglik: None,
                    converged: false,
                    loss: None,
                    hellinger: None,
                    beta1_b: None,
                    a_sigma: None,
                    weight: None,
                    error: None,
                };
                match run_replicate(cfg, &bounds, n, seed) {
                    Ok(m) => {
                        let worst = |f: fn(&GroupErrors) -> f64| m.groups.iter().map(f).fold(0.0, f64::max);
                        row.loglik = Some(m.loglik);
                        row.converged = m.converged;
                        row.loss = Some(m.loss);
                        row.hellinger = Some(m.hellinger);
                        row.beta1_b = Some(worst(|g| g.beta1_b));
                        row.a_sigma = Some(worst(|g| g.a_sigma));
                        row.weight = Some(worst(|g| g.weight));
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                row
            })
            .collect();
        let failed = batch.iter().filter(|r| r.failed()).count();
        if failed as f64 > MAX_FAILURE_RATE * cfg.replicates as f64 {
            let first = batch.iter().find_map(|r| r.error.clone()).unwrap_or_default();
            return Err(MoeError::Experiment(format!(
                "{failed} of {} replicates failed at n={n}; first error: {first}",
                cfg.replicates
            )));
        }
        failures.push(failed);
        rows.extend(batch);
    }

    let mut quantities = Vec::new();
    for q in Quantity::ALL {
        let mut means = Vec::new();
        let mut ses = Vec::new();
        for &n in &cfg.n_grid {
            let vals: Vec<f64> = rows.iter().filter(|r| r.n == n).filter_map(|r| r.quantity(q)).collect();
            let m = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
            means.push(mean);
            ses.push((var / m).sqrt());
        }
        let points: Vec<(f64, f64)> = cfg.n_grid.iter().map(|&n| n as f64).zip(means.iter().copied()).collect();
        let fit = fit_slope(&points).unwrap_or(SlopeFit {
            slope: f64::NAN,
            intercept: f64::NAN,
            r2: f64::NAN,
        });
        quantities.push(QuantityRate {
            name: q.name(cfg.regime),
            fit,
            means,
            ses,
        });
    }
    Ok(RateResult {
        regime: cfg.regime,
        n_grid: cfg.n_grid.clone(),
        failures,
        quantities,
        rows,
    })
}

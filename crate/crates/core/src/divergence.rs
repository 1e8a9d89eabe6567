//! Squared Hellinger and total-variation distances between conditional
//! densities, averaged over the covariate law.
//!
//! The covariate average is a Monte Carlo mean over `x` drawn uniformly from
//! the covariate box. The inner `y` integral is a composite trapezoid rule on
//! `[-L, L]` for Hellinger; total variation splits the line at the sign
//! changes of `p - q` and uses the mixture CDFs. Every estimate carries the
//! Monte Carlo standard error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{MoeError, Result};
use crate::model::{Interval, MixingMeasure};

/// Tail mass allowed outside `[-L, L]` for either density.
pub const TAIL_MASS: f64 = 1e-10;
/// Standard deviations of headroom used when `L` is chosen automatically.
const AUTO_SDS: f64 = 7.0;
/// Grid spacing is at most this fraction of the smallest expert sd.
const NODES_PER_SD: f64 = 10.0;
pub const MIN_NODES: usize = 1001;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSpec {
    pub covariates: Vec<Interval>,
    pub x_samples: usize,
    /// Half-width `L` of the `y` range; `None` picks one from the measures.
    pub half_width: Option<f64>,
    /// Minimum trapezoid node count; raised when the grid would be too coarse.
    pub nodes: usize,
    pub seed: u64,
}

impl QuadratureSpec {
    pub fn new(covariates: Vec<Interval>) -> Self {
        Self {
            covariates,
            x_samples: 1000,
            half_width: None,
            nodes: MIN_NODES,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_samples < 2 {
            return Err(MoeError::InvalidConfig("x_samples must be at least 2".into()));
        }
        if self.nodes < MIN_NODES {
            return Err(MoeError::InvalidConfig(format!("nodes must be at least {MIN_NODES}")));
        }
        if let Some(l) = self.half_width {
            if !(l.is_finite() && l > 0.0) {
                return Err(MoeError::InvalidConfig("half_width must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            value: mean,
            se: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergences {
    pub hellinger_sq: Estimate,
    pub total_variation: Estimate,
}

/// Largest `|mean|` an expert reaches over the covariate box.
fn max_abs_mean(g: &MixingMeasure, covariates: &[Interval]) -> f64 {
    g.components()
        .iter()
        .map(|c| {
            c.b.abs()
                + c.a
                    .iter()
                    .zip(covariates)
                    .map(|(a, iv)| a.abs() * iv.lo.abs().max(iv.hi.abs()))
                    .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn min_sd(g: &MixingMeasure) -> f64 {
    g.components().iter().map(|c| c.sigma.sqrt()).fold(f64::INFINITY, f64::min)
}

fn max_sd(g: &MixingMeasure) -> f64 {
    g.components().iter().map(|c| c.sigma.sqrt()).fold(0.0, f64::max)
}

/// Mass of `g(. | x)` outside `[-l, l]`.
fn tail_mass(s: &Slice, l: f64) -> f64 {
    let std = Normal::standard();
    s.gate
        .iter()
        .zip(&s.experts)
        .map(|(w, &(mu, sd))| w * (std.cdf((-l - mu) / sd) + std.sf((l - mu) / sd)))
        .sum()
}

fn trapezoid(f: &[f64], h: f64) -> f64 {
    f.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum()
}

/// Gate and `(mean, sd)` per expert at a fixed `x`.
struct Slice {
    gate: Vec<f64>,
    experts: Vec<(f64, f64)>,
}

impl Slice {
    fn new(g: &MixingMeasure, x: &[f64]) -> Result<Self> {
        Ok(Self {
            gate: g.softmax_gate(x)?,
            experts: g.components().iter().map(|c| (c.mean(x), c.sigma.sqrt())).collect(),
        })
    }

    fn density(&self, y: f64) -> f64 {
        self.gate
            .iter()
            .zip(&self.experts)
            .map(|(w, &(mu, sd))| {
                let z = (y - mu) / sd;
                w * (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum()
    }

    fn cdf(&self, y: f64) -> f64 {
        let std = Normal::standard();
        self.gate
            .iter()
            .zip(&self.experts)
            .map(|(w, &(mu, sd))| w * std.cdf((y - mu) / sd))
            .sum()
    }
}

/// `1/2 ∫ |p - q|` from the sign changes of `p - q` on the grid: each change
/// is refined by bisection and the mass difference on every segment comes
/// from the mixture CDFs, so the kinks of `|p - q|` cost no accuracy.
fn total_variation_exact(p: &Slice, q: &Slice, ys: &[f64], diff: &[f64]) -> f64 {
    let mut cuts = vec![f64::NEG_INFINITY];
    for j in 1..ys.len() {
        if diff[j - 1] * diff[j] < 0.0 {
            let (mut lo, mut hi) = (ys[j - 1], ys[j]);
            let lo_sign = diff[j - 1] > 0.0;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if (p.density(mid) - q.density(mid) > 0.0) == lo_sign {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            cuts.push(0.5 * (lo + hi));
        }
    }
    cuts.push(f64::INFINITY);
    let cdf = |s: &Slice, y: f64| {
        if y == f64::NEG_INFINITY {
            0.0
        } else if y == f64::INFINITY {
            1.0
        } else {
            s.cdf(y)
        }
    };
    0.5 * cuts
        .windows(2)
        .map(|w| ((cdf(p, w[1]) - cdf(p, w[0])) - (cdf(q, w[1]) - cdf(q, w[0]))).abs())
        .sum::<f64>()
}

/// Computes both divergences from one pass over a shared `x` batch.
pub fn divergences(g: &MixingMeasure, h: &MixingMeasure, spec: &QuadratureSpec) -> Result<Divergences> {
    spec.validate()?;
    if g.dim() != h.dim() {
        return Err(MoeError::DimensionMismatch {
            expected: g.dim(),
            got: h.dim(),
        });
    }
    if spec.covariates.len() != g.dim() {
        return Err(MoeError::DimensionMismatch {
            expected: g.dim(),
            got: spec.covariates.len(),
        });
    }
    let sd_hi = max_sd(g).max(max_sd(h));
    let sd_lo = min_sd(g).min(min_sd(h));
    let l = spec.half_width.unwrap_or_else(|| {
        max_abs_mean(g, &spec.covariates).max(max_abs_mean(h, &spec.covariates)) + AUTO_SDS * sd_hi
    });
    let nodes = spec
        .nodes
        .max((2.0 * l * NODES_PER_SD / sd_lo).ceil() as usize + 1);
    let step = 2.0 * l / (nodes - 1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = g.dim();
    let xs: Vec<f64> = (0..spec.x_samples * d)
        .map(|i| {
            let iv = spec.covariates[i % d];
            rng.random_range(iv.lo..=iv.hi)
        })
        .collect();

    let per_x: Vec<(f64, f64)> = xs
        .par_chunks(d.max(1))
        .map(|x| -> Result<(f64, f64)> {
            let (ps, qs) = (Slice::new(g, x)?, Slice::new(h, x)?);
            let tail = tail_mass(&ps, l).max(tail_mass(&qs, l));
            if tail > TAIL_MASS {
                return Err(MoeError::Quadrature(format!(
                    "tail mass {tail:.3e} outside [-{l}, {l}] exceeds {TAIL_MASS:e}; increase the y half-width"
                )));
            }
            let ys: Vec<f64> = (0..nodes).map(|j| -l + j as f64 * step).collect();
            let mut sq = vec![0.0; nodes];
            let mut diff = vec![0.0; nodes];
            for (j, &y) in ys.iter().enumerate() {
                let (p, q) = (ps.density(y), qs.density(y));
                sq[j] = (p.sqrt() - q.sqrt()).powi(2);
                diff[j] = p - q;
            }
            let hel = 0.5 * trapezoid(&sq, step);
            let tv = total_variation_exact(&ps, &qs, &ys, &diff);
            Ok((hel, tv))
        })
        .collect::<Result<_>>()?;

    let hel: Vec<f64> = per_x.iter().map(|p| p.0).collect();
    let tv: Vec<f64> = per_x.iter().map(|p| p.1).collect();
    Ok(Divergences {
        hellinger_sq: Estimate::from_samples(&hel),
        total_variation: Estimate::from_samples(&tv),
    })
}

/// `h^2 = 1/2 ∫ (sqrt g - sqrt g')^2`, averaged over `x`.
pub fn hellinger_sq(g: &MixingMeasure, h: &MixingMeasure, spec: &QuadratureSpec) -> Result<Estimate> {
    divergences(g, h, spec).map(|d| d.hellinger_sq)
}

/// `V = 1/2 ∫ |g - g'|`, averaged over `x`.
pub fn total_variation(g: &MixingMeasure, h: &MixingMeasure, spec: &QuadratureSpec) -> Result<Estimate> {
    divergences(g, h, spec).map(|d| d.total_variation)
}

/// Hellinger distance `h` from an estimate of `h^2`, with a delta-method SE.
pub fn hellinger_from_sq(e: Estimate) -> Estimate {
    let value = e.value.max(0.0).sqrt();
    let se = if value > 0.0 { e.se / (2.0 * value) } else { e.se.sqrt() };
    Estimate { value, se }
}

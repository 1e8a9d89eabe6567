//! Softmax-gated Gaussian mixture of experts.
//!
//! A [`MixingMeasure`] is a finite list of experts. Expert `i` carries a
//! gating bias `beta0`, gating slope `beta1`, and a Gaussian regression
//! `y ~ N(a·x + b, sigma)` where `sigma` is the *variance*. The conditional
//! density is
//!
//! ```text
//! g(y | x) = sum_i softmax_i(beta1_i·x + beta0_i) * N(y; a_i·x + b_i, sigma_i)
//! ```
//!
//! Component weights are `exp(beta0_i)` and are not normalised; the gate is
//! invariant under `beta0 -> beta0 + t1`, `beta1 -> beta1 + t2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MoeError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(MoeError::InvalidConfig(format!(
                "interval [{lo}, {hi}] must be finite with lo < hi"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// One expert: gating parameters plus a Gaussian linear regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertComponent {
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub a: Vec<f64>,
    pub b: f64,
    /// Variance of the Gaussian expert.
    pub sigma: f64,
}

impl ExpertComponent {
    pub fn new(beta0: f64, beta1: Vec<f64>, a: Vec<f64>, b: f64, sigma: f64) -> Self {
        Self {
            beta0,
            beta1,
            a,
            b,
            sigma,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        dot(&self.a, x) + self.b
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        dot(&self.beta1, x) + self.beta0
    }

    /// Gaussian log-density of the expert at `(x, y)`.
    pub fn log_expert_density(&self, x: &[f64], y: f64) -> f64 {
        let r = y - self.mean(x);
        -0.5 * (LN_2PI + self.sigma.ln()) - r * r / (2.0 * self.sigma)
    }

    fn is_finite(&self) -> bool {
        self.beta0.is_finite()
            && self.b.is_finite()
            && self.sigma.is_finite()
            && self.beta1.iter().chain(&self.a).all(|v| v.is_finite())
    }
}

/// Compact parameter box plus the covariate box.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBox {
    pub beta0: Interval,
    pub beta1: Vec<Interval>,
    pub a: Vec<Interval>,
    pub b: Interval,
    pub sigma: Interval,
    pub covariates: Vec<Interval>,
}

impl ThetaBox {
    /// Default box: `beta0, beta1, a, b` in `[-5, 5]`, `sigma` in `[0.05, 10]`,
    /// covariates in `[-1, 1]^d`.
    pub fn new(dim: usize) -> Self {
        let unit = Interval { lo: -5.0, hi: 5.0 };
        Self {
            beta0: unit,
            beta1: vec![unit; dim],
            a: vec![unit; dim],
            b: unit,
            sigma: Interval { lo: 0.05, hi: 10.0 },
            covariates: vec![Interval { lo: -1.0, hi: 1.0 }; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma.lo
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.beta1.len() != d || self.covariates.len() != d {
            return Err(MoeError::InvalidConfig(
                "theta box coordinates disagree on dimension".into(),
            ));
        }
        if self.sigma.lo <= 0.0 {
            return Err(MoeError::InvalidConfig("sigma_min must be positive".into()));
        }
        let all = [self.beta0, self.b, self.sigma]
            .into_iter()
            .chain(self.beta1.iter().copied())
            .chain(self.a.iter().copied())
            .chain(self.covariates.iter().copied());
        for iv in all {
            Interval::new(iv.lo, iv.hi)?;
        }
        Ok(())
    }

    /// Checks one component, naming the first violated bound.
    pub fn check_component(&self, idx: usize, c: &ExpertComponent) -> Result<()> {
        if c.dim() != self.dim() || c.beta1.len() != self.dim() {
            return Err(MoeError::DimensionMismatch {
                expected: self.dim(),
                got: c.dim(),
            });
        }
        let named = |name: String, v: f64, iv: &Interval| -> Result<()> {
            if iv.contains(v) {
                Ok(())
            } else {
                Err(MoeError::OutOfBox(format!(
                    "component {idx} {name} = {v} outside [{}, {}]",
                    iv.lo, iv.hi
                )))
            }
        };
        named("beta0".into(), c.beta0, &self.beta0)?;
        for (u, (v, iv)) in c.beta1.iter().zip(&self.beta1).enumerate() {
            named(format!("beta1[{u}]"), *v, iv)?;
        }
        for (u, (v, iv)) in c.a.iter().zip(&self.a).enumerate() {
            named(format!("a[{u}]"), *v, iv)?;
        }
        named("b".into(), c.b, &self.b)?;
        named("sigma".into(), c.sigma, &self.sigma)
    }

    pub fn check_measure(&self, g: &MixingMeasure) -> Result<()> {
        g.components()
            .iter()
            .enumerate()
            .try_for_each(|(i, c)| self.check_component(i, c))
    }

    /// Coordinate-wise clamp, which is the Euclidean projection onto a box.
    pub fn project_component(&self, c: &mut ExpertComponent) {
        c.beta0 = self.beta0.clamp(c.beta0);
        for (v, iv) in c.beta1.iter_mut().zip(&self.beta1) {
            *v = iv.clamp(*v);
        }
        for (v, iv) in c.a.iter_mut().zip(&self.a) {
            *v = iv.clamp(*v);
        }
        c.b = self.b.clamp(c.b);
        c.sigma = self.sigma.clamp(c.sigma);
    }

    pub fn contains_covariate(&self, x: &[f64]) -> bool {
        x.len() == self.covariates.len()
            && x.iter().zip(&self.covariates).all(|(v, iv)| iv.contains(*v))
    }

    /// Draws a component uniformly from the box.
    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> ExpertComponent {
        let mut draw = |iv: &Interval| rng.random_range(iv.lo..=iv.hi);
        ExpertComponent {
            beta0: draw(&self.beta0),
            beta1: self.beta1.iter().map(&mut draw).collect(),
            a: self.a.iter().map(&mut draw).collect(),
            b: draw(&self.b),
            sigma: draw(&self.sigma),
        }
    }
}

/// `G = sum_i exp(beta0_i) delta_(beta1_i, a_i, b_i, sigma_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMeasure {
    components: Vec<ExpertComponent>,
}

impl MixingMeasure {
    pub fn new(components: Vec<ExpertComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| MoeError::InvalidMeasure("at least one component required".into()))?;
        let d = first.dim();
        for (i, c) in components.iter().enumerate() {
            if c.a.len() != d || c.beta1.len() != d {
                return Err(MoeError::DimensionMismatch {
                    expected: d,
                    got: c.a.len().max(c.beta1.len()),
                });
            }
            if !c.is_finite() {
                return Err(MoeError::NonFinite(format!("component {i}")));
            }
            if c.sigma <= 0.0 {
                return Err(MoeError::InvalidMeasure(format!(
                    "component {i} has non-positive variance {}",
                    c.sigma
                )));
            }
        }
        Ok(Self { components })
    }

    /// Extra checks for a data-generating measure: pairwise distinct
    /// `(a, b, sigma)` and at least one non-zero gating slope.
    pub fn validate_as_truth(&self) -> Result<()> {
        if self
            .components
            .iter()
            .all(|c| c.beta1.iter().all(|v| *v == 0.0))
        {
            return Err(MoeError::InvalidMeasure(
                "true measure needs at least one non-zero gating slope".into(),
            ));
        }
        for i in 0..self.k() {
            for j in (i + 1)..self.k() {
                let (ci, cj) = (&self.components[i], &self.components[j]);
                if ci.a == cj.a && ci.b == cj.b && ci.sigma == cj.sigma {
                    return Err(MoeError::InvalidMeasure(format!(
                        "components {i} and {j} share (a, b, sigma)"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[ExpertComponent] {
        &self.components
    }

    pub fn into_components(self) -> Vec<ExpertComponent> {
        self.components
    }

    /// Unnormalised atom weights `exp(beta0_i)`.
    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.beta0.exp()).collect()
    }

    /// Largest absolute parameter entry.
    pub fn sup_norm(&self) -> f64 {
        self.to_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(MoeError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Softmax gate at `x`, computed with max-subtraction.
    pub fn softmax_gate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out: Vec<f64> = self.components.iter().map(|c| c.logit(x)).collect();
        softmax_in_place(&mut out);
        Ok(out)
    }

    /// Fills `logits[i] = beta1_i·x + beta0_i` and
    /// `joint[i] = logits[i] + log N(y; a_i·x + b_i, sigma_i)`, returning the
    /// log-normaliser of the gate. No dimension checks.
    pub(crate) fn point_terms(
        &self,
        x: &[f64],
        y: f64,
        logits: &mut [f64],
        joint: &mut [f64],
    ) -> f64 {
        for (i, c) in self.components.iter().enumerate() {
            logits[i] = c.logit(x);
            joint[i] = logits[i] + c.log_expert_density(x, y);
        }
        log_sum_exp(logits)
    }

    /// `log g_G(y | x)` via log-sum-exp.
    pub fn log_density(&self, x: &[f64], y: f64) -> Result<f64> {
        self.check_dim(x)?;
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(MoeError::NonFinite("density argument".into()));
        }
        let k = self.k();
        let mut logits = vec![0.0; k];
        let mut joint = vec![0.0; k];
        let norm = self.point_terms(x, y, &mut logits, &mut joint);
        Ok(log_sum_exp(&joint) - norm)
    }

    pub fn conditional_density(&self, x: &[f64], y: f64) -> Result<f64> {
        self.log_density(x, y).map(f64::exp)
    }

    /// `beta0 -> beta0 + t1`, `beta1 -> beta1 + t2`; no box check.
    pub fn translate(&self, t1: f64, t2: &[f64]) -> Result<MixingMeasure> {
        self.check_dim(t2)?;
        let components = self
            .components
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.beta0 += t1;
                for (v, t) in c.beta1.iter_mut().zip(t2) {
                    *v += t;
                }
                c
            })
            .collect();
        MixingMeasure::new(components)
    }

    /// Like [`translate`](Self::translate) but rejects results outside `theta`.
    pub fn translate_checked(&self, t1: f64, t2: &[f64], theta: &ThetaBox) -> Result<MixingMeasure> {
        let g = self.translate(t1, t2)?;
        theta.check_measure(&g)?;
        Ok(g)
    }

    /// Draws `n` i.i.d. pairs: `x` uniform on the covariate box, the expert
    /// from the gate at `x`, then `y` from that expert.
    pub fn sample(&self, covariates: &[Interval], n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(MoeError::InvalidInput("sample size must be at least 1".into()));
        }
        if covariates.len() != self.dim() {
            return Err(MoeError::DimensionMismatch {
                expected: self.dim(),
                got: covariates.len(),
            });
        }
        let d = self.dim();
        let k = self.k();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::with_capacity(n * d);
        let mut ys = Vec::with_capacity(n);
        let mut gate = vec![0.0; k];
        for _ in 0..n {
            let start = xs.len();
            for iv in covariates {
                xs.push(rng.random_range(iv.lo..iv.hi));
            }
            let x = &xs[start..];
            for (g, c) in gate.iter_mut().zip(&self.components) {
                *g = c.logit(x);
            }
            softmax_in_place(&mut gate);
            let u: f64 = rng.random();
            let mut chosen = k - 1;
            let mut acc = 0.0;
            for (i, g) in gate.iter().enumerate() {
                acc += g;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            let c = &self.components[chosen];
            let z: f64 = rng.sample(StandardNormal);
            ys.push(c.mean(x) + c.sigma.sqrt() * z);
        }
        let mut data = Dataset::new(d, xs, ys)?;
        data.seed = Some(seed);
        Ok(data)
    }

    /// Mean log conditional density over `data`.
    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        if data.dim() != self.dim() {
            return Err(MoeError::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        let k = self.k();
        let mut logits = vec![0.0; k];
        let mut joint = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..data.n() {
            let norm = self.point_terms(data.x(i), data.y(i), &mut logits, &mut joint);
            total += log_sum_exp(&joint) - norm;
        }
        let ll = total / data.n() as f64;
        if !ll.is_finite() {
            return Err(MoeError::NonFinite("log-likelihood".into()));
        }
        Ok(ll)
    }

    /// Gradient of [`log_likelihood`](Self::log_likelihood) in the
    /// [`to_flat`](Self::to_flat) layout.
    pub fn log_likelihood_gradient(&self, data: &Dataset) -> Result<Vec<f64>> {
        if data.dim() != self.dim() {
            return Err(MoeError::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        let (k, d) = (self.k(), self.dim());
        let stride = param_stride(d);
        let mut grad = vec![0.0; k * stride];
        let mut logits = vec![0.0; k];
        let mut joint = vec![0.0; k];
        for n in 0..data.n() {
            let (x, y) = (data.x(n), data.y(n));
            let norm = self.point_terms(x, y, &mut logits, &mut joint);
            let lse = log_sum_exp(&joint);
            for (i, c) in self.components.iter().enumerate() {
                let post = (joint[i] - lse).exp();
                let gate = (logits[i] - norm).exp();
                let g = &mut grad[i * stride..(i + 1) * stride];
                let dg = post - gate;
                g[0] += dg;
                for u in 0..d {
                    g[1 + u] += dg * x[u];
                }
                let r = y - c.mean(x);
                let dm = post * r / c.sigma;
                for u in 0..d {
                    g[1 + d + u] += dm * x[u];
                }
                g[1 + 2 * d] += dm;
                g[2 + 2 * d] += post * (r * r / (2.0 * c.sigma * c.sigma) - 0.5 / c.sigma);
            }
        }
        let scale = 1.0 / data.n() as f64;
        grad.iter_mut().for_each(|v| *v *= scale);
        Ok(grad)
    }

    /// Flat parameter vector, per component `[beta0, beta1.., a.., b, sigma]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.k() * param_stride(self.dim()));
        for c in &self.components {
            out.push(c.beta0);
            out.extend_from_slice(&c.beta1);
            out.extend_from_slice(&c.a);
            out.push(c.b);
            out.push(c.sigma);
        }
        out
    }

    pub fn from_flat(flat: &[f64], k: usize, dim: usize) -> Result<Self> {
        let stride = param_stride(dim);
        if flat.len() != k * stride {
            return Err(MoeError::DimensionMismatch {
                expected: k * stride,
                got: flat.len(),
            });
        }
        let components = flat
            .chunks(stride)
            .map(|p| ExpertComponent {
                beta0: p[0],
                beta1: p[1..1 + dim].to_vec(),
                a: p[1 + dim..1 + 2 * dim].to_vec(),
                b: p[1 + 2 * dim],
                sigma: p[2 + 2 * dim],
            })
            .collect();
        Self::new(components)
    }
}

/// Number of scalar parameters per component.
pub fn param_stride(dim: usize) -> usize {
    2 * dim + 3
}

/// `n` covariate/response pairs, covariates stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(MoeError::InvalidInput("dataset must be non-empty".into()));
        }
        if x.len() != dim * y.len() {
            return Err(MoeError::DimensionMismatch {
                expected: dim * y.len(),
                got: x.len(),
            });
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(MoeError::NonFinite("dataset".into()));
        }
        Ok(Self {
            dim,
            x,
            y,
            seed: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn ys(&self) -> &[f64] {
        &self.y
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        let x = rows.iter().flat_map(|&i| self.x(i).iter().copied()).collect();
        let y = rows.iter().map(|&i| self.y[i]).collect();
        Dataset::new(self.dim, x, y)
    }

    pub fn check_covariates(&self, covariates: &[Interval]) -> Result<()> {
        if covariates.len() != self.dim {
            return Err(MoeError::DimensionMismatch {
                expected: self.dim,
                got: covariates.len(),
            });
        }
        for i in 0..self.n() {
            for (u, (v, iv)) in self.x(i).iter().zip(covariates).enumerate() {
                if !iv.contains(*v) {
                    return Err(MoeError::OutOfBox(format!(
                        "row {i} covariate x{} = {v} outside [{}, {}]",
                        u + 1,
                        iv.lo,
                        iv.hi
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for t in v.iter_mut() {
        *t = (*t - m).exp();
        s += *t;
    }
    v.iter_mut().for_each(|t| *t /= s);
}

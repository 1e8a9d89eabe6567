//! The polynomial system whose solvability sets the exponents of the
//! over-fitted loss.
//!
//! For order `r` and dimension `d` there is one equation per
//! `(l1, l2) in N^d x N` with `|l1| <= r`, `l2 <= r - |l1|`, `|l1| + l2 >= 1`:
//!
//! ```text
//! sum_j sum_{alpha in I(l1, l2)} p5_j^2 p1_j^a1 p2_j^a2 p3_j^a3 p4_j^a4 / alpha! = 0
//! I(l1, l2) = { alpha : a1 + a2 = l1, |a2| + a3 + 2 a4 = l2 }
//! ```
//!
//! A solution is non-trivial when every `p5_j` is non-zero and some `p3_j` is
//! non-zero. Equation `(l1, l2)` is weighted-homogeneous of degree
//! `|l1| + l2` when `p1, p3` have weight 1 and `p2, p4` weight 2, which the
//! numerical search uses to fix the scale.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MoeError, Result};

/// Entries below this magnitude count as zero for non-triviality.
pub const TOL_ZERO: f64 = 1e-9;
/// Residual norm below which a candidate counts as a solution.
pub const ACCEPT_RESIDUAL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex {
    pub alpha1: Vec<u32>,
    pub alpha2: Vec<u32>,
    pub alpha3: u32,
    pub alpha4: u32,
}

impl MultiIndex {
    /// `alpha!`, the product of the factorials of every scalar entry.
    pub fn factorial(&self) -> f64 {
        self.alpha1
            .iter()
            .chain(&self.alpha2)
            .chain([&self.alpha3, &self.alpha4])
            .map(|&v| factorial(v))
            .product()
    }

    /// Weighted degree `|a1| + 2|a2| + a3 + 2 a4`.
    pub fn weighted_degree(&self) -> u32 {
        self.alpha1.iter().sum::<u32>() + 2 * self.alpha2.iter().sum::<u32>() + self.alpha3 + 2 * self.alpha4
    }
}

fn factorial(v: u32) -> f64 {
    (1..=v).map(f64::from).product()
}

/// Every vector `0 <= v <= bound` componentwise.
fn boxed_vectors(bound: &[u32]) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::with_capacity(bound.len())];
    for &b in bound {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..=b).map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

/// Every vector in `N^d` with entry sum exactly `total`.
fn compositions(d: usize, total: u32) -> Vec<Vec<u32>> {
    if d == 0 {
        return if total == 0 { vec![vec![]] } else { vec![] };
    }
    (0..=total)
        .rev()
        .flat_map(|first| {
            compositions(d - 1, total - first).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

/// `I(l1, l2)`, listed in descending lexicographic order of
/// `(alpha1, alpha2, alpha3, alpha4)`.
pub fn index_set(ell1: &[u32], ell2: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for alpha1 in boxed_vectors(ell1) {
        let alpha2: Vec<u32> = ell1.iter().zip(&alpha1).map(|(l, a)| l - a).collect();
        let used: u32 = alpha2.iter().sum();
        if used > ell2 {
            continue;
        }
        let rest = ell2 - used;
        for alpha4 in 0..=rest / 2 {
            out.push(MultiIndex {
                alpha1: alpha1.clone(),
                alpha2: alpha2.clone(),
                alpha3: rest - 2 * alpha4,
                alpha4,
            });
        }
    }
    out.sort_by(|a, b| b.cmp(a));
    out
}

/// Monomial in the per-group variables `[p1 (d), p2 (d), p3, p4]`.
#[derive(Debug, Clone, PartialEq)]
struct Term {
    coef: f64,
    /// `(variable, exponent)` pairs with non-zero exponent.
    factors: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equation {
    pub ell1: Vec<u32>,
    pub ell2: u32,
    pub index_set: Vec<MultiIndex>,
    terms: Vec<Term>,
}

impl Equation {
    fn new(ell1: Vec<u32>, ell2: u32) -> Self {
        let d = ell1.len();
        let index_set = index_set(&ell1, ell2);
        let terms = index_set
            .iter()
            .map(|alpha| {
                let mut factors = Vec::new();
                for (u, &e) in alpha.alpha1.iter().enumerate() {
                    if e > 0 {
                        factors.push((u, e));
                    }
                }
                for (u, &e) in alpha.alpha2.iter().enumerate() {
                    if e > 0 {
                        factors.push((d + u, e));
                    }
                }
                if alpha.alpha3 > 0 {
                    factors.push((2 * d, alpha.alpha3));
                }
                if alpha.alpha4 > 0 {
                    factors.push((2 * d + 1, alpha.alpha4));
                }
                Term {
                    coef: 1.0 / alpha.factorial(),
                    factors,
                }
            })
            .collect();
        Self {
            ell1,
            ell2,
            index_set,
            terms,
        }
    }

    /// Homogeneity degree `|l1| + l2`.
    pub fn degree(&self) -> u32 {
        self.ell1.iter().sum::<u32>() + self.ell2
    }

    /// Human-readable form, e.g. `sum_j p5_j^2 * ( 1/2 p3_j^2 + p4_j ) = 0`.
    pub fn display(&self) -> String {
        let d = self.ell1.len();
        let name = |v: usize| -> String {
            match v {
                v if v < d && d == 1 => "p1_j".into(),
                v if v < d => format!("p1_j[{}]", v + 1),
                v if v < 2 * d && d == 1 => "p2_j".into(),
                v if v < 2 * d => format!("p2_j[{}]", v - d + 1),
                v if v == 2 * d => "p3_j".into(),
                _ => "p4_j".into(),
            }
        };
        let body: Vec<String> = self
            .terms
            .iter()
            .map(|t| {
                let mut s = String::new();
                let inv = (1.0 / t.coef).round() as u64;
                if inv != 1 {
                    write!(s, "1/{inv} ").unwrap();
                }
                let mono: Vec<String> = t
                    .factors
                    .iter()
                    .map(|&(v, e)| if e == 1 { name(v) } else { format!("{}^{e}", name(v)) })
                    .collect();
                s.push_str(&mono.join("*"));
                s
            })
            .collect();
        format!(
            "(l1={:?}, l2={}): sum_j p5_j^2 * ( {} ) = 0",
            self.ell1,
            self.ell2,
            body.join(" + ")
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolySystem {
    pub m: usize,
    pub d: usize,
    pub r: u32,
    pub equations: Vec<Equation>,
}

/// All equations of order `r` in dimension `d` for `m` variable groups.
pub fn build_system(m: usize, d: usize, r: u32) -> Result<PolySystem> {
    if m == 0 || d == 0 || r == 0 {
        return Err(MoeError::InvalidInput(format!(
            "polynomial system needs m, d, r >= 1 (got m={m}, d={d}, r={r})"
        )));
    }
    let mut equations = Vec::new();
    for total in 0..=r {
        for ell1 in compositions(d, total) {
            let start = if total == 0 { 1 } else { 0 };
            for ell2 in start..=(r - total) {
                equations.push(Equation::new(ell1.clone(), ell2));
            }
        }
    }
    Ok(PolySystem { m, d, r, equations })
}

/// Values of `(p1, p2, p3, p4, p5)` for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionComponent {
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub p3: f64,
    pub p4: f64,
    pub p5: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSolution {
    pub dim: usize,
    pub components: Vec<SolutionComponent>,
}

impl CandidateSolution {
    pub fn new(dim: usize, components: Vec<SolutionComponent>) -> Result<Self> {
        for (j, c) in components.iter().enumerate() {
            if c.p1.len() != dim || c.p2.len() != dim {
                return Err(MoeError::DimensionMismatch {
                    expected: dim,
                    got: c.p1.len().max(c.p2.len()),
                });
            }
            let finite = c.p1.iter().chain(&c.p2).chain([&c.p3, &c.p4, &c.p5]).all(|v| v.is_finite());
            if !finite {
                return Err(MoeError::NonFinite(format!("solution component {j}")));
            }
        }
        Ok(Self { dim, components })
    }

    pub fn m(&self) -> usize {
        self.components.len()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.m() * stride(self.dim));
        for c in &self.components {
            v.extend_from_slice(&c.p1);
            v.extend_from_slice(&c.p2);
            v.extend_from_slice(&[c.p3, c.p4, c.p5]);
        }
        v
    }

    fn from_flat(dim: usize, v: &[f64]) -> Self {
        let components = v
            .chunks(stride(dim))
            .map(|p| SolutionComponent {
                p1: p[..dim].to_vec(),
                p2: p[dim..2 * dim].to_vec(),
                p3: p[2 * dim],
                p4: p[2 * dim + 1],
                p5: p[2 * dim + 2],
            })
            .collect();
        Self { dim, components }
    }

    /// Applies the weighted scaling `p1, p3 -> lambda p`, `p2, p4 -> lambda^2 p`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.components {
            c.p1.iter_mut().for_each(|v| *v *= lambda);
            c.p2.iter_mut().for_each(|v| *v *= lambda * lambda);
            c.p3 *= lambda;
            c.p4 *= lambda * lambda;
        }
        out
    }
}

fn stride(d: usize) -> usize {
    2 * d + 3
}

/// Power tables `pow[var][e]` for one group, `var` over `[p1, p2, p3, p4]`.
fn power_table(group: &[f64], r: u32) -> Vec<Vec<f64>> {
    group
        .iter()
        .map(|&v| {
            let mut row = Vec::with_capacity(r as usize + 1);
            let mut acc = 1.0;
            for _ in 0..=r {
                row.push(acc);
                acc *= v;
            }
            row
        })
        .collect()
}

/// Residual per equation and, when requested, the Jacobian w.r.t. the flat
/// variable layout `[p1, p2, p3, p4, p5]` per group.
fn residuals(sys: &PolySystem, flat: &[f64], mut jac: Option<&mut DMatrix<f64>>) -> Vec<f64> {
    let d = sys.d;
    let st = stride(d);
    let nvar = st - 1;
    let groups = flat.len() / st;
    let mut res = vec![0.0; sys.equations.len()];
    if let Some(j) = jac.as_deref_mut() {
        j.fill(0.0);
    }
    for l in 0..groups {
        let p = &flat[l * st..(l + 1) * st];
        let w = p[nvar] * p[nvar];
        let pow = power_table(&p[..nvar], sys.r);
        for (e, eq) in sys.equations.iter().enumerate() {
            let mut inner = 0.0;
            for t in &eq.terms {
                let mono: f64 = t.factors.iter().map(|&(v, k)| pow[v][k as usize]).product();
                inner += t.coef * mono;
                if let Some(j) = jac.as_deref_mut() {
                    for (fi, &(v, k)) in t.factors.iter().enumerate() {
                        let mut dm = t.coef * f64::from(k) * pow[v][k as usize - 1];
                        for (fo, &(v2, k2)) in t.factors.iter().enumerate() {
                            if fo != fi {
                                dm *= pow[v2][k2 as usize];
                            }
                        }
                        j[(e, l * st + v)] += w * dm;
                    }
                }
            }
            res[e] += w * inner;
            if let Some(j) = jac.as_deref_mut() {
                j[(e, l * st + nvar)] += 2.0 * p[nvar] * inner;
            }
        }
    }
    res
}

/// One residual per equation.
pub fn evaluate_system(sys: &PolySystem, sol: &CandidateSolution) -> Result<Vec<f64>> {
    if sol.dim != sys.d {
        return Err(MoeError::DimensionMismatch {
            expected: sys.d,
            got: sol.dim,
        });
    }
    Ok(residuals(sys, &sol.to_flat(), None))
}

pub fn residual_norm(res: &[f64]) -> f64 {
    res.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Every `p5` non-zero and at least one `p3` non-zero, up to [`TOL_ZERO`].
pub fn is_nontrivial(sol: &CandidateSolution) -> bool {
    let min_p5 = sol.components.iter().map(|c| c.p5.abs()).fold(f64::INFINITY, f64::min);
    let max_p3 = sol.components.iter().map(|c| c.p3.abs()).fold(0.0, f64::max);
    !sol.components.is_empty() && min_p5 > TOL_ZERO && max_p3 > TOL_ZERO
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub restarts: usize,
    pub seed: u64,
    /// Levenberg-Marquardt iterations per restart.
    pub max_iters: usize,
    /// Lower bound on `|p5_j| / max_l |p5_l|`; keeps groups from vanishing.
    pub p5_floor: f64,
    /// Starting values are uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    /// Restarts evaluated per batch before checking for a success.
    pub batch: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            restarts: 10_000,
            seed: 0,
            max_iters: 150,
            p5_floor: 0.5,
            init_range: 2.0,
            batch: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// A verified non-trivial solution, if one was found.
    pub solution: Option<CandidateSolution>,
    /// Restart index that produced `solution`.
    pub found_at: Option<usize>,
    /// Smallest residual norm among non-trivial candidates.
    pub best_residual: f64,
    pub best_candidate: CandidateSolution,
    pub restarts_run: usize,
}

impl SearchOutcome {
    pub fn verdict(&self) -> &'static str {
        if self.solution.is_some() {
            "non-trivial solution found"
        } else {
            "no non-trivial solution found; heuristic evidence only, not a proof of unsolvability"
        }
    }
}

/// Scales the groups so that `max(|p1|, |p3|, sqrt|p2|, sqrt|p4|) = 1` and
/// `max |p5| = 1`, then lifts every `|p5|` to at least `floor`.
fn normalize(d: usize, v: &mut [f64], floor: f64) {
    let st = stride(d);
    let mut scale = 0.0f64;
    let mut p5max = 0.0f64;
    for p in v.chunks(st) {
        for u in 0..d {
            scale = scale.max(p[u].abs()).max(p[d + u].abs().sqrt());
        }
        scale = scale.max(p[2 * d].abs()).max(p[2 * d + 1].abs().sqrt());
        p5max = p5max.max(p[st - 1].abs());
    }
    if scale > 0.0 {
        for p in v.chunks_mut(st) {
            for u in 0..d {
                p[u] /= scale;
                p[d + u] /= scale * scale;
            }
            p[2 * d] /= scale;
            p[2 * d + 1] /= scale * scale;
        }
    }
    if p5max == 0.0 {
        p5max = 1.0;
    }
    for p in v.chunks_mut(st) {
        let q = p[st - 1] / p5max;
        p[st - 1] = if q.abs() < floor {
            if q < 0.0 { -floor } else { floor }
        } else {
            q
        };
    }
}

/// Residuals divided by `S^deg * mean(p5^2)` where
/// `S^4 = sum (p1^4 + p2^2 + p3^4 + p4^2)`. This is invariant under the weighted
/// scaling and under scaling of `p5`, so the minimiser cannot shrink toward
/// the trivial solution.
fn scaled_residuals(sys: &PolySystem, v: &[f64], jac: Option<&mut DMatrix<f64>>) -> Vec<f64> {
    let d = sys.d;
    let st = stride(d);
    let groups = v.len() / st;
    let mut q = 0.0;
    let mut dq = vec![0.0; v.len()];
    let mut pp = 0.0;
    let mut dp = vec![0.0; v.len()];
    for l in 0..groups {
        let o = l * st;
        for u in 0..d {
            q += v[o + u].powi(4) + v[o + d + u].powi(2);
            dq[o + u] = 4.0 * v[o + u].powi(3);
            dq[o + d + u] = 2.0 * v[o + d + u];
        }
        q += v[o + 2 * d].powi(4) + v[o + 2 * d + 1].powi(2);
        dq[o + 2 * d] = 4.0 * v[o + 2 * d].powi(3);
        dq[o + 2 * d + 1] = 2.0 * v[o + 2 * d + 1];
        pp += v[o + st - 1].powi(2) / groups as f64;
        dp[o + st - 1] = 2.0 * v[o + st - 1] / groups as f64;
    }
    let q = q.max(1e-300);
    let pp = pp.max(1e-300);
    match jac {
        None => {
            let raw = residuals(sys, v, None);
            raw.iter()
                .zip(&sys.equations)
                .map(|(r, eq)| r / (q.powf(eq.degree() as f64 / 4.0) * pp))
                .collect()
        }
        Some(j) => {
            let raw = residuals(sys, v, Some(j));
            let mut out = Vec::with_capacity(raw.len());
            for (e, eq) in sys.equations.iter().enumerate() {
                let deg = eq.degree() as f64;
                let den = q.powf(deg / 4.0) * pp;
                let f = raw[e] / den;
                for c in 0..v.len() {
                    j[(e, c)] = j[(e, c)] / den - f * (deg / 4.0 * dq[c] / q + dp[c] / pp);
                }
                out.push(f);
            }
            out
        }
    }
}

fn levenberg_marquardt(sys: &PolySystem, start: Vec<f64>, cfg: &SearchConfig) -> Vec<f64> {
    let n = start.len();
    let neq = sys.equations.len();
    let mut v = start;
    normalize(sys.d, &mut v, cfg.p5_floor);
    let mut jac = DMatrix::zeros(neq, n);
    let mut f = scaled_residuals(sys, &v, Some(&mut jac));
    let mut cost = residual_norm(&f);
    let mut mu = 1e-3;
    for _ in 0..cfg.max_iters {
        if cost < 1e-15 {
            break;
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * DVector::from_vec(f.clone());
        let mut improved = false;
        while mu < 1e12 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                mu *= 10.0;
                continue;
            };
            let mut cand: Vec<f64> = v.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            normalize(sys.d, &mut cand, cfg.p5_floor);
            let fc = scaled_residuals(sys, &cand, None);
            let cc = residual_norm(&fc);
            if cc < cost {
                let rel = (cost - cc) / cost;
                v = cand;
                f = scaled_residuals(sys, &v, Some(&mut jac));
                cost = cc;
                mu = (mu / 3.0).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    v
}

/// Multi-start search for a non-trivial solution of the order-`r` system.
///
/// Not finding one is evidence, not proof, that none exists.
pub fn search_nontrivial(m: usize, d: usize, r: u32, cfg: &SearchConfig) -> Result<SearchOutcome> {
    if m < 2 {
        return Err(MoeError::InvalidInput("search needs m >= 2".into()));
    }
    if cfg.restarts == 0 || cfg.batch == 0 || cfg.max_iters == 0 {
        return Err(MoeError::InvalidConfig("search restarts, batch and max_iters must be positive".into()));
    }
    if !(cfg.p5_floor > 0.0 && cfg.p5_floor <= 1.0) {
        return Err(MoeError::InvalidConfig("p5_floor must lie in (0, 1]".into()));
    }
    let sys = build_system(m, d, r)?;
    let nvar = m * stride(d);
    let run = |restart: usize| -> (f64, CandidateSolution) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);
        let start: Vec<f64> = (0..nvar).map(|_| rng.random_range(-cfg.init_range..=cfg.init_range)).collect();
        let v = levenberg_marquardt(&sys, start, cfg);
        let sol = CandidateSolution::from_flat(d, &v);
        let res = residual_norm(&residuals(&sys, &v, None));
        (res, sol)
    };
    let mut best: Option<(f64, CandidateSolution)> = None;
    let mut done = 0;
    while done < cfg.restarts {
        let end = (done + cfg.batch).min(cfg.restarts);
        let batch: Vec<(f64, CandidateSolution)> = (done..end).into_par_iter().map(run).collect();
        for (offset, (res, sol)) in batch.into_iter().enumerate() {
            if !is_nontrivial(&sol) {
                continue;
            }
            if res < ACCEPT_RESIDUAL {
                return Ok(SearchOutcome {
                    solution: Some(sol.clone()),
                    found_at: Some(done + offset),
                    best_residual: res,
                    best_candidate: sol,
                    restarts_run: done + offset + 1,
                });
            }
            if best.as_ref().is_none_or(|(b, _)| res < *b) {
                best = Some((res, sol));
            }
        }
        done = end;
    }
    let (best_residual, best_candidate) = best.unwrap_or_else(|| {
        (
            f64::INFINITY,
            CandidateSolution::from_flat(d, &vec![0.0; nvar]),
        )
    });
    Ok(SearchOutcome {
        solution: None,
        found_at: None,
        best_residual,
        best_candidate,
        restarts_run: cfg.restarts,
    })
}

/// The order-2 solution: `p1 = 0`, `p2 = p3 = (1, -1)`, `p4 = -1/2`, `p5 = 1`.
pub fn order_two_solution() -> CandidateSolution {
    let comp = |s: f64| SolutionComponent {
        p1: vec![0.0],
        p2: vec![s],
        p3: s,
        p4: -0.5,
        p5: 1.0,
    };
    CandidateSolution {
        dim: 1,
        components: vec![comp(1.0), comp(-1.0)],
    }
}

/// The order-3 solution in dimension `d`: `p1 = p2 = 0`, `p3 = +-sqrt(3)/3`,
/// `p4 = -1/6`, `p5 = 1`.
pub fn order_three_solution(d: usize) -> CandidateSolution {
    let comp = |s: f64| SolutionComponent {
        p1: vec![0.0; d],
        p2: vec![0.0; d],
        p3: s * 3f64.sqrt() / 3.0,
        p4: -1.0 / 6.0,
        p5: 1.0,
    };
    CandidateSolution {
        dim: d,
        components: vec![comp(1.0), comp(-1.0)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(a1: u32, a2: u32, a3: u32, a4: u32) -> MultiIndex {
        MultiIndex {
            alpha1: vec![a1],
            alpha2: vec![a2],
            alpha3: a3,
            alpha4: a4,
        }
    }

    #[test]
    fn index_set_examples() {
        assert_eq!(index_set(&[1], 0), vec![idx(1, 0, 0, 0)]);
        assert_eq!(index_set(&[1], 1), vec![idx(1, 0, 1, 0), idx(0, 1, 0, 0)]);
        assert_eq!(index_set(&[0], 2), vec![idx(0, 0, 2, 0), idx(0, 0, 0, 1)]);
    }

    #[test]
    fn index_set_matches_brute_force() {
        for d in 1..=2usize {
            let r = if d == 1 { 6 } else { 4 };
            let sys = build_system(1, d, r).unwrap();
            for eq in &sys.equations {
                let mut brute = Vec::new();
                let cap = vec![r; d];
                for a1 in boxed_vectors(&cap) {
                    for a2 in boxed_vectors(&cap) {
                        for a3 in 0..=r {
                            for a4 in 0..=r {
                                let sum_ok = a1.iter().zip(&a2).zip(&eq.ell1).all(|((x, y), l)| x + y == *l);
                                let deg_ok = a2.iter().sum::<u32>() + a3 + 2 * a4 == eq.ell2;
                                if sum_ok && deg_ok {
                                    brute.push(MultiIndex {
                                        alpha1: a1.clone(),
                                        alpha2: a2.clone(),
                                        alpha3: a3,
                                        alpha4: a4,
                                    });
                                }
                            }
                        }
                    }
                }
                brute.sort_by(|a, b| b.cmp(a));
                assert_eq!(eq.index_set, brute, "l1={:?} l2={}", eq.ell1, eq.ell2);
            }
        }
    }

    #[test]
    fn equation_counts() {
        let sys = build_system(2, 1, 2).unwrap();
        assert_eq!(sys.equations.len(), 5);
        for r in 1..=8 {
            assert_eq!(build_system(2, 1, r).unwrap().equations.len() as u32, (r * r + 3 * r) / 2);
        }
        let sys = build_system(2, 2, 1).unwrap();
        let keys: Vec<(Vec<u32>, u32)> = sys.equations.iter().map(|e| (e.ell1.clone(), e.ell2)).collect();
        assert_eq!(keys, vec![(vec![0, 0], 1), (vec![1, 0], 0), (vec![0, 1], 0)]);
        assert!(build_system(2, 1, 0).is_err());
    }

    #[test]
    fn display_of_order_two_system() {
        let sys = build_system(2, 1, 2).unwrap();
        let lines: Vec<String> = sys.equations.iter().map(Equation::display).collect();
        assert!(lines.iter().any(|l| l.contains("( 1/2 p3_j^2 + p4_j )")), "{lines:?}");
        assert!(lines.iter().any(|l| l.contains("( p1_j*p3_j + p2_j )")), "{lines:?}");
    }

    #[test]
    fn order_two_solution_satisfies_order_two_system() {
        let sys = build_system(2, 1, 2).unwrap();
        let res = evaluate_system(&sys, &order_two_solution()).unwrap();
        assert!(res.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn order_three_solution_satisfies_order_three_system() {
        for d in 1..=2 {
            let sys = build_system(2, d, 3).unwrap();
            let res = evaluate_system(&sys, &order_three_solution(d)).unwrap();
            assert!(res.iter().all(|v| v.abs() < 1e-14), "{res:?}");
        }
    }

    #[test]
    fn order_three_solution_fails_order_four() {
        // l1 = 0, l2 = 4: sum_j (p3^4/24 + p3^2 p4/2 + p4^2/2) = 2 * (-1/108).
        let sys = build_system(2, 1, 4).unwrap();
        let res = evaluate_system(&sys, &order_three_solution(1)).unwrap();
        let e = sys.equations.iter().position(|e| e.ell1 == [0] && e.ell2 == 4).unwrap();
        assert!((res[e] + 2.0 / 108.0).abs() < 1e-15, "{}", res[e]);
    }

    #[test]
    fn trivial_solution_is_exact_zero() {
        let sys = build_system(3, 2, 4).unwrap();
        let sol = CandidateSolution::new(
            2,
            (0..3)
                .map(|_| SolutionComponent {
                    p1: vec![0.0; 2],
                    p2: vec![0.0; 2],
                    p3: 0.0,
                    p4: 0.0,
                    p5: 1.0,
                })
                .collect(),
        )
        .unwrap();
        assert!(evaluate_system(&sys, &sol).unwrap().iter().all(|v| *v == 0.0));
        assert!(!is_nontrivial(&sol));
    }

    #[test]
    fn nontriviality() {
        let mut sol = order_two_solution();
        assert!(is_nontrivial(&sol));
        sol.components[1].p5 = 0.0;
        assert!(!is_nontrivial(&sol));
        let mut sol = order_two_solution();
        sol.components.iter_mut().for_each(|c| c.p3 = 0.0);
        assert!(!is_nontrivial(&sol));
    }

    #[test]
    fn homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sys = build_system(3, 2, 5).unwrap();
        for _ in 0..10 {
            let v: Vec<f64> = (0..3 * stride(2)).map(|_| rng.random_range(-1.5..1.5)).collect();
            let sol = CandidateSolution::from_flat(2, &v);
            let base = evaluate_system(&sys, &sol).unwrap();
            for lambda in [0.5, 2.0] {
                let scaled = evaluate_system(&sys, &sol.scaled(lambda)).unwrap();
                for (e, eq) in sys.equations.iter().enumerate() {
                    let expect = lambda.powi(eq.degree() as i32) * base[e];
                    assert!((scaled[e] - expect).abs() <= 1e-10 * expect.abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sys = build_system(2, 2, 4).unwrap();
        let n = 2 * stride(2);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for scaled in [false, true] {
            let mut jac = DMatrix::zeros(sys.equations.len(), n);
            let eval = |x: &[f64], j: Option<&mut DMatrix<f64>>| {
                if scaled {
                    scaled_residuals(&sys, x, j)
                } else {
                    residuals(&sys, x, j)
                }
            };
            eval(&v, Some(&mut jac));
            let h = 1e-6;
            for c in 0..n {
                let mut up = v.clone();
                let mut dn = v.clone();
                up[c] += h;
                dn[c] -= h;
                let (fu, fd) = (eval(&up, None), eval(&dn, None));
                for e in 0..sys.equations.len() {
                    let fdv = (fu[e] - fd[e]) / (2.0 * h);
                    assert!((fdv - jac[(e, c)]).abs() < 1e-6 * (1.0 + fdv.abs()), "e{e} c{c}");
                }
            }
        }
    }

    #[test]
    fn search_finds_order_three_solution() {
        let cfg = SearchConfig {
            restarts: 500,
            seed: 1,
            ..Default::default()
        };
        let out = search_nontrivial(2, 1, 3, &cfg).unwrap();
        let sol = out.solution.expect("order-3 system is solvable for m = 2");
        assert!(out.best_residual < ACCEPT_RESIDUAL);
        assert!(is_nontrivial(&sol));
        // Equation sets nest: the solution also satisfies every lower order.
        for r in 1..=3 {
            let sys = build_system(2, 1, r).unwrap();
            assert!(residual_norm(&evaluate_system(&sys, &sol).unwrap()) < ACCEPT_RESIDUAL);
        }
    }

    #[test]
    fn search_rejects_bad_input() {
        assert!(search_nontrivial(1, 1, 3, &SearchConfig::default()).is_err());
        let cfg = SearchConfig {
            p5_floor: 0.0,
            ..Default::default()
        };
        assert!(search_nontrivial(2, 1, 3, &cfg).is_err());
    }
}

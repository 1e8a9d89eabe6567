//! Maximum likelihood over mixing measures with at most `k` experts.
//!
//! EM with a closed-form expert update and a projected gradient-ascent
//! gating update. Restarts run in parallel and the best log-likelihood wins,
//! ties going to the lowest restart index.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MoeError, Result};
use crate::model::{dot, log_sum_exp, Dataset, ExpertComponent, MixingMeasure, ThetaBox};

const RIDGE: f64 = 1e-8;
const EMPTY_COMPONENT: f64 = 1e-12;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    /// Number of experts fitted.
    pub k: usize,
    pub restarts: usize,
    pub max_em_iters: usize,
    /// Relative log-likelihood change that stops a restart.
    pub em_tol: f64,
    pub gating_inner_iters: usize,
    /// Initial ascent step of the gating update.
    pub gating_step: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            k: 2,
            restarts: 4,
            max_em_iters: 500,
            em_tol: 1e-9,
            gating_inner_iters: 5,
            gating_step: 4.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MoeError::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("fit.k must be at least 1");
        }
        if self.restarts == 0 {
            return bad("fit.restarts must be at least 1");
        }
        if self.max_em_iters == 0 {
            return bad("fit.max_em_iters must be at least 1");
        }
        if !(self.em_tol > 0.0) || !(self.gating_step > 0.0) {
            return bad("fit.em_tol and fit.gating_step must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub measure: MixingMeasure,
    pub final_loglik: f64,
    pub iterations: usize,
    /// Index of the winning restart.
    pub restart: usize,
    pub converged: bool,
    /// Log-likelihood after initialisation and after every EM iteration of
    /// the winning restart.
    pub trace: Vec<f64>,
}

/// Posterior component probabilities, one row per observation.
pub fn em_e_step(g: &MixingMeasure, data: &Dataset) -> DMatrix<f64> {
    e_step_with_loglik(g, data).0
}

/// E-step plus the mean log-likelihood of `g`, which falls out of the same pass.
pub fn e_step_with_loglik(g: &MixingMeasure, data: &Dataset) -> (DMatrix<f64>, f64) {
    let k = g.k();
    let mut resp = DMatrix::zeros(data.n(), k);
    let mut logits = vec![0.0; k];
    let mut joint = vec![0.0; k];
    let mut ll = 0.0;
    for i in 0..data.n() {
        let norm = g.point_terms(data.x(i), data.y(i), &mut logits, &mut joint);
        let lse = log_sum_exp(&joint);
        ll += lse - norm;
        for j in 0..k {
            resp[(i, j)] = (joint[j] - lse).exp();
        }
    }
    (resp, ll / data.n() as f64)
}

/// Result of the expert update for one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertUpdate {
    pub a: Vec<f64>,
    pub b: f64,
    pub sigma: f64,
    /// The weighted normal equations were singular and a ridge was added.
    pub ridged: bool,
    /// Total responsibility was zero; the component was left unchanged.
    pub empty: bool,
}

/// Solution of a weighted least-squares regression of `y` on `[x, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedFit {
    pub a: Vec<f64>,
    pub b: f64,
    /// Weighted mean squared residual.
    pub residual_variance: f64,
    pub total_weight: f64,
    pub ridged: bool,
}

/// Weighted least squares via the normal equations. A ridge of `1e-8 * I` is
/// added when the weighted design is rank deficient.
pub fn weighted_least_squares(data: &Dataset, weight: impl Fn(usize) -> f64) -> WeightedFit {
    let d = data.dim();
    let p = d + 1;
    let mut normal = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut total = 0.0;
    let mut z = vec![0.0; p];
    for i in 0..data.n() {
        let w = weight(i);
        if w == 0.0 {
            continue;
        }
        total += w;
        z[..d].copy_from_slice(data.x(i));
        z[d] = 1.0;
        let y = data.y(i);
        for r in 0..p {
            rhs[r] += w * z[r] * y;
            for c in 0..=r {
                normal[(r, c)] += w * z[r] * z[c];
            }
        }
    }
    for r in 0..p {
        for c in (r + 1)..p {
            normal[(r, c)] = normal[(c, r)];
        }
    }
    let scale = (0..p).map(|r| normal[(r, r)]).fold(0.0f64, f64::max);
    let chol = normal.clone().cholesky().filter(|ch| {
        let l = ch.l_dirty();
        (0..p).all(|r| l[(r, r)] * l[(r, r)] > 1e-13 * scale)
    });
    let (coef, ridged) = match chol {
        Some(ch) => (ch.solve(&rhs), false),
        None => {
            let reg = normal + DMatrix::identity(p, p) * RIDGE;
            let coef = reg
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&rhs))
                .or_else(|| reg.lu().solve(&rhs))
                .unwrap_or_else(|| DVector::zeros(p));
            (coef, true)
        }
    };
    let a: Vec<f64> = coef.iter().take(d).copied().collect();
    let b = coef[d];
    let mut sse = 0.0;
    for i in 0..data.n() {
        let w = weight(i);
        if w != 0.0 {
            let r = data.y(i) - dot(&a, data.x(i)) - b;
            sse += w * r * r;
        }
    }
    let residual_variance = if total > 0.0 { sse / total } else { 0.0 };
    WeightedFit {
        a,
        b,
        residual_variance,
        total_weight: total,
        ridged,
    }
}

/// Closed-form expert update: responsibility-weighted least squares for
/// `(a, b)`, weighted mean squared residual for `sigma`, all projected onto
/// `theta`.
pub fn em_m_step_experts(
    data: &Dataset,
    resp: &DMatrix<f64>,
    current: &MixingMeasure,
    theta: &ThetaBox,
) -> Result<Vec<ExpertUpdate>> {
    check_resp(data, resp, current.k())?;
    let out = current
        .components()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let total: f64 = resp.column(j).sum();
            if total <= EMPTY_COMPONENT {
                return ExpertUpdate {
                    a: c.a.clone(),
                    b: c.b,
                    sigma: c.sigma,
                    ridged: false,
                    empty: true,
                };
            }
            let fit = weighted_least_squares(data, |i| resp[(i, j)]);
            let a: Vec<f64> = fit.a.iter().zip(&theta.a).map(|(v, iv)| iv.clamp(*v)).collect();
            let b = theta.b.clamp(fit.b);
            // Residuals of the projected regression, so sigma is optimal given (a, b).
            let mut sse = 0.0;
            for i in 0..data.n() {
                let r = data.y(i) - dot(&a, data.x(i)) - b;
                sse += resp[(i, j)] * r * r;
            }
            ExpertUpdate {
                a,
                b,
                sigma: theta.sigma.clamp(sse / total),
                ridged: fit.ridged,
                empty: false,
            }
        })
        .collect();
    Ok(out)
}

/// Gating parameters of every expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    pub beta0: Vec<f64>,
    pub beta1: Vec<Vec<f64>>,
}

impl GatingParams {
    pub fn of(g: &MixingMeasure) -> Self {
        Self {
            beta0: g.components().iter().map(|c| c.beta0).collect(),
            beta1: g.components().iter().map(|c| c.beta1.clone()).collect(),
        }
    }

    fn k(&self) -> usize {
        self.beta0.len()
    }

    fn project(&mut self, theta: &ThetaBox) {
        for (b0, b1) in self.beta0.iter_mut().zip(self.beta1.iter_mut()) {
            *b0 = theta.beta0.clamp(*b0);
            for (v, iv) in b1.iter_mut().zip(&theta.beta1) {
                *v = iv.clamp(*v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingUpdate {
    pub params: GatingParams,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Objective after each inner iteration.
    pub objective_trace: Vec<f64>,
}

/// Mean expected complete-data gating log-likelihood
/// `(1/n) sum_i sum_j r_ij log gate_j(x_i)` and its gradient.
pub fn gating_objective(
    data: &Dataset,
    resp: &DMatrix<f64>,
    params: &GatingParams,
) -> (f64, GatingParams) {
    let (k, d) = (params.k(), data.dim());
    let mut logits = vec![0.0; k];
    let mut value = 0.0;
    let mut g0 = vec![0.0; k];
    let mut g1 = vec![vec![0.0; d]; k];
    for i in 0..data.n() {
        let x = data.x(i);
        for j in 0..k {
            logits[j] = params.beta0[j] + dot(&params.beta1[j], x);
        }
        let norm = log_sum_exp(&logits);
        let mut rsum = 0.0;
        for j in 0..k {
            let r = resp[(i, j)];
            rsum += r;
            value += r * (logits[j] - norm);
        }
        for j in 0..k {
            let diff = resp[(i, j)] - rsum * (logits[j] - norm).exp();
            g0[j] += diff;
            for u in 0..d {
                g1[j][u] += diff * x[u];
            }
        }
    }
    let s = 1.0 / data.n() as f64;
    g0.iter_mut().for_each(|v| *v *= s);
    g1.iter_mut().flatten().for_each(|v| *v *= s);
    (value * s, GatingParams { beta0: g0, beta1: g1 })
}

/// Projected gradient ascent on the gating objective. A step that would
/// decrease the objective is halved until it does not; if no step size down
/// to the floor works the parameters are returned unchanged.
pub fn em_m_step_gating(
    data: &Dataset,
    resp: &DMatrix<f64>,
    current: &GatingParams,
    theta: &ThetaBox,
    inner_iters: usize,
    step: f64,
) -> Result<GatingUpdate> {
    check_resp(data, resp, current.k())?;
    let (f0, mut grad) = gating_objective(data, resp, current);
    let mut params = current.clone();
    let mut value = f0;
    let mut step = step;
    let mut trace = Vec::with_capacity(inner_iters);
    'outer: for _ in 0..inner_iters {
        for _ in 0..MAX_HALVINGS {
            let mut cand = params.clone();
            for j in 0..cand.k() {
                cand.beta0[j] += step * grad.beta0[j];
                for (v, g) in cand.beta1[j].iter_mut().zip(&grad.beta1[j]) {
                    *v += step * g;
                }
            }
            cand.project(theta);
            let (fc, gc) = gating_objective(data, resp, &cand);
            if fc >= value {
                let stalled = cand == params;
                params = cand;
                value = fc;
                grad = gc;
                trace.push(value);
                if stalled {
                    break 'outer;
                }
                continue 'outer;
            }
            step *= 0.5;
        }
        trace.push(value);
        break;
    }
    Ok(GatingUpdate {
        params,
        objective_before: f0,
        objective_after: value,
        objective_trace: trace,
    })
}

/// Per-iteration flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationDiagnostics {
    /// Log-likelihood of the input measure.
    pub loglik_before: f64,
    pub ridged: Vec<usize>,
    pub empty: Vec<usize>,
}

/// One EM iteration: E-step, expert update, gating update.
pub fn em_iteration(
    g: &MixingMeasure,
    data: &Dataset,
    theta: &ThetaBox,
    cfg: &FitConfig,
) -> Result<(MixingMeasure, IterationDiagnostics)> {
    let (resp, ll) = e_step_with_loglik(g, data);
    let experts = em_m_step_experts(data, &resp, g, theta)?;
    let gating = em_m_step_gating(
        data,
        &resp,
        &GatingParams::of(g),
        theta,
        cfg.gating_inner_iters,
        cfg.gating_step,
    )?;
    let mut diag = IterationDiagnostics {
        loglik_before: ll,
        ..Default::default()
    };
    let comps = experts
        .into_iter()
        .enumerate()
        .map(|(j, e)| {
            if e.ridged {
                diag.ridged.push(j);
            }
            if e.empty {
                diag.empty.push(j);
            }
            ExpertComponent {
                beta0: gating.params.beta0[j],
                beta1: gating.params.beta1[j].clone(),
                a: e.a,
                b: e.b,
                sigma: e.sigma,
            }
        })
        .collect();
    Ok((MixingMeasure::new(comps)?, diag))
}

/// Random start: components uniform in `theta`, then each expert regression
/// fitted on a random subsample of `n / k` rows.
pub fn initial_measure(
    data: &Dataset,
    theta: &ThetaBox,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MixingMeasure> {
    let n = data.n();
    let sub = (n / k).max(data.dim() + 2).min(n);
    let comps = (0..k)
        .map(|_| {
            let mut c = theta.sample_component(rng);
            let rows = sample_indices(rng, n, sub).into_vec();
            let mut mask = vec![0.0; n];
            rows.iter().for_each(|&i| mask[i] = 1.0);
            let fit = weighted_least_squares(data, |i| mask[i]);
            c.a = fit.a;
            c.b = fit.b;
            c.sigma = fit.residual_variance;
            theta.project_component(&mut c);
            c
        })
        .collect();
    MixingMeasure::new(comps)
}

struct RestartOutcome {
    measure: MixingMeasure,
    loglik: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn run_restart(data: &Dataset, theta: &ThetaBox, cfg: &FitConfig, restart: usize) -> Result<RestartOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    // Burn one draw so streams with equal seeds still diverge in the first value.
    let _: u64 = rng.random();
    let mut g = initial_measure(data, theta, cfg.k, &mut rng)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_em_iters {
        let (next, diag) = em_iteration(&g, data, theta, cfg)?;
        trace.push(diag.loglik_before);
        if it > 0 {
            let prev = trace[trace.len() - 2];
            let cur = diag.loglik_before;
            if (cur - prev).abs() <= cfg.em_tol * prev.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        g = next;
        iterations = it + 1;
    }
    let loglik = g.log_likelihood(data)?;
    if trace.last() != Some(&loglik) {
        trace.push(loglik);
    }
    Ok(RestartOutcome {
        measure: g,
        loglik,
        iterations,
        converged,
        trace,
    })
}

/// Maximum likelihood estimate over at most `cfg.k` experts inside `theta`.
pub fn fit_mle(data: &Dataset, theta: &ThetaBox, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    theta.validate()?;
    if data.dim() != theta.dim() {
        return Err(MoeError::DimensionMismatch {
            expected: theta.dim(),
            got: data.dim(),
        });
    }
    if data.n() < cfg.k {
        return Err(MoeError::InvalidInput(format!(
            "{} observations cannot support {} experts",
            data.n(),
            cfg.k
        )));
    }
    data.check_covariates(&theta.covariates)?;
    let outcomes: Vec<Result<RestartOutcome>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_restart(data, theta, cfg, r))
        .collect();
    let mut best: Option<(usize, RestartOutcome)> = None;
    for (r, out) in outcomes.into_iter().enumerate() {
        let out = out?;
        if best.as_ref().is_none_or(|(_, b)| out.loglik > b.loglik) {
            best = Some((r, out));
        }
    }
    let (restart, out) = best.expect("at least one restart");
    let degenerate = data.ys().windows(2).all(|w| w[0] == w[1])
        && out
            .measure
            .components()
            .iter()
            .all(|c| c.sigma == theta.sigma_min());
    Ok(FitResult {
        measure: out.measure,
        final_loglik: out.loglik,
        iterations: out.iterations,
        restart,
        converged: out.converged && !degenerate,
        trace: out.trace,
    })
}

fn check_resp(data: &Dataset, resp: &DMatrix<f64>, k: usize) -> Result<()> {
    if resp.nrows() != data.n() || resp.ncols() != k {
        return Err(MoeError::DimensionMismatch {
            expected: data.n() * k,
            got: resp.nrows() * resp.ncols(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExpertComponent;

    fn two_experts() -> MixingMeasure {
        MixingMeasure::new(vec![
            ExpertComponent::new(0.0, vec![2.0], vec![-1.0], 1.0, 0.3),
            ExpertComponent::new(0.0, vec![-2.0], vec![1.0], -1.0, 0.5),
        ])
        .unwrap()
    }

    #[test]
    fn e_step_single_component_is_all_ones() {
        let g = MixingMeasure::new(vec![ExpertComponent::new(0.1, vec![0.3], vec![1.0], 0.0, 1.0)])
            .unwrap();
        let data = g.sample(&ThetaBox::new(1).covariates, 50, 1).unwrap();
        let r = em_e_step(&g, &data);
        assert!(r.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn e_step_symmetric_point() {
        // Mirror-image experts; at x = 0, y = 0 both have equal gate and density.
        let g = MixingMeasure::new(vec![
            ExpertComponent::new(0.0, vec![1.0], vec![1.0], 1.0, 0.5),
            ExpertComponent::new(0.0, vec![-1.0], vec![-1.0], -1.0, 0.5),
        ])
        .unwrap();
        let data = Dataset::new(1, vec![0.0], vec![0.0]).unwrap();
        let r = em_e_step(&g, &data);
        assert!((r[(0, 0)] - 0.5).abs() < 1e-15 && (r[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn e_step_matches_bayes_rule() {
        let g = two_experts();
        let data = g.sample(&ThetaBox::new(1).covariates, 100, 2).unwrap();
        let r = em_e_step(&g, &data);
        for i in 0..data.n() {
            let (x, y) = (data.x(i), data.y(i));
            let joint: Vec<f64> = g
                .components()
                .iter()
                .map(|c| {
                    let gate = (c.beta0 + c.beta1[0] * x[0]).exp();
                    let mu = c.a[0] * x[0] + c.b;
                    gate * (-(y - mu).powi(2) / (2.0 * c.sigma)).exp()
                        / (2.0 * std::f64::consts::PI * c.sigma).sqrt()
                })
                .collect();
            let s: f64 = joint.iter().sum();
            let row_sum: f64 = r.row(i).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for j in 0..2 {
                assert!((r[(i, j)] - joint[j] / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn experts_recover_noiseless_line() {
        let xs: Vec<f64> = (0..20).map(|i| -1.0 + i as f64 / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let data = Dataset::new(1, xs, ys).unwrap();
        let g = MixingMeasure::new(vec![ExpertComponent::new(0.0, vec![0.0], vec![0.0], 0.0, 1.0)])
            .unwrap();
        let theta = ThetaBox::new(1);
        let resp = DMatrix::from_element(data.n(), 1, 1.0);
        let up = em_m_step_experts(&data, &resp, &g, &theta).unwrap();
        assert!((up[0].a[0] - 2.0).abs() < 1e-12);
        assert!((up[0].b - 1.0).abs() < 1e-12);
        assert_eq!(up[0].sigma, theta.sigma_min());
        assert!(!up[0].ridged && !up[0].empty);
    }

    #[test]
    fn experts_empty_component_left_unchanged() {
        let g = two_experts();
        let theta = ThetaBox::new(1);
        let data = g.sample(&theta.covariates, 40, 4).unwrap();
        let mut resp = DMatrix::zeros(data.n(), 2);
        resp.column_mut(0).fill(1.0);
        let up = em_m_step_experts(&data, &resp, &g, &theta).unwrap();
        let c = &g.components()[1];
        assert!(up[1].empty);
        assert_eq!((up[1].a.clone(), up[1].b, up[1].sigma), (c.a.clone(), c.b, c.sigma));
    }

    #[test]
    fn experts_rank_deficient_design_is_ridged() {
        // Every covariate equal: [x, 1] columns are collinear.
        let data = Dataset::new(1, vec![0.5; 10], (0..10).map(f64::from).collect()).unwrap();
        let fit = weighted_least_squares(&data, |_| 1.0);
        assert!(fit.ridged);
        assert!(fit.a[0].is_finite() && fit.b.is_finite());
        let pred = fit.a[0] * 0.5 + fit.b;
        assert!((pred - 4.5).abs() < 1e-6);
    }

    #[test]
    fn weighted_ls_matches_normal_equation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 2;
        let n = 60;
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let data = Dataset::new(d, x.clone(), y.clone()).unwrap();
        let fit = weighted_least_squares(&data, |i| w[i]);
        // Oracle: sqrt(w)-scaled design solved by SVD least squares.
        let z = DMatrix::from_fn(n, d + 1, |i, c| {
            let v = if c < d { x[i * d + c] } else { 1.0 };
            v * w[i].sqrt()
        });
        let t = DVector::from_fn(n, |i, _| y[i] * w[i].sqrt());
        let coef = z.svd(true, true).solve(&t, 1e-14).unwrap();
        for c in 0..d {
            assert!((fit.a[c] - coef[c]).abs() < 1e-9);
        }
        assert!((fit.b - coef[d]).abs() < 1e-9);
    }

    #[test]
    fn gating_stationary_when_resp_equals_gate() {
        let g = two_experts();
        let theta = ThetaBox::new(1);
        let data = g.sample(&theta.covariates, 200, 9).unwrap();
        let mut resp = DMatrix::zeros(data.n(), 2);
        for i in 0..data.n() {
            let w = g.softmax_gate(data.x(i)).unwrap();
            resp[(i, 0)] = w[0];
            resp[(i, 1)] = w[1];
        }
        let p = GatingParams::of(&g);
        let (_, grad) = gating_objective(&data, &resp, &p);
        assert!(grad.beta0.iter().chain(grad.beta1.iter().flatten()).all(|v| v.abs() < 1e-12));
        let up = em_m_step_gating(&data, &resp, &p, &theta, 10, 1.0).unwrap();
        for (a, b) in up.params.beta0.iter().zip(&p.beta0) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in up.params.beta1.iter().flatten().zip(p.beta1.iter().flatten()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    fn random_resp(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut r = DMatrix::from_fn(n, k, |_, _| rng.random_range(0.01..1.0));
        for i in 0..n {
            let s: f64 = r.row(i).sum();
            r.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        r
    }

    #[test]
    fn gating_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let theta = ThetaBox::new(2);
        for _ in 0..5 {
            let g = MixingMeasure::new((0..3).map(|_| theta.sample_component(&mut rng)).collect())
                .unwrap();
            let data = g.sample(&theta.covariates, 150, rng.random()).unwrap();
            let resp = random_resp(data.n(), 3, &mut rng);
            let p = GatingParams::of(&g);
            let (_, grad) = gating_objective(&data, &resp, &p);
            let h = 1e-5;
            for j in 0..3 {
                for u in 0..=2 {
                    let perturb = |s: f64| {
                        let mut q = p.clone();
                        if u == 0 {
                            q.beta0[j] += s;
                        } else {
                            q.beta1[j][u - 1] += s;
                        }
                        gating_objective(&data, &resp, &q).0
                    };
                    let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                    let an = if u == 0 { grad.beta0[j] } else { grad.beta1[j][u - 1] };
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    assert!(rel < 1e-4, "fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn gating_objective_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = ThetaBox::new(1);
        for _ in 0..10 {
            let g = MixingMeasure::new((0..3).map(|_| theta.sample_component(&mut rng)).collect())
                .unwrap();
            let data = g.sample(&theta.covariates, 100, rng.random()).unwrap();
            let resp = random_resp(data.n(), 3, &mut rng);
            let up = em_m_step_gating(&data, &resp, &GatingParams::of(&g), &theta, 20, 50.0).unwrap();
            let mut prev = up.objective_before;
            for v in &up.objective_trace {
                assert!(*v >= prev);
                prev = *v;
            }
            assert!(up.objective_after >= up.objective_before);
        }
    }

    #[test]
    fn single_expert_fit_is_closed_form() {
        let truth = MixingMeasure::new(vec![ExpertComponent::new(0.0, vec![0.5], vec![1.5], -0.5, 0.7)])
            .unwrap();
        let theta = ThetaBox::new(1);
        let data = truth.sample(&theta.covariates, 2000, 12).unwrap();
        let cfg = FitConfig {
            k: 1,
            restarts: 2,
            ..Default::default()
        };
        let fit = fit_mle(&data, &theta, &cfg).unwrap();
        // Oracle: ordinary least squares by explicit 2x2 normal equations.
        let n = data.n() as f64;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..data.n() {
            let (x, y) = (data.x(i)[0], data.y(i));
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        let det = n * sxx - sx * sx;
        let a = (n * sxy - sx * sy) / det;
        let b = (sxx * sy - sx * sxy) / det;
        let var = (0..data.n())
            .map(|i| (data.y(i) - a * data.x(i)[0] - b).powi(2))
            .sum::<f64>()
            / n;
        let c = &fit.measure.components()[0];
        assert!((c.a[0] - a).abs() < 1e-8);
        assert!((c.b - b).abs() < 1e-8);
        assert!((c.sigma - var).abs() < 1e-8);
        assert!(fit.converged);
    }

    #[test]
    fn fit_is_deterministic() {
        let truth = two_experts();
        let theta = ThetaBox::new(1);
        let data = truth.sample(&theta.covariates, 1500, 3).unwrap();
        let cfg = FitConfig {
            seed: 17,
            restarts: 3,
            ..Default::default()
        };
        let a = fit_mle(&data, &theta, &cfg).unwrap();
        let b = fit_mle(&data, &theta, &cfg).unwrap();
        assert_eq!(a.measure, b.measure);
        assert_eq!(a.final_loglik, b.final_loglik);
        assert_eq!((a.restart, a.iterations), (b.restart, b.iterations));
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let truth = two_experts();
        let theta = ThetaBox::new(1);
        let data = truth.sample(&theta.covariates, 1000, 6).unwrap();
        let cfg = FitConfig {
            k: 3,
            restarts: 1,
            max_em_iters: 100,
            ..Default::default()
        };
        let fit = fit_mle(&data, &theta, &cfg).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn degenerate_response_is_not_converged() {
        let data = Dataset::new(1, (0..30).map(|i| i as f64 / 30.0).collect(), vec![1.0; 30]).unwrap();
        let theta = ThetaBox::new(1);
        let cfg = FitConfig {
            k: 1,
            restarts: 1,
            ..Default::default()
        };
        let fit = fit_mle(&data, &theta, &cfg).unwrap();
        assert!(!fit.converged);
        assert!(theta.check_measure(&fit.measure).is_ok());
    }

    #[test]
    fn fit_rejects_too_few_rows_and_bad_config() {
        let data = Dataset::new(1, vec![0.0], vec![0.0]).unwrap();
        let theta = ThetaBox::new(1);
        assert!(fit_mle(&data, &theta, &FitConfig::default()).is_err());
        let cfg = FitConfig {
            k: 1,
            restarts: 0,
            ..Default::default()
        };
        assert!(fit_mle(&data, &theta, &cfg).is_err());
    }
}

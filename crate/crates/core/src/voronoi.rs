//! Voronoi cells and the translation-infimum losses between a fitted
//! mixing measure `G` and a reference `G*`.
//!
//! Fitted atoms are assigned to the nearest reference atom in the
//! `(a, b, sigma)` coordinates only, so the assignment does not move when the
//! gating parameters are translated. The loss at a fixed translation
//! `(t1, t2)` is a sum of weighted parameter discrepancies per cell plus a
//! weight-discrepancy term `|sum_{i in A_j} exp(beta0_i) - exp(beta0*_j + t1)|`.
//! The exact-fitted loss uses first powers; the over-fitted loss raises
//! multi-atom cells to the powers given by [`rbar`].
//!
//! The infimum over `(t1, t2)` is approximated by projected subgradient
//! descent. Each stage runs with a fixed step, restarts from the best iterate
//! seen so far and halves the step for the next stage.

use crate::error::{MoeError, Result};
use crate::model::{ExpertComponent, Interval, MixingMeasure, ThetaBox};

/// Cells `A_j` of every reference atom.
#[derive(Debug, Clone, PartialEq)]
pub struct VoronoiAssignment {
    /// `cells[j]` lists the fitted atoms nearest to reference atom `j`.
    pub cells: Vec<Vec<usize>>,
    /// `nearest[i]` is the cell of fitted atom `i`.
    pub nearest: Vec<usize>,
    /// Distance from fitted atom `i` to its reference atom.
    pub distances: Vec<f64>,
}

impl VoronoiAssignment {
    pub fn is_exact_fitted(&self) -> bool {
        self.cells.iter().all(|c| c.len() == 1)
    }
}

fn expert_distance(c: &ExpertComponent, s: &ExpertComponent) -> f64 {
    let da: f64 = c.a.iter().zip(&s.a).map(|(u, v)| (u - v).powi(2)).sum();
    (da + (c.b - s.b).powi(2) + (c.sigma - s.sigma).powi(2)).sqrt()
}

fn check_dims(g: &MixingMeasure, gstar: &MixingMeasure) -> Result<()> {
    if g.dim() != gstar.dim() {
        return Err(MoeError::DimensionMismatch {
            expected: gstar.dim(),
            got: g.dim(),
        });
    }
    Ok(())
}

/// Nearest-reference assignment by `(a, b, sigma)`; ties go to the lowest
/// reference index.
pub fn voronoi_cells(g: &MixingMeasure, gstar: &MixingMeasure) -> Result<VoronoiAssignment> {
    check_dims(g, gstar)?;
    let mut cells = vec![Vec::new(); gstar.k()];
    let mut nearest = Vec::with_capacity(g.k());
    let mut distances = Vec::with_capacity(g.k());
    for (i, c) in g.components().iter().enumerate() {
        let (mut best_j, mut best_d) = (0, f64::INFINITY);
        for (j, s) in gstar.components().iter().enumerate() {
            let d = expert_distance(c, s);
            if d < best_d {
                best_j = j;
                best_d = d;
            }
        }
        cells[best_j].push(i);
        nearest.push(best_j);
        distances.push(best_d);
    }
    Ok(VoronoiAssignment {
        cells,
        nearest,
        distances,
    })
}

/// Value of `rbar(m)`: the smallest order at which the polynomial system with
/// `m` unknown groups has no non-trivial solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rbar {
    pub value: usize,
    /// `true` when the value is the `2m` conjecture rather than a proven value.
    pub conjectural: bool,
}

/// `rbar(2) = 4`, `rbar(3) = 6`, and the conjectured `2m` beyond.
pub fn rbar(m: usize) -> Result<Rbar> {
    match m {
        0 | 1 => Err(MoeError::InvalidInput(format!(
            "rbar is defined for cells with at least 2 atoms, got {m}"
        ))),
        2 => Ok(Rbar {
            value: 4,
            conjectural: false,
        }),
        3 => Ok(Rbar {
            value: 6,
            conjectural: false,
        }),
        _ => Ok(Rbar {
            value: 2 * m,
            conjectural: true,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Exact-fitted loss (every cell a singleton).
    D1,
    /// Over-fitted loss.
    D2,
}

/// Feasible set of translations.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationBox {
    pub t1: Interval,
    pub t2: Vec<Interval>,
}

impl TranslationBox {
    /// Translations keeping every reference atom's `beta0 + t1` and
    /// `beta1 + t2` inside `theta`.
    pub fn feasible(gstar: &MixingMeasure, theta: &ThetaBox) -> Result<Self> {
        if gstar.dim() != theta.dim() {
            return Err(MoeError::DimensionMismatch {
                expected: theta.dim(),
                got: gstar.dim(),
            });
        }
        let slack = |iv: &Interval, vals: &mut dyn Iterator<Item = f64>| -> Result<Interval> {
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            let out = Interval {
                lo: iv.lo - lo,
                hi: iv.hi - hi,
            };
            if out.lo > out.hi {
                return Err(MoeError::OutOfBox(
                    "reference measure gating parameters do not fit in the box".into(),
                ));
            }
            Ok(out)
        };
        let comps = gstar.components();
        let t1 = slack(&theta.beta0, &mut comps.iter().map(|c| c.beta0))?;
        let t2 = (0..theta.dim())
            .map(|u| slack(&theta.beta1[u], &mut comps.iter().map(|c| c.beta1[u])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { t1, t2 })
    }

    /// `[-half, half]^(1 + dim)`.
    pub fn symmetric(dim: usize, half: f64) -> Self {
        let iv = Interval { lo: -half, hi: half };
        Self {
            t1: iv,
            t2: vec![iv; dim],
        }
    }

    fn project(&self, t1: &mut f64, t2: &mut [f64]) {
        *t1 = self.t1.clamp(*t1);
        for (v, iv) in t2.iter_mut().zip(&self.t2) {
            *v = iv.clamp(*v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationSolverConfig {
    /// Initial step; `None` means `0.01 * (1 + max |parameter of G|)`.
    pub step: Option<f64>,
    /// Total subgradient iterations across all stages.
    pub iterations: usize,
    /// Number of fixed-step stages; the step halves between stages.
    pub stages: usize,
    /// Feasible translations; `None` derives them from the default box.
    pub bounds: Option<TranslationBox>,
    /// Starting translation; defaults to the origin (projected).
    pub start: Option<(f64, Vec<f64>)>,
}

impl Default for TranslationSolverConfig {
    fn default() -> Self {
        Self {
            step: None,
            iterations: 10_000,
            stages: 25,
            bounds: None,
            start: None,
        }
    }
}

impl TranslationSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.step {
            if !(s > 0.0) {
                return Err(MoeError::InvalidConfig("solver step must be positive".into()));
            }
        }
        if self.iterations == 0 || self.stages == 0 {
            return Err(MoeError::InvalidConfig(
                "solver iterations and stages must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value with the minimising translation and the cells used.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub t1: f64,
    pub t2: Vec<f64>,
    pub assignment: VoronoiAssignment,
}

/// Objective at `(t1, t2)` with a subgradient. Kinks get the zero subgradient.
fn objective(
    kind: LossKind,
    g: &MixingMeasure,
    gstar: &MixingMeasure,
    asg: &VoronoiAssignment,
    t1: f64,
    t2: &[f64],
    grad: Option<(&mut f64, &mut [f64])>,
) -> f64 {
    let d = g.dim();
    let mut g1 = 0.0;
    let mut g2 = vec![0.0; d];
    let mut total = 0.0;
    let mut dbeta = vec![0.0; d];
    for (j, cell) in asg.cells.iter().enumerate() {
        let s = &gstar.components()[j];
        let fine = kind == LossKind::D2 && cell.len() > 1;
        let order = if fine {
            rbar(cell.len()).map(|r| r.value as f64).unwrap_or(1.0)
        } else {
            1.0
        };
        let mut mass = 0.0;
        for &i in cell {
            let c = &g.components()[i];
            let w = c.beta0.exp();
            mass += w;
            for u in 0..d {
                dbeta[u] = c.beta1[u] - s.beta1[u] - t2[u];
            }
            let da2: f64 = c.a.iter().zip(&s.a).map(|(p, q)| (p - q).powi(2)).sum();
            let db2 = (c.b - s.b).powi(2);
            let ds2 = (c.sigma - s.sigma).powi(2);
            let dbeta2: f64 = dbeta.iter().map(|v| v * v).sum();
            if fine {
                // ||(dbeta1, db)||^r + ||(da, dsigma)||^(r/2)
                let n1 = (dbeta2 + db2).sqrt();
                let n2 = (da2 + ds2).sqrt();
                total += w * (n1.powf(order) + n2.powf(order / 2.0));
                if n1 > 0.0 {
                    let coef = w * order * n1.powf(order - 2.0);
                    for u in 0..d {
                        g2[u] -= coef * dbeta[u];
                    }
                }
            } else {
                let n = (dbeta2 + da2 + db2 + ds2).sqrt();
                total += w * n;
                if n > 0.0 {
                    for u in 0..d {
                        g2[u] -= w * dbeta[u] / n;
                    }
                }
            }
        }
        let target = (s.beta0 + t1).exp();
        let gap = mass - target;
        total += gap.abs();
        if gap != 0.0 {
            g1 -= gap.signum() * target;
        }
    }
    if let Some((o1, o2)) = grad {
        *o1 = g1;
        o2.copy_from_slice(&g2);
    }
    total
}

fn check_translation(g: &MixingMeasure, t2: &[f64]) -> Result<()> {
    if t2.len() != g.dim() {
        return Err(MoeError::DimensionMismatch {
            expected: g.dim(),
            got: t2.len(),
        });
    }
    Ok(())
}

/// Exact-fitted loss summand at a fixed translation. Requires `k' = k*` with
/// every cell a singleton.
pub fn loss_d1_at(
    g: &MixingMeasure,
    gstar: &MixingMeasure,
    asg: &VoronoiAssignment,
    t1: f64,
    t2: &[f64],
) -> Result<f64> {
    check_dims(g, gstar)?;
    check_translation(g, t2)?;
    if g.k() != gstar.k() || !asg.is_exact_fitted() {
        return Err(MoeError::LossShape(
            "exact-fitted loss needs one fitted atom per cell; use the over-fitted loss (d2)".into(),
        ));
    }
    Ok(objective(LossKind::D1, g, gstar, asg, t1, t2, None))
}

/// Over-fitted loss summand at a fixed translation.
pub fn loss_d2_at(
    g: &MixingMeasure,
    gstar: &MixingMeasure,
    asg: &VoronoiAssignment,
    t1: f64,
    t2: &[f64],
) -> Result<f64> {
    check_dims(g, gstar)?;
    check_translation(g, t2)?;
    if asg.nearest.len() != g.k() || asg.cells.len() != gstar.k() {
        return Err(MoeError::LossShape("assignment does not match the measures".into()));
    }
    Ok(objective(LossKind::D2, g, gstar, asg, t1, t2, None))
}

/// Minimises the loss at fixed cells over the translation box.
pub fn minimize_translation(
    kind: LossKind,
    g: &MixingMeasure,
    gstar: &MixingMeasure,
    asg: VoronoiAssignment,
    cfg: &TranslationSolverConfig,
) -> Result<LossValue> {
    cfg.validate()?;
    let d = g.dim();
    let bounds = match &cfg.bounds {
        Some(b) => b.clone(),
        None => TranslationBox::feasible(gstar, &ThetaBox::new(d))?,
    };
    if bounds.t2.len() != d {
        return Err(MoeError::DimensionMismatch {
            expected: d,
            got: bounds.t2.len(),
        });
    }
    let (mut t1, mut t2) = cfg.start.clone().unwrap_or((0.0, vec![0.0; d]));
    check_translation(g, &t2)?;
    bounds.project(&mut t1, &mut t2);

    let step0 = cfg.step.unwrap_or(0.01 * (1.0 + g.sup_norm()));
    let stages = cfg.stages.min(cfg.iterations);
    let per_stage = cfg.iterations / stages;
    let mut best = (objective(kind, g, gstar, &asg, t1, &t2, None), t1, t2.clone());
    let mut gr1 = 0.0;
    let mut gr2 = vec![0.0; d];
    for stage in 0..stages {
        let step = step0 * 0.5f64.powi(stage as i32);
        let iters = if stage + 1 == stages {
            cfg.iterations - per_stage * (stages - 1)
        } else {
            per_stage
        };
        t1 = best.1;
        t2.copy_from_slice(&best.2);
        for _ in 0..iters {
            let f = objective(kind, g, gstar, &asg, t1, &t2, Some((&mut gr1, &mut gr2)));
            if f < best.0 {
                best = (f, t1, t2.clone());
            }
            if gr1 == 0.0 && gr2.iter().all(|v| *v == 0.0) {
                break;
            }
            t1 -= step * gr1;
            for (v, gv) in t2.iter_mut().zip(&gr2) {
                *v -= step * gv;
            }
            bounds.project(&mut t1, &mut t2);
        }
        let f = objective(kind, g, gstar, &asg, t1, &t2, None);
        if f < best.0 {
            best = (f, t1, t2.clone());
        }
    }
    Ok(LossValue {
        value: best.0,
        t1: best.1,
        t2: best.2,
        assignment: asg,
    })
}

/// Exact-fitted Voronoi loss: infimum over feasible translations.
pub fn loss_d1(g: &MixingMeasure, gstar: &MixingMeasure, cfg: &TranslationSolverConfig) -> Result<LossValue> {
    let asg = voronoi_cells(g, gstar)?;
    // Shape check through the pointwise loss.
    loss_d1_at(g, gstar, &asg, 0.0, &vec![0.0; g.dim()])?;
    minimize_translation(LossKind::D1, g, gstar, asg, cfg)
}

/// Over-fitted Voronoi loss: infimum over feasible translations.
pub fn loss_d2(g: &MixingMeasure, gstar: &MixingMeasure, cfg: &TranslationSolverConfig) -> Result<LossValue> {
    let asg = voronoi_cells(g, gstar)?;
    minimize_translation(LossKind::D2, g, gstar, asg, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gstar() -> MixingMeasure {
        MixingMeasure::new(vec![
            ExpertComponent::new(0.2, vec![2.0], vec![-1.0], 1.0, 0.3),
            ExpertComponent::new(-0.3, vec![-2.0], vec![1.0], -1.0, 0.5),
        ])
        .unwrap()
    }

    #[test]
    fn cells_of_identical_measures() {
        let s = gstar();
        let asg = voronoi_cells(&s, &s).unwrap();
        assert_eq!(asg.cells, vec![vec![0], vec![1]]);
        assert!(asg.distances.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn tie_goes_to_first_cell() {
        let s = gstar();
        let mid = ExpertComponent::new(0.0, vec![0.0], vec![0.0], 0.0, 0.4);
        let g = MixingMeasure::new(vec![mid]).unwrap();
        let asg = voronoi_cells(&g, &s).unwrap();
        assert_eq!(asg.nearest, vec![0]);
    }

    #[test]
    fn two_atoms_share_a_cell() {
        let s = gstar();
        let g = MixingMeasure::new(vec![
            ExpertComponent::new(0.0, vec![2.0], vec![-1.1], 1.0, 0.3),
            ExpertComponent::new(0.0, vec![2.0], vec![-0.9], 1.1, 0.35),
            ExpertComponent::new(0.0, vec![-2.0], vec![1.0], -0.8, 0.5),
        ])
        .unwrap();
        let asg = voronoi_cells(&g, &s).unwrap();
        assert_eq!(asg.cells, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn rbar_values() {
        assert_eq!(rbar(2).unwrap(), Rbar { value: 4, conjectural: false });
        assert_eq!(rbar(3).unwrap(), Rbar { value: 6, conjectural: false });
        assert_eq!(rbar(5).unwrap(), Rbar { value: 10, conjectural: true });
        assert!(rbar(1).is_err());
    }

    #[test]
    fn d1_at_examples() {
        let s = gstar();
        let g = s.translate(0.4, &[-0.6]).unwrap();
        let asg = voronoi_cells(&g, &s).unwrap();
        assert!(loss_d1_at(&g, &s, &asg, 0.4, &[-0.6]).unwrap() < 1e-15);

        let mut comps = s.clone().into_components();
        comps[1].b += 0.25;
        let g = MixingMeasure::new(comps).unwrap();
        let asg = voronoi_cells(&g, &s).unwrap();
        let v = loss_d1_at(&g, &s, &asg, 0.0, &[0.0]).unwrap();
        assert!((v - (-0.3f64).exp() * 0.25).abs() < 1e-15);
    }

    #[test]
    fn d1_rejects_over_fitted_shape() {
        let s = gstar();
        let mut comps = s.clone().into_components();
        comps.push(comps[0].clone());
        let g = MixingMeasure::new(comps).unwrap();
        let asg = voronoi_cells(&g, &s).unwrap();
        let err = loss_d1_at(&g, &s, &asg, 0.0, &[0.0]).unwrap_err();
        assert!(err.to_string().contains("d2"));
        assert!(loss_d1(&g, &s, &TranslationSolverConfig::default()).is_err());
    }

    /// Term-by-term evaluation straight from the loss definition.
    fn d1_oracle(g: &MixingMeasure, s: &MixingMeasure, t1: f64, t2: f64) -> f64 {
        let mut total = 0.0;
        for j in 0..s.k() {
            let sj = &s.components()[j];
            let mut mass = 0.0;
            for c in g.components() {
                let dist = |x: &ExpertComponent| {
                    ((x.a[0] - c.a[0]).powi(2) + (x.b - c.b).powi(2) + (x.sigma - c.sigma).powi(2)).sqrt()
                };
                let mine = dist(sj);
                let closer = s.components()[..j].iter().any(|o| dist(o) <= mine)
                    || s.components()[j + 1..].iter().any(|o| dist(o) < mine);
                if closer {
                    continue;
                }
                mass += c.beta0.exp();
                let v = [
                    c.beta1[0] - sj.beta1[0] - t2,
                    c.a[0] - sj.a[0],
                    c.b - sj.b,
                    c.sigma - sj.sigma,
                ];
                total += c.beta0.exp() * v.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
            total += (mass - (sj.beta0 + t1).exp()).abs();
        }
        total
    }

    #[test]
    fn d1_at_matches_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = gstar();
        for _ in 0..50 {
            let g = MixingMeasure::new(
                s.components()
                    .iter()
                    .map(|c| {
                        let mut c = c.clone();
                        c.beta0 += rng.random_range(-0.5..0.5);
                        c.beta1[0] += rng.random_range(-0.5..0.5);
                        c.a[0] += rng.random_range(-0.5..0.5);
                        c.b += rng.random_range(-0.5..0.5);
                        c.sigma += rng.random_range(-0.1..0.1);
                        c
                    })
                    .collect(),
            )
            .unwrap();
            let asg = voronoi_cells(&g, &s).unwrap();
            let (t1, t2) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let v = loss_d1_at(&g, &s, &asg, t1, &[t2]).unwrap();
            assert!((v - d1_oracle(&g, &s, t1, t2)).abs() < 1e-12);
        }
    }

    #[test]
    fn d1_recovers_translation() {
        let s = gstar();
        let g = s.translate(0.7, &[0.9]).unwrap();
        let lv = loss_d1(&g, &s, &TranslationSolverConfig::default()).unwrap();
        assert!(lv.value < 1e-3, "{}", lv.value);
        let back = s.translate(lv.t1, &lv.t2).unwrap();
        for (p, q) in back.to_flat().iter().zip(g.to_flat()) {
            assert!((p - q).abs() < 1e-6, "{p} vs {q}");
        }
    }

    #[test]
    fn d1_below_origin_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = gstar();
        for _ in 0..10 {
            let flat: Vec<f64> = s.to_flat().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            let g = MixingMeasure::from_flat(&flat, 2, 1).unwrap();
            let lv = loss_d1(&g, &s, &TranslationSolverConfig::default()).unwrap();
            let at0 = loss_d1_at(&g, &s, &lv.assignment, 0.0, &[0.0]).unwrap();
            assert!(lv.value <= at0);
        }
    }

    #[test]
    fn d2_examples() {
        let s = gstar();
        let mut comps = s.clone().into_components();
        // Split atom 0 into two halves with the same parameters.
        let mut half = comps[0].clone();
        half.beta0 -= 2f64.ln();
        comps[0] = half.clone();
        comps.push(half.clone());
        let g = MixingMeasure::new(comps.clone()).unwrap();
        let asg = voronoi_cells(&g, &s).unwrap();
        assert!(loss_d2_at(&g, &s, &asg, 0.0, &[0.0]).unwrap() < 1e-12);
        assert!(loss_d2(&g, &s, &TranslationSolverConfig::default()).unwrap().value < 1e-3);

        // Perturb b on both atoms of the size-2 cell.
        let (d0, d2) = (0.1, -0.2);
        comps[0].b += d0;
        comps[2].b += d2;
        let g = MixingMeasure::new(comps).unwrap();
        let asg = voronoi_cells(&g, &s).unwrap();
        let w = half.beta0.exp();
        let expected = w * (d0 as f64).powi(4) + w * (d2 as f64).powi(4);
        let v = loss_d2_at(&g, &s, &asg, 0.0, &[0.0]).unwrap();
        assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
    }

    #[test]
    fn d2_equals_d1_on_singleton_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = gstar();
        for _ in 0..20 {
            let flat: Vec<f64> = s.to_flat().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
            let g = MixingMeasure::from_flat(&flat, 2, 1).unwrap();
            let asg = voronoi_cells(&g, &s).unwrap();
            let t = rng.random_range(-1.0..1.0);
            assert_eq!(
                loss_d1_at(&g, &s, &asg, t, &[-t]).unwrap(),
                loss_d2_at(&g, &s, &asg, t, &[-t]).unwrap()
            );
        }
    }

    #[test]
    fn d2_monotone_in_perturbation() {
        let s = gstar();
        let mut comps = s.clone().into_components();
        comps.push(comps[1].clone());
        let base = MixingMeasure::new(comps.clone()).unwrap();
        let asg = voronoi_cells(&base, &s).unwrap();
        let mut prev = loss_d2_at(&base, &s, &asg, 0.1, &[0.2]).unwrap();
        for step in 1..10 {
            comps[2].a[0] = s.components()[1].a[0] + 0.01 * step as f64;
            let g = MixingMeasure::new(comps.clone()).unwrap();
            let v = loss_d2_at(&g, &s, &asg, 0.1, &[0.2]).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn feasible_box_keeps_reference_inside_theta() {
        let s = gstar();
        let theta = ThetaBox::new(1);
        let b = TranslationBox::feasible(&s, &theta).unwrap();
        assert!((b.t1.lo - (-5.0 + 0.3)).abs() < 1e-15 && (b.t1.hi - (5.0 - 0.2)).abs() < 1e-15);
        assert!((b.t2[0].lo + 3.0).abs() < 1e-15 && (b.t2[0].hi - 3.0).abs() < 1e-15);
        assert!(s.translate_checked(b.t1.hi, &[b.t2[0].lo], &theta).is_ok());
    }
}

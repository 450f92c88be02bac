//! Estimators for the steering assumptions read off model internals, and the
//! deterministic check of the helpfulness proof chain on realized parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{self, LinearFit};
use crate::linalg;
use crate::metrics::{BehaviorKind, BehaviorSpec};
use crate::model::{HiddenState, LayeredModel, SteeringVectorSet, TokenDistribution};

pub const DEFAULT_TOP_T: usize = 10;
/// Slack allowed when comparing a measured probability to its bound.
pub const VIOLATION_TOL: f64 = 1e-12;
const ZERO_NORM: f64 = 1e-300;

fn check_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("grid point".into()));
    }
    if !grid.contains(&0.0) {
        return Err(Error::precondition("coefficient grid must contain 0"));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormCurve {
    /// `(r_e, |δr^(L)|)` sorted by `r_e`.
    pub points: Vec<(f64, f64)>,
    pub lambda_hat: f64,
    pub r2: f64,
    pub window: (f64, f64),
}

/// `|δr^(L)|` across the grid and the through-origin slope `λ̂` of
/// `|δr|` against `|r_e|` inside `window`.
pub fn norm_curve_and_lambda(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    grid: &[f64],
    window: (f64, f64),
) -> Result<NormCurve> {
    let grid = check_grid(grid)?;
    let (lo, hi) = window;
    if !(lo <= hi) || lo < grid[0] || hi > grid[grid.len() - 1] {
        return Err(Error::precondition(format!(
            "fit window [{lo}, {hi}] must lie inside the grid span"
        )));
    }
    let points = grid
        .iter()
        .map(|&r| {
            let delta = model.steering_delta(&steering.with_coefficient(r), context)?;
            Ok((r, linalg::norm(&delta)))
        })
        .collect::<Result<Vec<_>>>()?;
    let windowed: Vec<(f64, f64)> = points
        .iter()
        .filter(|(r, _)| (lo..=hi).contains(r))
        .map(|&(r, n)| (r.abs(), n))
        .collect();
    if windowed.len() < 2 {
        return Err(Error::precondition("fit window holds fewer than 2 grid points"));
    }
    let fit = if windowed.iter().all(|p| p.1 == 0.0) {
        LinearFit {
            slope: 0.0,
            r2: 1.0,
            rss: 0.0,
        }
    } else {
        fitting::fit_linear_through_origin(&windowed)?
    };
    Ok(NormCurve {
        points,
        lambda_hat: fit.slope,
        r2: fit.r2,
        window,
    })
}

/// `T` most probable tokens, most probable first; ties go to the lower index.
pub fn top_tokens(dist: &TokenDistribution, t: usize) -> Result<Vec<usize>> {
    if t > dist.vocab_size() {
        return Err(Error::precondition(format!(
            "T = {t} exceeds vocabulary size {}",
            dist.vocab_size()
        )));
    }
    let mut idx: Vec<usize> = (0..dist.vocab_size()).collect();
    idx.sort_by(|&a, &b| dist.probs[b].total_cmp(&dist.probs[a]).then(a.cmp(&b)));
    idx.truncate(t);
    Ok(idx)
}

/// Unit last-layer change at `r_e`; when it vanishes, the unit change at
/// coefficient 1 stands in. `None` when both vanish.
pub fn steering_direction(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    r_e: f64,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let delta = model.steering_delta(&steering.with_coefficient(r_e), context)?;
    if let Some(u) = linalg::normalized(&delta) {
        return Ok((delta, Some(u)));
    }
    let probe = model.steering_delta(&steering.with_coefficient(1.0), context)?;
    Ok((delta, linalg::normalized(&probe)))
}

/// `⟨u, U^T e_i⟩` for every token.
pub fn token_projections(model: &LayeredModel, direction: &[f64]) -> Vec<f64> {
    model.unembedding().matvec(direction)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub r_e: f64,
    pub samples: Vec<f64>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub points: Vec<NoisePoint>,
    /// Through-origin slope of the per-point std against `|r_e|`.
    pub slope: f64,
    pub r2: f64,
    /// Shape of the largest-|r_e| sample set.
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

/// Samples of `⟨δr, U^T(e_i − e_correct)⟩` over the unsteered top-`T`
/// incorrect tokens of every context, per grid point.
pub fn logit_noise_profile(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    contexts: &[(HiddenState, usize)],
    grid: &[f64],
    t: usize,
) -> Result<NoiseProfile> {
    if t < 3 {
        return Err(Error::precondition("T must be >= 3"));
    }
    if contexts.is_empty() {
        return Err(Error::precondition("at least one context is required"));
    }
    let grid = check_grid(grid)?;
    let u = model.unembedding();
    let mut tops = Vec::with_capacity(contexts.len());
    for (ctx, correct) in contexts {
        model.check_token(*correct)?;
        let base = model.next_token_distribution(&model.forward(ctx)?)?;
        let top: Vec<usize> = top_tokens(&base, t)?
            .into_iter()
            .filter(|i| i != correct)
            .collect();
        tops.push(top);
    }
    let mut points = Vec::with_capacity(grid.len());
    for &r in &grid {
        let s = steering.with_coefficient(r);
        let mut samples = Vec::new();
        for ((ctx, correct), top) in contexts.iter().zip(&tops) {
            let delta = model.steering_delta(&s, ctx)?;
            let xc = linalg::dot(&delta, u.row(*correct));
            samples.extend(top.iter().map(|&i| linalg::dot(&delta, u.row(i)) - xc));
        }
        let std = sample_std(&samples);
        points.push(NoisePoint {
            r_e: r,
            samples,
            std,
        });
    }
    let curve: Vec<(f64, f64)> = points.iter().map(|p| (p.r_e.abs(), p.std)).collect();
    let fit = if curve.iter().all(|p| p.1 == 0.0) {
        LinearFit {
            slope: 0.0,
            r2: 1.0,
            rss: 0.0,
        }
    } else {
        fitting::fit_linear_through_origin(&curve)?
    };
    let widest = points
        .iter()
        .max_by(|a, b| a.r_e.abs().total_cmp(&b.r_e.abs()))
        .expect("grid is non-empty");
    let (skewness, excess_kurtosis) = shape(&widest.samples);
    Ok(NoiseProfile {
        points,
        slope: fit.slope,
        r2: fit.r2,
        skewness,
        excess_kurtosis,
    })
}

fn shape(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    if m2 == 0.0 {
        return (0.0, 0.0);
    }
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

fn binary_sets(spec: &BehaviorSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if spec.kind != BehaviorKind::Binary {
        return Err(Error::precondition("a binary behavior spec is required"));
    }
    let (a, m) = (spec.aligned(), spec.misaligned());
    if a.is_empty() || m.is_empty() {
        return Err(Error::precondition("aligned and misaligned sets must be non-empty"));
    }
    Ok((a, m))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginEstimate {
    /// Smallest aligned-minus-misaligned projection gap; negative when some
    /// pair is on the wrong side.
    pub min: f64,
    /// Gap between the aligned and misaligned mean unembedding rows.
    pub cluster: f64,
}

impl MarginEstimate {
    pub fn violated(&self) -> bool {
        self.min < 0.0
    }
}

/// Margin estimates along `δr/|δr|` at coefficient `r_e`.
pub fn margin_estimate(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    spec: &BehaviorSpec,
    r_e: f64,
) -> Result<MarginEstimate> {
    let (aligned, misaligned) = binary_sets(spec)?;
    if r_e == 0.0 {
        return Err(Error::precondition("margin estimate needs r_e != 0"));
    }
    let delta = model.steering_delta(&steering.with_coefficient(r_e), context)?;
    let n = linalg::normalized(&delta)
        .ok_or_else(|| Error::DegenerateDirection("last-layer change is zero".into()))?;
    let x = token_projections(model, &n);
    let mut min = f64::INFINITY;
    for &i in &aligned {
        for &j in &misaligned {
            min = min.min(x[i] - x[j]);
        }
    }
    let mean_of = |set: &[usize]| set.iter().map(|&t| x[t]).sum::<f64>() / set.len() as f64;
    Ok(MarginEstimate {
        min,
        cluster: mean_of(&aligned) - mean_of(&misaligned),
    })
}

/// `(r_e, ⟨δr, mean aligned row − mean misaligned row⟩)` over the grid; its
/// through-origin slope estimates `Δλ`.
pub fn cluster_separation_curve(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    spec: &BehaviorSpec,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let (aligned, misaligned) = binary_sets(spec)?;
    let grid = check_grid(grid)?;
    let u = model.unembedding();
    let d = model.hidden_dim();
    let mut diff = vec![0.0; d];
    for &t in &aligned {
        linalg::axpy(1.0 / aligned.len() as f64, u.row(t), &mut diff);
    }
    for &t in &misaligned {
        linalg::axpy(-1.0 / misaligned.len() as f64, u.row(t), &mut diff);
    }
    grid.iter()
        .map(|&r| {
            let delta = model.steering_delta(&steering.with_coefficient(r), context)?;
            Ok((r, linalg::dot(&delta, &diff)))
        })
        .collect()
}

/// Realized noise parameters of one query at one coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizedNoise {
    /// Unsteered top-`T` tokens, most probable first.
    pub top: Vec<usize>,
    /// `⟨δr/|δr|, U^T e_i⟩` over the top-`T` tokens.
    pub x: BTreeMap<usize, f64>,
    pub x_correct: f64,
    pub i_plus: Vec<usize>,
    pub i_minus: Vec<usize>,
    pub p0: f64,
    pub p_plus: f64,
    pub p_minus: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    /// `|δr|`.
    pub delta_norm: f64,
}

impl RealizedNoise {
    /// `min{|c₋|, c₊}`, the realized `σβ`.
    pub fn min_gap(&self) -> f64 {
        self.c_minus.abs().min(self.c_plus)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem2Verdict {
    Holds,
    Violated,
    SkippedIPlusEmpty,
    SkippedIMinusEmpty,
}

impl Theorem2Verdict {
    pub fn is_checked(self) -> bool {
        matches!(self, Theorem2Verdict::Holds | Theorem2Verdict::Violated)
    }
}

impl std::fmt::Display for Theorem2Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Theorem2Verdict::Holds => "checked:bound-holds",
            Theorem2Verdict::Violated => "checked:bound-violated",
            Theorem2Verdict::SkippedIPlusEmpty => "skipped:i-plus-empty",
            Theorem2Verdict::SkippedIMinusEmpty => "skipped:i-minus-empty",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Check {
    pub noise: RealizedNoise,
    /// Steered probability of the correct token.
    pub p_correct: f64,
    /// `P0 / (P0 + min{P₊,P₋}·(1 + ½·min{|c₋|,c₊}²·|δr|²))`.
    pub bound: f64,
    pub verdict: Theorem2Verdict,
}

/// Computes every realized noise parameter from actual forward passes and
/// checks the deterministic helpfulness inequality.
///
/// Ties `X_i = X_correct` go to `I₊`.
pub fn theorem2_realized_check(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    spec: &BehaviorSpec,
    r_e: f64,
    t: usize,
) -> Result<Theorem2Check> {
    let correct = spec
        .correct_token
        .ok_or_else(|| Error::precondition("a correct token must be designated"))?;
    model.check_token(correct)?;
    let base = model.next_token_distribution(&model.forward(context)?)?;
    let top = top_tokens(&base, t)?;
    let (delta, dir) = steering_direction(model, steering, context, r_e)?;
    let delta_norm = linalg::norm(&delta);
    let proj = |i: usize| match &dir {
        Some(u) => linalg::dot(u, model.unembedding().row(i)),
        None => 0.0,
    };
    let x: BTreeMap<usize, f64> = top.iter().map(|&i| (i, proj(i))).collect();
    let x_correct = proj(correct);
    let p0 = base.probs[correct];

    let (mut i_plus, mut i_minus) = (Vec::new(), Vec::new());
    let (mut p_plus, mut p_minus, mut w_plus, mut w_minus) = (0.0, 0.0, 0.0, 0.0);
    for &i in top.iter().filter(|&&i| i != correct) {
        let gap = x[&i] - x_correct;
        let p = base.probs[i];
        if gap >= 0.0 {
            i_plus.push(i);
            p_plus += p;
            w_plus += p * gap;
        } else {
            i_minus.push(i);
            p_minus += p;
            w_minus += p * gap;
        }
    }
    let c_plus = if p_plus > 0.0 { w_plus / p_plus } else { 0.0 };
    let c_minus = if p_minus > 0.0 { w_minus / p_minus } else { 0.0 };
    let xs: Vec<f64> = x.values().copied().collect();
    let sigma = sample_std(&xs);
    let rest = 1.0 - p0;
    let eps = if rest > 0.0 {
        (1.0 - (p_plus + p_minus) / rest).max(0.0)
    } else {
        0.0
    };
    let mass = p_plus + p_minus;
    let alpha = if mass > 0.0 { p_plus.min(p_minus) / mass } else { 0.0 };
    let gap = c_minus.abs().min(c_plus);
    let beta = if sigma > ZERO_NORM { gap / sigma } else { 0.0 };

    let steered = model.steered_distribution(&steering.with_coefficient(r_e), context)?;
    let p_correct = steered.probs[correct];
    let bound = p0 / (p0 + p_plus.min(p_minus) * (1.0 + 0.5 * gap * gap * delta_norm * delta_norm));
    let verdict = if i_plus.is_empty() {
        Theorem2Verdict::SkippedIPlusEmpty
    } else if i_minus.is_empty() {
        Theorem2Verdict::SkippedIMinusEmpty
    } else if p_correct <= bound + VIOLATION_TOL {
        Theorem2Verdict::Holds
    } else {
        Theorem2Verdict::Violated
    };
    Ok(Theorem2Check {
        noise: RealizedNoise {
            top,
            x,
            x_correct,
            i_plus,
            i_minus,
            p0,
            p_plus,
            p_minus,
            c_plus,
            c_minus,
            sigma,
            alpha,
            beta,
            eps,
            delta_norm,
        },
        p_correct,
        bound,
        verdict,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMarginProfile {
    /// Misclassified mass over aligned mass, unsteered.
    pub delta: f64,
    /// Deepest intrusion of a misclassified token past the lowest aligned one.
    pub depth: f64,
    pub misclassified: Vec<usize>,
}

/// Misaligned tokens projecting above the lowest aligned token along the
/// steering direction at `r_e`.
pub fn soft_margin_profile(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    spec: &BehaviorSpec,
    r_e: f64,
) -> Result<SoftMarginProfile> {
    let (aligned, misaligned) = binary_sets(spec)?;
    let (_, dir) = steering_direction(model, steering, context, r_e)?;
    let u = dir.ok_or_else(|| Error::DegenerateDirection("steering has no effect".into()))?;
    let x = token_projections(model, &u);
    let floor = aligned
        .iter()
        .map(|&t| x[t])
        .fold(f64::INFINITY, f64::min);
    let misclassified: Vec<usize> = misaligned.into_iter().filter(|&j| x[j] > floor).collect();
    let base = model.next_token_distribution(&model.forward(context)?)?;
    let aligned_mass: f64 = aligned.iter().map(|&t| base.probs[t]).sum();
    if aligned_mass <= 0.0 {
        return Err(Error::precondition("aligned probability mass is zero"));
    }
    let mis_mass: f64 = misclassified.iter().map(|&t| base.probs[t]).sum();
    let depth = misclassified
        .iter()
        .map(|&j| x[j] - floor)
        .fold(0.0, f64::max);
    Ok(SoftMarginProfile {
        delta: mis_mass / aligned_mass,
        depth,
        misclassified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::{self, MarginSpec, Misclassified};
    use crate::linalg::Matrix;
    use crate::model::Family;
    use crate::rng;

    fn grid(n: usize, step: f64) -> Vec<f64> {
        (0..=n).map(|i| i as f64 * step).collect()
    }

    #[test]
    fn identity_norm_curve_is_exact() {
        let m = LayeredModel::identity_family(6, 5, 3, 2).unwrap();
        let v = rng::unit_vec(&mut rng::stream(1, "v"), 6);
        let s = SteeringVectorSet::shared(6, &v, &[1, 2, 3]).unwrap();
        let ctx = HiddenState::random(6, 3, "ctx");
        let c = norm_curve_and_lambda(&m, &s, &ctx, &grid(20, 0.5), (0.0, 10.0)).unwrap();
        assert!((c.lambda_hat - 3.0).abs() < 1e-9);
        assert!((c.r2 - 1.0).abs() < 1e-12);
        assert_eq!(c.points[0], (0.0, 0.0));
    }

    #[test]
    fn empty_steering_gives_flat_curve() {
        let m = LayeredModel::identity_family(4, 5, 2, 2).unwrap();
        let ctx = HiddenState::random(4, 3, "ctx");
        let c = norm_curve_and_lambda(&m, &SteeringVectorSet::empty(4), &ctx, &grid(4, 1.0), (0.0, 4.0))
            .unwrap();
        assert_eq!(c.lambda_hat, 0.0);
        assert!(c.points.iter().all(|p| p.1 == 0.0));
    }

    #[test]
    fn mlp_curve_is_linear_near_zero_and_bends() {
        let m = LayeredModel::mlp_family(16, 8, 4, 5).unwrap();
        let v = rng::unit_vec(&mut rng::stream(5, "v"), 16);
        let s = SteeringVectorSet::shared(16, &v, &[1, 2, 3, 4]).unwrap();
        let ctx = HiddenState::random(16, 5, "ctx");
        let g = grid(40, 0.25);
        let small = norm_curve_and_lambda(&m, &s, &ctx, &g, (0.0, 0.5)).unwrap();
        let full = norm_curve_and_lambda(&m, &s, &ctx, &g, (0.0, 10.0)).unwrap();
        assert!(small.r2 >= 0.99);
        assert!(full.r2 < small.r2);
    }

    #[test]
    fn norm_curve_preconditions() {
        let m = LayeredModel::identity_family(4, 5, 2, 2).unwrap();
        let ctx = HiddenState::random(4, 3, "ctx");
        let s = SteeringVectorSet::empty(4);
        assert!(norm_curve_and_lambda(&m, &s, &ctx, &[1.0, 2.0], (1.0, 2.0)).is_err());
        assert!(norm_curve_and_lambda(&m, &s, &ctx, &[0.0, 1.0], (0.5, 0.9)).is_err());
    }

    #[test]
    fn orthogonal_direction_gives_zero_noise() {
        // rows live in the first two coordinates, steering along the third
        let u = Matrix::from_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![-1.0, 0.2, 0.0],
        ])
        .unwrap();
        let m = LayeredModel::from_parts(Family::Identity, 0, vec![crate::model::Layer::Identity], u, Matrix::zeros(4, 3), None)
            .unwrap();
        let s = SteeringVectorSet::shared(3, &[0.0, 0.0, 1.0], &[1]).unwrap();
        let ctx = vec![(HiddenState::input(vec![0.3, 0.1, 0.0]), 0)];
        let p = logit_noise_profile(&m, &s, &ctx, &grid(4, 1.0), 3).unwrap();
        assert_eq!(p.slope, 0.0);
        assert!(p.points.iter().all(|pt| pt.samples.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn noise_std_is_homogeneous_on_identity_family() {
        let m = LayeredModel::identity_family(8, 30, 2, 9).unwrap();
        let v = rng::unit_vec(&mut rng::stream(9, "v"), 8);
        let s = SteeringVectorSet::shared(8, &v, &[1, 2]).unwrap();
        let ctxs: Vec<_> = (0..5)
            .map(|k| (HiddenState::random(8, k, "ctx"), k as usize))
            .collect();
        let p = logit_noise_profile(&m, &s, &ctxs, &[0.0, 1.5, 3.0], 10).unwrap();
        assert!((p.points[2].std / p.points[1].std - 2.0).abs() < 1e-12);
        assert!(logit_noise_profile(&m, &s, &ctxs, &[0.0, 1.0], 31).is_err());
    }

    fn planted(margin: f64) -> (LayeredModel, SteeringVectorSet, BehaviorSpec) {
        let spec = MarginSpec::new(8, 12, margin, 2.0, vec![0, 1, 2], vec![3, 4, 5, 6], 21);
        let (m, s) = construct::margin_instance(&spec).unwrap();
        (m, s, BehaviorSpec::binary(&[0, 1, 2], &[3, 4, 5, 6]).unwrap())
    }

    #[test]
    fn margin_estimate_recovers_plant() {
        let (m, s, b) = planted(0.5);
        let ctx = HiddenState::random(8, 4, "ctx");
        let e = margin_estimate(&m, &s, &ctx, &b, 1.0).unwrap();
        assert!((e.min - 0.5).abs() < 1e-9);
        assert!(!e.violated());
        assert!(margin_estimate(&m, &s, &ctx, &b, 0.0).is_err());
        let c = norm_curve_and_lambda(&m, &s, &ctx, &grid(10, 1.0), (0.0, 10.0)).unwrap();
        assert!((c.lambda_hat - 2.0).abs() < 1e-9);
    }

    #[test]
    fn negative_margin_is_reported() {
        let mut spec = MarginSpec::new(8, 12, 0.5, 1.0, vec![0, 1], vec![3, 4], 2);
        spec.misclassified = vec![Misclassified { token: 4, depth: 0.1 }];
        let (m, s) = construct::margin_instance(&spec).unwrap();
        let b = BehaviorSpec::binary(&[0, 1], &[3, 4]).unwrap();
        let ctx = HiddenState::random(8, 4, "ctx");
        let e = margin_estimate(&m, &s, &ctx, &b, 1.0).unwrap();
        assert!((e.min + 0.1).abs() < 1e-9);
        assert!(e.violated());
    }

    #[test]
    fn cluster_margin_matches_direct_recomputation() {
        let m = LayeredModel::mlp_family(6, 10, 2, 8).unwrap();
        let v = rng::unit_vec(&mut rng::stream(8, "v"), 6);
        let s = SteeringVectorSet::shared(6, &v, &[1, 2]).unwrap();
        let ctx = HiddenState::random(6, 8, "ctx");
        let b = BehaviorSpec::binary(&[0, 2, 4], &[1, 3]).unwrap();
        let e = margin_estimate(&m, &s, &ctx, &b, 0.7).unwrap();
        let delta = m.steering_delta(&s.with_coefficient(0.7), &ctx).unwrap();
        let n: f64 = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u = m.unembedding();
        let direct: f64 = (0..6)
            .map(|k| {
                let a = (u.row(0)[k] + u.row(2)[k] + u.row(4)[k]) / 3.0;
                let z = (u.row(1)[k] + u.row(3)[k]) / 2.0;
                delta[k] / n * (a - z)
            })
            .sum();
        assert!((e.cluster - direct).abs() < 1e-12);
    }

    #[test]
    fn theorem2_origin_and_holds() {
        let m = LayeredModel::identity_family(8, 20, 2, 31).unwrap();
        let v = rng::unit_vec(&mut rng::stream(31, "v"), 8);
        let s = SteeringVectorSet::shared(8, &v, &[1, 2]).unwrap();
        let ctx = HiddenState::random(8, 31, "ctx");
        let spec = BehaviorSpec::binary(&[0], &[1]).unwrap().with_correct(3);
        for r in [0.0, 0.5, 2.0, 7.0] {
            let c = theorem2_realized_check(&m, &s, &ctx, &spec, r, 10).unwrap();
            let n = &c.noise;
            assert!((n.p_plus + n.p_minus - (1.0 - n.eps) * (1.0 - n.p0)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&n.alpha));
            assert_eq!(n.i_plus.len() + n.i_minus.len(), n.top.iter().filter(|&&t| t != 3).count());
            assert_ne!(c.verdict, Theorem2Verdict::Violated);
            if r == 0.0 {
                assert_eq!(c.p_correct, n.p0);
            }
        }
    }

    #[test]
    fn theorem2_skips_when_correct_is_lowest() {
        let x = [0.0, 0.1, 0.2, 0.3, 0.4];
        let (m, s) = construct::projection_instance(6, &x, 1.0, None, 4).unwrap();
        let spec = BehaviorSpec::binary(&[1], &[2]).unwrap().with_correct(0);
        let ctx = HiddenState::random(6, 2, "ctx");
        let c = theorem2_realized_check(&m, &s, &ctx, &spec, 1.0, 5).unwrap();
        assert_eq!(c.verdict, Theorem2Verdict::SkippedIMinusEmpty);
        let spec = spec.with_correct(4);
        let c = theorem2_realized_check(&m, &s, &ctx, &spec, 1.0, 5).unwrap();
        assert_eq!(c.verdict, Theorem2Verdict::SkippedIPlusEmpty);
    }

    #[test]
    fn soft_margin_profile_cases() {
        let (m, s, b) = planted(0.5);
        let ctx = HiddenState::random(8, 4, "ctx");
        let p = soft_margin_profile(&m, &s, &ctx, &b, 1.0).unwrap();
        assert_eq!(p.delta, 0.0);
        assert!(p.misclassified.is_empty());

        let mut spec = MarginSpec::new(8, 12, 0.5, 1.0, vec![0, 1], vec![3, 4, 5], 6);
        spec.misclassified = vec![Misclassified { token: 5, depth: 0.3 }];
        let (m, s) = construct::margin_instance(&spec).unwrap();
        let ctx = construct::orthogonal_context(&m, 6, "ctx").unwrap();
        let m = construct::plant_token_mass(&m, &ctx, 5, &[0, 1], 0.01).unwrap();
        let b = BehaviorSpec::binary(&[0, 1], &[3, 4, 5]).unwrap();
        let p = soft_margin_profile(&m, &s, &ctx, &b, 1.0).unwrap();
        assert_eq!(p.misclassified, vec![5]);
        assert!((p.delta - 0.01).abs() < 1e-9);
        assert!((p.depth - 0.3).abs() < 1e-9);

        // exhaustive scan over the whole vocabulary
        let base = m.next_token_distribution(&m.forward(&ctx).unwrap()).unwrap();
        let u = m.plant().unwrap().direction.clone();
        let x: Vec<f64> = (0..12).map(|t| linalg::dot(&u, m.unembedding().row(t))).collect();
        let floor = x[0].min(x[1]);
        let (mut mis, mut al) = (0.0, 0.0);
        for t in 0..12 {
            if [3, 4, 5].contains(&t) && x[t] > floor {
                mis += base.probs[t];
            }
            if t < 2 {
                al += base.probs[t];
            }
        }
        assert!((p.delta - mis / al).abs() < 1e-12);
    }
}

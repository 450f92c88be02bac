//! Planted-parameter constructions.
//!
//! Every construction here is a one-layer model whose layer scales the
//! residual component along a unit direction `u` by `λ`, with a single-layer
//! steering set injecting along `u`. The last-layer change is therefore
//! exactly `δr = r_e·λ·u`, and the projection `⟨u, U^T e_i⟩` of every
//! unembedding row is chosen by the caller.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{Family, HiddenState, Layer, LayeredModel, Plant, SteeringVectorSet};
use crate::rng;

/// Builds the one-layer planted model with row projections `projections[i]`
/// onto a seeded unit direction.
pub fn projection_instance(
    hidden_dim: usize,
    projections: &[f64],
    lambda: f64,
    margin: Option<f64>,
    seed: u64,
) -> Result<(LayeredModel, SteeringVectorSet)> {
    if hidden_dim == 0 || projections.is_empty() {
        return Err(Error::InvalidDimension(
            "hidden_dim and vocabulary must be non-empty".into(),
        ));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::precondition(format!("lambda must be > 0, got {lambda}")));
    }
    let u = rng::unit_vec(&mut rng::stream(seed, "direction"), hidden_dim);
    let mut rows_rng = rng::stream(seed, "unembedding");
    let rows = projections
        .iter()
        .map(|&x| {
            let g = rng::gaussian_vec(&mut rows_rng, hidden_dim);
            let mut row = linalg::sub(&g, &linalg::scale(linalg::dot(&g, &u), &u));
            linalg::axpy(x, &u, &mut row);
            row
        })
        .collect();
    let unembedding = Matrix::from_rows(rows)?;
    let mut emb_rng = rng::stream(seed, "embeddings");
    let embeddings = Matrix::from_rows(
        (0..projections.len())
            .map(|_| rng::gaussian_vec(&mut emb_rng, hidden_dim))
            .collect(),
    )?;
    let layer = Layer::DirectionalGain {
        direction: u.clone(),
        gain: lambda,
    };
    let steering = SteeringVectorSet::shared(hidden_dim, &u, &[1])?;
    let model = LayeredModel::from_parts(
        Family::MarginConstructed,
        seed,
        vec![layer],
        unembedding,
        embeddings,
        Some(Plant {
            direction: u,
            lambda,
            margin,
        }),
    )?;
    Ok((model, steering))
}

/// A misaligned token planted on the wrong side of the margin, `depth` above
/// the lowest aligned projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Misclassified {
    pub token: usize,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginSpec {
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub margin: f64,
    pub lambda: f64,
    pub aligned: Vec<usize>,
    pub misaligned: Vec<usize>,
    pub seed: u64,
    /// Width of the band each class occupies beyond the margin.
    pub spread: f64,
    /// Largest allowed |projection| of any unembedding row.
    pub row_norm_budget: f64,
    pub misclassified: Vec<Misclassified>,
}

impl MarginSpec {
    pub fn new(
        hidden_dim: usize,
        vocab_size: usize,
        margin: f64,
        lambda: f64,
        aligned: Vec<usize>,
        misaligned: Vec<usize>,
        seed: u64,
    ) -> Self {
        Self {
            hidden_dim,
            vocab_size,
            margin,
            lambda,
            aligned,
            misaligned,
            seed,
            spread: 0.5,
            row_norm_budget: 4.0,
            misclassified: Vec::new(),
        }
    }
}

/// Model plus single-layer steering set with `min ⟨u, U^T(e_i − e_j)⟩ = Δ`
/// over aligned `i` and (correctly classified) misaligned `j`.
///
/// The lowest-index aligned token sits at `+Δ/2` and the lowest-index
/// regular misaligned token at `−Δ/2`; the remaining class members are drawn
/// uniformly into bands of width `spread` beyond those.
pub fn margin_instance(spec: &MarginSpec) -> Result<(LayeredModel, SteeringVectorSet)> {
    let v = spec.vocab_size;
    if spec.aligned.is_empty() || spec.misaligned.is_empty() {
        return Err(Error::precondition("aligned and misaligned sets must be non-empty"));
    }
    if let Some(t) = spec.aligned.iter().chain(&spec.misaligned).find(|&&t| t >= v) {
        return Err(Error::precondition(format!("token {t} outside vocabulary of size {v}")));
    }
    if spec.aligned.iter().any(|t| spec.misaligned.contains(t)) {
        return Err(Error::precondition("aligned and misaligned sets intersect"));
    }
    if !(spec.margin > 0.0) || !(spec.lambda > 0.0) {
        return Err(Error::precondition("margin and lambda must be > 0"));
    }
    for m in &spec.misclassified {
        if !spec.misaligned.contains(&m.token) {
            return Err(Error::precondition(format!(
                "misclassified token {} is not in the misaligned set",
                m.token
            )));
        }
        if !(m.depth > 0.0) {
            return Err(Error::precondition("misclassified depth must be > 0"));
        }
    }
    let is_mis = |t: usize| spec.misclassified.iter().any(|m| m.token == t);
    let regular: Vec<usize> = {
        let mut r: Vec<usize> = spec.misaligned.iter().copied().filter(|&t| !is_mis(t)).collect();
        r.sort_unstable();
        r
    };
    if regular.is_empty() {
        return Err(Error::precondition(
            "at least one misaligned token must respect the margin",
        ));
    }
    let half = spec.margin / 2.0;
    let max_depth = spec
        .misclassified
        .iter()
        .map(|m| m.depth)
        .fold(0.0, f64::max);
    let extent = (half + spec.spread).max(half + max_depth);
    if extent > spec.row_norm_budget {
        return Err(Error::Infeasible(format!(
            "margin {} needs projections up to {extent}, beyond the row-norm budget {}",
            spec.margin, spec.row_norm_budget
        )));
    }

    let mut aligned = spec.aligned.clone();
    aligned.sort_unstable();
    let mut r = rng::stream(spec.seed, "projections");
    let mut x = vec![0.0; v];
    for xt in x.iter_mut() {
        // unscored tokens: anywhere
        *xt = spec.spread * r.sample::<f64, _>(rand_distr::StandardNormal);
    }
    for (k, &t) in aligned.iter().enumerate() {
        x[t] = if k == 0 {
            half
        } else {
            half + spec.spread * r.random::<f64>()
        };
    }
    for (k, &t) in regular.iter().enumerate() {
        x[t] = if k == 0 {
            -half
        } else {
            -half - spec.spread * r.random::<f64>()
        };
    }
    for m in &spec.misclassified {
        x[m.token] = half + m.depth;
    }
    projection_instance(spec.hidden_dim, &x, spec.lambda, Some(spec.margin), spec.seed)
}

/// Projections ordered by score: tokens with score `>= threshold` sit at
/// `Δ/2 + spread·U(0,1)`; every other token sits below `−Δ/2` at a depth
/// that increases as its score decreases, so lower scores always project
/// lower.
pub fn score_ordered_projections(
    scores: &[f64],
    threshold: f64,
    margin: f64,
    spread: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(threshold > -1.0 && threshold <= 1.0) {
        return Err(Error::precondition("threshold must lie in (-1, 1]"));
    }
    let mut r = rng::stream(seed, "score-projections");
    let half = margin / 2.0;
    let width = threshold + 1.0;
    Ok(scores
        .iter()
        .map(|&s| {
            let jitter = r.random::<f64>();
            if s >= threshold {
                half + spread * jitter
            } else {
                // band for score s: [base - 0.1·spread, base], base decreasing in gap
                let gap = ((threshold - s) / width).clamp(0.0, 1.0);
                -half - spread * gap - 0.1 * spread * jitter * gap
            }
        })
        .collect())
}

/// Planted logit-noise construction: `⟨u, U^T e_i⟩ ~ N(0, σ²)` for every token
/// except `correct`, whose projection is exactly 0.
pub fn planted_noise_instance(
    hidden_dim: usize,
    vocab_size: usize,
    lambda: f64,
    sigma: f64,
    correct: usize,
    seed: u64,
) -> Result<(LayeredModel, SteeringVectorSet)> {
    if correct >= vocab_size {
        return Err(Error::precondition("correct token outside vocabulary"));
    }
    let mut r = rng::stream(seed, "noise-projections");
    let x: Vec<f64> = (0..vocab_size)
        .map(|t| {
            let g: f64 = r.sample(rand_distr::StandardNormal);
            if t == correct {
                0.0
            } else {
                sigma * g
            }
        })
        .collect();
    projection_instance(hidden_dim, &x, lambda, None, seed)
}

/// Seeded unit context orthogonal to the model's planted direction.
pub fn orthogonal_context(model: &LayeredModel, seed: u64, label: &str) -> Result<HiddenState> {
    let plant = model
        .plant()
        .ok_or_else(|| Error::precondition("model has no planted direction"))?;
    let u = &plant.direction;
    let mut r = rng::stream(seed, label);
    loop {
        let g = rng::gaussian_vec(&mut r, model.hidden_dim());
        let g = linalg::sub(&g, &linalg::scale(linalg::dot(&g, u), u));
        if let Some(v) = linalg::normalized(&g) {
            return Ok(HiddenState::input(v));
        }
        if model.hidden_dim() == 1 {
            return Err(Error::precondition("no orthogonal complement in one dimension"));
        }
    }
}

/// Rewrites `token`'s unembedding row, without touching its projection onto
/// the planted direction, so that at `context` its unsteered probability is
/// exactly `ratio` times the total probability of `reference`.
pub fn plant_token_mass(
    model: &LayeredModel,
    context: &HiddenState,
    token: usize,
    reference: &[usize],
    ratio: f64,
) -> Result<LayeredModel> {
    let plant = model
        .plant()
        .ok_or_else(|| Error::precondition("model has no planted direction"))?;
    if reference.contains(&token) {
        return Err(Error::precondition("token cannot be in its own reference set"));
    }
    if !(ratio > 0.0) {
        return Err(Error::precondition("mass ratio must be > 0"));
    }
    let last = model.forward(context)?;
    let u = &plant.direction;
    let perp = linalg::sub(&last.vector, &linalg::scale(linalg::dot(&last.vector, u), u));
    let perp_norm = linalg::norm(&perp);
    if perp_norm < 1e-9 {
        return Err(Error::Infeasible(
            "context has no component orthogonal to the planted direction".into(),
        ));
    }
    let w = linalg::scale(1.0 / perp_norm, &perp);
    let logits = model.logits(&last)?;
    let max = reference
        .iter()
        .map(|&t| logits[t])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + reference
            .iter()
            .map(|&t| (logits[t] - max).exp())
            .sum::<f64>()
            .ln();
    let target = ratio.ln() + lse;
    let shift = (target - logits[token]) / perp_norm;
    let mut unembedding = model.unembedding().clone();
    linalg::axpy(shift, &w, unembedding.row_mut(token));
    LayeredModel::from_parts(
        model.family(),
        model.seed(),
        model.layers().to_vec(),
        unembedding,
        model.token_embeddings().clone(),
        model.plant().cloned(),
    )
}

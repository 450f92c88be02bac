//! Brute-force reference computations.
//!
//! Nothing here calls into `metrics` or `bounds`: logits are recomputed from
//! the last hidden state with error-free dot products, and every sum is
//! compensated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BehaviorSpec;
use crate::model::{HiddenState, LayeredModel, SteeringVectorSet};
use crate::rng;

pub const VOCAB_CAP: usize = 100_000;
pub const SEQUENCE_CAP: u128 = 1_000_000;
pub const MIN_SAMPLES: usize = 100;

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = CompensatedSum::default();
    xs.into_iter().for_each(|x| acc.add(x));
    acc.value()
}

/// Dot product with exact products (fused multiply-add residuals) and a
/// compensated running sum.
pub fn exact_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = CompensatedSum::default();
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        acc.add(p);
        acc.add(x.mul_add(*y, -p));
    }
    acc.value()
}

/// Softmax with compensated normalization.
pub fn reference_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z = compensated_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / z).collect()
}

fn reference_probs(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
) -> Result<Vec<f64>> {
    let last = model.forward_with_injection(steering, context)?;
    let u = model.unembedding();
    let logits: Vec<f64> = (0..u.rows()).map(|i| exact_dot(u.row(i), &last.vector)).collect();
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("oracle logit".into()));
    }
    Ok(reference_softmax(&logits))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForceBehavior {
    pub raw: f64,
    /// `None` when the scored mass is zero.
    pub renormalized: Option<f64>,
    pub scored_mass: f64,
    /// Probability of the designated correct token, if any.
    pub helpfulness: Option<f64>,
}

/// Behavior expectation and helpfulness by full-vocabulary summation.
pub fn brute_force_behavior(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    spec: &BehaviorSpec,
    r_e: f64,
) -> Result<BruteForceBehavior> {
    if model.vocab_size() > VOCAB_CAP {
        return Err(Error::CapExceeded(format!(
            "vocabulary {} exceeds oracle cap {VOCAB_CAP}",
            model.vocab_size()
        )));
    }
    let probs = reference_probs(model, &steering.with_coefficient(r_e), context)?;
    let (mut weighted, mut mass) = (CompensatedSum::default(), CompensatedSum::default());
    for (t, p) in probs.iter().enumerate() {
        if let Some(s) = spec.score(t) {
            weighted.add(s * p);
            mass.add(*p);
        }
    }
    let (raw, mass) = (weighted.value(), mass.value());
    Ok(BruteForceBehavior {
        raw,
        renormalized: (mass > 0.0).then(|| raw / mass),
        scored_mass: mass,
        helpfulness: spec.correct_token.and_then(|c| probs.get(c).copied()),
    })
}

/// Exact distribution over all length-`N` sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationResult {
    pub vocab_size: usize,
    pub length: usize,
    /// Indexed by sequence id `Σ t_k·V^(N−1−k)`, i.e. lexicographic order.
    pub probs: Vec<f64>,
    /// Expected sequence score: +1 iff every token is aligned, else −1.
    pub behavior: f64,
    /// Probability of the designated correct sequence, if any.
    pub helpfulness: Option<f64>,
}

impl EnumerationResult {
    pub fn sequence(&self, id: usize) -> Vec<usize> {
        let mut out = vec![0; self.length];
        let mut rest = id;
        for slot in out.iter_mut().rev() {
            *slot = rest % self.vocab_size;
            rest /= self.vocab_size;
        }
        out
    }

    pub fn id(&self, seq: &[usize]) -> usize {
        seq.iter().fold(0, |acc, &t| acc * self.vocab_size + t)
    }

    pub fn total(&self) -> f64 {
        compensated_sum(self.probs.iter().copied())
    }
}

/// Chain-rule probabilities of every length-`N` sequence.
pub fn brute_force_sequences(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    spec: &BehaviorSpec,
    n: usize,
    correct: Option<&[usize]>,
) -> Result<EnumerationResult> {
    let v = model.vocab_size();
    if n == 0 {
        return Err(Error::precondition("sequence length must be >= 1"));
    }
    let space = (v as u128).checked_pow(n as u32);
    let size = match space {
        Some(s) if s <= SEQUENCE_CAP => s as usize,
        _ => {
            return Err(Error::CapExceeded(format!(
                "V^N = {v}^{n} exceeds oracle cap {SEQUENCE_CAP}"
            )))
        }
    };
    if let Some(c) = correct {
        if c.len() != n || c.iter().any(|&t| t >= v) {
            return Err(Error::precondition("correct sequence must have N in-vocabulary tokens"));
        }
    }
    let mut probs = vec![0.0; size];
    expand(model, steering, context, n, 0, 1.0, &mut probs)?;
    let result = EnumerationResult {
        vocab_size: v,
        length: n,
        probs,
        behavior: 0.0,
        helpfulness: None,
    };
    let aligned_mass = compensated_sum(
        (0..size)
            .filter(|&id| result.sequence(id).iter().all(|&t| spec.is_aligned(t)))
            .map(|id| result.probs[id]),
    );
    let total = result.total();
    let helpfulness = correct.map(|c| result.probs[result.id(c)]);
    Ok(EnumerationResult {
        behavior: aligned_mass - (total - aligned_mass),
        helpfulness,
        ..result
    })
}

fn expand(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    remaining: usize,
    prefix_id: usize,
    prefix_p: f64,
    out: &mut [f64],
) -> Result<()> {
    let probs = reference_probs(model, steering, context)?;
    let v = probs.len();
    for (t, p) in probs.into_iter().enumerate() {
        let id = prefix_id * v + t;
        let q = prefix_p * p;
        if remaining == 1 {
            out[id] = q;
        } else {
            let next = model.advance_context(context, t)?;
            expand(model, steering, &next, remaining - 1, id, q, out)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub samples: usize,
    /// Mean sampled score (unscored tokens count 0): estimates the raw
    /// behavior expectation.
    pub behavior: f64,
    pub behavior_se: f64,
    pub helpfulness: Option<f64>,
    pub helpfulness_se: Option<f64>,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = compensated_sum(xs.iter().copied()) / n;
    let var = compensated_sum(xs.iter().map(|x| (x - m) * (x - m))) / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Sampled single-token behavior and helpfulness, inverse-CDF sampling from
/// a seeded stream.
pub fn monte_carlo_check(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    spec: &BehaviorSpec,
    r_e: f64,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if samples < MIN_SAMPLES {
        return Err(Error::precondition(format!("at least {MIN_SAMPLES} samples are required")));
    }
    let probs = reference_probs(model, &steering.with_coefficient(r_e), context)?;
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = CompensatedSum::default();
    for p in &probs {
        acc.add(*p);
        cdf.push(acc.value());
    }
    let mut r = rng::stream(seed, "oracle-monte-carlo");
    let mut scores = Vec::with_capacity(samples);
    let mut hits = Vec::with_capacity(samples);
    for _ in 0..samples {
        let u: f64 = r.random::<f64>() * cdf[cdf.len() - 1];
        let t = cdf.partition_point(|&c| c <= u).min(probs.len() - 1);
        scores.push(spec.score(t).unwrap_or(0.0));
        hits.push(f64::from(u8::from(Some(t) == spec.correct_token)));
    }
    let (behavior, behavior_se) = mean_and_se(&scores);
    let help = spec.correct_token.map(|_| mean_and_se(&hits));
    Ok(MonteCarloEstimate {
        samples,
        behavior,
        behavior_se,
        helpfulness: help.map(|h| h.0),
        helpfulness_se: help.map(|h| h.1),
    })
}

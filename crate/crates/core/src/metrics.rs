//! Alignment (behavior expectation) and helpfulness measured on model
//! distributions.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, HiddenState, LayeredModel, SteeringVectorSet, TokenDistribution};
use crate::rng;

/// Scored mass below which a probability-space renormalization loses
/// relative precision.
pub const MIN_MASS: f64 = 1e-12;
/// Largest `V^N` the exact sequence enumeration accepts.
pub const SEQUENCE_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorKind {
    Binary,
    Trinary,
    General,
}

/// Score map over the vocabulary plus the helpfulness designations.
///
/// Tokens absent from `scores` are unscored. Binary scores are ±1, trinary
/// scores are in {−1, 0, +1}, general scores anywhere in `[−1, 1]` with a
/// separating threshold `b_plus`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub kind: BehaviorKind,
    pub scores: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_plus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_token: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_set: Option<Vec<usize>>,
}

fn disjoint(sets: &[&[usize]]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for set in sets {
        for &t in *set {
            if !seen.insert(t) {
                return Err(Error::precondition(format!(
                    "token {t} appears in more than one behavior class"
                )));
            }
        }
    }
    Ok(())
}

impl BehaviorSpec {
    pub fn binary(aligned: &[usize], misaligned: &[usize]) -> Result<Self> {
        disjoint(&[aligned, misaligned])?;
        let scores = aligned
            .iter()
            .map(|&t| (t, 1.0))
            .chain(misaligned.iter().map(|&t| (t, -1.0)))
            .collect();
        Ok(Self {
            kind: BehaviorKind::Binary,
            scores,
            b_plus: None,
            correct_token: None,
            choice_set: None,
        })
    }

    pub fn trinary(aligned: &[usize], neutral: &[usize], misaligned: &[usize]) -> Result<Self> {
        disjoint(&[aligned, neutral, misaligned])?;
        let scores = aligned
            .iter()
            .map(|&t| (t, 1.0))
            .chain(neutral.iter().map(|&t| (t, 0.0)))
            .chain(misaligned.iter().map(|&t| (t, -1.0)))
            .collect();
        Ok(Self {
            kind: BehaviorKind::Trinary,
            scores,
            b_plus: None,
            correct_token: None,
            choice_set: None,
        })
    }

    pub fn general(scores: BTreeMap<usize, f64>, b_plus: f64) -> Result<Self> {
        if let Some((t, s)) = scores.iter().find(|(_, s)| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::precondition(format!("score {s} of token {t} outside [-1, 1]")));
        }
        if !(b_plus > -1.0 && b_plus <= 1.0) {
            return Err(Error::precondition(format!("b_plus {b_plus} outside (-1, 1]")));
        }
        Ok(Self {
            kind: BehaviorKind::General,
            scores,
            b_plus: Some(b_plus),
            correct_token: None,
            choice_set: None,
        })
    }

    pub fn with_correct(mut self, token: usize) -> Self {
        self.correct_token = Some(token);
        self
    }

    pub fn with_choices(mut self, choices: Vec<usize>) -> Self {
        self.choice_set = Some(choices);
        self
    }

    /// Re-checks the kind-specific invariants (for specs built field by field).
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(t) = self.scores.keys().find(|&&t| t >= vocab_size) {
            return Err(Error::precondition(format!("scored token {t} outside vocabulary")));
        }
        let allowed: &[f64] = match self.kind {
            BehaviorKind::Binary => &[-1.0, 1.0],
            BehaviorKind::Trinary => &[-1.0, 0.0, 1.0],
            BehaviorKind::General => &[],
        };
        for (t, s) in &self.scores {
            if !(-1.0..=1.0).contains(s) || (!allowed.is_empty() && !allowed.contains(s)) {
                return Err(Error::precondition(format!(
                    "score {s} of token {t} not allowed for {:?} behavior",
                    self.kind
                )));
            }
        }
        if self.kind == BehaviorKind::General {
            match self.b_plus {
                Some(b) if b > -1.0 && b <= 1.0 => {}
                _ => return Err(Error::precondition("general behavior needs b_plus in (-1, 1]")),
            }
        }
        for t in self.correct_token.iter().chain(self.choice_set.iter().flatten()) {
            if *t >= vocab_size {
                return Err(Error::precondition(format!("token {t} outside vocabulary")));
            }
        }
        Ok(())
    }

    pub fn score(&self, token: usize) -> Option<f64> {
        self.scores.get(&token).copied()
    }

    /// Tokens on the positive side: score +1 (binary/trinary) or `>= b_plus`.
    pub fn aligned(&self) -> Vec<usize> {
        let cut = self.b_plus.unwrap_or(1.0);
        self.scores
            .iter()
            .filter(|(_, &s)| s >= cut)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Tokens scored −1 (binary/trinary) or below `b_plus` (general).
    pub fn misaligned(&self) -> Vec<usize> {
        self.scores
            .iter()
            .filter(|(_, &s)| match self.kind {
                BehaviorKind::General => s < self.b_plus.unwrap_or(1.0),
                _ => s == -1.0,
            })
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn neutral(&self) -> Vec<usize> {
        match self.kind {
            BehaviorKind::Trinary => self
                .scores
                .iter()
                .filter(|(_, &s)| s == 0.0)
                .map(|(&t, _)| t)
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn is_aligned(&self, token: usize) -> bool {
        self.score(token)
            .is_some_and(|s| s >= self.b_plus.unwrap_or(1.0))
    }

    fn correct(&self) -> Result<usize> {
        self.correct_token
            .ok_or_else(|| Error::precondition("behavior spec has no correct token"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorMode {
    /// `Σ score·P` over scored tokens.
    Raw,
    /// Raw value divided by the scored probability mass.
    #[default]
    Renormalized,
}

impl std::fmt::Display for BehaviorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BehaviorMode::Raw => "raw",
            BehaviorMode::Renormalized => "renormalized",
        })
    }
}

pub fn behavior_expectation(
    dist: &TokenDistribution,
    spec: &BehaviorSpec,
    mode: BehaviorMode,
) -> Result<f64> {
    let lookup = |t: usize| {
        dist.probs
            .get(t)
            .copied()
            .ok_or_else(|| Error::precondition(format!("scored token {t} outside vocabulary")))
    };
    match mode {
        BehaviorMode::Raw => {
            let mut weighted = 0.0;
            for (&t, &s) in &spec.scores {
                weighted += s * lookup(t)?;
            }
            Ok(weighted)
        }
        BehaviorMode::Renormalized => {
            let tokens: Vec<usize> = spec.scores.keys().copied().collect();
            let w = restricted_weights(dist, &tokens)?;
            let (mut weighted, mut mass) = (0.0, 0.0);
            for (s, wt) in spec.scores.values().zip(&w) {
                weighted += s * wt;
                mass += wt;
            }
            Ok(weighted / mass)
        }
    }
}

/// `exp(logit − max)` over `tokens`: the distribution conditioned on
/// `tokens`, unnormalized, computed from logits so it never underflows.
fn restricted_weights(dist: &TokenDistribution, tokens: &[usize]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::precondition("no tokens to renormalize over"));
    }
    let mut logits = Vec::with_capacity(tokens.len());
    for &t in tokens {
        logits.push(
            *dist
                .logits
                .get(t)
                .ok_or_else(|| Error::precondition(format!("token {t} outside vocabulary")))?,
        );
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(logits.iter().map(|l| (l - max).exp()).collect())
}

/// Probability of the designated correct token.
pub fn helpfulness(dist: &TokenDistribution, spec: &BehaviorSpec) -> Result<f64> {
    let c = spec.correct()?;
    dist.probs
        .get(c)
        .copied()
        .ok_or_else(|| Error::precondition("correct token outside vocabulary"))
}

/// Probability of the correct token relative to the choice set.
pub fn helpfulness_relative(dist: &TokenDistribution, spec: &BehaviorSpec) -> Result<f64> {
    let c = spec.correct()?;
    let choices = spec
        .choice_set
        .as_ref()
        .ok_or_else(|| Error::precondition("behavior spec has no choice set"))?;
    if !choices.contains(&c) {
        return Err(Error::precondition("correct token is not in the choice set"));
    }
    let w = restricted_weights(dist, choices)?;
    let k = choices.iter().position(|&t| t == c).expect("checked above");
    Ok(w[k] / w.iter().sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SequenceMethod {
    Enumerate,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceEstimate {
    pub value: f64,
    /// Standard error of a sampled estimate; `None` for exact enumeration.
    pub std_error: Option<f64>,
}

/// Expected sequence score over `steps`-token replies, where a reply scores
/// +1 iff every token is aligned and −1 otherwise.
pub fn sequence_behavior_expectation(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    spec: &BehaviorSpec,
    steps: usize,
    method: SequenceMethod,
) -> Result<SequenceEstimate> {
    if steps == 0 {
        return Err(Error::precondition("sequence length must be >= 1"));
    }
    match method {
        SequenceMethod::Enumerate => {
            let space = (model.vocab_size() as u128).checked_pow(steps as u32);
            if space.is_none_or(|s| s > SEQUENCE_ENUMERATION_CAP) {
                return Err(Error::CapExceeded(format!(
                    "V^N = {}^{steps} exceeds {SEQUENCE_ENUMERATION_CAP}",
                    model.vocab_size()
                )));
            }
            let aligned = spec.aligned();
            let p = all_aligned_probability(model, steering, context, &aligned, steps)?;
            Ok(SequenceEstimate {
                value: 2.0 * p - 1.0,
                std_error: None,
            })
        }
        SequenceMethod::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(Error::precondition("monte-carlo needs at least 2 samples"));
            }
            let mut r = rng::stream(seed, "sequence-behavior");
            let mut hits = 0usize;
            for _ in 0..samples {
                let mut ctx = context.clone();
                let mut ok = true;
                for _ in 0..steps {
                    let dist = model.steered_distribution(steering, &ctx)?;
                    let t = model::sample_index(&dist.probs, r.random::<f64>());
                    if !spec.is_aligned(t) {
                        ok = false;
                        break;
                    }
                    ctx = model.advance_context(&ctx, t)?;
                }
                hits += usize::from(ok);
            }
            let n = samples as f64;
            let p = hits as f64 / n;
            let mean = 2.0 * p - 1.0;
            // scores are ±1: sample variance = 4·p(1−p)·n/(n−1)
            let var = 4.0 * p * (1.0 - p) * n / (n - 1.0);
            Ok(SequenceEstimate {
                value: mean,
                std_error: Some((var / n).sqrt()),
            })
        }
    }
}

/// Depth-first sum over aligned prefixes in lexicographic order.
fn all_aligned_probability(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    aligned: &[usize],
    remaining: usize,
) -> Result<f64> {
    let dist = model.steered_distribution(steering, context)?;
    let mut total = 0.0;
    for &t in aligned {
        let p = dist.probs[t];
        if remaining == 1 {
            total += p;
        } else if p > 0.0 {
            let next = model.advance_context(context, t)?;
            total += p * all_aligned_probability(model, steering, &next, aligned, remaining - 1)?;
        }
    }
    Ok(total)
}

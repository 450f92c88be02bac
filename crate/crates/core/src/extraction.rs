//! Steering directions from contrastive representation pairs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{HiddenState, LayeredModel, SteeringVectorSet};

pub const POWER_ITERATION_CAP: usize = 1000;
pub const POWER_ITERATION_TOL: f64 = 1e-12;
const DEGENERATE_NORM: f64 = 1e-12;
const CONTRAST_FORMAT: &str = "steerlab-contrast";

/// Per-layer difference vectors `r_good − r_bad`, one per stimulus pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastDataset {
    pub pair_count: usize,
    pub layers: BTreeMap<usize, Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct ContrastDocument {
    format: String,
    version: u32,
    data: ContrastDataset,
}

impl ContrastDataset {
    pub fn differences(&self, layer: usize) -> Option<&[Vec<f64>]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ContrastDocument {
            format: CONTRAST_FORMAT.into(),
            version: 1,
            data: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ContrastDocument = serde_json::from_str(text)?;
        if doc.format != CONTRAST_FORMAT {
            return Err(Error::precondition(format!(
                "expected {CONTRAST_FORMAT} document, found {}",
                doc.format
            )));
        }
        let data = doc.data;
        let dim = data
            .layers
            .values()
            .flat_map(|v| v.first())
            .map(Vec::len)
            .next();
        for diffs in data.layers.values() {
            if diffs.len() != data.pair_count {
                return Err(Error::precondition("pair count inconsistent across layers"));
            }
            if let Some(d) = dim {
                if let Some(bad) = diffs.iter().find(|v| v.len() != d) {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: bad.len(),
                    });
                }
            }
        }
        Ok(data)
    }
}

/// Forward both contexts of every pair and record `positive − negative` at
/// each requested layer (layers are `1..=L`).
pub fn collect_differences(
    model: &LayeredModel,
    pairs: &[(HiddenState, HiddenState)],
    layers: &[usize],
) -> Result<ContrastDataset> {
    if pairs.is_empty() {
        return Err(Error::precondition("at least one stimulus pair is required"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > model.num_layers()) {
        return Err(Error::precondition(format!(
            "layer {l} outside 1..={}",
            model.num_layers()
        )));
    }
    let mut out: BTreeMap<usize, Vec<Vec<f64>>> = layers.iter().map(|&l| (l, Vec::new())).collect();
    for (pos, neg) in pairs {
        for (&layer, diffs) in out.iter_mut() {
            let p = model.hidden_at(None, pos, layer)?;
            let n = model.hidden_at(None, neg, layer)?;
            diffs.push(linalg::sub(&p.vector, &n.vector));
        }
    }
    Ok(ContrastDataset {
        pair_count: pairs.len(),
        layers: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMode {
    Pca,
    MeanCenter,
}

fn mean(diffs: &[Vec<f64>]) -> Vec<f64> {
    let d = diffs[0].len();
    let mut m = vec![0.0; d];
    for v in diffs {
        linalg::axpy(1.0, v, &mut m);
    }
    linalg::scale(1.0 / diffs.len() as f64, &m)
}

/// `(1/n) Σ ⟨v, d_k⟩²`, the uncentered second-moment objective.
pub fn second_moment_objective(diffs: &[Vec<f64>], v: &[f64]) -> f64 {
    diffs.iter().map(|d| linalg::dot(d, v).powi(2)).sum::<f64>() / diffs.len() as f64
}

/// `M·v` with `M = (1/n) Σ d_k d_kᵀ`, without forming `M`.
fn moment_apply(diffs: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for d in diffs {
        linalg::axpy(linalg::dot(d, v), d, &mut out);
    }
    linalg::scale(1.0 / diffs.len() as f64, &out)
}

fn power_iteration(diffs: &[Vec<f64>], start: Vec<f64>) -> Option<Vec<f64>> {
    let mut v = start;
    for _ in 0..POWER_ITERATION_CAP {
        let next = linalg::normalized(&moment_apply(diffs, &v))?;
        let diff = linalg::norm(&linalg::sub(&next, &v));
        v = next;
        if diff < POWER_ITERATION_TOL {
            break;
        }
    }
    Some(v)
}

/// Flip `v` so that `⟨v, reference⟩ ≥ 0`; when that product vanishes, make
/// the first nonzero coordinate positive.
fn fix_sign(mut v: Vec<f64>, reference: &[f64]) -> Vec<f64> {
    let along = linalg::dot(&v, reference);
    let flip = if along.abs() > DEGENERATE_NORM {
        along < 0.0
    } else {
        v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0)
    };
    if flip {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

pub fn extract_direction(diffs: &[Vec<f64>], mode: ExtractionMode) -> Result<Vec<f64>> {
    if diffs.is_empty() {
        return Err(Error::precondition("at least one difference vector is required"));
    }
    let d = diffs[0].len();
    if let Some(bad) = diffs.iter().find(|v| v.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    let m = mean(diffs);
    let mean_norm = linalg::norm(&m);
    match mode {
        ExtractionMode::MeanCenter => {
            if mean_norm < DEGENERATE_NORM {
                return Err(Error::DegenerateDirection(format!(
                    "mean difference has norm {mean_norm:e}"
                )));
            }
            Ok(linalg::scale(1.0 / mean_norm, &m))
        }
        ExtractionMode::Pca => {
            // Start from the normalized mean and from the coordinate axis with
            // the largest second moment (never in the null space), keep the
            // better Rayleigh quotient.
            let diag: Vec<f64> = (0..d)
                .map(|k| diffs.iter().map(|v| v[k] * v[k]).sum::<f64>())
                .collect();
            let (k_max, &diag_max) = diag
                .iter()
                .enumerate()
                .fold((0, &diag[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            if diag_max == 0.0 {
                return Err(Error::DegenerateDirection("all differences are zero".into()));
            }
            let mut axis = vec![0.0; d];
            axis[k_max] = 1.0;
            let mut starts = Vec::with_capacity(2);
            if mean_norm >= DEGENERATE_NORM {
                starts.push(linalg::scale(1.0 / mean_norm, &m));
            }
            starts.push(axis);
            let best = starts
                .into_iter()
                .filter_map(|s| power_iteration(diffs, s))
                .map(|v| (second_moment_objective(diffs, &v), v))
                .fold(None::<(f64, Vec<f64>)>, |acc, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                })
                .ok_or_else(|| Error::DegenerateDirection("moment matrix is zero".into()))?;
            Ok(fix_sign(best.1, &m))
        }
    }
}

/// Steering set from per-layer directions; every direction is normalized and
/// the coefficient starts at 0.
pub fn assemble_steering_set(
    dim: usize,
    directions: BTreeMap<usize, Vec<f64>>,
    active_layers: BTreeSet<usize>,
) -> Result<SteeringVectorSet> {
    SteeringVectorSet::new(dim, directions, active_layers, 0.0)
}

/// Extracts one direction per layer of `data` and activates all of them.
pub fn steering_from_contrast(
    data: &ContrastDataset,
    dim: usize,
    mode: ExtractionMode,
) -> Result<SteeringVectorSet> {
    let mut directions = BTreeMap::new();
    for (&layer, diffs) in &data.layers {
        directions.insert(layer, extract_direction(diffs, mode)?);
    }
    let active = directions.keys().copied().collect();
    assemble_steering_set(dim, directions, active)
}

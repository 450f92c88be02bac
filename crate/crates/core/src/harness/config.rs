//! Experiment configuration: parsing, defaults and validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bounds::Kappa;
use crate::error::{Error, Result};
use crate::extraction::ExtractionMode;
use crate::metrics::{BehaviorKind, BehaviorSpec};
use crate::model::Family;

/// `start:stop:step`; points are `i·step` for integer `i`, so 0 is exact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

const GRID_SLACK: f64 = 1e-9;

impl GridSpec {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        let g = Self { start, stop, step };
        g.check()?;
        Ok(g)
    }

    fn check(&self) -> Result<()> {
        let (start, stop, step) = (self.start, self.stop, self.step);
        if ![start, stop, step].iter().all(|x| x.is_finite()) {
            return Err(Error::config("grid", "grid values must be finite"));
        }
        if !(step > 0.0) {
            return Err(Error::config("grid", format!("step must be > 0, got {step}")));
        }
        if start > stop {
            return Err(Error::config("grid", "start must not exceed stop"));
        }
        if start > 0.0 || stop < 0.0 {
            return Err(Error::config(
                "grid",
                format!("grid {self} must contain 0 (start <= 0 <= stop)"),
            ));
        }
        let i0 = start / step;
        if (i0 - i0.round()).abs() > GRID_SLACK {
            return Err(Error::config("grid", "start must be an integer multiple of step"));
        }
        if self.len() > 1_000_000 {
            return Err(Error::config("grid", "grid has more than 10^6 points"));
        }
        Ok(())
    }

    fn index_range(&self) -> (i64, i64) {
        let i0 = (self.start / self.step).round() as i64;
        let i1 = (self.stop / self.step + GRID_SLACK).floor() as i64;
        (i0, i1)
    }

    pub fn len(&self) -> usize {
        let (i0, i1) = self.index_range();
        (i1 - i0 + 1).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ascending grid points.
    pub fn points(&self) -> Vec<f64> {
        let (i0, i1) = self.index_range();
        (i0..=i1).map(|i| i as f64 * self.step).collect()
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.stop, self.step)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::config("grid", format!("expected start:stop:step, got {s:?}")));
        }
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::config("grid", format!("not a number: {p:?}")))
        };
        GridSpec::new(num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }
}

impl Serialize for GridSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GridSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|e: Error| serde::de::Error::custom(e.to_string()))
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 10.0,
            step: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Thm1,
    Thm2,
    Cor1,
    SoftMargin,
    Trinary,
    General,
    MultiToken,
    PreferenceEquiv,
    Assumptions,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::Thm1 => "thm1",
            Check::Thm2 => "thm2",
            Check::Cor1 => "cor1",
            Check::SoftMargin => "soft-margin",
            Check::Trinary => "trinary",
            Check::General => "general",
            Check::MultiToken => "multi-token",
            Check::PreferenceEquiv => "preference-equiv",
            Check::Assumptions => "assumptions",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisclassifiedConfig {
    pub token: usize,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub delta: f64,
    pub lambda: f64,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_budget")]
    pub row_norm_budget: f64,
    #[serde(default)]
    pub misclassified: Vec<MisclassifiedConfig>,
}

fn default_spread() -> f64 {
    0.5
}

fn default_budget() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "one")]
    pub num_layers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<MarginConfig>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteeringSource {
    #[default]
    Planted,
    Extracted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringConfig {
    #[serde(default)]
    pub source: SteeringSource,
    /// Active layers; all layers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_mode")]
    pub mode: ExtractionMode,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Per-coordinate noise scale of extraction stimuli.
    #[serde(default = "default_stimulus_noise")]
    pub noise: f64,
}

fn default_mode() -> ExtractionMode {
    ExtractionMode::Pca
}

fn default_pairs() -> usize {
    64
}

fn default_stimulus_noise() -> f64 {
    0.1
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            source: SteeringSource::Planted,
            layers: None,
            mode: default_mode(),
            pairs: default_pairs(),
            noise: default_stimulus_noise(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorConfig {
    #[serde(default = "default_kind")]
    pub kind: BehaviorKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aligned: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub misaligned: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub neutral: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_plus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_token: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_set: Option<Vec<usize>>,
}

fn default_kind() -> BehaviorKind {
    BehaviorKind::Binary
}

impl BehaviorConfig {
    pub fn to_spec(&self) -> Result<BehaviorSpec> {
        let wrap = |e: Error| Error::config("behavior", e.to_string());
        let mut spec = match self.kind {
            BehaviorKind::Binary => {
                if self.aligned.is_empty() || self.misaligned.is_empty() {
                    return Err(Error::config(
                        "behavior",
                        "binary behavior needs non-empty aligned and misaligned sets",
                    ));
                }
                BehaviorSpec::binary(&self.aligned, &self.misaligned).map_err(wrap)?
            }
            BehaviorKind::Trinary => {
                if self.aligned.is_empty() || self.misaligned.is_empty() {
                    return Err(Error::config(
                        "behavior",
                        "trinary behavior needs non-empty aligned and misaligned sets",
                    ));
                }
                BehaviorSpec::trinary(&self.aligned, &self.neutral, &self.misaligned).map_err(wrap)?
            }
            BehaviorKind::General => {
                let b = self
                    .b_plus
                    .ok_or_else(|| Error::config("behavior.b_plus", "general behavior needs b_plus"))?;
                if self.scores.is_empty() {
                    return Err(Error::config("behavior.scores", "general behavior needs scores"));
                }
                BehaviorSpec::general(self.scores.clone(), b).map_err(wrap)?
            }
        };
        spec.correct_token = self.correct_token;
        spec.choice_set = self.choice_set.clone();
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitWindows {
    /// Window of the `λ` norm-curve fit; defaults to the non-negative grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tanh: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub helpfulness: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub steering: SteeringConfig,
    pub behavior: BehaviorConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_queries")]
    pub queries: usize,
    #[serde(rename = "T", default = "default_t")]
    pub t: usize,
    #[serde(rename = "N", default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub kappa: Kappa,
    #[serde(default)]
    pub fit_windows: FitWindows,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub checks: BTreeSet<Check>,
}

fn default_queries() -> usize {
    16
}

fn default_t() -> usize {
    10
}

fn default_n() -> usize {
    3
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("steerlab-out")
}

/// Parses and validates a configuration document; unknown keys and type
/// errors are reported with their path.
pub fn validate_config(document: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(document);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    de.end()
        .map_err(|e| Error::config(".", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Canonical serialization: the bytes the manifest hash covers.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn active_layers(&self) -> Vec<usize> {
        match &self.steering.layers {
            Some(l) => l.clone(),
            None => (1..=self.model.num_layers).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.hidden_dim == 0 || m.vocab_size == 0 || m.num_layers == 0 {
            return Err(Error::config("model", "hidden_dim, vocab_size and num_layers must be >= 1"));
        }
        match (m.family, &m.margin) {
            (Family::MarginConstructed, None) => {
                return Err(Error::config("model.margin", "margin-constructed family needs a margin section"))
            }
            (Family::MarginConstructed, Some(mc)) => {
                if m.num_layers != 1 {
                    return Err(Error::config("model.num_layers", "margin-constructed models have exactly 1 layer"));
                }
                if !(mc.delta > 0.0) || !(mc.lambda > 0.0) || !(mc.spread > 0.0) {
                    return Err(Error::config("model.margin", "delta, lambda and spread must be > 0"));
                }
            }
            (_, Some(_)) => {
                return Err(Error::config("model.margin", "margin section only applies to the margin-constructed family"))
            }
            _ => {}
        }
        let layers = self.active_layers();
        if let Some(l) = layers.iter().find(|&&l| l == 0 || l > m.num_layers) {
            return Err(Error::config("steering.layers", format!("layer {l} outside 1..={}", m.num_layers)));
        }
        if m.family == Family::MarginConstructed
            && self.steering.source == SteeringSource::Planted
            && layers != [1]
        {
            return Err(Error::config("steering.layers", "planted margin steering acts on layer 1 only"));
        }
        if self.steering.source == SteeringSource::Extracted && self.steering.pairs == 0 {
            return Err(Error::config("steering.pairs", "extraction needs at least one pair"));
        }
        if !(self.steering.noise >= 0.0) {
            return Err(Error::config("steering.noise", "noise must be >= 0"));
        }
        let spec = self.behavior.to_spec()?;
        spec.validate(m.vocab_size)
            .map_err(|e| Error::config("behavior", e.to_string()))?;
        if let (Some(c), Some(set)) = (self.behavior.correct_token, &self.behavior.choice_set) {
            if !set.contains(&c) {
                return Err(Error::config("behavior.choice_set", "choice_set must contain correct_token"));
            }
        }
        if let Some(set) = &self.behavior.choice_set {
            if set.is_empty() {
                return Err(Error::config("behavior.choice_set", "choice_set must not be empty"));
            }
        }
        if let Some(mc) = &m.margin {
            for (k, mis) in mc.misclassified.iter().enumerate() {
                if !self.behavior.misaligned.contains(&mis.token) {
                    return Err(Error::config(
                        format!("model.margin.misclassified[{k}]"),
                        "misclassified token must be misaligned",
                    ));
                }
            }
        }
        self.grid.check()?;
        if self.queries == 0 {
            return Err(Error::config("queries", "at least one query is required"));
        }
        if self.t < 3 || self.t > m.vocab_size {
            return Err(Error::config("T", format!("T must lie in 3..={}", m.vocab_size)));
        }
        if self.n == 0 {
            return Err(Error::config("N", "N must be >= 1"));
        }
        let has_correct = self.behavior.correct_token.is_some() || self.behavior.choice_set.is_some();
        for check in &self.checks {
            let need = match check {
                Check::Thm2 if !has_correct => Some("a correct_token or choice_set"),
                Check::Thm1 | Check::Cor1 | Check::SoftMargin | Check::MultiToken
                    if self.behavior.kind != BehaviorKind::Binary =>
                {
                    Some("a binary behavior")
                }
                Check::Trinary if self.behavior.kind != BehaviorKind::Trinary => Some("a trinary behavior"),
                Check::General if self.behavior.kind != BehaviorKind::General => Some("a general behavior"),
                _ => None,
            };
            if let Some(need) = need {
                return Err(Error::config("checks", format!("check {} needs {need}", check.name())));
            }
        }
        let span = self.grid.points();
        let (lo, hi) = (span[0], span[span.len() - 1]);
        for (name, w) in [
            ("lambda", self.fit_windows.lambda),
            ("tanh", self.fit_windows.tanh),
            ("helpfulness", self.fit_windows.helpfulness),
        ] {
            if let Some([a, b]) = w {
                if !(a <= b) || a < lo || b > hi {
                    return Err(Error::config(
                        format!("fit_windows.{name}"),
                        format!("window [{a}, {b}] must lie inside the grid span [{lo}, {hi}]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

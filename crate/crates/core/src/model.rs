//! Synthetic layered residual models with a softmax head.
//!
//! A [`LayeredModel`] maps a layer-0 hidden state through `L` layer maps and
//! reads next-token logits off the final state with the unembedding matrix.
//! Steering adds `r_e · v^(l)` to the residual stream before layer `l`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng;

/// Tolerance on the unit-norm invariant of stored steering directions.
pub const UNIT_NORM_TOL: f64 = 1e-12;

const MODEL_FORMAT: &str = "steerlab-model";
const STEERING_FORMAT: &str = "steerlab-steering";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Identity,
    Mlp,
    MarginConstructed,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::Identity => "identity",
            Family::Mlp => "mlp",
            Family::MarginConstructed => "margin-constructed",
        };
        f.write_str(s)
    }
}

/// One residual-stream map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Identity,
    /// `h + w_out · tanh(w_in · h)`
    ResidualMlp { w_in: Matrix, w_out: Matrix },
    /// `h + (gain - 1)·⟨u, h⟩·u`: scales the component along the unit vector `u`.
    DirectionalGain { direction: Vec<f64>, gain: f64 },
}

impl Layer {
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        match self {
            Layer::Identity => h.to_vec(),
            Layer::ResidualMlp { w_in, w_out } => {
                let pre = w_in.matvec(h);
                let act: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
                let mut out = h.to_vec();
                for (o, delta) in out.iter_mut().zip(w_out.matvec(&act)) {
                    *o += delta;
                }
                out
            }
            Layer::DirectionalGain { direction, gain } => {
                let mut out = h.to_vec();
                let along = linalg::dot(direction, h);
                linalg::axpy((gain - 1.0) * along, direction, &mut out);
                out
            }
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        match self {
            Layer::Identity => Ok(()),
            Layer::ResidualMlp { w_in, w_out } => {
                w_in.check_shape()?;
                w_out.check_shape()?;
                if w_in.cols() != d || w_out.rows() != d || w_out.cols() != w_in.rows() {
                    return Err(Error::InvalidDimension(format!(
                        "mlp layer shapes {}x{} / {}x{} incompatible with hidden dim {d}",
                        w_in.rows(),
                        w_in.cols(),
                        w_out.rows(),
                        w_out.cols()
                    )));
                }
                if !w_in.is_finite() || !w_out.is_finite() {
                    return Err(Error::NonFinite("mlp layer weights".into()));
                }
                Ok(())
            }
            Layer::DirectionalGain { direction, gain } => {
                if direction.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: direction.len(),
                    });
                }
                if !gain.is_finite() || direction.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("directional gain layer".into()));
                }
                Ok(())
            }
        }
    }
}

/// Parameters planted by a margin construction; stored verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub direction: Vec<f64>,
    pub lambda: f64,
    pub margin: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredModel {
    family: Family,
    hidden_dim: usize,
    vocab_size: usize,
    seed: u64,
    layers: Vec<Layer>,
    unembedding: Matrix,
    token_embeddings: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plant: Option<Plant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub vector: Vec<f64>,
    pub layer: usize,
}

impl HiddenState {
    pub fn input(vector: Vec<f64>) -> Self {
        Self { vector, layer: 0 }
    }

    /// Seeded unit-norm layer-0 state.
    pub fn random(dim: usize, seed: u64, label: &str) -> Self {
        let mut r = rng::stream(seed, label);
        Self::input(rng::unit_vec(&mut r, dim))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i} = {}", logits[i])));
        }
        let probs = softmax(&logits);
        Ok(Self { logits, probs })
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    /// Most probable token; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-layer unit directions plus one shared signed coefficient `r_e`.
///
/// Layers are numbered `1..=L`; a layer outside `active_layers` contributes
/// the zero vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringVectorSet {
    dim: usize,
    directions: BTreeMap<usize, Vec<f64>>,
    active_layers: BTreeSet<usize>,
    coefficient: f64,
}

impl SteeringVectorSet {
    /// Normalizes every direction; rejects zero or non-finite directions and
    /// active layers without a direction.
    pub fn new(
        dim: usize,
        directions: BTreeMap<usize, Vec<f64>>,
        active_layers: BTreeSet<usize>,
        coefficient: f64,
    ) -> Result<Self> {
        let mut unit = BTreeMap::new();
        for (layer, v) in directions {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            let u = linalg::normalized(&v).ok_or_else(|| {
                Error::DegenerateDirection(format!("direction for layer {layer} has zero norm"))
            })?;
            unit.insert(layer, u);
        }
        if let Some(missing) = active_layers.iter().find(|l| !unit.contains_key(l)) {
            return Err(Error::precondition(format!(
                "active layer {missing} has no direction"
            )));
        }
        if !coefficient.is_finite() {
            return Err(Error::NonFinite("steering coefficient".into()));
        }
        Ok(Self {
            dim,
            directions: unit,
            active_layers,
            coefficient,
        })
    }

    /// A set that injects nothing.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            directions: BTreeMap::new(),
            active_layers: BTreeSet::new(),
            coefficient: 0.0,
        }
    }

    /// One shared unit direction injected at each of `layers`.
    pub fn shared(dim: usize, direction: &[f64], layers: &[usize]) -> Result<Self> {
        let directions = layers.iter().map(|&l| (l, direction.to_vec())).collect();
        Self::new(dim, directions, layers.iter().copied().collect(), 0.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    pub fn with_coefficient(&self, coefficient: f64) -> Self {
        Self {
            coefficient,
            ..self.clone()
        }
    }

    pub fn active_layers(&self) -> &BTreeSet<usize> {
        &self.active_layers
    }

    pub fn directions(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.directions
    }

    /// Direction injected at `layer`, or `None` when the layer is inactive.
    pub fn injected(&self, layer: usize) -> Option<&[f64]> {
        if self.active_layers.contains(&layer) {
            self.directions.get(&layer).map(Vec::as_slice)
        } else {
            None
        }
    }

    /// Direction at `layer`, zero vector for inactive layers.
    pub fn direction(&self, layer: usize) -> Vec<f64> {
        self.injected(layer)
            .map_or_else(|| vec![0.0; self.dim], <[f64]>::to_vec)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = Document {
            format: STEERING_FORMAT.into(),
            version: FORMAT_VERSION,
            body: self,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document<SteeringVectorSet> = serde_json::from_str(text)?;
        doc.check_format(STEERING_FORMAT)?;
        let s = doc.body;
        for (layer, v) in &s.directions {
            if v.len() != s.dim {
                return Err(Error::DimensionMismatch {
                    expected: s.dim,
                    actual: v.len(),
                });
            }
            if (linalg::norm(v) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::precondition(format!(
                    "stored direction for layer {layer} is not unit norm"
                )));
            }
        }
        if s.active_layers.iter().any(|l| !s.directions.contains_key(l)) {
            return Err(Error::precondition("active layer without direction"));
        }
        Ok(s)
    }
}

#[derive(Serialize, Deserialize)]
struct Document<T> {
    format: String,
    version: u32,
    body: T,
}

impl<T> Document<T> {
    fn check_format(&self, expected: &str) -> Result<()> {
        if self.format != expected || self.version != FORMAT_VERSION {
            return Err(Error::precondition(format!(
                "expected document format {expected} v{FORMAT_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        Ok(())
    }
}

fn check_dims(d: usize, v: usize, l: usize) -> Result<()> {
    if d == 0 || v == 0 || l == 0 {
        return Err(Error::InvalidDimension(format!(
            "hidden_dim={d}, vocab_size={v}, num_layers={l}; all must be >= 1"
        )));
    }
    Ok(())
}

fn gaussian_matrix<R: Rng + ?Sized>(r: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = rng::gaussian_vec(r, rows * cols)
        .into_iter()
        .map(|x| x * scale)
        .collect();
    Matrix::from_row_major(rows, cols, data).expect("shape matches")
}

impl LayeredModel {
    /// Assembles a model from explicit parts, checking every shape invariant.
    pub fn from_parts(
        family: Family,
        seed: u64,
        layers: Vec<Layer>,
        unembedding: Matrix,
        token_embeddings: Matrix,
        plant: Option<Plant>,
    ) -> Result<Self> {
        let model = Self {
            family,
            hidden_dim: unembedding.cols(),
            vocab_size: unembedding.rows(),
            seed,
            layers,
            unembedding,
            token_embeddings,
            plant,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        check_dims(self.hidden_dim, self.vocab_size, self.layers.len())?;
        for m in [&self.unembedding, &self.token_embeddings] {
            m.check_shape()?;
            if m.rows() != self.vocab_size || m.cols() != self.hidden_dim {
                return Err(Error::InvalidDimension(format!(
                    "matrix is {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    self.vocab_size,
                    self.hidden_dim
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("unembedding or embedding row".into()));
            }
        }
        for layer in &self.layers {
            layer.check(self.hidden_dim)?;
        }
        if self.family == Family::Identity
            && self.layers.iter().any(|l| *l != Layer::Identity)
        {
            return Err(Error::precondition("identity family with a non-identity layer"));
        }
        if let Some(p) = &self.plant {
            if p.direction.len() != self.hidden_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.hidden_dim,
                    actual: p.direction.len(),
                });
            }
        }
        Ok(())
    }

    /// Identity layers; `U` and `E` rows drawn standard normal from `seed`.
    pub fn identity_family(d: usize, v: usize, l: usize, seed: u64) -> Result<Self> {
        check_dims(d, v, l)?;
        let unembedding = gaussian_matrix(&mut rng::stream(seed, "unembedding"), v, d, 1.0);
        let token_embeddings = gaussian_matrix(&mut rng::stream(seed, "embeddings"), v, d, 1.0);
        Self::from_parts(
            Family::Identity,
            seed,
            vec![Layer::Identity; l],
            unembedding,
            token_embeddings,
            None,
        )
    }

    /// Two-matrix residual tanh blocks with weights `N(0, 1/d)`.
    pub fn mlp_family(d: usize, v: usize, l: usize, seed: u64) -> Result<Self> {
        check_dims(d, v, l)?;
        let unembedding = gaussian_matrix(&mut rng::stream(seed, "unembedding"), v, d, 1.0);
        let token_embeddings = gaussian_matrix(&mut rng::stream(seed, "embeddings"), v, d, 1.0);
        let scale = 1.0 / (d as f64).sqrt();
        let layers = (1..=l)
            .map(|i| {
                let mut r = rng::stream(seed, &format!("layer/{i}"));
                Layer::ResidualMlp {
                    w_in: gaussian_matrix(&mut r, d, d, scale),
                    w_out: gaussian_matrix(&mut r, d, d, scale),
                }
            })
            .collect();
        Self::from_parts(Family::Mlp, seed, layers, unembedding, token_embeddings, None)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembedding
    }

    pub fn token_embeddings(&self) -> &Matrix {
        &self.token_embeddings
    }

    pub fn plant(&self) -> Option<&Plant> {
        self.plant.as_ref()
    }

    /// Same model with token embeddings replaced (used to build decoding
    /// constructions with controlled context drift).
    pub fn with_token_embeddings(&self, token_embeddings: Matrix) -> Result<Self> {
        let model = Self {
            token_embeddings,
            ..self.clone()
        };
        model.validate()?;
        Ok(model)
    }

    fn check_state(&self, state: &HiddenState, layer: usize) -> Result<()> {
        if state.vector.len() != self.hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: self.hidden_dim,
                actual: state.vector.len(),
            });
        }
        if state.layer != layer {
            return Err(Error::precondition(format!(
                "hidden state is at layer {}, expected layer {layer}",
                state.layer
            )));
        }
        if state.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("hidden state entry".into()));
        }
        Ok(())
    }

    /// Runs layers `1..=upto` from a layer-0 state, injecting the steering
    /// set before each layer. A zero coefficient injects nothing at all.
    pub fn hidden_at(
        &self,
        steering: Option<&SteeringVectorSet>,
        context: &HiddenState,
        upto: usize,
    ) -> Result<HiddenState> {
        self.check_state(context, 0)?;
        if upto > self.num_layers() {
            return Err(Error::precondition(format!(
                "layer {upto} exceeds model depth {}",
                self.num_layers()
            )));
        }
        let steering = steering.filter(|s| s.coefficient() != 0.0);
        if let Some(s) = steering {
            if s.dim() != self.hidden_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.hidden_dim,
                    actual: s.dim(),
                });
            }
        }
        let mut h = context.vector.clone();
        for (idx, layer) in self.layers[..upto].iter().enumerate() {
            if let Some(s) = steering {
                if let Some(v) = s.injected(idx + 1) {
                    linalg::axpy(s.coefficient(), v, &mut h);
                }
            }
            h = layer.apply(&h);
        }
        Ok(HiddenState {
            vector: h,
            layer: upto,
        })
    }

    pub fn forward(&self, context: &HiddenState) -> Result<HiddenState> {
        self.hidden_at(None, context, self.num_layers())
    }

    pub fn forward_with_injection(
        &self,
        steering: &SteeringVectorSet,
        context: &HiddenState,
    ) -> Result<HiddenState> {
        self.hidden_at(Some(steering), context, self.num_layers())
    }

    /// Last-layer change `δr = r^(L)(r_e) − r^(L)(0)`.
    pub fn steering_delta(
        &self,
        steering: &SteeringVectorSet,
        context: &HiddenState,
    ) -> Result<Vec<f64>> {
        let base = self.forward(context)?;
        let steered = self.forward_with_injection(steering, context)?;
        Ok(linalg::sub(&steered.vector, &base.vector))
    }

    pub fn logits(&self, last: &HiddenState) -> Result<Vec<f64>> {
        self.check_state(last, self.num_layers())?;
        Ok(self.unembedding.matvec(&last.vector))
    }

    pub fn next_token_distribution(&self, last: &HiddenState) -> Result<TokenDistribution> {
        TokenDistribution::from_logits(self.logits(last)?)
    }

    /// Inject-forward-read in one call.
    pub fn steered_distribution(
        &self,
        steering: &SteeringVectorSet,
        context: &HiddenState,
    ) -> Result<TokenDistribution> {
        let last = self.forward_with_injection(steering, context)?;
        self.next_token_distribution(&last)
    }

    /// `normalize(context + E[token])`, the decoding context update.
    pub fn advance_context(&self, context: &HiddenState, token: usize) -> Result<HiddenState> {
        self.check_token(token)?;
        let mut v = context.vector.clone();
        linalg::axpy(1.0, self.token_embeddings.row(token), &mut v);
        let v = linalg::normalized(&v).ok_or_else(|| {
            Error::DegenerateDirection(format!("context collapsed to zero after token {token}"))
        })?;
        Ok(HiddenState::input(v))
    }

    pub(crate) fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab_size {
            return Err(Error::precondition(format!(
                "token {token} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = Document {
            format: MODEL_FORMAT.into(),
            version: FORMAT_VERSION,
            body: self,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document<LayeredModel> = serde_json::from_str(text)?;
        doc.check_format(MODEL_FORMAT)?;
        doc.body.validate()?;
        Ok(doc.body)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Temperature-scaled sampling; temperature 0 falls back to greedy.
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub distributions: Vec<TokenDistribution>,
}

pub fn autoregressive_decode(
    model: &LayeredModel,
    steering: &SteeringVectorSet,
    context: &HiddenState,
    steps: usize,
    mode: DecodeMode,
) -> Result<Decoded> {
    if steps == 0 {
        return Err(Error::precondition("decode length must be >= 1"));
    }
    let mut sampler = match mode {
        DecodeMode::Greedy => None,
        DecodeMode::Sample { temperature, seed } => {
            if !(temperature >= 0.0) || !temperature.is_finite() {
                return Err(Error::precondition(format!(
                    "temperature must be finite and >= 0, got {temperature}"
                )));
            }
            (temperature > 0.0).then(|| (temperature, rng::stream(seed, "decode")))
        }
    };
    let mut ctx = context.clone();
    let mut tokens = Vec::with_capacity(steps);
    let mut distributions = Vec::with_capacity(steps);
    for _ in 0..steps {
        let dist = model.steered_distribution(steering, &ctx)?;
        let token = match sampler.as_mut() {
            None => dist.argmax(),
            Some((temperature, r)) => {
                let scaled: Vec<f64> = dist.logits.iter().map(|l| l / *temperature).collect();
                sample_index(&softmax(&scaled), r.random::<f64>())
            }
        };
        ctx = model.advance_context(&ctx, token)?;
        tokens.push(token);
        distributions.push(dist);
    }
    Ok(Decoded {
        tokens,
        distributions,
    })
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `U^T(e_+ − e_−)`, the preference-loss gradient direction at the last layer.
pub fn preference_direction(model: &LayeredModel, preferred: usize, dispreferred: usize) -> Result<Vec<f64>> {
    model.check_token(preferred)?;
    model.check_token(dispreferred)?;
    if preferred == dispreferred {
        return Err(Error::precondition(
            "preferred and dispreferred tokens must differ",
        ));
    }
    Ok(linalg::sub(
        model.unembedding().row(preferred),
        model.unembedding().row(dispreferred),
    ))
}

/// One gradient step of size `eta` on `−log P(+)/P(−)` applied to the
/// last-layer representation.
pub fn preference_gradient_step(
    model: &LayeredModel,
    last: &HiddenState,
    preferred: usize,
    dispreferred: usize,
    eta: f64,
) -> Result<HiddenState> {
    model.check_state(last, model.num_layers())?;
    let w = preference_direction(model, preferred, dispreferred)?;
    let vector = last
        .vector
        .iter()
        .zip(&w)
        .map(|(h, g)| h + eta * g)
        .collect();
    Ok(HiddenState {
        vector,
        layer: last.layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_family_is_deterministic() {
        let a = LayeredModel::identity_family(4, 8, 3, 7).unwrap();
        let b = LayeredModel::identity_family(4, 8, 3, 7).unwrap();
        assert_eq!(a, b);
        let c = LayeredModel::identity_family(5, 8, 3, 7).unwrap();
        assert_eq!(c.unembedding().cols(), 5);
        assert_ne!(a.unembedding().cols(), c.unembedding().cols());
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(LayeredModel::identity_family(0, 8, 3, 1).is_err());
        assert!(LayeredModel::identity_family(4, 0, 3, 1).is_err());
        assert!(LayeredModel::mlp_family(4, 8, 0, 1).is_err());
    }

    #[test]
    fn identity_forward_is_identity() {
        let m = LayeredModel::identity_family(4, 8, 3, 7).unwrap();
        let ctx = HiddenState::random(4, 3, "ctx");
        let out = m.forward(&ctx).unwrap();
        assert_eq!(out.vector, ctx.vector);
        assert_eq!(out.layer, 3);
    }

    #[test]
    fn zero_coefficient_matches_plain_forward() {
        for m in [
            LayeredModel::identity_family(6, 10, 3, 1).unwrap(),
            LayeredModel::mlp_family(6, 10, 3, 1).unwrap(),
        ] {
            let ctx = HiddenState::random(6, 9, "ctx");
            let mut r = rng::stream(2, "dir");
            let s = SteeringVectorSet::shared(6, &rng::unit_vec(&mut r, 6), &[1, 2, 3]).unwrap();
            let plain = m.forward(&ctx).unwrap();
            let injected = m.forward_with_injection(&s.with_coefficient(0.0), &ctx).unwrap();
            assert_eq!(plain, injected);
        }
    }

    #[test]
    fn identity_injection_accumulates_linearly() {
        let m = LayeredModel::identity_family(4, 8, 3, 7).unwrap();
        let ctx = HiddenState::random(4, 3, "ctx");
        let v = vec![0.0, 1.0, 0.0, 0.0];
        let s = SteeringVectorSet::shared(4, &v, &[1, 2, 3])
            .unwrap()
            .with_coefficient(2.0);
        let delta = m.steering_delta(&s, &ctx).unwrap();
        assert!((linalg::norm(&delta) - 6.0).abs() < 1e-12);
        assert!((delta[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn mlp_is_locally_linear() {
        let m = LayeredModel::mlp_family(8, 16, 3, 11).unwrap();
        let ctx = HiddenState::random(8, 5, "ctx");
        let mut r = rng::stream(5, "dir");
        let s = SteeringVectorSet::shared(8, &rng::unit_vec(&mut r, 8), &[1, 2, 3]).unwrap();
        let d1 = linalg::norm(&m.steering_delta(&s.with_coefficient(0.01), &ctx).unwrap());
        let d2 = linalg::norm(&m.steering_delta(&s.with_coefficient(0.02), &ctx).unwrap());
        assert!(((d2 / d1) - 2.0).abs() < 0.1, "ratio {}", d2 / d1);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = LayeredModel::identity_family(4, 8, 2, 7).unwrap();
        let s = SteeringVectorSet::shared(3, &[1.0, 0.0, 0.0], &[1])
            .unwrap()
            .with_coefficient(1.0);
        let ctx = HiddenState::random(4, 1, "ctx");
        assert!(matches!(
            m.forward_with_injection(&s, &ctx),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(m.forward(&HiddenState::input(vec![1.0; 3])).is_err());
    }

    #[test]
    fn softmax_reference_values() {
        let d = TokenDistribution::from_logits(vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let expected = [0.534_446, 0.196_612, 0.196_612, 0.072_329];
        for (p, e) in d.probs.iter().zip(expected) {
            assert!((p - e).abs() < 1e-5);
        }
        let zero = TokenDistribution::from_logits(vec![0.0; 5]).unwrap();
        assert!(zero.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert!(TokenDistribution::from_logits(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn greedy_decode_takes_argmax() {
        let m = LayeredModel::identity_family(6, 12, 2, 3).unwrap();
        let ctx = HiddenState::random(6, 4, "ctx");
        let s = SteeringVectorSet::empty(6);
        let out = autoregressive_decode(&m, &s, &ctx, 5, DecodeMode::Greedy).unwrap();
        assert_eq!(out.tokens.len(), 5);
        for (t, d) in out.tokens.iter().zip(&out.distributions) {
            assert_eq!(*t, d.argmax());
        }
        let cold = autoregressive_decode(
            &m,
            &s,
            &ctx,
            5,
            DecodeMode::Sample {
                temperature: 1e-6,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(cold.tokens, out.tokens);
        let bad = DecodeMode::Sample {
            temperature: -1.0,
            seed: 0,
        };
        assert!(autoregressive_decode(&m, &s, &ctx, 1, bad).is_err());
        assert!(autoregressive_decode(&m, &s, &ctx, 0, DecodeMode::Greedy).is_err());
    }

    #[test]
    fn sampled_decode_is_reproducible() {
        let m = LayeredModel::identity_family(6, 12, 2, 3).unwrap();
        let ctx = HiddenState::random(6, 4, "ctx");
        let s = SteeringVectorSet::empty(6);
        let mode = DecodeMode::Sample {
            temperature: 1.0,
            seed: 42,
        };
        let a = autoregressive_decode(&m, &s, &ctx, 8, mode).unwrap();
        let b = autoregressive_decode(&m, &s, &ctx, 8, mode).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn greedy_ties_pick_lowest_index() {
        let d = TokenDistribution::from_logits(vec![0.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(d.argmax(), 1);
    }

    #[test]
    fn preference_step_closed_form() {
        let m = LayeredModel::identity_family(5, 9, 2, 1).unwrap();
        let last = m.forward(&HiddenState::random(5, 2, "ctx")).unwrap();
        let same = preference_gradient_step(&m, &last, 1, 4, 0.0).unwrap();
        assert_eq!(same.vector, last.vector);
        let stepped = preference_gradient_step(&m, &last, 1, 4, 0.3).unwrap();
        let w = preference_direction(&m, 1, 4).unwrap();
        for k in 0..5 {
            assert_eq!(stepped.vector[k], last.vector[k] + 0.3 * w[k]);
        }
        assert!(preference_gradient_step(&m, &last, 2, 2, 0.1).is_err());
    }

    #[test]
    fn steering_set_normalizes_and_zeroes_inactive_layers() {
        let mut dirs = BTreeMap::new();
        dirs.insert(1, vec![3.0, 4.0]);
        dirs.insert(2, vec![0.0, 2.0]);
        let s = SteeringVectorSet::new(2, dirs, [1].into_iter().collect(), 0.0).unwrap();
        assert!((linalg::norm(&s.direction(1)) - 1.0).abs() < 1e-12);
        assert_eq!(s.direction(2), vec![0.0, 0.0]);
        assert_eq!(s.direction(7), vec![0.0, 0.0]);
    }

    #[test]
    fn model_json_round_trip_is_bit_exact() {
        let m = LayeredModel::mlp_family(3, 5, 2, 77).unwrap();
        let back = LayeredModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let s = SteeringVectorSet::shared(3, &[1.0, 2.0, 2.0], &[2]).unwrap().with_coefficient(-0.7);
        assert_eq!(s, SteeringVectorSet::from_json(&s.to_json().unwrap()).unwrap());
    }
}

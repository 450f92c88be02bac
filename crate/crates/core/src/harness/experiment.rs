//! Seeded construction of experiment instances and the coefficient sweep.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Check, ExperimentConfig, SteeringSource};
use crate::bounds::{self, Kappa, SoftMarginParams};
use crate::construct::{self, MarginSpec, Misclassified};
use crate::error::{Error, Result};
use crate::extraction::{self, ContrastDataset};
use crate::fitting::{self, FitParameter, FitReport};
use crate::linalg;
use crate::metrics::{self, BehaviorKind, BehaviorMode, BehaviorSpec, SequenceMethod};
use crate::model::{self, Family, HiddenState, Layer, LayeredModel, SteeringVectorSet};
use crate::oracle;
use crate::rng;
use crate::validators::{self, Theorem2Verdict};

/// Largest allowed gap between a metric and its oracle recomputation.
pub const ORACLE_TOL: f64 = 1e-10;
/// Slack on measured-versus-bound comparisons.
pub const BOUND_TOL: f64 = 1e-9;
/// Target misalignment of the alignment-threshold checks.
pub const CHECK_EPS: f64 = 0.1;
/// Step size of the preference-equivalence check.
pub const PREFERENCE_ETA: f64 = 0.1;
/// Coefficient at which steering directions and realized noise are probed.
pub const PROBE_COEFFICIENT: f64 = 1.0;
const TANH_SLOPE_CAP: f64 = 20.0;
const LSB_CAP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: usize,
    pub context: HiddenState,
    pub correct: Option<usize>,
}

/// Everything a sweep acts on, rebuilt deterministically from a config.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub model: LayeredModel,
    pub steering: SteeringVectorSet,
    pub contrast: Option<ContrastDataset>,
    pub spec: BehaviorSpec,
    pub queries: Vec<Query>,
}

fn model_seed(cfg: &ExperimentConfig) -> u64 {
    rng::derive_seed(cfg.seed, "model")
}

/// Builds the model; margin-constructed models come with their planted
/// steering set.
pub fn build_model(cfg: &ExperimentConfig) -> Result<(LayeredModel, Option<SteeringVectorSet>)> {
    let m = &cfg.model;
    let seed = model_seed(cfg);
    match m.family {
        Family::Identity => Ok((
            LayeredModel::identity_family(m.hidden_dim, m.vocab_size, m.num_layers, seed)?,
            None,
        )),
        Family::Mlp => Ok((
            LayeredModel::mlp_family(m.hidden_dim, m.vocab_size, m.num_layers, seed)?,
            None,
        )),
        Family::MarginConstructed => {
            let mc = m
                .margin
                .as_ref()
                .ok_or_else(|| Error::config("model.margin", "missing margin section"))?;
            let b = &cfg.behavior;
            let (model, steering) = match b.kind {
                BehaviorKind::Binary => {
                    let mut spec = MarginSpec::new(
                        m.hidden_dim,
                        m.vocab_size,
                        mc.delta,
                        mc.lambda,
                        b.aligned.clone(),
                        b.misaligned.clone(),
                        seed,
                    );
                    spec.spread = mc.spread;
                    spec.row_norm_budget = mc.row_norm_budget;
                    spec.misclassified = mc
                        .misclassified
                        .iter()
                        .map(|x| Misclassified {
                            token: x.token,
                            depth: x.depth,
                        })
                        .collect();
                    construct::margin_instance(&spec)?
                }
                BehaviorKind::Trinary | BehaviorKind::General => {
                    let spec = b.to_spec()?;
                    let threshold = spec.b_plus.unwrap_or(1.0);
                    // unscored tokens take the lowest band
                    let scores: Vec<f64> = (0..m.vocab_size)
                        .map(|t| spec.score(t).unwrap_or(-1.0))
                        .collect();
                    let x = construct::score_ordered_projections(
                        &scores,
                        threshold,
                        mc.delta,
                        mc.spread,
                        seed,
                    )?;
                    let extent = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    if extent > mc.row_norm_budget {
                        return Err(Error::Infeasible(format!(
                            "projections reach {extent}, beyond the row-norm budget {}",
                            mc.row_norm_budget
                        )));
                    }
                    construct::projection_instance(m.hidden_dim, &x, mc.lambda, Some(mc.delta), seed)?
                }
            };
            Ok((model, Some(steering)))
        }
    }
}

/// Unit concept direction the stimuli encode: the planted direction when
/// there is one, otherwise a seeded random direction.
fn concept(cfg: &ExperimentConfig, model: &LayeredModel) -> Vec<f64> {
    match model.plant() {
        Some(p) => p.direction.clone(),
        None => rng::unit_vec(&mut rng::stream(cfg.seed, "concept"), model.hidden_dim()),
    }
}

/// Contrast stimuli `g ± c/2 + noise`.
pub fn stimulus_pairs(cfg: &ExperimentConfig, model: &LayeredModel) -> Vec<(HiddenState, HiddenState)> {
    let c = concept(cfg, model);
    let d = model.hidden_dim();
    let mut r = rng::stream(cfg.seed, "stimuli");
    (0..cfg.steering.pairs)
        .map(|_| {
            let g = rng::gaussian_vec(&mut r, d);
            let n1 = rng::gaussian_vec(&mut r, d);
            let n2 = rng::gaussian_vec(&mut r, d);
            let side = |sign: f64, n: &[f64]| -> HiddenState {
                HiddenState::input(
                    (0..d)
                        .map(|k| g[k] + sign * 0.5 * c[k] + cfg.steering.noise * n[k])
                        .collect(),
                )
            };
            (side(1.0, &n1), side(-1.0, &n2))
        })
        .collect()
}

pub fn build_steering(
    cfg: &ExperimentConfig,
    model: &LayeredModel,
    planted: Option<SteeringVectorSet>,
) -> Result<(SteeringVectorSet, Option<ContrastDataset>)> {
    match cfg.steering.source {
        SteeringSource::Planted => match planted {
            Some(s) => Ok((s, None)),
            None => Ok((
                SteeringVectorSet::shared(model.hidden_dim(), &concept(cfg, model), &cfg.active_layers())?,
                None,
            )),
        },
        SteeringSource::Extracted => {
            let pairs = stimulus_pairs(cfg, model);
            let data = extraction::collect_differences(model, &pairs, &cfg.active_layers())?;
            let set = extraction::steering_from_contrast(&data, model.hidden_dim(), cfg.steering.mode)?;
            Ok((set, Some(data)))
        }
    }
}

pub fn build_queries(cfg: &ExperimentConfig, d: usize) -> Vec<Query> {
    (0..cfg.queries)
        .map(|id| {
            let context = HiddenState::random(d, cfg.seed, &format!("query/{id}"));
            let correct = cfg.behavior.correct_token.or_else(|| {
                cfg.behavior.choice_set.as_ref().map(|set| {
                    let mut r = rng::stream(cfg.seed, &format!("correct/{id}"));
                    set[rand::Rng::random_range(&mut r, 0..set.len())]
                })
            });
            Query {
                id,
                context,
                correct,
            }
        })
        .collect()
}

pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    cfg.validate()?;
    let (model, planted) = build_model(cfg)?;
    let (steering, contrast) = build_steering(cfg, &model, planted)?;
    let spec = cfg.behavior.to_spec()?;
    let queries = build_queries(cfg, model.hidden_dim());
    Ok(Instance {
        model,
        steering,
        contrast,
        spec,
        queries,
    })
}

/// Tokens on the positive side of the behavior and the remaining scored
/// tokens.
pub fn positive_split(spec: &BehaviorSpec) -> (Vec<usize>, Vec<usize>) {
    let plus = spec.aligned();
    let rest = spec
        .scores
        .keys()
        .copied()
        .filter(|t| !plus.contains(t))
        .collect();
    (plus, rest)
}

/// `min_{i∈plus} x_i − max_{j∈rest} x_j`.
pub fn separation(x: &[f64], plus: &[usize], rest: &[usize]) -> f64 {
    let lo = plus.iter().map(|&t| x[t]).fold(f64::INFINITY, f64::min);
    let hi = rest.iter().map(|&t| x[t]).fold(f64::NEG_INFINITY, f64::max);
    lo - hi
}

fn direction_projections(inst: &Instance, q: &Query, r_e: f64) -> Result<(f64, Option<Vec<f64>>)> {
    let (delta, dir) = validators::steering_direction(&inst.model, &inst.steering, &q.context, r_e)?;
    Ok((
        linalg::norm(&delta),
        dir.map(|u| validators::token_projections(&inst.model, &u)),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: usize,
    pub correct: Option<usize>,
    /// Unsteered renormalized behavior, when strictly inside (−1, 1).
    #[serde(default, with = "crate::serde_float::option")]
    pub b0: Option<f64>,
    /// Unsteered probability of the correct token.
    #[serde(default, with = "crate::serde_float::option")]
    pub p0: Option<f64>,
}

/// Parameter estimates every bound column is computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    #[serde(with = "crate::serde_float")]
    pub lambda_hat: f64,
    #[serde(with = "crate::serde_float")]
    pub lambda_r2: f64,
    /// Smallest positive-side separation over queries at the probe
    /// coefficient.
    #[serde(with = "crate::serde_float")]
    pub margin_hat: f64,
    /// `max(margin_hat, 0)·lambda_hat`.
    #[serde(with = "crate::serde_float")]
    pub slope_product: f64,
    #[serde(default, with = "crate::serde_float::option")]
    pub alpha_hat: Option<f64>,
    #[serde(default, with = "crate::serde_float::option")]
    pub eps_hat: Option<f64>,
    #[serde(default, with = "crate::serde_float::option")]
    pub lsb_hat: Option<f64>,
}

fn estimate(cfg: &ExperimentConfig, inst: &Instance, grid: &[f64]) -> Result<(Estimates, Vec<QueryRecord>, validators::NormCurve)> {
    let model = &inst.model;
    let nonneg: Vec<f64> = grid.iter().copied().filter(|r| *r >= 0.0).collect();
    let window = cfg
        .fit_windows
        .lambda
        .map(|[a, b]| (a.max(0.0), b))
        .unwrap_or((0.0, nonneg[nonneg.len() - 1]));
    let curve = validators::norm_curve_and_lambda(model, &inst.steering, &inst.queries[0].context, &nonneg, window)?;
    let (plus, rest) = positive_split(&inst.spec);

    let per_query: Vec<(QueryRecord, f64, Option<validators::RealizedNoise>)> = inst
        .queries
        .par_iter()
        .map(|q| {
            let base = model.next_token_distribution(&model.forward(&q.context)?)?;
            let b0 = metrics::behavior_expectation(&base, &inst.spec, BehaviorMode::Renormalized)
                .ok()
                .filter(|b| b.abs() < 1.0);
            let p0 = q.correct.map(|c| base.probs[c]);
            let (_, x) = direction_projections(inst, q, PROBE_COEFFICIENT)?;
            let sep = x.map_or(f64::NEG_INFINITY, |x| separation(&x, &plus, &rest));
            let noise = match q.correct {
                Some(c) => {
                    let spec = inst.spec.clone().with_correct(c);
                    Some(
                        validators::theorem2_realized_check(
                            model,
                            &inst.steering,
                            &q.context,
                            &spec,
                            PROBE_COEFFICIENT,
                            cfg.t,
                        )?
                        .noise,
                    )
                }
                None => None,
            };
            Ok((
                QueryRecord {
                    id: q.id,
                    correct: q.correct,
                    b0,
                    p0,
                },
                sep,
                noise,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let margin_hat = per_query.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let noises: Vec<&validators::RealizedNoise> = per_query.iter().filter_map(|p| p.2.as_ref()).collect();
    let mean_of = |f: &dyn Fn(&validators::RealizedNoise) -> f64| -> Option<f64> {
        (!noises.is_empty()).then(|| noises.iter().map(|n| f(n)).sum::<f64>() / noises.len() as f64)
    };
    let alpha_hat = mean_of(&|n| n.alpha);
    let eps_hat = mean_of(&|n| n.eps);
    let lsb_hat = mean_of(&|n| n.min_gap()).map(|g| g * curve.lambda_hat);
    let estimates = Estimates {
        lambda_hat: curve.lambda_hat,
        lambda_r2: curve.r2,
        margin_hat: if margin_hat.is_finite() { margin_hat } else { 0.0 },
        slope_product: margin_hat.max(0.0) * curve.lambda_hat,
        alpha_hat,
        eps_hat,
        lsb_hat,
    };
    Ok((estimates, per_query.into_iter().map(|p| p.0).collect(), curve))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Skip,
    Info,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skip => "skip",
            Status::Info => "info",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub pass: usize,
    pub fail: usize,
    pub skip: usize,
}

impl Counts {
    fn record(&mut self, s: Status) {
        match s {
            Status::Pass => self.pass += 1,
            Status::Fail => self.fail += 1,
            Status::Skip => self.skip += 1,
            Status::Info => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(with = "crate::serde_float")]
    pub r_e: f64,
    #[serde(with = "crate::serde_float")]
    pub behavior_raw: f64,
    #[serde(with = "crate::serde_float")]
    pub behavior_renorm: f64,
    #[serde(with = "crate::serde_float")]
    pub helpfulness: f64,
    #[serde(with = "crate::serde_float")]
    pub helpfulness_relative: f64,
    #[serde(with = "crate::serde_float")]
    pub thm1_bound: f64,
    #[serde(with = "crate::serde_float")]
    pub thm2_bound: f64,
    pub verdict: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidatorRow {
    pub check: String,
    pub item: String,
    #[serde(with = "crate::serde_float")]
    pub measured: f64,
    #[serde(with = "crate::serde_float")]
    pub reference: f64,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub kappa: Kappa,
    pub family: Family,
    pub behavior_modes: Vec<String>,
    pub estimates: Estimates,
    pub queries: Vec<QueryRecord>,
    pub fits: Vec<FitReport>,
    pub checks: BTreeMap<String, Counts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub validators: Vec<ValidatorRow>,
    pub manifest: Manifest,
}

impl SweepResult {
    /// Whether any requested check found a bound violation.
    pub fn has_violation(&self) -> bool {
        self.manifest.checks.values().any(|c| c.fail > 0)
    }
}

struct Cell {
    raw: f64,
    renorm: Option<f64>,
    help: Option<f64>,
    help_rel: Option<f64>,
    thm1_bound: Option<f64>,
    thm1: Option<Status>,
    thm2_bound: Option<f64>,
    thm2: Option<Theorem2Verdict>,
}

fn mean_all(xs: impl Iterator<Item = Option<f64>>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in xs {
        match x {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => return f64::NAN,
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn disagree(name: &str, r_e: f64, q: usize, a: f64, b: f64) -> Error {
    Error::OracleDisagreement(format!(
        "grid point r_e={r_e}, query {q}: {name} {a:e} vs oracle {b:e}"
    ))
}

fn evaluate(
    cfg: &ExperimentConfig,
    inst: &Instance,
    est: &Estimates,
    rec: &QueryRecord,
    q: &Query,
    r_e: f64,
) -> Result<Cell> {
    let model = &inst.model;
    let steer = inst.steering.with_coefficient(r_e);
    let spec = match q.correct {
        Some(c) => inst.spec.clone().with_correct(c),
        None => inst.spec.clone(),
    };
    let dist = model.steered_distribution(&steer, &q.context)?;
    let raw = metrics::behavior_expectation(&dist, &spec, BehaviorMode::Raw)?;
    let renorm = metrics::behavior_expectation(&dist, &spec, BehaviorMode::Renormalized).ok();
    let help = q.correct.map(|_| metrics::helpfulness(&dist, &spec)).transpose()?;
    let help_rel = match (&spec.choice_set, q.correct) {
        (Some(_), Some(_)) => Some(metrics::helpfulness_relative(&dist, &spec)?),
        _ => None,
    };

    let o = oracle::brute_force_behavior(model, &inst.steering, &q.context, &spec, r_e)?;
    if (o.raw - raw).abs() > ORACLE_TOL {
        return Err(disagree("raw behavior", r_e, q.id, raw, o.raw));
    }
    if let (Some(a), Some(b)) = (renorm, o.renormalized) {
        if o.scored_mass >= metrics::MIN_MASS && (a - b).abs() > ORACLE_TOL {
            return Err(disagree("renormalized behavior", r_e, q.id, a, b));
        }
    }
    if let (Some(a), Some(b)) = (help, o.helpfulness) {
        if (a - b).abs() > ORACLE_TOL {
            return Err(disagree("helpfulness", r_e, q.id, a, b));
        }
    }

    let thm1_bound = rec
        .b0
        .map(|b0| bounds::tanh_lower_bound(est.slope_product, cfg.kappa, b0, r_e))
        .transpose()?;
    let thm1 = if cfg.checks.contains(&Check::Thm1) {
        Some(match (rec.b0, renorm) {
            (Some(b0), Some(measured)) => {
                let (norm, x) = direction_projections(inst, q, r_e)?;
                let (plus, rest) = positive_split(&inst.spec);
                match x.map(|x| separation(&x, &plus, &rest)) {
                    Some(sep) if sep > 0.0 => {
                        let bound = bounds::tanh_lower_bound(sep * norm, cfg.kappa, b0, 1.0)?;
                        if measured >= bound - BOUND_TOL {
                            Status::Pass
                        } else {
                            Status::Fail
                        }
                    }
                    _ => Status::Skip,
                }
            }
            _ => Status::Skip,
        })
    } else {
        None
    };

    let thm2_bound = match (rec.p0, est.alpha_hat, est.eps_hat, est.lsb_hat) {
        (Some(p0), Some(a), Some(e), Some(k)) if p0 > 0.0 && p0 < 1.0 && e < 1.0 => {
            Some(bounds::helpfulness_upper_bound(p0, a, e, k, r_e)?)
        }
        _ => None,
    };
    let thm2 = if cfg.checks.contains(&Check::Thm2) && q.correct.is_some() {
        Some(validators::theorem2_realized_check(model, &inst.steering, &q.context, &spec, r_e, cfg.t)?.verdict)
    } else {
        None
    };
    Ok(Cell {
        raw,
        renorm,
        help,
        help_rel,
        thm1_bound,
        thm1,
        thm2_bound,
        thm2,
    })
}

fn verdict(cfg: &ExperimentConfig, cells: &[Cell], counts: &mut BTreeMap<String, Counts>) -> String {
    let mut parts = Vec::new();
    if cfg.checks.contains(&Check::Thm1) {
        let mut c = Counts::default();
        cells.iter().filter_map(|x| x.thm1).for_each(|s| c.record(s));
        let e = counts.entry("thm1".into()).or_default();
        e.pass += c.pass;
        e.fail += c.fail;
        e.skip += c.skip;
        parts.push(if c.fail > 0 {
            format!("thm1=fail({} of {})", c.fail, c.pass + c.fail)
        } else if c.pass > 0 {
            "thm1=pass".to_string()
        } else {
            "thm1=skip".to_string()
        });
    }
    if cfg.checks.contains(&Check::Thm2) {
        let mut c = Counts::default();
        for v in cells.iter().filter_map(|x| x.thm2) {
            c.record(match v {
                Theorem2Verdict::Holds => Status::Pass,
                Theorem2Verdict::Violated => Status::Fail,
                _ => Status::Skip,
            });
        }
        let e = counts.entry("thm2".into()).or_default();
        e.pass += c.pass;
        e.fail += c.fail;
        e.skip += c.skip;
        let head = if c.fail > 0 { "fail" } else { "pass" };
        parts.push(format!(
            "thm2={head}(checked {} violated {} skipped {})",
            c.pass + c.fail,
            c.fail,
            c.skip
        ));
    }
    parts.push("oracle=agree".into());
    parts.join(";")
}

/// Runs the full sweep plus every requested run-level check and fit.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let inst = build_instance(cfg)?;
    run_on_instance(cfg, &inst)
}

pub fn run_on_instance(cfg: &ExperimentConfig, inst: &Instance) -> Result<SweepResult> {
    let grid = cfg.grid.points();
    let (est, records, curve) = estimate(cfg, inst, &grid)?;
    let mut counts: BTreeMap<String, Counts> = BTreeMap::new();
    let mut rows = Vec::with_capacity(grid.len());
    for &r in &grid {
        let cells = inst
            .queries
            .par_iter()
            .zip(records.par_iter())
            .map(|(q, rec)| evaluate(cfg, inst, &est, rec, q, r))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow {
            r_e: r,
            behavior_raw: mean_all(cells.iter().map(|c| Some(c.raw))),
            behavior_renorm: mean_all(cells.iter().map(|c| c.renorm)),
            helpfulness: mean_all(cells.iter().map(|c| c.help)),
            helpfulness_relative: mean_all(cells.iter().map(|c| c.help_rel)),
            thm1_bound: mean_all(cells.iter().map(|c| c.thm1_bound)),
            thm2_bound: mean_all(cells.iter().map(|c| c.thm2_bound)),
            verdict: verdict(cfg, &cells, &mut counts),
        });
    }

    let validators = run_checks(cfg, inst, &est, &records, &curve, &grid)?;
    for v in &validators {
        counts.entry(v.check.clone()).or_default().record(v.status);
    }
    let fits = run_fits(cfg, inst, &est, &rows, &curve);
    let canonical = cfg.canonical_json()?;
    let manifest = Manifest {
        format: "steerlab-manifest".into(),
        version: 1,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: rng::sha256_hex(canonical.as_bytes()),
        config: cfg.clone(),
        seed: cfg.seed,
        kappa: cfg.kappa,
        family: inst.model.family(),
        behavior_modes: vec!["raw".into(), "renormalized".into()],
        estimates: est,
        queries: records,
        fits,
        checks: counts,
    };
    Ok(SweepResult {
        rows,
        validators,
        manifest,
    })
}

fn info(check: Check, item: impl Into<String>, measured: f64, reference: f64) -> ValidatorRow {
    ValidatorRow {
        check: check.name().into(),
        item: item.into(),
        measured,
        reference,
        status: Status::Info,
    }
}

fn judged(check: Check, item: impl Into<String>, measured: f64, reference: f64, ok: bool) -> ValidatorRow {
    ValidatorRow {
        check: check.name().into(),
        item: item.into(),
        measured,
        reference,
        status: if ok { Status::Pass } else { Status::Fail },
    }
}

fn skipped(check: Check, item: impl Into<String>) -> ValidatorRow {
    ValidatorRow {
        check: check.name().into(),
        item: item.into(),
        measured: f64::NAN,
        reference: f64::NAN,
        status: Status::Skip,
    }
}

fn renorm_at(inst: &Instance, q: &Query, r_e: f64) -> Result<f64> {
    let d = inst
        .model
        .steered_distribution(&inst.steering.with_coefficient(r_e), &q.context)?;
    metrics::behavior_expectation(&d, &inst.spec, BehaviorMode::Renormalized)
}

/// Smallest slack `measured − bound` over the non-negative grid points below
/// `limit`, and how many points were compared.
fn min_slack(
    inst: &Instance,
    q: &Query,
    grid: &[f64],
    limit: f64,
    bound: impl Fn(f64) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut worst = f64::INFINITY;
    let mut n = 0;
    for &r in grid.iter().filter(|&&r| r >= 0.0 && r < limit) {
        worst = worst.min(renorm_at(inst, q, r)? - bound(r)?);
        n += 1;
    }
    Ok((worst, n))
}

fn run_checks(
    cfg: &ExperimentConfig,
    inst: &Instance,
    est: &Estimates,
    records: &[QueryRecord],
    curve: &validators::NormCurve,
    grid: &[f64],
) -> Result<Vec<ValidatorRow>> {
    let mut out = Vec::new();
    let model = &inst.model;
    let kappa = cfg.kappa.value();
    for check in &cfg.checks {
        match check {
            Check::Thm1 | Check::Thm2 => {}
            Check::Assumptions => {
                let planted = cfg.model.margin.as_ref();
                let nan = f64::NAN;
                out.push(info(*check, "lambda_hat", curve.lambda_hat, planted.map_or(nan, |m| m.lambda)));
                out.push(info(*check, "lambda_r2", curve.r2, nan));
                out.push(info(*check, "margin_hat", est.margin_hat, planted.map_or(nan, |m| m.delta)));
                out.push(info(*check, "slope_product", est.slope_product, nan));
                if let (Some(a), Some(e), Some(k)) = (est.alpha_hat, est.eps_hat, est.lsb_hat) {
                    out.push(info(*check, "alpha_hat", a, f64::NAN));
                    out.push(info(*check, "eps_hat", e, f64::NAN));
                    out.push(info(*check, "lambda_sigma_beta_hat", k, f64::NAN));
                }
                let contexts: Vec<(HiddenState, usize)> = inst
                    .queries
                    .iter()
                    .filter_map(|q| q.correct.map(|c| (q.context.clone(), c)))
                    .collect();
                if !contexts.is_empty() {
                    let nonneg: Vec<f64> = grid.iter().copied().filter(|r| *r >= 0.0).collect();
                    let p = validators::logit_noise_profile(model, &inst.steering, &contexts, &nonneg, cfg.t)?;
                    out.push(info(*check, "lambda_sigma", p.slope, f64::NAN));
                    out.push(info(*check, "lambda_sigma_r2", p.r2, f64::NAN));
                    out.push(info(*check, "noise_skewness", p.skewness, f64::NAN));
                    out.push(info(*check, "noise_excess_kurtosis", p.excess_kurtosis, f64::NAN));
                }
            }
            Check::Cor1 => {
                for (q, rec) in inst.queries.iter().zip(records) {
                    let item = format!("query {}", q.id);
                    match rec.b0 {
                        Some(b0) if b0 < 0.0 && est.slope_product > 0.0 => {
                            let r = bounds::min_coefficient_for_alignment(CHECK_EPS, b0, kappa * est.slope_product)?;
                            let m = renorm_at(inst, q, r)?;
                            out.push(judged(*check, format!("{item} r_e={r}"), m, 1.0 - CHECK_EPS, m > 1.0 - CHECK_EPS));
                        }
                        _ => out.push(skipped(*check, item)),
                    }
                }
            }
            Check::SoftMargin => {
                for (q, rec) in inst.queries.iter().zip(records) {
                    let item = format!("query {}", q.id);
                    let Some(b0) = rec.b0 else {
                        out.push(skipped(*check, item));
                        continue;
                    };
                    let prof = validators::soft_margin_profile(model, &inst.steering, &q.context, &inst.spec, PROBE_COEFFICIENT)?;
                    let (_, x) = direction_projections(inst, q, PROBE_COEFFICIENT)?;
                    let x = x.ok_or_else(|| Error::DegenerateDirection("steering has no effect".into()))?;
                    let clean: Vec<usize> = inst
                        .spec
                        .misaligned()
                        .into_iter()
                        .filter(|t| !prof.misclassified.contains(t))
                        .collect();
                    let sep = separation(&x, &inst.spec.aligned(), &clean);
                    if !(sep > 0.0) || clean.is_empty() {
                        out.push(skipped(*check, item));
                        continue;
                    }
                    let params = SoftMarginParams {
                        slope_product: sep * est.lambda_hat,
                        kappa: cfg.kappa,
                        b0,
                        delta: prof.delta,
                        depth: if prof.depth > 0.0 { prof.depth } else { 1.0 },
                        lambda: est.lambda_hat.max(f64::MIN_POSITIVE),
                        eps: CHECK_EPS,
                    };
                    let limit = bounds::soft_margin_bound(&params, 0.0)?.valid_region_max;
                    let (slack, n) = min_slack(inst, q, grid, limit, |r| Ok(bounds::soft_margin_bound(&params, r)?.value))?;
                    if n == 0 {
                        out.push(skipped(*check, item));
                    } else {
                        out.push(judged(*check, format!("{item} delta={} depth={}", prof.delta, prof.depth), slack, n as f64, slack >= -BOUND_TOL));
                    }
                }
            }
            Check::Trinary | Check::General => {
                for (q, rec) in inst.queries.iter().zip(records) {
                    let item = format!("query {}", q.id);
                    let Some(b0) = rec.b0 else {
                        out.push(skipped(*check, item));
                        continue;
                    };
                    let (_, x) = direction_projections(inst, q, PROBE_COEFFICIENT)?;
                    let Some(x) = x else {
                        out.push(skipped(*check, item));
                        continue;
                    };
                    let (plus, rest) = positive_split(&inst.spec);
                    let sep = separation(&x, &plus, &rest);
                    let ordered = *check == Check::General
                        || inst.spec.neutral().is_empty()
                        || separation(&x, &inst.spec.neutral(), &inst.spec.misaligned()) >= 0.0;
                    if !(sep > 0.0) || !ordered {
                        out.push(skipped(*check, item));
                        continue;
                    }
                    let base = model.next_token_distribution(&model.forward(&q.context)?)?;
                    let mass = |set: &[usize]| set.iter().map(|&t| base.probs[t]).sum::<f64>();
                    let scored = mass(&plus) + mass(&rest);
                    let (pp, pm) = (mass(&plus) / scored, mass(&rest) / scored);
                    let slope = kappa * sep * est.lambda_hat;
                    let (slack, n) = if *check == Check::Trinary {
                        min_slack(inst, q, grid, f64::INFINITY, |r| bounds::trinary_bound(b0, pp, slope, r))?
                    } else {
                        let b = inst.spec.b_plus.unwrap_or(1.0);
                        min_slack(inst, q, grid, f64::INFINITY, |r| bounds::general_score_bound(b, pp, pm, slope, r))?
                    };
                    out.push(judged(*check, item, slack, n as f64, slack >= -BOUND_TOL));
                }
            }
            Check::MultiToken => {
                for q in &inst.queries {
                    out.push(multi_token_row(cfg, inst, est, q)?);
                }
            }
            Check::PreferenceEquiv => {
                for q in &inst.queries {
                    out.push(preference_row(inst, q)?);
                }
            }
        }
    }
    Ok(out)
}

/// Smallest unsteered `2·P(aligned) − 1` over every all-aligned prefix of
/// length `< n`.
pub fn min_prefix_b0(model: &LayeredModel, ctx: &HiddenState, aligned: &[usize], n: usize) -> Result<f64> {
    let base = model.next_token_distribution(&model.forward(ctx)?)?;
    let p: f64 = aligned.iter().map(|&t| base.probs[t]).sum();
    let mut worst = 2.0 * p - 1.0;
    if n > 1 {
        for &t in aligned {
            let next = model.advance_context(ctx, t)?;
            worst = worst.min(min_prefix_b0(model, &next, aligned, n - 1)?);
        }
    }
    Ok(worst)
}

fn multi_token_row(cfg: &ExperimentConfig, inst: &Instance, est: &Estimates, q: &Query) -> Result<ValidatorRow> {
    let check = Check::MultiToken;
    let item = format!("query {}", q.id);
    let model = &inst.model;
    let v = model.vocab_size() as u128;
    if v.checked_pow(cfg.n as u32).is_none_or(|s| s > metrics::SEQUENCE_ENUMERATION_CAP) {
        return Ok(skipped(check, item));
    }
    let aligned = inst.spec.aligned();
    let others: Vec<usize> = (0..model.vocab_size()).filter(|t| !aligned.contains(t)).collect();
    let (_, x) = direction_projections(inst, q, PROBE_COEFFICIENT)?;
    let Some(x) = x else {
        return Ok(skipped(check, item));
    };
    let sep = separation(&x, &aligned, &others);
    let b0 = min_prefix_b0(model, &q.context, &aligned, cfg.n)?;
    if !(sep > 0.0) || b0.abs() >= 1.0 || est.lambda_hat <= 0.0 {
        return Ok(skipped(check, item));
    }
    let r = bounds::multi_token_min_coefficient(cfg.n, CHECK_EPS, b0, cfg.kappa.value() * sep * est.lambda_hat)?
        .max(0.0);
    let e = metrics::sequence_behavior_expectation(
        model,
        &inst.steering.with_coefficient(r),
        &q.context,
        &inst.spec,
        cfg.n,
        SequenceMethod::Enumerate,
    )?;
    let target = 1.0 - 2.0 * CHECK_EPS;
    Ok(judged(check, format!("{item} r_e={r}"), e.value, target, e.value >= target - BOUND_TOL))
}

fn preference_row(inst: &Instance, q: &Query) -> Result<ValidatorRow> {
    let check = Check::PreferenceEquiv;
    let item = format!("query {}", q.id);
    let model = &inst.model;
    let last_is_identity = matches!(model.layers().last(), Some(Layer::Identity));
    let preferred = q.correct.or_else(|| inst.spec.aligned().first().copied());
    let dispreferred = inst.spec.misaligned().into_iter().find(|&t| Some(t) != preferred);
    let (Some(p), Some(m)) = (preferred, dispreferred) else {
        return Ok(skipped(check, item));
    };
    if !last_is_identity {
        return Ok(skipped(check, format!("{item} (last layer is not the identity)")));
    }
    let last = model.forward(&q.context)?;
    let stepped = model::preference_gradient_step(model, &last, p, m, PREFERENCE_ETA)?;
    let a = model.next_token_distribution(&stepped)?;
    let w = model::preference_direction(model, p, m)?;
    let norm = linalg::norm(&w);
    let s = SteeringVectorSet::shared(model.hidden_dim(), &w, &[model.num_layers()])?.with_coefficient(PREFERENCE_ETA * norm);
    let b = model.steered_distribution(&s, &q.context)?;
    let gap = a
        .probs
        .iter()
        .zip(&b.probs)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(judged(check, item, gap, 1e-12, gap <= 1e-12))
}

fn window_points(rows: &[SweepRow], window: Option<[f64; 2]>, nonneg: bool, y: impl Fn(&SweepRow) -> f64) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| !nonneg || r.r_e >= 0.0)
        .filter(|r| window.is_none_or(|[a, b]| r.r_e >= a && r.r_e <= b))
        .map(|r| (r.r_e, y(r)))
        .filter(|p| p.1.is_finite())
        .collect()
}

fn run_fits(
    cfg: &ExperimentConfig,
    inst: &Instance,
    est: &Estimates,
    rows: &[SweepRow],
    curve: &validators::NormCurve,
) -> Vec<FitReport> {
    let mut fits = Vec::new();
    let (lo, hi) = curve.window;
    let window: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter(|(r, _)| *r >= lo && *r <= hi)
        .copied()
        .collect();
    fits.push(FitReport {
        parameters: vec![FitParameter {
            name: "lambda".into(),
            estimate: curve.lambda_hat,
            lower: 0.0,
            upper: f64::INFINITY,
        }],
        rss: window
            .iter()
            .map(|(r, n)| (n - curve.lambda_hat * r.abs()).powi(2))
            .sum(),
        r2: curve.r2,
        trace_len: window.len(),
    });
    if inst.spec.kind == BehaviorKind::Binary {
        if let Ok(points) = validators::cluster_separation_curve(
            &inst.model,
            &inst.steering,
            &inst.queries[0].context,
            &inst.spec,
            &window.iter().map(|p| p.0).chain([0.0]).collect::<Vec<_>>(),
        ) {
            if let Ok(f) = fitting::fit_linear_through_origin(&points) {
                fits.push(FitReport {
                    parameters: vec![FitParameter {
                        name: "delta_lambda_cluster".into(),
                        estimate: f.slope,
                        lower: f64::NEG_INFINITY,
                        upper: f64::INFINITY,
                    }],
                    rss: f.rss,
                    r2: f.r2,
                    trace_len: points.len(),
                });
            }
        }
    }
    fits.extend(sweep_fits(cfg, rows, est.eps_hat));
    fits
}

/// Fits that need only the sweep table: the tanh slope of renormalized
/// behavior and the (α, λσβ) helpfulness curve.
pub fn sweep_fits(cfg: &ExperimentConfig, rows: &[SweepRow], eps_hat: Option<f64>) -> Vec<FitReport> {
    let mut fits = Vec::new();
    let b0 = rows.iter().find(|r| r.r_e == 0.0).map(|r| r.behavior_renorm);
    let tanh_points = window_points(rows, cfg.fit_windows.tanh, true, |r| r.behavior_renorm);
    if let Some(b0) = b0.filter(|b| b.abs() < 1.0) {
        if let Ok(f) = fitting::fit_tanh_slope(&tanh_points, b0, TANH_SLOPE_CAP) {
            let mut report = f.report;
            report.parameters[0].name = "tanh_slope".into();
            fits.push(report);
        }
    }
    let p0 = rows.iter().find(|r| r.r_e == 0.0).map(|r| r.helpfulness);
    let help_points = window_points(rows, cfg.fit_windows.helpfulness, false, |r| r.helpfulness);
    if let Some(p0) = p0.filter(|p| *p > 0.0 && *p < 1.0) {
        let eps = eps_hat.unwrap_or(0.0).clamp(0.0, 0.999);
        if let Ok(f) = fitting::fit_helpfulness_curve(&help_points, p0, eps, LSB_CAP) {
            fits.push(f.report);
        }
    }
    fits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::validate_config;

    fn margin_config(checks: &str) -> ExperimentConfig {
        validate_config(&format!(
            r#"{{
                "seed": 3,
                "model": {{"family": "margin-constructed", "hidden_dim": 8, "vocab_size": 12,
                          "margin": {{"delta": 0.5, "lambda": 2.0}}}},
                "behavior": {{"aligned": [0, 1, 2], "misaligned": [3, 4, 5],
                             "choice_set": [6, 7, 8, 9]}},
                "grid": "0:6:0.5",
                "queries": 6,
                "checks": {checks}
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn margin_sweep_has_no_violations() {
        let cfg = margin_config(r#"["thm1", "thm2", "cor1", "multi-token", "assumptions"]"#);
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.rows.len(), 13);
        assert_eq!(res.rows[0].r_e, 0.0);
        assert!(!res.has_violation(), "{:?}", res.manifest.checks);
        assert!((res.manifest.estimates.margin_hat - 0.5).abs() < 1e-9);
        assert!((res.manifest.estimates.lambda_hat - 2.0).abs() < 1e-9);
        for row in &res.rows {
            assert!(row.behavior_renorm >= row.thm1_bound - 1e-9);
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let cfg = margin_config(r#"["thm1", "thm2"]"#);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn extracted_steering_recovers_concept() {
        let mut cfg = margin_config("[]");
        cfg.steering.source = SteeringSource::Extracted;
        let inst = build_instance(&cfg).unwrap();
        let u = &inst.model.plant().unwrap().direction;
        let v = inst.steering.direction(1);
        assert!(linalg::dot(u, &v) > 0.99);
    }

    #[test]
    fn queries_draw_correct_tokens_from_choices() {
        let cfg = margin_config("[]");
        let qs = build_queries(&cfg, 8);
        assert!(qs.iter().all(|q| q.correct.is_some_and(|c| (6..10).contains(&c))));
    }

    #[test]
    fn preference_check_on_identity_family() {
        let cfg = validate_config(
            r#"{"model": {"family": "identity", "hidden_dim": 6, "vocab_size": 10, "num_layers": 2},
                "behavior": {"aligned": [0, 1], "misaligned": [2, 3]},
                "grid": "0:2:1", "queries": 4, "checks": ["preference-equiv"]}"#,
        )
        .unwrap();
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.manifest.checks["preference-equiv"].pass, 4);
    }
}

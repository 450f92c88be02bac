//! Closed-form bound, threshold and asymptote evaluators.
//!
//! Every evaluator rejects singular inputs instead of clamping them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slope convention for the tanh alignment bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum Kappa {
    /// `κ = ½`, guaranteed sound.
    #[default]
    Half,
    /// `κ = 1`, the steeper convention.
    One,
}

impl Kappa {
    pub fn value(self) -> f64 {
        match self {
            Kappa::Half => 0.5,
            Kappa::One => 1.0,
        }
    }
}

impl TryFrom<f64> for Kappa {
    type Error = String;

    fn try_from(v: f64) -> std::result::Result<Self, String> {
        if v == 0.5 {
            Ok(Kappa::Half)
        } else if v == 1.0 {
            Ok(Kappa::One)
        } else {
            Err(format!("kappa must be 0.5 or 1, got {v}"))
        }
    }
}

impl From<Kappa> for f64 {
    fn from(k: Kappa) -> f64 {
        k.value()
    }
}

impl std::fmt::Display for Kappa {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.value())
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > -1.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::precondition(format!("{name} must lie in (-1, 1), got {v}")))
    }
}

fn probability_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::precondition(format!("{name} must lie in (0, 1), got {v}")))
    }
}

fn check_helpfulness_params(alpha: f64, eps: f64, lsb: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::precondition(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::precondition(format!("eps must lie in [0, 1), got {eps}")));
    }
    if !(lsb >= 0.0) || !lsb.is_finite() {
        return Err(Error::precondition(format!("lambda*sigma*beta must be >= 0, got {lsb}")));
    }
    Ok(())
}

/// `tanh(κ·Δλ·r_e + artanh B0)`.
pub fn tanh_lower_bound(slope_product: f64, kappa: Kappa, b0: f64, r_e: f64) -> Result<f64> {
    open_unit("B0", b0)?;
    finite("slope product", slope_product)?;
    finite("r_e", r_e)?;
    Ok((kappa.value() * slope_product * r_e + b0.atanh()).tanh())
}

/// Smallest coefficient at which the tanh bound reaches `1 − ε` from a
/// starting behavior `γ < 0`.
pub fn min_coefficient_for_alignment(eps: f64, gamma: f64, kappa_slope: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 2.0) {
        return Err(Error::precondition(format!("eps must lie in (0, 2), got {eps}")));
    }
    if !(gamma < 0.0 && gamma > -1.0) {
        return Err(Error::precondition(format!("gamma must lie in (-1, 0), got {gamma}")));
    }
    if !(kappa_slope > 0.0) || !kappa_slope.is_finite() {
        return Err(Error::precondition("kappa*slope must be > 0"));
    }
    Ok(((1.0 - eps).atanh() - gamma.atanh()) / kappa_slope)
}

/// Parabolic helpfulness cap
/// `P0 / (P0 + (1−P0)·α·(1−ε)·(1 + (λσβ)²·r_e²/2))`.
pub fn helpfulness_upper_bound(p0: f64, alpha: f64, eps: f64, lsb: f64, r_e: f64) -> Result<f64> {
    probability_open("P0", p0)?;
    check_helpfulness_params(alpha, eps, lsb)?;
    finite("r_e", r_e)?;
    Ok(p0 / (p0 + helpfulness_denominator_term(p0, alpha, eps, lsb, r_e)))
}

fn helpfulness_denominator_term(p0: f64, alpha: f64, eps: f64, lsb: f64, r_e: f64) -> f64 {
    let k = lsb * r_e;
    (1.0 - p0) * alpha * (1.0 - eps) * (1.0 + 0.5 * k * k)
}

/// Per-query expectation bound with the two tail events folded in:
/// `(1 − 1/T)·bound + 1/T`.
pub fn expected_helpfulness_with_tails(
    p0: f64,
    alpha: f64,
    eps: f64,
    lsb: f64,
    t: usize,
    r_e: f64,
) -> Result<f64> {
    if t < 3 {
        return Err(Error::precondition(format!("T must be >= 3, got {t}")));
    }
    let inner = helpfulness_upper_bound(p0, alpha, eps, lsb, r_e)?;
    let w = 1.0 / t as f64;
    Ok((1.0 - w) * inner + w)
}

pub fn one_over_n_asymptote(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::precondition(format!("N must be >= 2, got {n}")));
    }
    Ok(1.0 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SoftMarginBound {
    pub value: f64,
    /// Largest `r_e` at which the misclassification correction stays `<= ε`.
    pub valid_region_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMarginParams {
    pub slope_product: f64,
    pub kappa: Kappa,
    pub b0: f64,
    pub delta: f64,
    pub depth: f64,
    pub lambda: f64,
    pub eps: f64,
}

/// `tanh(κ·Δλ·r_e + artanh B0) − 2δ·exp(M·λ·r_e)` and its valid region
/// `log(ε/(2δ))/(M·λ)`.
pub fn soft_margin_bound(p: &SoftMarginParams, r_e: f64) -> Result<SoftMarginBound> {
    if !(p.delta >= 0.0) || !(p.depth > 0.0) || !(p.lambda > 0.0) {
        return Err(Error::precondition("soft margin needs delta >= 0, M > 0, lambda > 0"));
    }
    if !(p.eps > 0.0) {
        return Err(Error::precondition("soft margin tolerance eps must be > 0"));
    }
    let base = tanh_lower_bound(p.slope_product, p.kappa, p.b0, r_e)?;
    if p.delta == 0.0 {
        return Ok(SoftMarginBound {
            value: base,
            valid_region_max: f64::INFINITY,
        });
    }
    let ml = p.depth * p.lambda;
    Ok(SoftMarginBound {
        value: base - 2.0 * p.delta * (ml * r_e).exp(),
        valid_region_max: (p.eps / (2.0 * p.delta)).ln() / ml,
    })
}

/// `(B0 + P₊(e^{s·r} − 1)) / (1 + P₊(e^{s·r} − 1))` with `s = κ·Δλ`.
pub fn trinary_bound(b0: f64, p_plus: f64, kappa_slope: f64, r_e: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&b0) {
        return Err(Error::precondition(format!("B0 must lie in [-1, 1], got {b0}")));
    }
    probability_open("P_plus", p_plus)?;
    finite("kappa*slope", kappa_slope)?;
    let g = p_plus * (kappa_slope * r_e).exp_m1();
    Ok((b0 + g) / (1.0 + g))
}

/// `(b₊·P₊·e^{s·r} − P₋) / (P₊·e^{s·r} + P₋)` with `s = κ·Δλ`.
pub fn general_score_bound(
    b_plus: f64,
    p_plus: f64,
    p_minus: f64,
    kappa_slope: f64,
    r_e: f64,
) -> Result<f64> {
    if !(p_plus > 0.0) || !(p_minus > 0.0) {
        return Err(Error::precondition("P_plus and P_minus must be > 0"));
    }
    finite("kappa*slope", kappa_slope)?;
    // divide through by e^{s·r} so large coefficients do not overflow
    let m = p_minus * (-kappa_slope * r_e).exp();
    Ok((b_plus * p_plus - m) / (p_plus + m))
}

/// Coefficient after which an `N`-token reply is all-aligned with
/// probability at least `1 − ε`.
pub fn multi_token_min_coefficient(n: usize, eps: f64, b0: f64, kappa_slope: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::precondition("N must be >= 1"));
    }
    probability_open("eps", eps)?;
    open_unit("B0", b0)?;
    if !(kappa_slope > 0.0) || !kappa_slope.is_finite() {
        return Err(Error::precondition("kappa*slope must be > 0"));
    }
    Ok((((1.0 - b0) / (1.0 + b0)).ln() + (n as f64 / eps).ln()) / kappa_slope)
}

/// Product of per-token helpfulness caps.
pub fn multi_token_helpfulness_bound(
    p0s: &[f64],
    alpha: f64,
    eps: f64,
    lsb: f64,
    r_e: f64,
) -> Result<f64> {
    if p0s.is_empty() {
        return Err(Error::precondition("per-token P0 list is empty"));
    }
    let mut acc = 1.0;
    for &p in p0s {
        acc *= helpfulness_upper_bound(p, alpha, eps, lsb, r_e)?;
    }
    Ok(acc)
}

/// Symbols consumed by the single-token bounds, as stored in run manifests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    /// `Δλ`.
    pub slope_product: f64,
    pub kappa: Kappa,
    pub b0: f64,
    pub p0: f64,
    pub alpha: f64,
    pub eps: f64,
    /// `λσβ`.
    pub lsb: f64,
    pub t: usize,
}

impl BoundParams {
    pub fn tanh_lower_bound(&self, r_e: f64) -> Result<f64> {
        tanh_lower_bound(self.slope_product, self.kappa, self.b0, r_e)
    }

    pub fn helpfulness_upper_bound(&self, r_e: f64) -> Result<f64> {
        helpfulness_upper_bound(self.p0, self.alpha, self.eps, self.lsb, r_e)
    }

    pub fn expected_helpfulness_with_tails(&self, r_e: f64) -> Result<f64> {
        expected_helpfulness_with_tails(self.p0, self.alpha, self.eps, self.lsb, self.t, r_e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Reference evaluations through exponentials only.
    fn tanh_ref(x: f64) -> f64 {
        let e = (2.0 * x).exp();
        (e - 1.0) / (e + 1.0)
    }

    fn atanh_ref(x: f64) -> f64 {
        0.5 * ((1.0 + x) / (1.0 - x)).ln()
    }

    #[test]
    fn tanh_bound_values() {
        assert_eq!(tanh_lower_bound(3.0, Kappa::One, -0.3, 0.0).unwrap(), (-0.3f64).atanh().tanh());
        assert!((tanh_lower_bound(3.0, Kappa::Half, -0.3, 0.0).unwrap() + 0.3).abs() < 1e-15);
        let v = tanh_lower_bound(1.0, Kappa::Half, 0.0, 2.0).unwrap();
        assert!((v - tanh_ref(1.0)).abs() < 1e-15);
        assert!((v - 0.761_594).abs() < 1e-6);
        assert!((tanh_lower_bound(1.0, Kappa::Half, 0.0, 1e3).unwrap() - 1.0).abs() < 1e-15);
        assert!(tanh_lower_bound(1.0, Kappa::Half, 1.0, 1.0).is_err());
        assert!(tanh_lower_bound(1.0, Kappa::Half, -1.0, 1.0).is_err());
    }

    #[test]
    fn corollary_threshold() {
        let r = min_coefficient_for_alignment(1.0, -0.5, 1.0).unwrap();
        assert!((r - (atanh_ref(0.0) - atanh_ref(-0.5))).abs() < 1e-14);
        assert!((r - 0.549_306).abs() < 1e-6);
        let r = min_coefficient_for_alignment(0.1, -0.5, 1.0).unwrap();
        assert!((r - (atanh_ref(0.9) - atanh_ref(-0.5))).abs() < 1e-14);
        assert!((r - 2.021_525).abs() < 1e-6);
        let half = min_coefficient_for_alignment(0.1, -0.5, 2.0).unwrap();
        assert!((2.0 * half - r).abs() < 1e-14);
        let hit = tanh_lower_bound(2.0, Kappa::Half, -0.5, r).unwrap();
        assert!((hit - 0.9).abs() < 1e-12);
        assert!(min_coefficient_for_alignment(2.0, -0.5, 1.0).is_err());
        assert!(min_coefficient_for_alignment(0.1, 0.0, 1.0).is_err());
    }

    #[test]
    fn helpfulness_cap_values() {
        assert_eq!(helpfulness_upper_bound(0.37, 1.0, 0.0, 0.9, 0.0).unwrap(), 0.37);
        let v = helpfulness_upper_bound(0.8, 0.25, 0.1, 0.4, 5.0).unwrap();
        // 0.2·0.25·0.9·(1 + 4/2) = 0.135
        assert!((v - 0.8 / 0.935).abs() < 1e-15);
        assert!((v - 0.855_615).abs() < 1e-6);
        let far = helpfulness_upper_bound(0.5, 1.0, 0.0, 1.0, 1e4).unwrap();
        let farther = helpfulness_upper_bound(0.5, 1.0, 0.0, 1.0, 2e4).unwrap();
        assert!((far / farther - 4.0).abs() < 1e-3);
        assert!(helpfulness_upper_bound(1.0, 0.5, 0.0, 1.0, 1.0).is_err());
        assert!(helpfulness_upper_bound(0.5, 1.5, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn tail_weighted_expectation() {
        // inner bound 0.5: P0/(P0 + (1−P0)·α) with P0 = 0.25, α = 1/3
        let inner = helpfulness_upper_bound(0.25, 1.0 / 3.0, 0.0, 0.0, 0.0).unwrap();
        assert!((inner - 0.5).abs() < 1e-15);
        let v = expected_helpfulness_with_tails(0.25, 1.0 / 3.0, 0.0, 0.0, 10, 0.0).unwrap();
        assert!((v - 0.55).abs() < 1e-15);
        let v = expected_helpfulness_with_tails(0.5, 1.0, 0.0, 1.0, 4, 1e9).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        assert!((one_over_n_asymptote(4).unwrap() - v).abs() < 1e-12);
        assert_eq!(one_over_n_asymptote(2).unwrap(), 0.5);
        assert!(one_over_n_asymptote(1).is_err());
        let big_t = expected_helpfulness_with_tails(0.5, 0.5, 0.0, 0.5, 1_000_000_000, 1.0).unwrap();
        let cap = helpfulness_upper_bound(0.5, 0.5, 0.0, 0.5, 1.0).unwrap();
        assert!((big_t - cap).abs() < 1e-8);
        assert!(expected_helpfulness_with_tails(0.5, 0.5, 0.0, 0.5, 2, 1.0).is_err());
    }

    fn soft(delta: f64) -> SoftMarginParams {
        SoftMarginParams {
            slope_product: 1.0,
            kappa: Kappa::Half,
            b0: -0.2,
            delta,
            depth: 1.0,
            lambda: 1.0,
            eps: 0.1,
        }
    }

    #[test]
    fn soft_margin_values() {
        let zero = soft_margin_bound(&soft(0.0), 1.7).unwrap();
        assert_eq!(zero.value, tanh_lower_bound(1.0, Kappa::Half, -0.2, 1.7).unwrap());
        assert_eq!(zero.valid_region_max, f64::INFINITY);
        let at0 = soft_margin_bound(&soft(0.01), 0.0).unwrap();
        assert!((at0.value - (-0.2 - 0.02)).abs() < 1e-15);
        assert!((at0.valid_region_max - 5f64.ln()).abs() < 1e-15);
        assert!((at0.valid_region_max - 1.609_438).abs() < 1e-6);
        assert!(soft_margin_bound(&SoftMarginParams { depth: 0.0, ..soft(0.01) }, 1.0).is_err());
    }

    #[test]
    fn trinary_and_general_values() {
        assert!((trinary_bound(-0.2, 0.3, 1.0, 0.0).unwrap() + 0.2).abs() < 1e-15);
        assert!((trinary_bound(-0.2, 0.3, 1.0, 50.0).unwrap() - 1.0).abs() < 1e-12);
        let g = 0.3 * (1f64.exp() - 1.0);
        let v = trinary_bound(-0.2, 0.3, 1.0, 1.0).unwrap();
        assert!((v - (-0.2 + g) / (1.0 + g)).abs() < 1e-15);
        assert!((v - 0.208_175).abs() < 1e-6);

        let v = general_score_bound(0.8, 0.4, 0.6, 1.0, 2.0).unwrap();
        let e2 = 2f64.exp();
        assert!((v - (0.8 * 0.4 * e2 - 0.6) / (0.4 * e2 + 0.6)).abs() < 1e-15);
        assert!((v - 0.496_255).abs() < 1e-6);
        let v0 = general_score_bound(0.8, 0.4, 0.6, 1.0, 0.0).unwrap();
        assert!((v0 - (0.32 - 0.6) / 1.0).abs() < 1e-15);
        assert!((general_score_bound(0.8, 0.4, 0.6, 1.0, 800.0).unwrap() - 0.8).abs() < 1e-15);
        assert!(general_score_bound(0.8, 0.0, 0.6, 1.0, 1.0).is_err());
    }

    #[test]
    fn multi_token_values() {
        let r = multi_token_min_coefficient(10, 0.1, -0.5, 1.0).unwrap();
        assert!((r - (3f64.ln() + 100f64.ln())).abs() < 1e-14);
        assert!((r - 5.703_782).abs() < 1e-6);
        let r0 = multi_token_min_coefficient(7, 0.2, 0.0, 2.0).unwrap();
        assert!((r0 - (35f64).ln() / 2.0).abs() < 1e-14);
        // N = 1: misaligned odds fall to ε
        let r1 = multi_token_min_coefficient(1, 0.1, -0.3, 1.0).unwrap();
        let odds = (1.3 / 0.7) * (-r1).exp();
        assert!((odds - 0.1).abs() < 1e-14);
        assert!(multi_token_min_coefficient(3, 0.1, 1.0, 1.0).is_err());

        let v = multi_token_helpfulness_bound(&[0.9, 0.9], 0.5, 0.0, 0.5, 2.0).unwrap();
        assert!((v - 0.81 / (0.975 * 0.975)).abs() < 1e-15);
        assert!((v - 0.852_071).abs() < 1e-6);
        let one = multi_token_helpfulness_bound(&[0.6], 0.3, 0.1, 0.7, 1.5).unwrap();
        assert_eq!(one, helpfulness_upper_bound(0.6, 0.3, 0.1, 0.7, 1.5).unwrap());
        let at0 = multi_token_helpfulness_bound(&[0.6, 0.5, 0.9], 1.0, 0.0, 0.7, 0.0).unwrap();
        assert!((at0 - 0.27).abs() < 1e-15);
        assert!(multi_token_helpfulness_bound(&[], 0.3, 0.1, 0.7, 1.5).is_err());
    }

    #[test]
    fn kappa_serde() {
        assert_eq!(serde_json::to_string(&Kappa::Half).unwrap(), "0.5");
        assert_eq!(serde_json::from_str::<Kappa>("1.0").unwrap(), Kappa::One);
        assert!(serde_json::from_str::<Kappa>("2.0").is_err());
    }

    proptest! {
        #[test]
        fn tanh_bound_increasing_and_bounded(
            s in 0.01f64..5.0, b0 in -0.99f64..0.99, r in -5.0f64..5.0, dr in 1e-3f64..1.0,
        ) {
            let a = tanh_lower_bound(s, Kappa::Half, b0, r).unwrap();
            let b = tanh_lower_bound(s, Kappa::Half, b0, r + dr).unwrap();
            prop_assert!(b > a);
            prop_assert!(a > -1.0 && a < 1.0);
        }

        #[test]
        fn helpfulness_cap_even_peaked_decreasing(
            p0 in 0.01f64..0.99, alpha in 0.01f64..1.0, eps in 0.0f64..0.9,
            lsb in 0.01f64..2.0, r in 0.01f64..10.0,
        ) {
            let f = |x| helpfulness_upper_bound(p0, alpha, eps, lsb, x).unwrap();
            prop_assert_eq!(f(r), f(-r));
            prop_assert!(f(r) < f(0.0));
            prop_assert!(f(1.1 * r) < f(r));
            let h = 1e-3;
            prop_assert!(f(h) - 2.0 * f(0.0) + f(-h) < 0.0);
        }

        #[test]
        fn soft_margin_within_eps_of_tanh_in_valid_region(
            s in 0.1f64..3.0, b0 in -0.9f64..0.9, delta in 1e-4f64..0.04,
            depth in 0.1f64..2.0, lambda in 0.5f64..3.0, frac in 0.0f64..1.0,
        ) {
            let p = SoftMarginParams { slope_product: s, kappa: Kappa::Half, b0, delta, depth, lambda, eps: 0.1 };
            let rmax = soft_margin_bound(&p, 0.0).unwrap().valid_region_max;
            let r = frac * rmax;
            let v = soft_margin_bound(&p, r).unwrap().value;
            prop_assert!(v >= tanh_lower_bound(s, Kappa::Half, b0, r).unwrap() - 0.1 - 1e-12);
        }

        #[test]
        fn general_with_unit_b_plus_is_binary_form(
            pp in 0.01f64..1.0, pm in 0.01f64..1.0, s in 0.0f64..3.0, r in 0.0f64..5.0,
        ) {
            let e = (s * r).exp();
            let binary = (pp * e - pm) / (pp * e + pm);
            prop_assert!((general_score_bound(1.0, pp, pm, s, r).unwrap() - binary).abs() <= 1e-12);
            let b0 = (pp - pm) / (pp + pm);
            let t = tanh_lower_bound(s, Kappa::Half, b0, r).unwrap();
            prop_assert!((t - binary).abs() <= 1e-12);
        }

        #[test]
        fn trinary_endpoints_match_tanh(pp in 0.05f64..0.95, s in 0.1f64..3.0) {
            let b0 = 2.0 * pp - 1.0;
            prop_assert!((trinary_bound(b0, pp, s, 0.0).unwrap() - b0).abs() < 1e-15);
            prop_assert!((trinary_bound(b0, pp, s, 60.0 / s).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((tanh_lower_bound(s, Kappa::Half, b0, 0.0).unwrap() - b0).abs() < 1e-15);
        }
    }
}

//! Deterministic grid-then-refine fits of the bound parameters to sweep data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TANH_GRID_CELLS: usize = 1000;
pub const HELPFULNESS_GRID_CELLS: usize = 100;
pub const REFINE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitParameter {
    pub name: String,
    #[serde(with = "crate::serde_float")]
    pub estimate: f64,
    #[serde(with = "crate::serde_float")]
    pub lower: f64,
    #[serde(with = "crate::serde_float")]
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub parameters: Vec<FitParameter>,
    #[serde(with = "crate::serde_float")]
    pub rss: f64,
    #[serde(with = "crate::serde_float")]
    pub r2: f64,
    /// Objective evaluations spent in grid search and refinement.
    pub trace_len: usize,
}

impl FitReport {
    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.parameters
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.estimate)
    }
}

/// Coefficient of determination against the mean of `y`; when `y` is
/// constant the uncentered form `1 − rss/Σy²` is used instead.
pub fn r_squared(ys: &[f64], rss: f64) -> f64 {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let denom = if ss_tot > 0.0 {
        ss_tot
    } else {
        ys.iter().map(|y| y * y).sum()
    };
    if denom > 0.0 {
        1.0 - rss / denom
    } else if rss == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub r2: f64,
    pub rss: f64,
}

/// Least-squares slope of `y = s·x`.
pub fn fit_linear_through_origin(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::precondition("linear fit needs at least 2 points"));
    }
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    if sxx == 0.0 {
        return Err(Error::precondition("linear fit needs a nonzero x"));
    }
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let slope = sxy / sxx;
    let rss: f64 = points.iter().map(|(x, y)| (y - slope * x).powi(2)).sum();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    Ok(LinearFit {
        slope,
        r2: r_squared(&ys, rss),
        rss,
    })
}

/// Brent's minimizer on `[a, b]`; returns `(x, f(x), evaluations)`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> (f64, f64, usize) {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    const MAX_ITER: usize = 200;
    let (mut a, mut b) = (a.min(b), a.max(b));
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut evals = 1;
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..MAX_ITER {
        let m = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-15;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        evals += 1;
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            (v, fv, w, fw, x, fx) = (w, fw, x, fx, u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv, w, fw) = (w, fw, u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    (x, fx, evals)
}

fn check_points(points: &[(f64, f64)], min: usize) -> Result<()> {
    if points.len() < min {
        return Err(Error::precondition(format!("fit needs at least {min} points")));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("fit input point".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TanhFit {
    pub slope: f64,
    pub report: FitReport,
}

/// Fits `behavior ≈ tanh(s·r_e + artanh B0)` for `s ∈ [0, s_max]` with `B0`
/// held fixed.
pub fn fit_tanh_slope(points: &[(f64, f64)], b0: f64, s_max: f64) -> Result<TanhFit> {
    check_points(points, 3)?;
    if !(b0 > -1.0 && b0 < 1.0) {
        return Err(Error::precondition(format!("B0 must lie in (-1, 1), got {b0}")));
    }
    if !(s_max > 0.0) || !s_max.is_finite() {
        return Err(Error::precondition("s_max must be a positive finite number"));
    }
    let offset = b0.atanh();
    let rss = |s: f64| -> f64 {
        points
            .iter()
            .map(|(r, y)| (y - (s * r + offset).tanh()).powi(2))
            .sum()
    };
    let step = s_max / TANH_GRID_CELLS as f64;
    let (k_best, f_grid) = (0..=TANH_GRID_CELLS)
        .map(|k| (k, rss(k as f64 * step)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    let lo = k_best.saturating_sub(1) as f64 * step;
    let hi = (k_best + 1).min(TANH_GRID_CELLS) as f64 * step;
    let (s_ref, f_ref, evals) = brent_minimize(rss, lo, hi, REFINE_TOL);
    let (slope, best) = if f_ref <= f_grid {
        (s_ref, f_ref)
    } else {
        (k_best as f64 * step, f_grid)
    };
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    Ok(TanhFit {
        slope,
        report: FitReport {
            parameters: vec![FitParameter {
                name: "slope".into(),
                estimate: slope,
                lower: 0.0,
                upper: s_max,
            }],
            rss: best,
            r2: r_squared(&ys, best),
            trace_len: TANH_GRID_CELLS + 1 + evals,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelpfulnessFit {
    pub alpha: f64,
    pub lsb: f64,
    pub report: FitReport,
}

/// Fits the parabolic helpfulness cap for `(α, λσβ) ∈ [0,1] × [0, lsb_cap]`
/// with `P0` and `ε` held fixed.
pub fn fit_helpfulness_curve(
    points: &[(f64, f64)],
    p0: f64,
    eps: f64,
    lsb_cap: f64,
) -> Result<HelpfulnessFit> {
    check_points(points, 4)?;
    if !points.iter().any(|(r, _)| *r == 0.0) {
        return Err(Error::precondition("helpfulness fit needs a point at r_e = 0"));
    }
    if points.iter().all(|(r, _)| *r == 0.0) {
        return Err(Error::precondition("helpfulness fit needs a point with r_e != 0"));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::precondition(format!("P0 must lie in (0, 1), got {p0}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::precondition(format!("eps must lie in [0, 1), got {eps}")));
    }
    if !(lsb_cap > 0.0) || !lsb_cap.is_finite() {
        return Err(Error::precondition("lambda*sigma*beta cap must be positive"));
    }
    let rss = |alpha: f64, k: f64| -> f64 {
        points
            .iter()
            .map(|(r, y)| {
                let kr = k * r;
                let model = p0 / (p0 + (1.0 - p0) * alpha * (1.0 - eps) * (1.0 + 0.5 * kr * kr));
                (y - model).powi(2)
            })
            .sum()
    };
    let n = HELPFULNESS_GRID_CELLS;
    let (a_step, k_step) = (1.0 / n as f64, lsb_cap / n as f64);
    let mut best = (0.0, 0.0, f64::INFINITY);
    for i in 0..=n {
        for j in 0..=n {
            let (a, k) = (i as f64 * a_step, j as f64 * k_step);
            let f = rss(a, k);
            if f < best.2 {
                best = (a, k, f);
            }
        }
    }
    let mut trace = (n + 1) * (n + 1);
    let (mut a, mut k, mut f) = best;
    for _ in 0..50 {
        let before = f;
        let (a_new, fa, ea) = brent_minimize(
            |x| rss(x, k),
            (a - a_step).max(0.0),
            (a + a_step).min(1.0),
            REFINE_TOL,
        );
        trace += ea;
        if fa <= f {
            (a, f) = (a_new, fa);
        }
        let (k_new, fk, ek) = brent_minimize(
            |x| rss(a, x),
            (k - k_step).max(0.0),
            (k + k_step).min(lsb_cap),
            REFINE_TOL,
        );
        trace += ek;
        if fk <= f {
            (k, f) = (k_new, fk);
        }
        // Brent never lands exactly on an interval end
        for (ca, ck) in [(0.0, k), (1.0, k), (a, 0.0), (a, lsb_cap)] {
            let fc = rss(ca, ck);
            trace += 1;
            if fc < f {
                (a, k, f) = (ca, ck, fc);
            }
        }
        if before - f <= 1e-15 * before.max(1e-300) {
            break;
        }
    }
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    Ok(HelpfulnessFit {
        alpha: a,
        lsb: k,
        report: FitReport {
            parameters: vec![
                FitParameter {
                    name: "alpha".into(),
                    estimate: a,
                    lower: 0.0,
                    upper: 1.0,
                },
                FitParameter {
                    name: "lambda_sigma_beta".into(),
                    estimate: k,
                    lower: 0.0,
                    upper: lsb_cap,
                },
            ],
            rss: f,
            r2: r_squared(&ys, f),
            trace_len: trace,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn tanh_points(s: f64, b0: f64) -> Vec<(f64, f64)> {
        (0..21)
            .map(|i| {
                let r = i as f64 * 0.25;
                (r, (s * r + b0.atanh()).tanh())
            })
            .collect()
    }

    fn helpfulness_points(p0: f64, alpha: f64, k: f64) -> Vec<(f64, f64)> {
        (0..21)
            .map(|i| {
                let r = i as f64 * 0.5;
                let kr = k * r;
                (r, p0 / (p0 + (1.0 - p0) * alpha * (1.0 + 0.5 * kr * kr)))
            })
            .collect()
    }

    #[test]
    fn linear_fit_cases() {
        let exact: Vec<_> = (1..6).map(|i| (i as f64, 3.0 * i as f64)).collect();
        let f = fit_linear_through_origin(&exact).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-15);
        assert_eq!(f.r2, 1.0);
        let repeated = [(2.0, 1.0), (2.0, 3.0), (2.0, 5.0)];
        let f = fit_linear_through_origin(&repeated).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-15);
        assert!(f.r2 < 1.0);
        assert!(fit_linear_through_origin(&[(0.0, 1.0), (0.0, 2.0)]).is_err());
        assert!(fit_linear_through_origin(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn linear_fit_with_noise() {
        let mut r = rng::stream(11, "linear-noise");
        let noise = Normal::new(0.0, 0.01).unwrap();
        let pts: Vec<_> = (1..=50)
            .map(|i| {
                let x = i as f64 * 0.1;
                (x, 2.0 * x + noise.sample(&mut r))
            })
            .collect();
        let s = fit_linear_through_origin(&pts).unwrap().slope;
        assert!((1.98..=2.02).contains(&s));
    }

    #[test]
    fn brent_finds_parabola_minimum() {
        let (x, fx, _) = brent_minimize(|x| (x - 0.3).powi(2) + 1.0, 0.0, 1.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-8);
        assert!((fx - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tanh_fit_recovers_planted_slope() {
        let fit = fit_tanh_slope(&tanh_points(1.5, -0.3), -0.3, 10.0).unwrap();
        assert!((fit.slope - 1.5).abs() < 1e-6);
        assert!(fit.report.rss < 1e-20);
    }

    #[test]
    fn tanh_fit_constant_data_gives_zero() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64, -0.4)).collect();
        assert_eq!(fit_tanh_slope(&pts, -0.4, 10.0).unwrap().slope, 0.0);
    }

    #[test]
    fn tanh_fit_invariant_to_duplication() {
        let pts = tanh_points(0.7, 0.1);
        let noisy: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, (r, y))| (*r, y + 0.01 * ((i % 3) as f64 - 1.0)))
            .collect();
        let doubled: Vec<_> = noisy.iter().chain(noisy.iter()).copied().collect();
        let a = fit_tanh_slope(&noisy, 0.1, 10.0).unwrap().slope;
        let b = fit_tanh_slope(&doubled, 0.1, 10.0).unwrap().slope;
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn tanh_fit_preconditions() {
        assert!(fit_tanh_slope(&tanh_points(1.0, 0.0)[..2], 0.0, 10.0).is_err());
        assert!(fit_tanh_slope(&tanh_points(1.0, 0.0), 1.0, 10.0).is_err());
    }

    #[test]
    fn helpfulness_fit_recovers_planted_pair() {
        let pts = helpfulness_points(0.6, 0.5, 0.4);
        let fit = fit_helpfulness_curve(&pts, 0.6, 0.0, 5.0).unwrap();
        assert!((fit.alpha - 0.5).abs() < 0.005);
        assert!((fit.lsb - 0.4).abs() < 0.004);
    }

    #[test]
    fn helpfulness_fit_flat_data() {
        let pts: Vec<_> = (0..8).map(|i| (i as f64, 0.3)).collect();
        let fit = fit_helpfulness_curve(&pts, 0.3, 0.0, 5.0).unwrap();
        assert!(fit.lsb.abs() < 1e-6);
        assert!((fit.alpha - 1.0).abs() < 1e-6);
    }

    #[test]
    fn helpfulness_fit_is_even() {
        let pts = helpfulness_points(0.4, 0.7, 0.3);
        let mirrored: Vec<_> = pts.iter().map(|(r, y)| (-r, *y)).collect();
        let a = fit_helpfulness_curve(&pts, 0.4, 0.0, 5.0).unwrap();
        let b = fit_helpfulness_curve(&mirrored, 0.4, 0.0, 5.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn helpfulness_fit_preconditions() {
        let zeros = vec![(0.0, 0.5); 5];
        assert!(fit_helpfulness_curve(&zeros, 0.5, 0.0, 5.0).is_err());
        let no_zero: Vec<_> = (1..6).map(|i| (i as f64, 0.5)).collect();
        assert!(fit_helpfulness_curve(&no_zero, 0.5, 0.0, 5.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn tanh_fit_never_worse_than_grid(s in 0.05f64..4.0, b0 in -0.8f64..0.8, jitter in 0.0f64..0.05) {
            let pts: Vec<_> = tanh_points(s, b0)
                .into_iter()
                .enumerate()
                .map(|(i, (r, y))| (r, y + jitter * ((i * 7 % 5) as f64 - 2.0) / 2.0))
                .collect();
            let fit = fit_tanh_slope(&pts, b0, 10.0).unwrap();
            let offset = b0.atanh();
            for k in 0..=TANH_GRID_CELLS {
                let g = k as f64 * 0.01;
                let f: f64 = pts.iter().map(|(r, y)| (y - (g * r + offset).tanh()).powi(2)).sum();
                prop_assert!(fit.report.rss <= f);
            }
            prop_assert!((0.0..=10.0).contains(&fit.slope));
            let again = fit_tanh_slope(&pts, b0, 10.0).unwrap();
            prop_assert_eq!(fit, again);
        }

        #[test]
        fn tanh_fit_identity_on_noiseless_data(s in 0.05f64..4.0, b0 in -0.8f64..0.8) {
            let fit = fit_tanh_slope(&tanh_points(s, b0), b0, 10.0).unwrap();
            prop_assert!((fit.slope - s).abs() < 1e-6);
        }
    }
}

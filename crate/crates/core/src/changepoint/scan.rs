//! Break-date estimation and Wald tests in the structural equation.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::changepoint::critvals::{CriticalValueTable, LEVELS};
use crate::covariance::{hac_lrv, HacConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::ols_first_stage;
use crate::linalg::{hstack, spd_inverse, spd_solve_vec, wald_form, Singular};

/// Admissible breaks `⌈εT⌉ ..= ⌊(1-ε)T⌋`, further restricted so both regimes keep `min_len` rows.
pub fn candidate_grid(t: usize, trimming: f64, min_len: usize) -> Vec<usize> {
    let lo = ((trimming * t as f64).ceil() as usize).max(min_len).max(1);
    let hi = (((1.0 - trimming) * t as f64).floor() as usize).min(t.saturating_sub(min_len));
    (lo..=hi).collect()
}

fn check_trimming(trimming: f64) -> Result<()> {
    if trimming > 0.0 && trimming < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("trimming {trimming} outside (0, 0.5)")))
    }
}

/// Fitted regressors `Ŵ = [Z1, ZΠ̂]` from the full-sample first stage.
fn fitted_w(data: &Dataset) -> Result<DMatrix<f64>> {
    let fs = ols_first_stage(data, None)?;
    Ok(hstack(&[data.z1(), &(data.z() * &fs.pi[0])]))
}

/// OLS of `y[r]` on `x[r]`; `None` when the segment design is singular.
fn segment_ols(x: &DMatrix<f64>, y: &DVector<f64>, r: Range<usize>) -> Option<(DVector<f64>, DVector<f64>)> {
    let xs = x.rows(r.start, r.len());
    let ys = y.rows(r.start, r.len());
    let xtx = xs.transpose() * xs;
    let b = spd_solve_vec(&xtx, &(xs.transpose() * ys), Singular::Design, "segment").ok()?;
    let res = ys - xs * &b;
    Some((b, res))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakEstimate {
    pub break_idx: usize,
    pub lambda_hat: f64,
    pub candidates: Vec<usize>,
    /// Two-regime SSR per candidate; `+∞` where a segment design was singular.
    pub ssr_profile: Vec<f64>,
}

/// Least-squares break date of the second-stage regression of `y` on `Ŵ`.
///
/// Ties resolve to the smallest index.
pub fn estimate_break_2sls(data: &Dataset, trimming: f64) -> Result<BreakEstimate> {
    check_trimming(trimming)?;
    let what = fitted_w(data)?;
    let t = data.t();
    let candidates = candidate_grid(t, trimming, data.p());
    if candidates.is_empty() {
        return Err(Error::NoCandidates(format!("T = {t}, trimming {trimming}")));
    }
    let y = data.y();
    let ssr_profile: Vec<f64> = candidates
        .par_iter()
        .map(|&k| {
            let a = segment_ols(&what, y, 0..k);
            let b = segment_ols(&what, y, k..t);
            match (a, b) {
                (Some((_, r1)), Some((_, r2))) => r1.norm_squared() + r2.norm_squared(),
                _ => f64::INFINITY,
            }
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in ssr_profile.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    let (i, _) = best.ok_or_else(|| Error::NoCandidates("every candidate split is singular".into()))?;
    let break_idx = candidates[i];
    Ok(BreakEstimate { break_idx, lambda_hat: break_idx as f64 / t as f64, candidates, ssr_profile })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldScan {
    pub candidates: Vec<usize>,
    pub wald_values: Vec<f64>,
    pub sup_stat: f64,
    /// Break index at which the supremum is attained.
    pub argmax_idx: usize,
    pub trimming: f64,
}

/// Sandwich `Â⁻¹ Ĥ Â⁻¹` of one regime, with `Â = X'X/T` and `Ĥ` the scaled HAC of `X_t e_t`.
fn regime_sandwich(
    x: &DMatrix<f64>,
    e: &DVector<f64>,
    r: Range<usize>,
    t: usize,
    cfg: &HacConfig,
) -> Result<DMatrix<f64>> {
    let xs = x.rows(r.start, r.len());
    let a = xs.transpose() * xs / t as f64;
    let a_inv = spd_inverse(&a, Singular::Design, "regime A")?;
    let xe = crate::estimators::scale_rows(xs, &e.rows(r.start, r.len()).into_owned());
    let h = hac_lrv(xe.as_view(), cfg)? * (r.len() as f64 / t as f64);
    Ok(&a_inv * h * &a_inv)
}

/// Residuals below this fraction of the outcome scale count as an exact fit.
const EXACT_FIT_TOL: f64 = 1e-10;

/// `T Δ' (G_1 + G_2)⁻¹ Δ` for `Δ = θ̂_1 - θ̂_2`.
///
/// With an exact fit (`e ≈ 0`) the statistic is zero when the regimes
/// agree and infinite otherwise.
fn two_regime_wald(
    th1: &DVector<f64>,
    th2: &DVector<f64>,
    g: &DMatrix<f64>,
    t: usize,
    e: &DVector<f64>,
    y: &DVector<f64>,
) -> f64 {
    let d = th1 - th2;
    let scale = th1.amax().max(th2.amax()).max(1.0);
    if e.amax() <= EXACT_FIT_TOL * y.amax().max(1.0) {
        return if d.amax() <= 1e-8 * scale { 0.0 } else { f64::INFINITY };
    }
    t as f64 * wald_form(&d, g, scale)
}

/// Wald statistic for equal coefficients before and after `k`, using the
/// full-sample first stage. `None` if a regime design is singular.
fn wald_at(what: &DMatrix<f64>, y: &DVector<f64>, k: usize, cfg: &HacConfig) -> Option<f64> {
    let t = y.len();
    let (b1, _) = segment_ols(what, y, 0..k)?;
    let (b2, _) = segment_ols(what, y, k..t)?;
    let mut e = DVector::zeros(t);
    e.rows_mut(0, k).copy_from(&(y.rows(0, k) - what.rows(0, k) * &b1));
    e.rows_mut(k, t - k).copy_from(&(y.rows(k, t - k) - what.rows(k, t - k) * &b2));
    let g1 = regime_sandwich(what, &e, 0..k, t, cfg).ok()?;
    let g2 = regime_sandwich(what, &e, k..t, t, cfg).ok()?;
    Some(two_regime_wald(&b1, &b2, &(g1 + g2), t, &e, y))
}

/// Sup-Wald scan for a single break in all structural coefficients.
pub fn sup_wald_scan(data: &Dataset, trimming: f64, cfg: &HacConfig) -> Result<WaldScan> {
    check_trimming(trimming)?;
    let what = fitted_w(data)?;
    let t = data.t();
    let grid = candidate_grid(t, trimming, data.p() + 1);
    let y = data.y();
    let values: Vec<Option<f64>> = grid.par_iter().map(|&k| wald_at(&what, y, k, cfg)).collect();
    let (candidates, wald_values): (Vec<usize>, Vec<f64>) =
        grid.into_iter().zip(values).filter_map(|(k, v)| v.map(|v| (k, v))).unzip();
    if candidates.is_empty() {
        return Err(Error::NoCandidates(format!("T = {t}, trimming {trimming}")));
    }
    let mut arg = 0;
    for (i, &v) in wald_values.iter().enumerate() {
        if v > wald_values[arg] {
            arg = i;
        }
    }
    Ok(WaldScan {
        sup_stat: wald_values[arg],
        argmax_idx: candidates[arg],
        candidates,
        wald_values,
        trimming,
    })
}

/// Reference distribution used for a test decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CriticalRef {
    Table(CriticalValueTable),
    ChiSquare { df: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakTestReport {
    pub statistic: f64,
    pub critical_values: CriticalRef,
    /// Rejection decision keyed by level (`"0.10"`, `"0.05"`, `"0.01"`).
    pub decision_at: BTreeMap<String, bool>,
    pub estimated_break: Option<usize>,
    pub p_value: Option<f64>,
}

pub fn level_key(level: f64) -> String {
    format!("{level:.2}")
}

impl BreakTestReport {
    pub fn from_table(statistic: f64, table: &CriticalValueTable, estimated_break: Option<usize>) -> Self {
        let decision_at = table.levels().iter().map(|&(l, cv)| (level_key(l), statistic > cv)).collect();
        BreakTestReport {
            statistic,
            critical_values: CriticalRef::Table(table.clone()),
            decision_at,
            estimated_break,
            p_value: table.p_value(statistic),
        }
    }

    pub fn rejects(&self, level: f64) -> bool {
        match (&self.critical_values, self.p_value) {
            (CriticalRef::ChiSquare { .. }, Some(p)) => p < level,
            (CriticalRef::Table(t), _) => self.statistic > t.critical_value(level),
            _ => false,
        }
    }
}

/// Upper tail of the χ² distribution.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    ChiSquared::new(df as f64).map(|d| d.sf(x.max(0.0))).unwrap_or(f64::NAN)
}

/// Wald test that the structural coefficients also change at a first-stage break.
///
/// First stage, fitted regressors and 2SLS estimates are all computed within
/// each segment; the variance uses structural residuals `y - Wθ̂`.
pub fn common_change_wald(data: &Dataset, first_stage_break: usize, cfg: &HacConfig) -> Result<BreakTestReport> {
    let t = data.t();
    let k = first_stage_break;
    let min = data.p().max(data.q()) + 1;
    if k == 0 || k >= t {
        return Err(Error::InvalidPartition(format!("break {k} not inside (0, {t})")));
    }
    for len in [k, t - k] {
        if len < min {
            return Err(Error::SegmentTooShort { len, min });
        }
    }
    let mut what = DMatrix::zeros(t, data.p());
    let mut theta = Vec::with_capacity(2);
    let mut e = DVector::zeros(t);
    for r in [0..k, k..t] {
        let z = data.z().rows(r.start, r.len());
        let x = data.x().rows(r.start, r.len());
        let pi = crate::estimators::ols(z, x, "segment Z'Z")?;
        let wr = hstack(&[&data.z1().rows(r.start, r.len()).into_owned(), &(z * pi)]);
        what.rows_mut(r.start, r.len()).copy_from(&wr);
        let th = crate::estimators::ols(wr.as_view(), data.y().rows(r.start, r.len()).as_view(), "segment W-hat'W-hat")?
            .column(0)
            .into_owned();
        let res = data.y().rows(r.start, r.len()) - data.w().rows(r.start, r.len()) * &th;
        e.rows_mut(r.start, r.len()).copy_from(&res);
        theta.push(th);
    }
    let g = regime_sandwich(&what, &e, 0..k, t, cfg)? + regime_sandwich(&what, &e, k..t, t, cfg)?;
    let statistic = two_regime_wald(&theta[0], &theta[1], &g, t, &e, data.y());
    let df = data.p();
    let p_value = chi2_sf(statistic, df);
    let decision_at = LEVELS.iter().map(|&l| (level_key(l), p_value < l)).collect();
    Ok(BreakTestReport {
        statistic,
        critical_values: CriticalRef::ChiSquare { df },
        decision_at,
        estimated_break: Some(k),
        p_value: Some(p_value),
    })
}

/// One sup-Wald test of the sequential procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialStep {
    /// 0-based half-open row range tested.
    pub segment: (usize, usize),
    pub statistic: f64,
    pub critical_value: f64,
    pub rejected: bool,
    /// Absolute 1-based break placed on rejection.
    pub break_idx: Option<usize>,
    /// Why the segment was not tested, if it was not.
    pub skipped: Option<String>,
}

/// Sequential sup-Wald search for structural breaks within `segment`.
///
/// On rejection the break is placed at the least-squares estimate and both
/// halves are searched again, with trimming relative to their own length.
/// A sub-segment is tested only if it has at least `2h` rows, where
/// `h = max(⌈ε n⌉, max(p, q) + 1)` and `n` is the length of `segment`.
pub fn sequential_sf_steps(
    data: &Dataset,
    segment: Range<usize>,
    trimming: f64,
    level: f64,
    table: &CriticalValueTable,
    cfg: &HacConfig,
) -> Result<(Vec<usize>, Vec<SequentialStep>)> {
    check_trimming(trimming)?;
    let cv = table.critical_value(level);
    let h = ((trimming * segment.len() as f64).ceil() as usize).max(data.p().max(data.q()) + 1);
    let root = segment.clone();
    let mut breaks = Vec::new();
    let mut steps = Vec::new();
    let mut stack = vec![segment];
    while let Some(r) = stack.pop() {
        let skip = |why: String| SequentialStep {
            segment: (r.start, r.end),
            statistic: f64::NAN,
            critical_value: cv,
            rejected: false,
            break_idx: None,
            skipped: Some(why),
        };
        if r != root && r.len() < 2 * h {
            steps.push(skip(format!("segment shorter than {} rows", 2 * h)));
            continue;
        }
        let sub = match data.slice(r.clone()) {
            Ok(s) => s,
            Err(e) => {
                steps.push(skip(e.to_string()));
                continue;
            }
        };
        let scan = match sup_wald_scan(&sub, trimming, cfg) {
            Ok(s) => s,
            Err(e) if matches!(e, Error::NoCandidates(_)) || e.is_numerical() => {
                steps.push(skip(e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let rejected = scan.sup_stat > cv;
        let mut step = SequentialStep {
            segment: (r.start, r.end),
            statistic: scan.sup_stat,
            critical_value: cv,
            rejected,
            break_idx: None,
            skipped: None,
        };
        if rejected {
            let est = estimate_break_2sls(&sub, trimming)?;
            let b = r.start + est.break_idx;
            step.break_idx = Some(b);
            breaks.push(b);
            stack.push(b..r.end);
            stack.push(r.start..b);
        }
        steps.push(step);
    }
    breaks.sort_unstable();
    Ok((breaks, steps))
}

pub fn sequential_sf_breaks(
    data: &Dataset,
    segment: Range<usize>,
    trimming: f64,
    level: f64,
    table: &CriticalValueTable,
    cfg: &HacConfig,
) -> Result<Vec<usize>> {
    Ok(sequential_sf_steps(data, segment, trimming, level, table, cfg)?.0)
}

//! Multiple-break least squares with the sequential `F(l+1|l)` test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::changepoint::critvals::{bp_critical_values, CriticalValueTable};
use crate::error::{Error, Result};
use crate::linalg::{check_condition, Singular};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpResult {
    pub n_breaks: usize,
    /// 1-based last indices of each regime but the final one.
    pub breaks: Vec<usize>,
    /// `F(l+1|l)` for `l = 0, 1, ...` until the first non-rejection or `max_breaks`.
    pub f_stats: Vec<f64>,
    pub critical_values: Vec<f64>,
    pub level: f64,
    /// Minimal SSR for `0..=max_breaks` breaks; `+∞` if infeasible.
    pub ssr_by_breaks: Vec<f64>,
    pub min_segment: usize,
}

/// SSR of every admissible segment `[i, j)`, indexed `i * (t + 1) + j`.
struct SsrTable {
    t: usize,
    ssr: Vec<f64>,
}

impl SsrTable {
    fn new(y: &DVector<f64>, x: &DMatrix<f64>, h: usize) -> Self {
        let (t, k) = (x.nrows(), x.ncols());
        let mut ssr = vec![f64::INFINITY; (t + 1) * (t + 1)];
        for i in 0..t {
            let mut xx = DMatrix::<f64>::zeros(k, k);
            let mut xy = DVector::<f64>::zeros(k);
            for j in i..t {
                let xr = x.row(j).transpose();
                xx += &xr * xr.transpose();
                xy += &xr * y[j];
                let n = j + 1 - i;
                if n < h {
                    continue;
                }
                if check_condition(&xx, Singular::Design, "segment").is_err() {
                    continue;
                }
                let Some(ch) = xx.clone().cholesky() else { continue };
                let b = ch.solve(&xy);
                // Direct residuals keep exact fits at exactly zero.
                let mut s = 0.0;
                for r in i..=j {
                    let e = y[r] - (x.row(r) * &b)[(0, 0)];
                    s += e * e;
                }
                ssr[i * (t + 1) + j + 1] = s;
            }
        }
        SsrTable { t, ssr }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.ssr[i * (self.t + 1) + j]
    }

    /// Best single split of `[i, j)`: (SSR, 1-based break).
    fn best_split(&self, i: usize, j: usize, h: usize) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for b in (i + h)..=(j.saturating_sub(h)) {
            let s = self.get(i, b) + self.get(b, j);
            if s.is_finite() && best.is_none_or(|(v, _)| s < v) {
                best = Some((s, b));
            }
        }
        best
    }
}

/// Global minimisers of total SSR for each number of breaks `0..=m`.
fn dynamic_program(tab: &SsrTable, m: usize, h: usize) -> Vec<(f64, Vec<usize>)> {
    let t = tab.t;
    // cost[l][j]: best SSR of [0, j) with l breaks; arg[l][j]: last break.
    let mut cost = vec![vec![f64::INFINITY; t + 1]; m + 1];
    let mut arg = vec![vec![0usize; t + 1]; m + 1];
    for j in h..=t {
        cost[0][j] = tab.get(0, j);
    }
    for l in 1..=m {
        for j in ((l + 1) * h)..=t {
            let mut best = f64::INFINITY;
            let mut at = 0;
            for b in (l * h)..=(j - h) {
                let s = cost[l - 1][b] + tab.get(b, j);
                if s < best {
                    best = s;
                    at = b;
                }
            }
            cost[l][j] = best;
            arg[l][j] = at;
        }
    }
    (0..=m)
        .map(|l| {
            let total = cost[l][t];
            let mut breaks = Vec::with_capacity(l);
            if total.is_finite() {
                let mut j = t;
                for ll in (1..=l).rev() {
                    let b = arg[ll][j];
                    breaks.push(b);
                    j = b;
                }
                breaks.reverse();
            }
            (total, breaks)
        })
        .collect()
}

/// `[(SSR_l - SSR*) / k] / [SSR* / (T - (l+2)k)]`.
///
/// SSRs at or below `zero` are exact fits: `0/0` counts as no improvement and
/// a positive SSR reduced to zero as an infinite statistic.
fn f_stat(ssr_l: f64, ssr_next: f64, l: usize, k: usize, t: usize, zero: f64) -> f64 {
    if ssr_l <= zero {
        return 0.0;
    }
    if ssr_next <= zero {
        return f64::INFINITY;
    }
    let num = (ssr_l - ssr_next).max(0.0) / k as f64;
    let dof = t as f64 - ((l + 2) * k) as f64;
    num / (ssr_next / dof.max(1.0))
}

/// Least-squares breaks in the regression of `y` on `x`, with the number
/// chosen by sequential `F(l+1|l)` tests at `level` and critical values
/// from `tables[l]`.
pub fn bp_ols_breaks_with(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    max_breaks: usize,
    trimming: f64,
    level: f64,
    tables: &[CriticalValueTable],
) -> Result<BpResult> {
    let (t, k) = (x.nrows(), x.ncols());
    if y.len() != t {
        return Err(Error::DimensionMismatch(format!("y has {} rows, x has {t}", y.len())));
    }
    if !(trimming > 0.0 && trimming < 0.5) {
        return Err(Error::InvalidConfig(format!("trimming {trimming} outside (0, 0.5)")));
    }
    if tables.len() < max_breaks {
        return Err(Error::InvalidConfig("fewer critical-value tables than max_breaks".into()));
    }
    let h = ((trimming * t as f64).ceil() as usize).max(k).max(1);
    if t < 2 * h {
        return Err(Error::TooFewRows { have: t, need: 2 * h });
    }
    let m = max_breaks.min(t / h - 1);
    let tab = SsrTable::new(y, x, h);
    let opt = dynamic_program(&tab, m, h);
    if !opt[0].0.is_finite() {
        return Err(Error::SingularDesign("full-sample regression".into()));
    }

    let zero = 1e-20 * y.norm_squared().max(f64::MIN_POSITIVE);
    let mut f_stats = Vec::new();
    let mut critical_values = Vec::new();
    let mut n_breaks = 0;
    for l in 0..m {
        let (ssr_l, ref br) = opt[l];
        if !ssr_l.is_finite() {
            break;
        }
        let mut bounds = vec![0];
        bounds.extend(br.iter().copied());
        bounds.push(t);
        // Best improvement from one extra break inside a segment of the l-break optimum.
        let mut ssr_next = f64::INFINITY;
        for w in bounds.windows(2) {
            if let Some((s, _)) = tab.best_split(w[0], w[1], h) {
                ssr_next = ssr_next.min(ssr_l - tab.get(w[0], w[1]) + s);
            }
        }
        if !ssr_next.is_finite() {
            break;
        }
        let f = f_stat(ssr_l, ssr_next, l, k, t, zero);
        let cv = tables[l].critical_value(level);
        f_stats.push(f);
        critical_values.push(cv);
        if f > cv {
            n_breaks = l + 1;
        } else {
            break;
        }
    }
    Ok(BpResult {
        n_breaks,
        breaks: opt[n_breaks].1.clone(),
        f_stats,
        critical_values,
        level,
        ssr_by_breaks: opt.iter().map(|(s, _)| *s).collect(),
        min_segment: h,
    })
}

/// [`bp_ols_breaks_with`] using the default critical values for `k` regressors.
pub fn bp_ols_breaks(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    max_breaks: usize,
    trimming: f64,
    level: f64,
) -> Result<BpResult> {
    let tables = bp_critical_values(x.ncols(), trimming, max_breaks)?;
    bp_ols_breaks_with(y, x, max_breaks, trimming, level, &tables)
}

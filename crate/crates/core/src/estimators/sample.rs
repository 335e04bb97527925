//! Estimators computed from data: OLS first stage, split-sample GMM, TS2SLS and TSGMM.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::covariance::{blocks_from_residuals, hac_lrv, HacConfig, MomentCovariance};
use crate::data::{Dataset, ParamSet, Partition};
use crate::error::{Error, Result};
use crate::estimators::theory::{avar_ts2sls, TheoreticalInputs};
use crate::linalg::{block_diag, check_condition, condition_number, spd_inverse, spd_solve, spd_solve_vec, sym, vec_of, Singular};
use crate::serde_mat;

/// Trimming recorded in the partitions of estimator output. Estimators only
/// require each regime to have more rows than `max(p, q)`.
pub const DEFAULT_TRIMMING: f64 = 0.15;

/// Residuals below this fraction of the outcome scale count as an exact fit.
const EXACT_FIT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    SplitGmm,
    Ts2sls,
    Tsgmm,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::SplitGmm => "GMM",
            EstimatorKind::Ts2sls => "TS2SLS",
            EstimatorKind::Tsgmm => "TSGMM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Minimised GMM criterion `T ḡ'Ŝ⁻¹ḡ` (zero for TS2SLS).
    pub objective_value: f64,
    pub condition_numbers: BTreeMap<String, f64>,
    /// True when residuals vanished and the first-step estimate was returned
    /// with a zero variance.
    #[serde(default)]
    pub exact_fit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub kind: EstimatorKind,
    pub params: ParamSet,
    /// Joint covariance of `(θ̂_1, …, θ̂_m)`, already divided by `T`.
    #[serde(with = "serde_mat::matrix")]
    pub avar_theta: DMatrix<f64>,
    #[serde(with = "serde_mat::opt_matrix")]
    pub avar_pi: Option<DMatrix<f64>>,
    #[serde(with = "serde_mat::vector")]
    pub std_errors: DVector<f64>,
    pub diagnostics: Diagnostics,
}

impl EstimateResult {
    fn new(
        kind: EstimatorKind,
        params: ParamSet,
        avar_theta: DMatrix<f64>,
        avar_pi: Option<DMatrix<f64>>,
        diagnostics: Diagnostics,
    ) -> Self {
        let avar_theta = sym(&avar_theta);
        let std_errors = avar_theta.diagonal().map(|v| v.max(0.0).sqrt());
        EstimateResult { kind, params, avar_theta, avar_pi, std_errors, diagnostics }
    }

    /// Stacked `(θ̂_1, …, θ̂_m)`.
    pub fn theta_vec(&self) -> DVector<f64> {
        let p = self.params.theta.first().map_or(0, |t| t.len());
        DVector::from_iterator(
            p * self.params.theta.len(),
            self.params.theta.iter().flat_map(|t| t.iter().copied()),
        )
    }

    /// Standard errors of regime `i`.
    pub fn regime_std_errors(&self, i: usize) -> DVector<f64> {
        let p = self.params.theta[i].len();
        self.std_errors.rows(i * p, p).into_owned()
    }
}

/// First-stage OLS coefficients and residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStage {
    /// One q×p2 matrix per segment (a single matrix for the full sample).
    pub pi: Vec<DMatrix<f64>>,
    pub partition: Partition,
    /// `v̂ = X - Z Π̂(segment)`, T×p2.
    pub residuals: DMatrix<f64>,
}

/// Least squares `(X'X)⁻¹ X'Y`.
pub fn ols(x: DMatrixView<'_, f64>, y: DMatrixView<'_, f64>, what: &str) -> Result<DMatrix<f64>> {
    let xtx = x.transpose() * x;
    spd_solve(&xtx, &(x.transpose() * y), Singular::Design, what)
}

/// OLS of `X` on `Z`, over the full sample (`part = None`) or per segment.
pub fn ols_first_stage(data: &Dataset, part: Option<&Partition>) -> Result<FirstStage> {
    let partition = match part {
        Some(p) => {
            p.validate(data.t(), data.p())?;
            p.clone()
        }
        None => Partition::none(DEFAULT_TRIMMING),
    };
    let mut pi = Vec::new();
    let mut residuals = DMatrix::zeros(data.t(), data.p2());
    for r in partition.ranges(data.t()) {
        let z = data.z().rows(r.start, r.len());
        let x = data.x().rows(r.start, r.len());
        let p = ols(z, x, "first-stage Z'Z")?;
        residuals.rows_mut(r.start, r.len()).copy_from(&(x - z * &p));
        pi.push(p);
    }
    Ok(FirstStage { pi, partition, residuals })
}

fn check_segments(data: &Dataset, ranges: &[Range<usize>]) -> Result<()> {
    let min = data.p().max(data.q()) + 1;
    for r in ranges {
        if r.len() < min {
            return Err(Error::SegmentTooShort { len: r.len(), min });
        }
    }
    Ok(())
}

fn partition_of(data: &Dataset, breaks: &[usize]) -> Result<(Partition, Vec<Range<usize>>)> {
    let t = data.t();
    let mut prev = 0;
    for &b in breaks {
        if b <= prev || b >= t {
            return Err(Error::InvalidPartition(format!("break {b} not inside (0, {t})")));
        }
        prev = b;
    }
    let part = Partition::new(breaks.to_vec(), DEFAULT_TRIMMING);
    let ranges = part.ranges(t);
    check_segments(data, &ranges)?;
    Ok((part, ranges))
}

fn exact_fit(u: &DVector<f64>, y: DVectorView<'_, f64>) -> bool {
    u.amax() <= EXACT_FIT_TOL * y.amax().max(1.0)
}

/// Per-regime two-step GMM output.
struct SegmentGmm {
    theta: DVector<f64>,
    /// `T (W'Z Ŝu⁻¹ Z'W)⁻¹`, p×p.
    avar: DMatrix<f64>,
    pi: DMatrix<f64>,
    objective: f64,
    cond_zz: f64,
    cond_su: Option<f64>,
    exact: bool,
}

/// First-step 2SLS within a regime: `(θ̂, û, Π̂_i)`.
fn tsls_step(data: &Dataset, r: &Range<usize>) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>, f64)> {
    let n = r.len();
    let z = data.z().rows(r.start, n);
    let w = data.w().rows(r.start, n);
    let y = data.y().rows(r.start, n);
    let zz = z.transpose() * z;
    let cond_zz = check_condition(&zz, Singular::Design, "segment Z'Z")?;
    let zz_inv = spd_inverse(&zz, Singular::Design, "segment Z'Z")?;
    let pi = &zz_inv * (z.transpose() * data.x().rows(r.start, n));
    let zw = z.transpose() * w;
    let h = zw.transpose() * &zz_inv * &zw;
    let rhs = zw.transpose() * &zz_inv * (z.transpose() * y);
    let theta = spd_solve_vec(&h, &rhs, Singular::Design, "W'Pz W")?;
    let u = y - w * &theta;
    Ok((theta, u, pi, cond_zz))
}

fn segment_gmm(data: &Dataset, r: &Range<usize>, cfg: &HacConfig) -> Result<SegmentGmm> {
    let t = data.t() as f64;
    let n = r.len();
    let z = data.z().rows(r.start, n);
    let w = data.w().rows(r.start, n);
    let y = data.y().rows(r.start, n);
    let (theta_first, u_first, pi, cond_zz) = tsls_step(data, r)?;
    let zw = z.transpose() * w;
    let zy = z.transpose() * y;

    let zu = scale_rows(z, &u_first);
    let su = hac_lrv(zu.as_view(), cfg)? * (n as f64 / t);
    if exact_fit(&u_first, y) {
        return Ok(SegmentGmm {
            theta: theta_first,
            avar: DMatrix::zeros(data.p(), data.p()),
            pi,
            objective: 0.0,
            cond_zz,
            cond_su: None,
            exact: true,
        });
    }
    let cond_su = check_condition(&su, Singular::Weighting, "segment Su")?;
    let su_inv = spd_inverse(&su, Singular::Weighting, "segment Su")?;
    let info = zw.transpose() * &su_inv * &zw;
    let theta = if data.q() == data.p() {
        zw.clone().lu().solve(&zy).ok_or_else(|| Error::SingularDesign("Z'W".into()))?.column(0).into_owned()
    } else {
        spd_solve_vec(&info, &(zw.transpose() * &su_inv * &zy), Singular::Design, "W'Z Su^-1 Z'W")?
    };
    let avar = spd_inverse(&info, Singular::Design, "W'Z Su^-1 Z'W")? * t;
    let gbar = (zy - &zw * &theta) / t;
    let objective = t * (gbar.transpose() * su_inv * gbar)[(0, 0)];
    Ok(SegmentGmm { theta, avar, pi, objective, cond_zz, cond_su: Some(cond_su), exact: false })
}

/// Row `t` of `z` times `u_t`.
pub(crate) fn scale_rows(z: DMatrixView<'_, f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let mut out = z.into_owned();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= u[i];
    }
    out
}

/// Two-step GMM run separately in each regime of `breaks` (no break = full sample).
pub fn split_gmm_breaks(data: &Dataset, breaks: &[usize], cfg: &HacConfig) -> Result<EstimateResult> {
    let (part, ranges) = partition_of(data, breaks)?;
    let mut diag = Diagnostics::default();
    let mut theta = Vec::new();
    let mut pi = Vec::new();
    let mut blocks = Vec::new();
    for (i, r) in ranges.iter().enumerate() {
        let s = segment_gmm(data, r, cfg)?;
        diag.objective_value += s.objective;
        diag.exact_fit |= s.exact;
        diag.condition_numbers.insert(format!("ZZ_{}", i + 1), s.cond_zz);
        if let Some(c) = s.cond_su {
            diag.condition_numbers.insert(format!("Su_{}", i + 1), c);
        }
        theta.push(s.theta);
        pi.push(s.pi);
        blocks.push(s.avar);
    }
    let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
    let params = ParamSet { theta, pi, partition: part };
    Ok(EstimateResult::new(EstimatorKind::SplitGmm, params, block_diag(&refs), None, diag))
}

/// Split-sample two-step GMM with a single break.
pub fn split_sample_gmm(data: &Dataset, break_idx: usize, cfg: &HacConfig) -> Result<EstimateResult> {
    split_gmm_breaks(data, &[break_idx], cfg)
}

/// Full-sample two-step GMM (one regime).
pub fn gmm_full(data: &Dataset, cfg: &HacConfig) -> Result<EstimateResult> {
    split_gmm_breaks(data, &[], cfg)
}

/// Full-sample 2SLS (one regime), with a heteroskedasticity-robust sandwich variance.
pub fn tsls_full(data: &Dataset, cfg: &HacConfig) -> Result<EstimateResult> {
    let fs = ols_first_stage(data, None)?;
    let what = crate::linalg::hstack(&[data.z1(), &(data.z() * &fs.pi[0])]);
    let theta = ols(what.as_view(), data.y().as_view(), "full-sample W-hat'W-hat")?.column(0).into_owned();
    let u = data.y() - data.w() * &theta;
    let t = data.t() as f64;
    let a = what.transpose() * &what / t;
    let a_inv = spd_inverse(&a, Singular::Design, "W-hat'W-hat")?;
    let zu = scale_rows(data.z().as_view(), &u);
    let su = hac_lrv(zu.as_view(), cfg)?;
    let pa = augment(&fs.pi[0], data.p1());
    let avar = &a_inv * (pa.transpose() * su * &pa) * &a_inv / t;
    let mut diag = Diagnostics::default();
    diag.condition_numbers.insert("WhatWhat".into(), condition_number(&a));
    diag.exact_fit = exact_fit(&u, data.y().as_view());
    let params = ParamSet { theta: vec![theta], pi: fs.pi, partition: fs.partition };
    Ok(EstimateResult::new(EstimatorKind::Ts2sls, params, avar, None, diag))
}

/// Augmented first-stage matrix `[Π_z, Π]` with `Π_z = [I_{p1}; 0]`.
pub fn augment(pi: &DMatrix<f64>, p1: usize) -> DMatrix<f64> {
    let q = pi.nrows();
    let mut pa = DMatrix::zeros(q, p1 + pi.ncols());
    for j in 0..p1 {
        pa[(j, j)] = 1.0;
    }
    pa.view_mut((0, p1), (q, pi.ncols())).copy_from(pi);
    pa
}

/// Two-sample 2SLS: full-sample OLS first stage, then OLS of `y` on `Ŵ = [Z1, ZΠ̂]` per regime.
pub fn ts2sls(data: &Dataset, break_idx: usize, cfg: &HacConfig) -> Result<EstimateResult> {
    let (part, ranges) = partition_of(data, &[break_idx])?;
    let fs = ols_first_stage(data, None)?;
    let pi = &fs.pi[0];
    let what = crate::linalg::hstack(&[data.z1(), &(data.z() * pi)]);
    let mut theta = Vec::with_capacity(2);
    let mut u = DVector::zeros(data.t());
    let mut diag = Diagnostics::default();
    for (i, r) in ranges.iter().enumerate() {
        let wh = what.rows(r.start, r.len());
        diag.condition_numbers.insert(format!("WhatWhat_{}", i + 1), condition_number(&(wh.transpose() * wh)));
        let th = ols(wh, data.y().rows(r.start, r.len()).as_view(), "segment W-hat'W-hat")?.column(0).into_owned();
        let res = data.y().rows(r.start, r.len()) - data.w().rows(r.start, r.len()) * &th;
        u.rows_mut(r.start, r.len()).copy_from(&res);
        theta.push(th);
    }
    diag.exact_fit = exact_fit(&u, data.y().as_view());
    let mc = blocks_from_residuals(data.z(), &u, &fs.residuals, &ranges, cfg)?;
    let inp = plugin_inputs(data, &mc, augment(pi, data.p1()), &theta, break_idx);
    let avar = avar_ts2sls(&inp)? / data.t() as f64;
    let params = ParamSet { theta, pi: fs.pi, partition: part };
    Ok(EstimateResult::new(EstimatorKind::Ts2sls, params, avar, None, diag))
}

fn plugin_inputs(
    data: &Dataset,
    mc: &MomentCovariance,
    pi_a: DMatrix<f64>,
    theta: &[DVector<f64>],
    break_idx: usize,
) -> TheoreticalInputs {
    let (p1, p2) = (data.p1(), data.p2());
    let b = &mc.per_segment;
    TheoreticalInputs {
        q1: mc.q[0].clone(),
        q2: mc.q[1].clone(),
        su1: b[0].su.clone(),
        su2: b[1].su.clone(),
        suv1: b[0].suv.clone(),
        suv2: b[1].suv.clone(),
        sv1: b[0].sv.clone(),
        sv2: b[1].sv.clone(),
        pi_a,
        theta_x1: theta[0].rows(p1, p2).into_owned(),
        theta_x2: theta[1].rows(p1, p2).into_owned(),
        lambda0: break_idx as f64 / data.t() as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TsgmmOptions {
    /// Drop the `Suv` blocks from the weighting matrix; the θ part then
    /// coincides with split-sample GMM.
    pub zero_cross_covariance: bool,
}

/// Linear moment system `ḡ(β) = d - Gβ` of the TSGMM estimator with its weighting `Ŝ`.
///
/// `β = (θ_1, θ_2, vec Π)`. Moments are ordered
/// `[Z_1'(y_1 - W_1θ_1), Z_2'(y_2 - W_2θ_2), vec(Z_1'X_1 - Z_1'Z_1Π), vec(Z_2'X_2 - Z_2'Z_2Π)] / T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TsgmmSystem {
    pub g: DMatrix<f64>,
    pub d: DVector<f64>,
    pub s: DMatrix<f64>,
    pub t: usize,
    /// First-step 2SLS estimates per regime.
    pub theta_first: Vec<DVector<f64>>,
    pub exact_fit: bool,
}

pub fn tsgmm_system(data: &Dataset, break_idx: usize, cfg: &HacConfig, opts: TsgmmOptions) -> Result<TsgmmSystem> {
    let (_, ranges) = partition_of(data, &[break_idx])?;
    let (q, p, p2) = (data.q(), data.p(), data.p2());
    let k = p2 * q;
    let t = data.t() as f64;
    let mut u = DVector::zeros(data.t());
    let mut v = DMatrix::zeros(data.t(), p2);
    let mut theta_first = Vec::with_capacity(2);
    for r in &ranges {
        let (th, res, pi, _) = tsls_step(data, r)?;
        u.rows_mut(r.start, r.len()).copy_from(&res);
        let z = data.z().rows(r.start, r.len());
        v.rows_mut(r.start, r.len()).copy_from(&(data.x().rows(r.start, r.len()) - z * pi));
        theta_first.push(th);
    }
    let mut mc = blocks_from_residuals(data.z(), &u, &v, &ranges, cfg)?;
    if opts.zero_cross_covariance {
        for b in mc.per_segment.iter_mut() {
            *b = b.zeroed_cross();
        }
    }

    let n = 2 * q + 2 * k;
    let mut s = DMatrix::zeros(n, n);
    let mut g = DMatrix::zeros(n, 2 * p + k);
    let mut d = DVector::zeros(n);
    let ik = DMatrix::<f64>::identity(p2, p2);
    for (i, r) in ranges.iter().enumerate() {
        let b = &mc.per_segment[i];
        let (ru, rv) = (i * q, 2 * q + i * k);
        s.view_mut((ru, ru), (q, q)).copy_from(&b.su);
        s.view_mut((rv, rv), (k, k)).copy_from(&b.sv);
        s.view_mut((rv, ru), (k, q)).copy_from(&b.suv);
        s.view_mut((ru, rv), (q, k)).copy_from(&b.suv.transpose());

        let z = data.z().rows(r.start, r.len());
        let zz = z.transpose() * z;
        g.view_mut((ru, i * p), (q, p)).copy_from(&(z.transpose() * data.w().rows(r.start, r.len()) / t));
        g.view_mut((rv, 2 * p), (k, k)).copy_from(&(ik.kronecker(&zz) / t));
        d.rows_mut(ru, q).copy_from(&(z.transpose() * data.y().rows(r.start, r.len()) / t));
        let zx = z.transpose() * data.x().rows(r.start, r.len()) / t;
        d.rows_mut(rv, k).copy_from(&vec_of(&zx));
    }
    Ok(TsgmmSystem { g, d, s, t: data.t(), theta_first, exact_fit: exact_fit(&u, data.y().as_view()) })
}

impl TsgmmSystem {
    /// GMM criterion `T (d - Gβ)' Ŝ⁻¹ (d - Gβ)`.
    pub fn objective(&self, beta: &DVector<f64>) -> Result<f64> {
        let s_inv = spd_inverse(&self.s, Singular::Weighting, "TSGMM S")?;
        let r = &self.d - &self.g * beta;
        Ok(self.t as f64 * (r.transpose() * s_inv * r)[(0, 0)])
    }
}

/// Two-sample GMM with the default (full) weighting matrix.
pub fn tsgmm(data: &Dataset, break_idx: usize, cfg: &HacConfig) -> Result<EstimateResult> {
    tsgmm_with(data, break_idx, cfg, TsgmmOptions::default())
}

/// Joint linear GMM on the structural moments of both regimes and the
/// first-stage OLS moments of both segments, sharing one `Π`.
pub fn tsgmm_with(data: &Dataset, break_idx: usize, cfg: &HacConfig, opts: TsgmmOptions) -> Result<EstimateResult> {
    let sys = tsgmm_system(data, break_idx, cfg, opts)?;
    let (q, p, p2) = (data.q(), data.p(), data.p2());
    let k = p2 * q;
    let t = data.t() as f64;
    let part = Partition::single(break_idx, DEFAULT_TRIMMING);
    let mut diag = Diagnostics::default();

    let cond_s = match check_condition(&sys.s, Singular::Weighting, "TSGMM S") {
        Ok(c) => c,
        Err(e) => {
            if !sys.exact_fit {
                return Err(e);
            }
            let fs = ols_first_stage(data, None)?;
            diag.exact_fit = true;
            let params = ParamSet { theta: sys.theta_first, pi: fs.pi, partition: part };
            return Ok(EstimateResult::new(
                EstimatorKind::Tsgmm,
                params,
                DMatrix::zeros(2 * p, 2 * p),
                Some(DMatrix::zeros(k, k)),
                diag,
            ));
        }
    };
    diag.condition_numbers.insert("S".into(), cond_s);
    let s_inv = spd_inverse(&sys.s, Singular::Weighting, "TSGMM S")?;
    let gs = sys.g.transpose() * &s_inv;
    let info = &gs * &sys.g;
    diag.condition_numbers.insert("G'S^-1G".into(), condition_number(&info));
    let beta = spd_solve_vec(&info, &(&gs * &sys.d), Singular::Design, "G'S^-1 G")?;
    let avar = spd_inverse(&info, Singular::Design, "G'S^-1 G")? / t;
    diag.objective_value = sys.objective(&beta)?;
    diag.exact_fit = sys.exact_fit;

    let theta = vec![beta.rows(0, p).into_owned(), beta.rows(p, p).into_owned()];
    let pi = crate::linalg::unvec(&beta.rows(2 * p, k).into_owned(), q, p2);
    let avar_theta = avar.view((0, 0), (2 * p, 2 * p)).into_owned();
    let avar_pi = sym(&avar.view((2 * p, 2 * p), (k, k)).into_owned());
    let params = ParamSet { theta, pi: vec![pi], partition: part };
    Ok(EstimateResult::new(EstimatorKind::Tsgmm, params, avar_theta, Some(avar_pi), diag))
}

/// All three estimators at one break.
pub fn estimate_all(data: &Dataset, break_idx: usize, cfg: &HacConfig) -> Result<[EstimateResult; 3]> {
    Ok([split_sample_gmm(data, break_idx, cfg)?, ts2sls(data, break_idx, cfg)?, tsgmm(data, break_idx, cfg)?])
}

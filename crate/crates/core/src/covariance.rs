//! Long-run variance estimation and segment-wise moment covariance blocks.

use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ParamSet, Partition};
use crate::error::{Error, Result};
use crate::linalg::{psd_repair, sym};
use crate::serde_mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    Truncated,
    Bartlett,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(usize),
    NeweyWestAuto,
}

/// Kernel and bandwidth of the HAC estimator.
///
/// The default `{Truncated, Fixed(0)}` is the plain outer-product
/// (heteroskedasticity-robust) estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HacConfig {
    pub kernel: Kernel,
    pub bandwidth: Bandwidth,
}

impl Default for HacConfig {
    fn default() -> Self {
        HacConfig { kernel: Kernel::Truncated, bandwidth: Bandwidth::Fixed(0) }
    }
}

impl HacConfig {
    pub fn white() -> Self {
        Self::default()
    }

    pub fn bartlett_auto() -> Self {
        HacConfig { kernel: Kernel::Bartlett, bandwidth: Bandwidth::NeweyWestAuto }
    }

    /// Lag truncation for a series of length `n`; the automatic rule is `⌊4(n/100)^{2/9}⌋`.
    pub fn lags(&self, n: usize) -> usize {
        match self.bandwidth {
            Bandwidth::Fixed(m) => m,
            Bandwidth::NeweyWestAuto => {
                let m = (4.0 * (n as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize;
                m.min(n.saturating_sub(1))
            }
        }
    }

    fn weight(&self, j: usize, m: usize) -> f64 {
        match self.kernel {
            Kernel::Truncated => 1.0,
            Kernel::Bartlett => 1.0 - j as f64 / (m as f64 + 1.0),
        }
    }
}

/// Kernel long-run variance of the rows of `moments` (one row per period).
///
/// Returns `Γ0 + Σ_{j=1..m} w_j (Γj + Γj')` with `Γj = n⁻¹ Σ_t m_t m_{t-j}'`.
pub fn hac_lrv(moments: DMatrixView<'_, f64>, cfg: &HacConfig) -> Result<DMatrix<f64>> {
    let n = moments.nrows();
    if n < 2 || moments.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    let m = cfg.lags(n);
    if m >= n {
        return Err(Error::BandwidthTooLarge { bandwidth: m, n });
    }
    let nf = n as f64;
    let mut s = moments.transpose() * moments / nf;
    for j in 1..=m {
        let g = moments.rows(j, n - j).transpose() * moments.rows(0, n - j) / nf;
        let w = cfg.weight(j, m);
        s += (&g + g.transpose()) * w;
    }
    Ok(sym(&s))
}

/// Long-run variance blocks of one segment.
///
/// `su` is q×q, `suv` is (p2·q)×q and `sv` is (p2·q)×(p2·q); together they
/// form `S_i = [[Su, Suv'], [Suv, Sv]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentBlocks {
    #[serde(with = "serde_mat::matrix")]
    pub su: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub suv: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub sv: DMatrix<f64>,
}

impl SegmentBlocks {
    pub fn assembled(&self) -> DMatrix<f64> {
        let q = self.su.nrows();
        let k = self.sv.nrows();
        let mut s = DMatrix::zeros(q + k, q + k);
        s.view_mut((0, 0), (q, q)).copy_from(&self.su);
        s.view_mut((q, 0), (k, q)).copy_from(&self.suv);
        s.view_mut((0, q), (q, k)).copy_from(&self.suv.transpose());
        s.view_mut((q, q), (k, k)).copy_from(&self.sv);
        s
    }

    fn from_assembled(s: &DMatrix<f64>, q: usize) -> Self {
        let k = s.nrows() - q;
        SegmentBlocks {
            su: s.view((0, 0), (q, q)).into_owned(),
            suv: s.view((q, 0), (k, q)).into_owned(),
            sv: s.view((q, q), (k, k)).into_owned(),
        }
    }

    pub fn zeroed_cross(&self) -> Self {
        SegmentBlocks { su: self.su.clone(), suv: self.suv.map(|_| 0.0), sv: self.sv.clone() }
    }
}

/// Per-segment long-run variance blocks and second moments `Q_i = T⁻¹ Σ_i Z_t Z_t'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCovariance {
    pub per_segment: Vec<SegmentBlocks>,
    #[serde(with = "serde_mat::matrices")]
    pub q: Vec<DMatrix<f64>>,
}

/// Stacks `h_t = [Z_t u_t ; vec(Z_t v_t')]` row by row.
pub fn stacked_moments(z: DMatrixView<'_, f64>, u: &[f64], v: DMatrixView<'_, f64>) -> DMatrix<f64> {
    let (n, q) = z.shape();
    let p2 = v.ncols();
    let mut h = DMatrix::zeros(n, q * (1 + p2));
    for t in 0..n {
        for a in 0..q {
            let zt = z[(t, a)];
            h[(t, a)] = zt * u[t];
            for k in 0..p2 {
                h[(t, q * (1 + k) + a)] = zt * v[(t, k)];
            }
        }
    }
    h
}

/// Segment blocks from residual series, scaled by segment share `n_i / T`.
///
/// `u` and `v` are full-length residual series aligned with `z`.
pub fn blocks_from_residuals(
    z: &DMatrix<f64>,
    u: &DVector<f64>,
    v: &DMatrix<f64>,
    ranges: &[Range<usize>],
    cfg: &HacConfig,
) -> Result<MomentCovariance> {
    let t = z.nrows() as f64;
    let q = z.ncols();
    let mut per_segment = Vec::with_capacity(ranges.len());
    let mut qs = Vec::with_capacity(ranges.len());
    for r in ranges {
        let n = r.len();
        let zs = z.rows(r.start, n);
        let h = stacked_moments(zs, &u.as_slice()[r.clone()], v.rows(r.start, n));
        let s = hac_lrv(h.as_view(), cfg)? * (n as f64 / t);
        let s = psd_repair(&s, "segment moment covariance")?;
        per_segment.push(SegmentBlocks::from_assembled(&s, q));
        qs.push(sym(&(zs.transpose() * zs)) / t);
    }
    Ok(MomentCovariance { per_segment, q: qs })
}

/// Structural residuals `y - W θ(regime)` and first-stage residuals `X - Z Π(segment)`.
pub fn residuals(data: &Dataset, params: &ParamSet, part: &Partition) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let ranges = part.ranges(data.t());
    let theta_ranges = params.partition.ranges(data.t());
    if params.theta.len() != theta_ranges.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} theta vectors for {} regimes",
            params.theta.len(),
            theta_ranges.len()
        )));
    }
    if params.pi.len() != 1 && params.pi.len() != ranges.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} first-stage matrices for {} segments",
            params.pi.len(),
            ranges.len()
        )));
    }
    let mut u = DVector::zeros(data.t());
    for (r, th) in theta_ranges.iter().zip(&params.theta) {
        if th.len() != data.p() {
            return Err(Error::DimensionMismatch("theta length != p".into()));
        }
        let fit = data.w().rows(r.start, r.len()) * th;
        u.rows_mut(r.start, r.len()).copy_from(&(data.y().rows(r.start, r.len()) - fit));
    }
    let mut v = DMatrix::zeros(data.t(), data.p2());
    for (i, r) in ranges.iter().enumerate() {
        let pi = if params.pi.len() == 1 { &params.pi[0] } else { &params.pi[i] };
        if pi.shape() != (data.q(), data.p2()) {
            return Err(Error::DimensionMismatch("Pi must be q x p2".into()));
        }
        let fit = data.z().rows(r.start, r.len()) * pi;
        v.rows_mut(r.start, r.len()).copy_from(&(data.x().rows(r.start, r.len()) - fit));
    }
    Ok((u, v))
}

/// Segment-wise blocks `{Su, Suv, Sv}` and `Q_i` over the segments of `part`.
pub fn moment_blocks(
    data: &Dataset,
    params: &ParamSet,
    part: &Partition,
    cfg: &HacConfig,
) -> Result<MomentCovariance> {
    part.validate(data.t(), data.p())?;
    let (u, v) = residuals(data, params, part)?;
    blocks_from_residuals(data.z(), &u, &v, &part.ranges(data.t()), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, min_eigenvalue};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn zero_lag_is_outer_product_average() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 1.0]);
        let s = hac_lrv(m.as_view(), &HacConfig::white()).unwrap();
        let mut oracle = DMatrix::zeros(2, 2);
        for t in 0..3 {
            for a in 0..2 {
                for b in 0..2 {
                    oracle[(a, b)] += m[(t, a)] * m[(t, b)] / 3.0;
                }
            }
        }
        assert!(max_abs(&(s - oracle)) < 1e-15);
    }

    #[test]
    fn ma1_long_run_variance() {
        let n = 100_000;
        let e = normals(n + 1, 11);
        let m = DMatrix::from_fn(n, 1, |t, _| e[t + 1] + 0.5 * e[t]);
        let cfg = HacConfig { kernel: Kernel::Bartlett, bandwidth: Bandwidth::Fixed(50) };
        let s = hac_lrv(m.as_view(), &cfg).unwrap()[(0, 0)];
        assert!((s - 2.25).abs() / 2.25 < 0.10, "lrv {s}");
    }

    #[test]
    fn output_is_exactly_symmetric() {
        let e = normals(300, 3);
        let m = DMatrix::from_fn(100, 3, |t, j| e[3 * t + j] + 0.3 * j as f64);
        let s = hac_lrv(m.as_view(), &HacConfig::bartlett_auto()).unwrap();
        assert_eq!(max_abs(&(&s - s.transpose())), 0.0);
    }

    #[test]
    fn bandwidth_and_empty_errors() {
        let m = DMatrix::from_element(5, 1, 1.0);
        let cfg = HacConfig { kernel: Kernel::Bartlett, bandwidth: Bandwidth::Fixed(5) };
        assert!(matches!(hac_lrv(m.as_view(), &cfg), Err(Error::BandwidthTooLarge { .. })));
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(hac_lrv(one.as_view(), &HacConfig::white()), Err(Error::EmptyInput)));
    }

    #[test]
    fn auto_bandwidth_rule() {
        assert_eq!(HacConfig::bartlett_auto().lags(100), 4);
        assert_eq!(HacConfig::bartlett_auto().lags(400), 5);
    }

    fn toy(t: usize, seed: u64) -> Dataset {
        let e = normals(3 * t, seed);
        let z1 = DMatrix::from_element(t, 1, 1.0);
        let ziv = DMatrix::from_fn(t, 1, |i, _| e[i]);
        let x = DMatrix::from_fn(t, 1, |i, _| 1.0 + e[i] + e[t + i]);
        let y = DVector::from_fn(t, |i, _| x[(i, 0)] + e[2 * t + i]);
        Dataset::from_parts(y, x, z1, ziv).unwrap()
    }

    fn params(theta: Vec<DVector<f64>>, pi: DMatrix<f64>, part: Partition) -> ParamSet {
        ParamSet { theta, pi: vec![pi], partition: part }
    }

    #[test]
    fn zero_residuals_give_zero_blocks() {
        let t = 50;
        let z1 = DMatrix::from_element(t, 1, 1.0);
        let ziv = DMatrix::from_fn(t, 1, |i, _| (i as f64).sin());
        let pi = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let x = crate::linalg::hstack(&[&z1, &ziv]) * &pi;
        let y = x.column(0) * 2.0;
        let d = Dataset::from_parts(y, x, z1, ziv).unwrap();
        let part = Partition::single(20, 0.15);
        let ps = params(vec![DVector::from_vec(vec![0.0, 2.0]); 2], pi, part.clone());
        let mc = moment_blocks(&d, &ps, &part, &HacConfig::white()).unwrap();
        for (i, r) in part.ranges(t).into_iter().enumerate() {
            assert_eq!(max_abs(&mc.per_segment[i].assembled()), 0.0);
            let zs = d.z().rows(r.start, r.len());
            let q = zs.transpose() * zs / t as f64;
            assert!(max_abs(&(&q - &mc.q[i])) < 1e-15);
        }
    }

    #[test]
    fn single_segment_equals_full_sample_lrv() {
        let d = toy(200, 5);
        let th = DVector::from_vec(vec![0.1, 0.9]);
        let pi = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let ps = params(vec![th.clone()], pi.clone(), Partition::none(0.15));
        let mc = moment_blocks(&d, &ps, &Partition::none(0.15), &HacConfig::white()).unwrap();
        let u = d.y() - d.w() * th;
        let v = d.x() - d.z() * pi;
        let h = stacked_moments(d.z().as_view(), u.as_slice(), v.as_view());
        let full = hac_lrv(h.as_view(), &HacConfig::white()).unwrap();
        assert!(max_abs(&(mc.per_segment[0].assembled() - full)) < 1e-13);
    }

    #[test]
    fn cross_covariance_matches_population() {
        let t = 100_000;
        let e = normals(3 * t, 9);
        let rho: f64 = -0.5;
        let z1 = DMatrix::from_element(t, 1, 1.0);
        let ziv = DMatrix::from_fn(t, 1, |i, _| e[i]);
        let v = DMatrix::from_fn(t, 1, |i, _| e[t + i]);
        let u = DVector::from_fn(t, |i, _| rho * e[t + i] + (1.0 - rho * rho).sqrt() * e[2 * t + i]);
        let pi = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let x = crate::linalg::hstack(&[&z1, &ziv]) * &pi + &v;
        let th = DVector::from_vec(vec![0.0, 1.0]);
        let y = crate::linalg::hstack(&[&z1, &x]) * &th + &u;
        let d = Dataset::from_parts(y, x, z1, ziv).unwrap();
        let part = Partition::single(40_000, 0.15);
        let ps = ParamSet { theta: vec![th.clone(), th], pi: vec![pi], partition: part.clone() };
        let mc = moment_blocks(&d, &ps, &part, &HacConfig::white()).unwrap();
        for (b, share) in mc.per_segment.iter().zip([0.4, 0.6]) {
            let target = -0.5 * share;
            assert!((b.suv[(0, 0)] - target).abs() < 0.05 * target.abs(), "{} vs {target}", b.suv[(0, 0)]);
            assert!(min_eigenvalue(&b.assembled()) >= 0.0);
        }
    }

    #[test]
    fn white_blocks_are_additive_across_segments() {
        let d = toy(120, 21);
        let th = DVector::from_vec(vec![0.2, 0.8]);
        let pi = DMatrix::from_column_slice(2, 1, &[0.9, 1.1]);
        let cfg = HacConfig::white();
        let part = Partition::new(vec![30, 70], 0.1);
        let ps = ParamSet { theta: vec![th.clone(); 3], pi: vec![pi.clone()], partition: part.clone() };
        let split = moment_blocks(&d, &ps, &part, &cfg).unwrap();
        let ps1 = params(vec![th], pi, Partition::none(0.1));
        let full = moment_blocks(&d, &ps1, &Partition::none(0.1), &cfg).unwrap();
        let sum = split.per_segment.iter().fold(DMatrix::zeros(4, 4), |a, b| a + b.assembled());
        assert!(max_abs(&(sum - full.per_segment[0].assembled())) < 1e-12);
    }

    proptest! {
        #[test]
        fn scale_equivariance(vals in proptest::collection::vec(-5.0f64..5.0, 60), c in -10.0f64..10.0, lag in 0usize..4) {
            let m = DMatrix::from_row_slice(20, 3, &vals);
            let cfg = HacConfig { kernel: Kernel::Bartlett, bandwidth: Bandwidth::Fixed(lag) };
            let a = hac_lrv(m.as_view(), &cfg).unwrap() * (c * c);
            let b = hac_lrv((&m * c).as_view(), &cfg).unwrap();
            prop_assert!(max_abs(&(&a - &b)) <= 1e-11 * max_abs(&a).max(1.0));
        }

        #[test]
        fn bartlett_is_psd(vals in proptest::collection::vec(-5.0f64..5.0, 60), lag in 0usize..6) {
            let m = DMatrix::from_row_slice(20, 3, &vals);
            let cfg = HacConfig { kernel: Kernel::Bartlett, bandwidth: Bandwidth::Fixed(lag) };
            let s = hac_lrv(m.as_view(), &cfg).unwrap();
            prop_assert!(min_eigenvalue(&s) >= -1e-10 * max_abs(&s).max(1e-300));
        }
    }
}

//! Plug-in asymptotic variance formulas for a single change point.
//!
//! All matrices are at the √T scale: `Q_i = T⁻¹ Σ_i Z_t Z_t'` and the `S`
//! blocks are long-run variances of `T^{-1/2} Σ_i h_t`. Moment ordering
//! within a segment is `h_t = [Z_t u_t ; v_t ⊗ Z_t]`, so under
//! homoskedasticity `Su = Φu Q`, `Suv = Φuv ⊗ Q` and `Sv = Φv ⊗ Q`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{block_diag, check_condition, inv_sqrt, min_eigenvalue, spd_inverse, sym, vstack, Singular};
use crate::serde_mat;

/// Population (or plug-in) objects for a two-regime model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalInputs {
    #[serde(with = "serde_mat::matrix")]
    pub q1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub q2: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub su1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub su2: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub suv1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub suv2: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub sv1: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub sv2: DMatrix<f64>,
    /// Augmented first-stage matrix `[Π_z, Π]`, q×p.
    #[serde(with = "serde_mat::matrix")]
    pub pi_a: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub theta_x1: DVector<f64>,
    #[serde(with = "serde_mat::vector")]
    pub theta_x2: DVector<f64>,
    /// Break fraction; informational, the `Q_i` already carry the regime shares.
    pub lambda0: f64,
}

impl TheoreticalInputs {
    /// Homogeneous design: `Q_1 = λQ`, `Q_2 = (1-λ)Q` and Kronecker long-run variances.
    #[allow(clippy::too_many_arguments)]
    pub fn homogeneous(
        q: &DMatrix<f64>,
        lambda0: f64,
        phi_u: f64,
        phi_uv: &DVector<f64>,
        phi_v: &DMatrix<f64>,
        pi_a: DMatrix<f64>,
        theta_x1: DVector<f64>,
        theta_x2: DVector<f64>,
    ) -> Self {
        let q1 = q * lambda0;
        let q2 = q * (1.0 - lambda0);
        let puv = DMatrix::from_column_slice(phi_uv.len(), 1, phi_uv.as_slice());
        TheoreticalInputs {
            su1: &q1 * phi_u,
            su2: &q2 * phi_u,
            suv1: puv.kronecker(&q1),
            suv2: puv.kronecker(&q2),
            sv1: phi_v.kronecker(&q1),
            sv2: phi_v.kronecker(&q2),
            q1,
            q2,
            pi_a,
            theta_x1,
            theta_x2,
            lambda0,
        }
    }

    pub fn q(&self) -> usize {
        self.q1.nrows()
    }
    pub fn p(&self) -> usize {
        self.pi_a.ncols()
    }
    pub fn p2(&self) -> usize {
        self.theta_x1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (q, p, p2) = (self.q(), self.p(), self.p2());
        let k = p2 * q;
        let shapes = [
            ("Q1", self.q1.shape(), (q, q)),
            ("Q2", self.q2.shape(), (q, q)),
            ("Su1", self.su1.shape(), (q, q)),
            ("Su2", self.su2.shape(), (q, q)),
            ("Suv1", self.suv1.shape(), (k, q)),
            ("Suv2", self.suv2.shape(), (k, q)),
            ("Sv1", self.sv1.shape(), (k, k)),
            ("Sv2", self.sv2.shape(), (k, k)),
            ("PiA", self.pi_a.shape(), (q, p)),
        ];
        for (name, have, want) in shapes {
            if have != want {
                return Err(Error::DimensionMismatch(format!("{name} is {have:?}, expected {want:?}")));
            }
        }
        if self.theta_x2.len() != p2 || p2 > p {
            return Err(Error::DimensionMismatch("theta_x length".into()));
        }
        for (name, m) in [("Q1", &self.q1), ("Q2", &self.q2), ("S1", &self.s(0)), ("S2", &self.s(1))] {
            let scale = m.amax().max(1e-300);
            if min_eigenvalue(m) < -1e-10 * scale {
                return Err(Error::NotPsd(name.into()));
            }
        }
        Ok(())
    }

    fn su(&self, i: usize) -> &DMatrix<f64> {
        if i == 0 { &self.su1 } else { &self.su2 }
    }
    fn suv(&self, i: usize) -> &DMatrix<f64> {
        if i == 0 { &self.suv1 } else { &self.suv2 }
    }
    fn sv(&self, i: usize) -> &DMatrix<f64> {
        if i == 0 { &self.sv1 } else { &self.sv2 }
    }
    fn qi(&self, i: usize) -> &DMatrix<f64> {
        if i == 0 { &self.q1 } else { &self.q2 }
    }
    fn theta_x(&self, i: usize) -> &DVector<f64> {
        if i == 0 { &self.theta_x1 } else { &self.theta_x2 }
    }

    /// Segment long-run variance `S_i = [[Su, Suv'], [Suv, Sv]]`.
    pub fn s(&self, i: usize) -> DMatrix<f64> {
        let blocks = crate::covariance::SegmentBlocks {
            su: self.su(i).clone(),
            suv: self.suv(i).clone(),
            sv: self.sv(i).clone(),
        };
        blocks.assembled()
    }

    /// `a_i = θ_{x,i} ⊗ I_q`, (p2·q)×q.
    fn a(&self, i: usize) -> DMatrix<f64> {
        let th = DMatrix::from_column_slice(self.p2(), 1, self.theta_x(i).as_slice());
        th.kronecker(&DMatrix::identity(self.q(), self.q()))
    }

    /// Joint long-run variance `𝒮` of `[Z u (1); Z u (2); v⊗Z (1); v⊗Z (2)]`.
    pub fn script_s(&self) -> DMatrix<f64> {
        let (q, k) = (self.q(), self.p2() * self.q());
        let n = 2 * q + 2 * k;
        let mut s = DMatrix::zeros(n, n);
        for i in 0..2 {
            let (ru, rv) = (i * q, 2 * q + i * k);
            s.view_mut((ru, ru), (q, q)).copy_from(self.su(i));
            s.view_mut((rv, rv), (k, k)).copy_from(self.sv(i));
            s.view_mut((rv, ru), (k, q)).copy_from(self.suv(i));
            s.view_mut((ru, rv), (q, k)).copy_from(&self.suv(i).transpose());
        }
        s
    }

    /// `Γ1 = diag(Q_1 Π^a, Q_2 Π^a)`.
    pub fn gamma1(&self) -> DMatrix<f64> {
        block_diag(&[&(&self.q1 * &self.pi_a), &(&self.q2 * &self.pi_a)])
    }

    /// `Γ2 = [I_{p2} ⊗ Q_1 ; I_{p2} ⊗ Q_2]`.
    pub fn gamma2(&self) -> DMatrix<f64> {
        let i = DMatrix::identity(self.p2(), self.p2());
        vstack(&[&i.kronecker(&self.q1), &i.kronecker(&self.q2)])
    }
}

/// `V_GMM,i = [Π^a' Q_i Su_i⁻¹ Q_i Π^a]⁻¹` stacked block-diagonally.
pub fn v_gmm(inp: &TheoreticalInputs) -> Result<DMatrix<f64>> {
    inp.validate()?;
    let mut blocks = Vec::with_capacity(2);
    for i in 0..2 {
        let qp = inp.qi(i) * &inp.pi_a;
        let su_inv = spd_inverse(inp.su(i), Singular::Weighting, "Su")?;
        blocks.push(spd_inverse(&(qp.transpose() * su_inv * &qp), Singular::Design, "V_GMM")?);
    }
    Ok(block_diag(&[&blocks[0], &blocks[1]]))
}

/// Joint asymptotic variance of the two-sample 2SLS estimator `(θ̂_1, θ̂_2)`.
///
/// `D_i = A_i⁻¹ Π^a' M_i'` with `A_i = Π^a' Q_i Π^a`,
/// `M_1' = (I, Q_2 Q⁻¹, -Q_1 Q⁻¹)` and `M_2' = (I, Q_1 Q⁻¹, -Q_2 Q⁻¹)`.
/// Blocks are `D_i Ω_i D_i'` on the diagonal and `D_1 Ω_12 D_2'` off it.
pub fn avar_ts2sls(inp: &TheoreticalInputs) -> Result<DMatrix<f64>> {
    inp.validate()?;
    let (q, p) = (inp.q(), inp.p());
    let qsum = &inp.q1 + &inp.q2;
    let q_inv = spd_inverse(&qsum, Singular::Design, "Q")?;
    let id = DMatrix::identity(q, q);
    let r1 = &inp.q1 * &q_inv;
    let r2 = &inp.q2 * &q_inv;
    let m_t = [
        crate::linalg::hstack(&[&id, &r2, &(-&r1)]),
        crate::linalg::hstack(&[&id, &r1, &(-&r2)]),
    ];
    let mut d = Vec::with_capacity(2);
    for (i, m) in m_t.iter().enumerate() {
        let a = inp.pi_a.transpose() * inp.qi(i) * &inp.pi_a;
        let a_inv = spd_inverse(&a, Singular::Design, "A_i")?;
        d.push(a_inv * inp.pi_a.transpose() * m);
    }
    let a1 = inp.a(0);
    let a2 = inp.a(1);
    let sv = &inp.sv1 + &inp.sv2;
    let zero = DMatrix::zeros(q, q);

    let omega = |i: usize, a: &DMatrix<f64>| -> DMatrix<f64> {
        let cross = inp.suv(i).transpose() * a;
        let mut o = DMatrix::zeros(3 * q, 3 * q);
        o.view_mut((0, 0), (q, q)).copy_from(inp.su(i));
        o.view_mut((0, q), (q, q)).copy_from(&cross);
        o.view_mut((q, 0), (q, q)).copy_from(&cross.transpose());
        o.view_mut((q, q), (q, q)).copy_from(&(a.transpose() * inp.sv(i) * a));
        o.view_mut((2 * q, 2 * q), (q, q)).copy_from(&(a.transpose() * (&sv - inp.sv(i)) * a));
        o
    };
    let om1 = omega(0, &a1);
    let om2 = omega(1, &a2);
    let mut om12 = DMatrix::zeros(3 * q, 3 * q);
    om12.view_mut((0, 2 * q), (q, q)).copy_from(&(inp.suv1.transpose() * &a2));
    om12.view_mut((q, 2 * q), (q, q)).copy_from(&(a1.transpose() * &inp.sv1 * &a2));
    om12.view_mut((2 * q, 0), (q, q)).copy_from(&(a1.transpose() * &inp.suv2));
    om12.view_mut((2 * q, q), (q, q)).copy_from(&(a1.transpose() * &inp.sv2 * &a2));
    om12.view_mut((2 * q, 2 * q), (q, q)).copy_from(&zero);

    let v11 = &d[0] * om1 * d[0].transpose();
    let v22 = &d[1] * om2 * d[1].transpose();
    let v12 = &d[0] * om12 * d[1].transpose();
    let mut v = DMatrix::zeros(2 * p, 2 * p);
    v.view_mut((0, 0), (p, p)).copy_from(&v11);
    v.view_mut((p, p), (p, p)).copy_from(&v22);
    v.view_mut((0, p), (p, p)).copy_from(&v12);
    v.view_mut((p, 0), (p, p)).copy_from(&v12.transpose());
    Ok(sym(&v))
}

/// Both forms of the TSGMM asymptotic variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsgmmAvar {
    #[serde(with = "serde_mat::matrix")]
    pub vgmm: DMatrix<f64>,
    /// `𝒢 = M_𝒥 ℰ^{-1/2} ℋ`.
    #[serde(with = "serde_mat::matrix")]
    pub g: DMatrix<f64>,
    /// `(V_GMM⁻¹ + 𝒢'𝒢)⁻¹`.
    #[serde(with = "serde_mat::matrix")]
    pub vtsgmm: DMatrix<f64>,
    /// `[Γ' 𝒮⁻¹ Γ]⁻¹` over `(θ_1, θ_2, vec Π)`.
    #[serde(with = "serde_mat::matrix")]
    pub vtsgmm_full: DMatrix<f64>,
}

impl TsgmmAvar {
    /// θ block of the direct form.
    pub fn direct_theta(&self) -> DMatrix<f64> {
        let n = self.vtsgmm.nrows();
        self.vtsgmm_full.view((0, 0), (n, n)).into_owned()
    }
}

/// `M_J = I - J (J'J)⁻¹ J'`.
fn annihilator(j: &DMatrix<f64>, kind: Singular) -> Result<DMatrix<f64>> {
    let jtj_inv = spd_inverse(&(j.transpose() * j), kind, "J'J")?;
    Ok(DMatrix::identity(j.nrows(), j.nrows()) - j * jtj_inv * j.transpose())
}

pub fn avar_tsgmm(inp: &TheoreticalInputs) -> Result<TsgmmAvar> {
    inp.validate()?;
    let vgmm = v_gmm(inp)?;
    let gamma1 = inp.gamma1();
    let gamma2 = inp.gamma2();

    let mut e_blocks = Vec::with_capacity(2);
    let mut h_blocks = Vec::with_capacity(2);
    for i in 0..2 {
        let su_inv = spd_inverse(inp.su(i), Singular::Weighting, "Su")?;
        let b = inp.suv(i) * &su_inv;
        e_blocks.push(sym(&(inp.sv(i) - &b * inp.suv(i).transpose())));
        h_blocks.push(b);
    }
    let e = block_diag(&[&e_blocks[0], &e_blocks[1]]);
    check_condition(&e, Singular::Weighting, "E")?;
    let e_ih = inv_sqrt(&e, Singular::Weighting, "E")?;
    let h = block_diag(&[&h_blocks[0], &h_blocks[1]]) * &gamma1;
    let j = &e_ih * &gamma2;
    let g = annihilator(&j, Singular::Design)? * &e_ih * h;
    let vgmm_inv = spd_inverse(&vgmm, Singular::Design, "V_GMM")?;
    let vtsgmm = spd_inverse(&(vgmm_inv + g.transpose() * &g), Singular::Design, "V_TSGMM")?;

    let s = inp.script_s();
    let s_inv = spd_inverse(&s, Singular::Weighting, "S")?;
    let gamma = block_diag(&[&gamma1, &gamma2]);
    let vtsgmm_full = spd_inverse(&(gamma.transpose() * s_inv * &gamma), Singular::Design, "Gamma' S^-1 Gamma")?;
    Ok(TsgmmAvar { vgmm, g, vtsgmm, vtsgmm_full })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordering {
    Better,
    Equal,
    Worse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// `2Φuv'θ_x + θ_x'Φv θ_x`.
    pub lhs: f64,
    pub delta: f64,
    /// `-δΦu² / (1 + δΦu)`.
    pub rhs6: f64,
    pub order_ts2sls_vs_gmm: Ordering,
    pub order_tsgmm_vs_ts2sls: Ordering,
}

fn trichotomy(x: f64, tol: f64) -> Ordering {
    if x.abs() <= tol {
        Ordering::Equal
    } else if x > 0.0 {
        Ordering::Better
    } else {
        Ordering::Worse
    }
}

/// Homogeneous-case efficiency rankings.
///
/// TS2SLS beats split GMM iff `lhs < 0`; TSGMM beats TS2SLS iff `lhs > rhs6`.
/// Differences within `1e-12` of the scale of the terms count as equal.
pub fn efficiency_conditions(
    phi_u: f64,
    phi_uv: &DVector<f64>,
    phi_v: &DMatrix<f64>,
    theta_x: &DVector<f64>,
) -> Result<EfficiencyReport> {
    let p2 = theta_x.len();
    if phi_uv.len() != p2 || phi_v.shape() != (p2, p2) {
        return Err(Error::DimensionMismatch("Phi dimensions".into()));
    }
    if !(phi_u > 0.0) {
        return Err(Error::NotPd("Phi_u must be positive".into()));
    }
    let schur = sym(&(phi_v - phi_uv * phi_uv.transpose() / phi_u));
    let schur_inv = spd_inverse(&schur, Singular::Pd, "Phi_v - Phi_uv Phi_u^-1 Phi_uv'")?;
    let delta = (phi_uv.transpose() * schur_inv * phi_uv)[(0, 0)] / (phi_u * phi_u);
    let cross = 2.0 * phi_uv.dot(theta_x);
    let quad = (theta_x.transpose() * phi_v * theta_x)[(0, 0)];
    let lhs = cross + quad;
    let rhs6 = -delta * phi_u * phi_u / (1.0 + delta * phi_u);
    let tol = 1e-12 * (1.0 + cross.abs() + quad.abs() + rhs6.abs());
    Ok(EfficiencyReport {
        lhs,
        delta,
        rhs6,
        order_ts2sls_vs_gmm: trichotomy(-lhs, tol),
        order_tsgmm_vs_ts2sls: trichotomy(lhs - rhs6, tol),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageVariances {
    #[serde(with = "serde_mat::matrix")]
    pub vols: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub vgmm: DMatrix<f64>,
    #[serde(with = "serde_mat::matrix")]
    pub vtsgmm: DMatrix<f64>,
}

/// Asymptotic variances of the full-sample OLS, split GMM and TSGMM first-stage estimators.
///
/// `V_TSGMM,Π = (V_GMM,Π⁻¹ + ℋ*'ℰ*^{-1/2} M_𝒥* ℰ*^{-1/2} ℋ*)⁻¹` with
/// `ℰ* = diag(Su_i - Suv_i' Sv_i⁻¹ Suv_i)`, `𝒥* = ℰ*^{-1/2} Γ1` and
/// `ℋ* = diag(Suv_i' Sv_i⁻¹) Γ2`. `Γ1` involves the augmented matrix, which
/// is why `inp.pi_a` is needed; `θ_x` is not used.
pub fn first_stage_variances(inp: &TheoreticalInputs) -> Result<FirstStageVariances> {
    inp.validate()?;
    let p2 = inp.p2();
    let ik = DMatrix::identity(p2, p2);
    let qk = ik.kronecker(&(&inp.q1 + &inp.q2));
    let qk_inv = spd_inverse(&qk, Singular::Pd, "Q")?;
    let vols = sym(&(&qk_inv * (&inp.sv1 + &inp.sv2) * &qk_inv));

    let mut info = DMatrix::zeros(p2 * inp.q(), p2 * inp.q());
    let mut e_blocks = Vec::with_capacity(2);
    let mut h_blocks = Vec::with_capacity(2);
    for i in 0..2 {
        let qi = ik.kronecker(inp.qi(i));
        let sv_inv = spd_inverse(inp.sv(i), Singular::Pd, "Sv")?;
        info += &qi * &sv_inv * &qi;
        let b = inp.suv(i).transpose() * &sv_inv;
        e_blocks.push(sym(&(inp.su(i) - &b * inp.suv(i))));
        h_blocks.push(b);
    }
    let vgmm = spd_inverse(&info, Singular::Pd, "V_GMM,Pi")?;
    let e = block_diag(&[&e_blocks[0], &e_blocks[1]]);
    let e_ih = inv_sqrt(&e, Singular::Pd, "E*")?;
    let h = block_diag(&[&h_blocks[0], &h_blocks[1]]) * inp.gamma2();
    let j = &e_ih * inp.gamma1();
    let g = annihilator(&j, Singular::Pd)? * &e_ih * h;
    let vtsgmm = spd_inverse(&(info + g.transpose() * g), Singular::Pd, "V_TSGMM,Pi")?;
    Ok(FirstStageVariances { vols, vgmm, vtsgmm })
}

#![allow(dead_code)]

use breakiv::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Piecewise design with `Z = [1, z_1..z_n]`, one endogenous regressor and
/// `ρ = -0.5`. `pi(t)` gives the first-stage slope on every instrument and
/// `theta(t)` the structural `(θ_z, θ_x)`.
pub fn planted(
    t: usize,
    n_iv: usize,
    noise: f64,
    seed: u64,
    pi: impl Fn(usize) -> f64,
    theta: impl Fn(usize) -> (f64, f64),
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ziv = DMatrix::from_fn(t, n_iv, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut x = DMatrix::zeros(t, 1);
    let mut y = DVector::zeros(t);
    for i in 0..t {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let (u, v) = (noise * e1, noise * (-0.5 * e1 + 0.75f64.sqrt() * e2));
        let zpi = 1.0 + pi(i) * ziv.row(i).sum();
        x[(i, 0)] = zpi + v;
        let (tz, tx) = theta(i);
        y[i] = tz + tx * x[(i, 0)] + u;
    }
    Dataset::from_parts(y, x, DMatrix::from_element(t, 1, 1.0), ziv).unwrap()
}

/// Random symmetric positive definite `n×n` matrix, `AA'/n + 0.1 I`.
pub fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
}

/// Random heterogeneous two-regime inputs with `q` instruments of which `p1`
/// are exogenous regressors, and `p2` endogenous regressors.
pub fn random_inputs(rng: &mut ChaCha8Rng, q: usize, p1: usize, p2: usize) -> breakiv::TheoreticalInputs {
    let k = p2 * q;
    let mut seg = || {
        let s = random_pd(rng, q + k);
        (s.view((0, 0), (q, q)).into_owned(), s.view((q, 0), (k, q)).into_owned(), s.view((q, q), (k, k)).into_owned())
    };
    let (su1, suv1, sv1) = seg();
    let (su2, suv2, sv2) = seg();
    let pi = DMatrix::from_fn(q, p2, |_, _| rng.sample::<f64, _>(StandardNormal));
    breakiv::TheoreticalInputs {
        q1: random_pd(rng, q),
        q2: random_pd(rng, q),
        su1,
        su2,
        suv1,
        suv2,
        sv1,
        sv2,
        pi_a: breakiv::estimators::augment(&pi, p1),
        theta_x1: DVector::from_fn(p2, |_, _| rng.sample::<f64, _>(StandardNormal)),
        theta_x2: DVector::from_fn(p2, |_, _| rng.sample::<f64, _>(StandardNormal)),
        lambda0: 0.5,
    }
}

/// Largest absolute entry of `a - b` over the largest absolute entry of `b`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

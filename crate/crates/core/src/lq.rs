//! Exact linear-quadratic oracle.
//!
//! For constant coefficients, costs
//!
//! ```text
//! f(s,x,m,v) = f0 + (f1 + F1m mean(m))^T x + x^T F1 x / 2 + f2^T v + v^T F2 v / 2
//! g(x,m)     = g0 + (g1 + G1m mean(m))^T x + x^T G x / 2
//! ```
//!
//! and drift b = b0 + B0m mean(m) + b1 x + b2 v with constant diffusion
//! columns (plus optional state loadings Sigma1^j), the equilibrium value
//! function is exactly quadratic,
//!
//! ```text
//! V(s,x) = V0(s) + V1(s)^T x + x^T V2(s) x / 2,
//! ```
//!
//! with V2 solving a matrix Riccati equation independent of the measure,
//! V1 a linear backward ODE coupled to the equilibrium mean flow, and V0 a
//! quadrature. The optimal feedback is affine,
//! vhat(s,x) = -F2^{-1} (b2^T (V2 x + V1) + f2), so the population mean and
//! covariance close into ODEs. This module solves all of these to high
//! order and serves as the reference the stochastic solvers are validated
//! against.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use crate::error::{MfgError, Result};
use crate::model::{AssumptionConstants, MeasureView, ModelSpec};

/// Blow-up guard for the Riccati integration.
const BLOWUP_NORM: f64 = 1e8;
/// Fixed point tolerance for the mean-flow / V1 coupling.
const PICARD_TOL: f64 = 1e-12;
const PICARD_MAX_ITER: usize = 200;

/// Constant-coefficient linear-quadratic instance. Measure coupling enters
/// only through the mean, via `b0_mean`, `f1_mean` and `g1_mean`.
#[derive(Debug, Clone)]
pub struct LqModel {
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub b0: DVector<f64>,
    pub b0_mean: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    /// Constant diffusion matrix (columns sigma0^j).
    pub sigma0: DMatrix<f64>,
    /// Optional state loadings Sigma1^j, one n-by-n matrix per column.
    pub sigma1: Vec<DMatrix<f64>>,
    pub f0: f64,
    pub f1: DVector<f64>,
    pub f1_mean: DMatrix<f64>,
    pub big_f1: DMatrix<f64>,
    pub f2: DVector<f64>,
    pub big_f2: DMatrix<f64>,
    pub g0: f64,
    pub g1: DVector<f64>,
    pub g1_mean: DMatrix<f64>,
    pub big_g: DMatrix<f64>,
}

impl LqModel {
    /// 1D instance with b = v, constant volatility, running cost
    /// (x^2 + v^2)/2 and zero terminal cost. Its Riccati solution is
    /// V2(s) = tanh(T - s), handy as a closed-form benchmark.
    pub fn scalar_benchmark(sigma: f64, horizon: f64) -> Self {
        LqModel {
            n: 1,
            d: 1,
            horizon,
            b0: DVector::zeros(1),
            b0_mean: DMatrix::zeros(1, 1),
            b1: DMatrix::zeros(1, 1),
            b2: DMatrix::identity(1, 1),
            sigma0: DMatrix::from_element(1, 1, sigma),
            sigma1: vec![DMatrix::zeros(1, 1)],
            f0: 0.0,
            f1: DVector::zeros(1),
            f1_mean: DMatrix::zeros(1, 1),
            big_f1: DMatrix::identity(1, 1),
            f2: DVector::zeros(1),
            big_f2: DMatrix::identity(1, 1),
            g0: 0.0,
            g1: DVector::zeros(1),
            g1_mean: DMatrix::zeros(1, 1),
            big_g: DMatrix::zeros(1, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        let d = self.d;
        let dims_ok = self.b0.len() == n
            && self.b0_mean.shape() == (n, n)
            && self.b1.shape() == (n, n)
            && self.b2.shape() == (n, d)
            && self.sigma0.shape() == (n, n)
            && self.sigma1.len() == n
            && self.sigma1.iter().all(|m| m.shape() == (n, n))
            && self.f1.len() == n
            && self.f1_mean.shape() == (n, n)
            && self.big_f1.shape() == (n, n)
            && self.f2.len() == d
            && self.big_f2.shape() == (d, d)
            && self.g1.len() == n
            && self.g1_mean.shape() == (n, n)
            && self.big_g.shape() == (n, n);
        if !dims_ok {
            return Err(MfgError::Dimension("inconsistent LQ coefficient shapes".into()));
        }
        if self.horizon <= 0.0 {
            return Err(MfgError::Config("horizon must be positive".into()));
        }
        if self.big_f2.clone().cholesky().is_none() {
            return Err(MfgError::Config("F2 must be symmetric positive definite".into()));
        }
        Ok(())
    }

    fn f2_inv(&self) -> DMatrix<f64> {
        self.big_f2
            .clone()
            .cholesky()
            .expect("validated F2")
            .inverse()
    }
}

/// The exact quadratic value decomposition and equilibrium moment flow on a
/// uniform grid over [t0, T].
#[derive(Debug, Clone)]
pub struct LqSolution {
    pub grid: Vec<f64>,
    pub v2: Vec<DMatrix<f64>>,
    pub v1: Vec<DVector<f64>>,
    pub v0: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

impl LqSolution {
    /// V(grid[k], x).
    pub fn value(&self, k: usize, x: &DVector<f64>) -> f64 {
        self.v0[k] + self.v1[k].dot(x) + 0.5 * (x.transpose() * &self.v2[k] * x)[(0, 0)]
    }

    pub fn grad(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.v1[k] + &self.v2[k] * x
    }

    pub fn hessian(&self, k: usize) -> DMatrix<f64> {
        self.v2[k].clone()
    }

    /// Optimal feedback vhat(grid[k], x) for the generating model.
    pub fn feedback(&self, model: &LqModel, k: usize, x: &DVector<f64>) -> DVector<f64> {
        -(model.f2_inv() * (model.b2.transpose() * self.grad(k, x) + &model.f2))
    }
}

fn riccati_rhs(model: &LqModel, f2_inv: &DMatrix<f64>, v2: &DMatrix<f64>) -> DMatrix<f64> {
    // V2' = V2 b2 F2^{-1} b2^T V2 - V2 b1 - b1^T V2 - F1 - sum_j S1j^T V2 S1j
    let mut rhs = v2 * &model.b2 * f2_inv * model.b2.transpose() * v2
        - v2 * &model.b1
        - model.b1.transpose() * v2
        - &model.big_f1;
    for s1 in &model.sigma1 {
        rhs -= s1.transpose() * v2 * s1;
    }
    rhs
}

/// Backward RK4 integration of the matrix Riccati equation on [t0, T] with
/// `steps` uniform intervals; symmetrized after every step. The equation is
/// autonomous, so the scheme is genuinely fourth order.
pub fn solve_riccati(model: &LqModel, t0: f64, steps: usize) -> Result<Vec<DMatrix<f64>>> {
    model.validate()?;
    let f2_inv = model.f2_inv();
    let h = -(model.horizon - t0) / steps as f64;
    let mut v2 = vec![DMatrix::zeros(model.n, model.n); steps + 1];
    v2[steps] = model.big_g.clone();
    for k in (0..steps).rev() {
        let v = &v2[k + 1];
        let k1 = riccati_rhs(model, &f2_inv, v);
        let k2 = riccati_rhs(model, &f2_inv, &(v + &k1 * (h / 2.0)));
        let k3 = riccati_rhs(model, &f2_inv, &(v + &k2 * (h / 2.0)));
        let k4 = riccati_rhs(model, &f2_inv, &(v + &k3 * h));
        let mut next = v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        next = (&next + next.transpose()) * 0.5;
        let norm = next.norm();
        if !norm.is_finite() || norm > BLOWUP_NORM {
            let s = t0 + (model.horizon - t0) * k as f64 / steps as f64;
            return Err(MfgError::BlowUp(s, norm));
        }
        v2[k] = next;
    }
    Ok(v2)
}

fn lerp_mat(path: &[DMatrix<f64>], u: f64) -> DMatrix<f64> {
    let last = path.len() - 1;
    let k = (u.floor() as usize).min(last - 1);
    let w = u - k as f64;
    &path[k] * (1.0 - w) + &path[k + 1] * w
}

fn lerp_vec(path: &[DVector<f64>], u: f64) -> DVector<f64> {
    let last = path.len() - 1;
    let k = (u.floor() as usize).min(last - 1);
    let w = u - k as f64;
    &path[k] * (1.0 - w) + &path[k + 1] * w
}

/// Full oracle solve from time t0 and initial moments (mean0, cov0):
/// Riccati for V2, fixed point between the equilibrium mean flow and the
/// linear V1 equation, covariance flow, and quadrature for V0.
pub fn solve_lq(
    model: &LqModel,
    t0: f64,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
    steps: usize,
) -> Result<LqSolution> {
    let n = model.n;
    if mean0.len() != n || cov0.shape() != (n, n) {
        return Err(MfgError::Dimension("initial moments do not match the state dimension".into()));
    }
    let f2_inv = model.f2_inv();
    let dt = (model.horizon - t0) / steps as f64;
    let grid: Vec<f64> = (0..=steps).map(|k| t0 + dt * k as f64).collect();
    let v2 = solve_riccati(model, t0, steps)?;
    // Feedback gain K(s) = -F2^{-1} b2^T V2(s); closed loop A(s) = b1 + b2 K(s).
    let a_path: Vec<DMatrix<f64>> = v2
        .iter()
        .map(|v| &model.b1 - &model.b2 * &f2_inv * model.b2.transpose() * v)
        .collect();

    // Picard iteration between the forward mean flow and backward V1.
    let mut mean = vec![mean0.clone(); steps + 1];
    let mut v1 = vec![DVector::zeros(n); steps + 1];
    for iter in 0..PICARD_MAX_ITER {
        // Backward V1 given the mean path:
        // V1' = -[A(s)^T V1 + V2 (b0 + B0m mean) + f1 + F1m mean
        //         - V2 b2 F2^{-1} f2 + sum_j S1j^T V2 sigma0^j]
        let rhs1 = |u: f64, w: &DVector<f64>| -> DVector<f64> {
            let v2u = lerp_mat(&v2, u);
            let au = lerp_mat(&a_path, u);
            let mu = lerp_vec(&mean, u);
            let mut r = au.transpose() * w
                + &v2u * (&model.b0 + &model.b0_mean * &mu)
                + &model.f1
                + &model.f1_mean * &mu
                - &v2u * &model.b2 * &f2_inv * &model.f2;
            for (j, s1) in model.sigma1.iter().enumerate() {
                r += s1.transpose() * &v2u * model.sigma0.column(j);
            }
            -r
        };
        let mut v1_new = vec![DVector::zeros(n); steps + 1];
        v1_new[steps] = &model.g1 + &model.g1_mean * &mean[steps];
        for k in (0..steps).rev() {
            let u = (k + 1) as f64;
            let w = &v1_new[k + 1];
            let k1 = rhs1(u, w);
            let k2 = rhs1(u - 0.5, &(w - &k1 * (dt / 2.0)));
            let k3 = rhs1(u - 0.5, &(w - &k2 * (dt / 2.0)));
            let k4 = rhs1(u - 1.0, &(w - &k3 * dt));
            v1_new[k] = w - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        // Forward mean flow given V1:
        // mean' = (A(s) + B0m) mean + b0 - b2 F2^{-1} (b2^T V1 + f2)
        let rhs_m = |u: f64, m: &DVector<f64>| -> DVector<f64> {
            let au = lerp_mat(&a_path, u);
            let w = lerp_vec(&v1_new, u);
            (au + &model.b0_mean) * m + &model.b0
                - &model.b2 * &f2_inv * (model.b2.transpose() * w + &model.f2)
        };
        let mut mean_new = vec![mean0.clone(); steps + 1];
        for k in 0..steps {
            let u = k as f64;
            let m = &mean_new[k];
            let k1 = rhs_m(u, m);
            let k2 = rhs_m(u + 0.5, &(m + &k1 * (dt / 2.0)));
            let k3 = rhs_m(u + 0.5, &(m + &k2 * (dt / 2.0)));
            let k4 = rhs_m(u + 1.0, &(m + &k3 * dt));
            mean_new[k + 1] = m + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        let delta = mean
            .iter()
            .zip(&mean_new)
            .map(|(a, b)| (a - b).norm())
            .chain(v1.iter().zip(&v1_new).map(|(a, b)| (a - b).norm()))
            .fold(0.0, f64::max);
        mean = mean_new;
        v1 = v1_new;
        if delta <= PICARD_TOL {
            break;
        }
        if iter + 1 == PICARD_MAX_ITER {
            return Err(MfgError::PicardDivergence(format!(
                "mean/V1 fixed point stalled at delta = {delta:.3e}"
            )));
        }
    }

    // Covariance flow: C' = A C + C A^T + E[sigma sigma^T] under the
    // closed-loop dynamics (sigma2 = 0 in this family).
    let second = |m: &DVector<f64>, c: &DMatrix<f64>| c + m * m.transpose();
    let rhs_c = |u: f64, c: &DMatrix<f64>, m: &DVector<f64>| -> DMatrix<f64> {
        let au = lerp_mat(&a_path, u);
        let mut noise = &model.sigma0 * model.sigma0.transpose();
        for (j, s1) in model.sigma1.iter().enumerate() {
            let s0j: DVector<f64> = model.sigma0.column(j).into();
            let cross = &s0j * (s1 * m).transpose();
            noise += &cross + cross.transpose() + s1 * second(m, c) * s1.transpose();
        }
        &au * c + c * au.transpose() + noise
    };
    let mut cov = vec![cov0.clone(); steps + 1];
    for k in 0..steps {
        let u = k as f64;
        let c = &cov[k];
        let m = &mean[k];
        let mh = lerp_vec(&mean, u + 0.5);
        let m1 = &mean[k + 1];
        let k1 = rhs_c(u, c, m);
        let k2 = rhs_c(u + 0.5, &(c + &k1 * (dt / 2.0)), &mh);
        let k3 = rhs_c(u + 0.5, &(c + &k2 * (dt / 2.0)), &mh);
        let k4 = rhs_c(u + 1.0, &(c + &k3 * dt), m1);
        let mut next = c + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        next = (&next + next.transpose()) * 0.5;
        cov[k + 1] = next;
    }

    // V0 quadrature:
    // V0' = -[V1^T (b0 + B0m mean) + f0 - (b2^T V1 + f2)^T F2^{-1} (b2^T V1 + f2)/2
    //         + Tr(E[sigma sigma^T along the mean] V2)/2]
    // integrated by composite Simpson (trapezoid on a trailing odd interval).
    let integrand: Vec<f64> = (0..=steps)
        .map(|k| {
            let lin = model.b2.transpose() * &v1[k] + &model.f2;
            let mut noise = &model.sigma0 * model.sigma0.transpose();
            for (j, s1) in model.sigma1.iter().enumerate() {
                let s0j: DVector<f64> = model.sigma0.column(j).into();
                let cross = &s0j * (s1 * &mean[k]).transpose();
                noise += &cross + cross.transpose() + s1 * second(&mean[k], &cov[k]) * s1.transpose();
            }
            v1[k].dot(&(&model.b0 + &model.b0_mean * &mean[k])) + model.f0
                - 0.5 * (lin.transpose() * &f2_inv * &lin)[(0, 0)]
                + 0.5 * (&noise * &v2[k]).trace()
        })
        .collect();
    let mut v0 = vec![0.0; steps + 1];
    v0[steps] = model.g0;
    for k in (0..steps).rev() {
        // V0(t_k) = V0(t_{k+2}) + Simpson over [t_k, t_{k+2}] when possible.
        if k + 2 <= steps && (steps - k) % 2 == 0 {
            v0[k] = v0[k + 2] + dt / 3.0 * (integrand[k] + 4.0 * integrand[k + 1] + integrand[k + 2]);
        } else {
            v0[k] = v0[k + 1] + dt / 2.0 * (integrand[k] + integrand[k + 1]);
        }
    }

    Ok(LqSolution { grid, v2, v1, v0, mean, cov })
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Wraps the LQ instance as a general model specification: assembles all
/// cost/coefficient derivative closures exactly and derives the assumption
/// constants from the coefficient norms.
pub fn to_model_spec(model: &LqModel) -> Result<ModelSpec> {
    model.validate()?;
    let n = model.n;
    let d = model.d;
    let mut spec = ModelSpec::zero(n, d, model.horizon);

    let m = model.clone();
    spec.coefficients.b0 =
        Arc::new(move |_, view: &MeasureView| &m.b0 + &m.b0_mean * &view.mean);
    let m = model.clone();
    spec.coefficients.b1 = Arc::new(move |_| m.b1.clone());
    let m = model.clone();
    spec.coefficients.b2 = Arc::new(move |_| m.b2.clone());
    let m = model.clone();
    spec.coefficients.sigma0 = Arc::new(move |_, _| m.sigma0.clone());
    let m = model.clone();
    spec.coefficients.sigma1 = Arc::new(move |_| m.sigma1.clone());
    let m = model.clone();
    spec.coefficients.d_dnu_b0 = Arc::new(move |_, _, _| m.b0_mean.transpose());
    spec.coefficients.d_dnu_sigma0 = Arc::new(move |_, _, _| vec![DMatrix::zeros(n, n); n]);

    let m = model.clone();
    spec.costs.f = Arc::new(move |_, x: &DVector<f64>, view: &MeasureView, v: &DVector<f64>| {
        m.f0 + (&m.f1 + &m.f1_mean * &view.mean).dot(x)
            + 0.5 * (x.transpose() * &m.big_f1 * x)[(0, 0)]
            + m.f2.dot(v)
            + 0.5 * (v.transpose() * &m.big_f2 * v)[(0, 0)]
    });
    let m = model.clone();
    spec.costs.dx_f = Arc::new(move |_, x: &DVector<f64>, view: &MeasureView, _| {
        &m.f1 + &m.f1_mean * &view.mean + (&m.big_f1 + m.big_f1.transpose()) * 0.5 * x
    });
    let m = model.clone();
    spec.costs.dv_f = Arc::new(move |_, _, _, v: &DVector<f64>| {
        &m.f2 + (&m.big_f2 + m.big_f2.transpose()) * 0.5 * v
    });
    let m = model.clone();
    spec.costs.dxx_f = Arc::new(move |_, _, _, _| (&m.big_f1 + m.big_f1.transpose()) * 0.5);
    let m = model.clone();
    spec.costs.dvv_f = Arc::new(move |_, _, _, _| (&m.big_f2 + m.big_f2.transpose()) * 0.5);
    let m = model.clone();
    spec.costs.dy_dnu_dxf = Arc::new(move |_, _, _, _, _| m.f1_mean.transpose());
    let m = model.clone();
    spec.costs.dy_dnu_f = Arc::new(move |_, x: &DVector<f64>, _, _, _| m.f1_mean.transpose() * x);

    let m = model.clone();
    spec.costs.g = Arc::new(move |x: &DVector<f64>, view: &MeasureView| {
        m.g0 + (&m.g1 + &m.g1_mean * &view.mean).dot(x)
            + 0.5 * (x.transpose() * &m.big_g * x)[(0, 0)]
    });
    let m = model.clone();
    spec.costs.dx_g = Arc::new(move |x: &DVector<f64>, view: &MeasureView| {
        &m.g1 + &m.g1_mean * &view.mean + (&m.big_g + m.big_g.transpose()) * 0.5 * x
    });
    let m = model.clone();
    spec.costs.dxx_g = Arc::new(move |_, _| (&m.big_g + m.big_g.transpose()) * 0.5);
    let m = model.clone();
    spec.costs.dy_dnu_dxg = Arc::new(move |_, _, _| m.g1_mean.transpose());
    let m = model.clone();
    spec.costs.dy_dnu_g = Arc::new(move |x: &DVector<f64>, _, _| m.g1_mean.transpose() * x);

    // Growth and convexity constants read off the coefficients.
    let l_x = model.f1_mean.norm();
    let l_v = 0.0;
    let l_g = model.g1_mean.norm();
    let l = [
        model.b0_mean.norm(),
        model.b1.norm(),
        model.b2.norm(),
        model.big_f1.norm(),
        model.big_f2.norm(),
        model.big_g.norm(),
        l_x,
        l_g,
        1.0,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    // Quadratic costs: every third derivative vanishes, as do the second
    // y-derivatives of the (linear-in-mean) measure couplings.
    spec.costs.dx3_f_1d = Some(Arc::new(|_, _, _, _| 0.0));
    spec.costs.dx2dv_f_1d = Some(Arc::new(|_, _, _, _| 0.0));
    spec.costs.dxdv2_f_1d = Some(Arc::new(|_, _, _, _| 0.0));
    spec.costs.dv3_f_1d = Some(Arc::new(|_, _, _, _| 0.0));
    spec.costs.dx3_g_1d = Some(Arc::new(|_, _| 0.0));

    let lambda_v = 0.5 * min_eig(&model.big_f2);
    let lambda_x = (0.5 * min_eig(&model.big_f1)).max(0.0);
    let lambda_g = (0.5 * min_eig(&model.big_g)).max(0.0);
    spec.constants = AssumptionConstants {
        l,
        l_x,
        l_v,
        l_g,
        lambda_v,
        lambda_x,
        lambda_g,
        has_a3_prime: min_eig(&model.big_f1) >= 0.0 && min_eig(&model.big_g) >= 0.0,
        has_a4: true,
    };
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tanh_model() -> LqModel {
        LqModel::scalar_benchmark(0.3, 1.0)
    }

    #[test]
    fn riccati_matches_tanh_to_1e8_at_thousand_steps() {
        let v2 = solve_riccati(&tanh_model(), 0.0, 1000).unwrap();
        assert!((v2[0][(0, 0)] - 1.0f64.tanh()).abs() <= 1e-8);
        // terminal condition is exact
        assert_eq!(v2[1000][(0, 0)], 0.0);
        // interior point: V2(0.5) = tanh(0.5)
        assert!((v2[500][(0, 0)] - 0.5f64.tanh()).abs() <= 1e-8);
    }

    #[test]
    fn riccati_is_fourth_order() {
        let err = |steps: usize| {
            let v2 = solve_riccati(&tanh_model(), 0.0, steps).unwrap();
            (v2[0][(0, 0)] - 1.0f64.tanh()).abs()
        };
        let ratio = err(20) / err(40);
        assert!((8.0..=32.0).contains(&ratio), "convergence ratio {ratio}");
    }

    #[test]
    fn riccati_blowup_is_detected() {
        // F1 = -10 x^2 with no terminal damping drives V2 to -infinity in
        // finite time once the horizon is long enough.
        let mut m = tanh_model();
        m.big_f1 = DMatrix::from_element(1, 1, -10.0);
        m.horizon = 5.0;
        match solve_riccati(&m, 0.0, 4000) {
            Err(MfgError::BlowUp(_, _)) => {}
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn v0_and_mean_flow_match_closed_forms() {
        let m = tanh_model();
        let sol = solve_lq(&m, 0.0, &DVector::from_element(1, 1.0), &DMatrix::zeros(1, 1), 1000)
            .unwrap();
        // V0(0) = (sigma^2/2) integral_0^1 tanh(1-s) ds = 0.045 ln cosh 1
        assert!((sol.v0[0] - 0.045 * 1.0f64.cosh().ln()).abs() <= 1e-6);
        assert_eq!(sol.v0[1000], 0.0);
        // V1 vanishes identically.
        assert!(sol.v1.iter().all(|w| w.norm() <= 1e-12));
        // mean(s) = cosh(1-s)/cosh(1) under the feedback v = -tanh(1-s) x
        for k in [0usize, 250, 500, 750, 1000] {
            let s = sol.grid[k];
            assert!((sol.mean[k][0] - (1.0 - s).cosh() / 1.0f64.cosh()).abs() <= 1e-5);
        }
        // value at (0, x=1): V0 + tanh(1)/2
        assert_relative_eq!(
            sol.value(0, &DVector::from_element(1, 1.0)),
            0.045 * 1.0f64.cosh().ln() + 0.5 * 1.0f64.tanh(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn covariance_flow_solves_lyapunov_equation() {
        // With feedback gain k(s) = -tanh(1-s) from zero initial variance:
        // C' = -2 tanh(1-s) C + sigma^2. Spot check by finite differences.
        let m = tanh_model();
        let sol =
            solve_lq(&m, 0.0, &DVector::zeros(1), &DMatrix::zeros(1, 1), 1000).unwrap();
        let dt = 1.0 / 1000.0;
        for k in [100usize, 500, 900] {
            let c_dot = (sol.cov[k + 1][(0, 0)] - sol.cov[k - 1][(0, 0)]) / (2.0 * dt);
            let s = sol.grid[k];
            let expect = -2.0 * (1.0 - s).tanh() * sol.cov[k][(0, 0)] + 0.09;
            assert!((c_dot - expect).abs() <= 1e-4, "at s = {s}: {c_dot} vs {expect}");
        }
    }

    #[test]
    fn model_spec_conversion_has_consistent_derivatives() {
        let mut m = tanh_model();
        m.f1_mean = DMatrix::from_element(1, 1, 0.4);
        m.g1_mean = DMatrix::from_element(1, 1, -0.2);
        m.b0_mean = DMatrix::from_element(1, 1, 0.3);
        let spec = to_model_spec(&m).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
        let rep = crate::model::check_derivative_consistency(&spec, &mut rng, 8, 1e-4);
        assert!(rep.passes, "mismatches: {:?}", rep.mismatches);
    }

    #[test]
    fn quadratic_costs_satisfy_convexity_check() {
        let spec = to_model_spec(&tanh_model()).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        let rep = crate::model::check_convexity(&spec, &mut rng, 100);
        assert!(rep.passes, "worst margin {}", rep.worst_margin);
    }

    #[test]
    fn picard_handles_mean_coupling() {
        // Crowd-aversion coupling f += 0.5 x mean(m); the mean flow and V1
        // must reach a joint fixed point and satisfy their ODEs.
        let mut m = tanh_model();
        m.f1_mean = DMatrix::from_element(1, 1, 0.5);
        let sol = solve_lq(&m, 0.0, &DVector::from_element(1, 1.0), &DMatrix::zeros(1, 1), 2000)
            .unwrap();
        let dt = 1.0 / 2000.0;
        for k in [200usize, 1000, 1800] {
            let s = sol.grid[k];
            let v2 = (1.0 - s).tanh();
            // V1' = v2 V1... closed loop: V1' = -(A V1 + 0.5 mean), A = -v2
            let v1_dot = (sol.v1[k + 1][0] - sol.v1[k - 1][0]) / (2.0 * dt);
            let expect = v2 * sol.v1[k][0] - 0.5 * sol.mean[k][0];
            assert!((v1_dot - expect).abs() <= 1e-4, "V1 ODE residual at {s}");
            let m_dot = (sol.mean[k + 1][0] - sol.mean[k - 1][0]) / (2.0 * dt);
            let expect_m = -v2 * sol.mean[k][0] - sol.v1[k][0];
            assert!((m_dot - expect_m).abs() <= 1e-4, "mean ODE residual at {s}");
        }
    }
}

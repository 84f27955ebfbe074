//! Lagrangian, Hamiltonian and the minimizing control map.
//!
//! With costate pair (p, q) (q an n-by-n matrix whose column j pairs with
//! the diffusion column sigma^j), the Lagrangian is
//!
//! ```text
//! L(s,x,m,v,p,q) = p^T b + sum_j (q^j)^T sigma^j + f(s,x,m,v)
//! ```
//!
//! and the Hamiltonian is its infimum over v. Strong convexity of f in v
//! makes the minimizer vhat unique, characterized by the first order
//! condition
//!
//! ```text
//! b2^T p + sum_j (Sigma2^j)^T q^j + D_v f(s,x,m,vhat) = 0.
//! ```
//!
//! Derivative maps of vhat follow by the implicit function theorem: each is
//! a linear solve against the control Hessian D_v^2 f.

use nalgebra::{DMatrix, DVector};

use crate::error::{MfgError, Result};
use crate::model::{MeasureView, ModelSpec, StepCoefs};

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;

/// L(s,x,m,v,p,q).
pub fn lagrangian(
    model: &ModelSpec,
    s: f64,
    x: &DVector<f64>,
    view: &MeasureView,
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> f64 {
    let b = model.drift(s, x, view, v);
    let sig = model.diffusion(s, x, view, v);
    let mut val = p.dot(&b) + (model.costs.f)(s, x, view, v);
    for j in 0..model.n {
        val += q.column(j).dot(&sig.column(j));
    }
    val
}

/// Gradient of the Lagrangian in v (the first order condition residual).
fn dv_lagrangian_cached(
    model: &ModelSpec,
    coefs: &StepCoefs,
    x: &DVector<f64>,
    view: &MeasureView,
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> DVector<f64> {
    let mut grad = &coefs.b2t * p;
    for j in 0..model.n {
        grad += &coefs.s2t[j] * q.column(j);
    }
    grad + (model.costs.dv_f)(coefs.s, x, view, v)
}

/// Newton solve of the first order condition from v = 0 with backtracking.
/// For quadratic-in-v costs this converges in a single step, i.e. reduces
/// to the closed form -(D_v^2 f)^{-1} (b2^T p + sum_j (Sigma2^j)^T q^j + f2).
pub fn minimize_v(
    model: &ModelSpec,
    s: f64,
    x: &DVector<f64>,
    view: &MeasureView,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    minimize_v_cached(model, &model.step_coefs(s, view), x, view, p, q)
}

/// As [`minimize_v`], with the coefficient matrices already frozen at the
/// current grid node.
pub fn minimize_v_cached(
    model: &ModelSpec,
    coefs: &StepCoefs,
    x: &DVector<f64>,
    view: &MeasureView,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let s = coefs.s;
    let mut v = DVector::zeros(model.d);
    let mut res = dv_lagrangian_cached(model, coefs, x, view, &v, p, q);
    for _ in 0..NEWTON_MAX_ITER {
        let rn = res.norm();
        if rn <= NEWTON_TOL {
            return Ok(v);
        }
        let hess = (model.costs.dvv_f)(s, x, view, &v);
        let step = hess
            .clone()
            .lu()
            .solve(&res)
            .ok_or_else(|| MfgError::SingularHessian(format!("D_v^2 f singular at s = {s}")))?;
        // Backtracking line search on the residual norm.
        let mut t = 1.0;
        loop {
            let cand = &v - &step * t;
            let cres = dv_lagrangian_cached(model, coefs, x, view, &cand, p, q);
            if cres.norm() < rn || t < 1e-8 {
                v = cand;
                res = cres;
                break;
            }
            t *= 0.5;
        }
    }
    let rn = res.norm();
    if rn <= NEWTON_TOL {
        Ok(v)
    } else {
        Err(MfgError::NewtonDivergence { iterations: NEWTON_MAX_ITER, residual: rn })
    }
}

/// H(s,x,m,p,q) = inf_v L, together with the minimizer.
pub fn hamiltonian(
    model: &ModelSpec,
    s: f64,
    x: &DVector<f64>,
    view: &MeasureView,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>)> {
    let vhat = minimize_v(model, s, x, view, p, q)?;
    Ok((lagrangian(model, s, x, view, &vhat, p, q), vhat))
}

/// As [`optimality_residual`], with the coefficient matrices already frozen.
pub fn optimality_residual_cached(
    model: &ModelSpec,
    coefs: &crate::model::StepCoefs,
    x: &DVector<f64>,
    view: &MeasureView,
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> f64 {
    dv_lagrangian_cached(model, coefs, x, view, v, p, q).norm()
}

/// Norm of the first order condition at a candidate control.
pub fn optimality_residual(
    model: &ModelSpec,
    s: f64,
    x: &DVector<f64>,
    view: &MeasureView,
    v: &DVector<f64>,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> f64 {
    dv_lagrangian_cached(model, &model.step_coefs(s, view), x, view, v, p, q).norm()
}

/// D_x H at the minimizer (by the envelope theorem the vhat-derivative drops):
/// b1^T p + sum_j (Sigma1^j)^T q^j + D_x f(s,x,m,vhat).
pub fn dx_hamiltonian(
    model: &ModelSpec,
    s: f64,
    x: &DVector<f64>,
    view: &MeasureView,
    vhat: &DVector<f64>,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> DVector<f64> {
    dx_hamiltonian_cached(model, &model.step_coefs(s, view), x, view, vhat, p, q)
}

/// As [`dx_hamiltonian`] with frozen coefficient matrices.
pub fn dx_hamiltonian_cached(
    model: &ModelSpec,
    coefs: &StepCoefs,
    x: &DVector<f64>,
    view: &MeasureView,
    vhat: &DVector<f64>,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
) -> DVector<f64> {
    let mut dxh = &coefs.b1t * p;
    for j in 0..model.n {
        dxh += &coefs.s1t[j] * q.column(j);
    }
    dxh + (model.costs.dx_f)(coefs.s, x, view, vhat)
}

/// Derivative maps of vhat in Jacobian layout (rows = control component,
/// columns = differentiation direction), obtained from the implicit
/// function theorem at the current minimizer.
#[derive(Debug, Clone)]
pub struct VhatDerivatives {
    /// d-by-n: D_x vhat.
    pub wrt_x: DMatrix<f64>,
    /// d-by-n: D_p vhat = -(D_v^2 f)^{-1} b2^T.
    pub wrt_p: DMatrix<f64>,
    /// d-by-n each: D_{q^j} vhat = -(D_v^2 f)^{-1} (Sigma2^j)^T.
    pub wrt_q: Vec<DMatrix<f64>>,
}

pub fn vhat_derivatives(
    model: &ModelSpec,
    s: f64,
    x: &DVector<f64>,
    view: &MeasureView,
    vhat: &DVector<f64>,
) -> Result<VhatDerivatives> {
    let hess = (model.costs.dvv_f)(s, x, view, vhat);
    let lu = hess.lu();
    let solve = |rhs: DMatrix<f64>| -> Result<DMatrix<f64>> {
        lu.solve(&rhs)
            .map(|m| -m)
            .ok_or_else(|| MfgError::SingularHessian(format!("D_v^2 f singular at s = {s}")))
    };
    let wrt_x = solve((model.costs.dxdv_f)(s, x, view, vhat).transpose())?;
    let wrt_p = solve((model.coefficients.b2)(s).transpose())?;
    let s2 = (model.coefficients.sigma2)(s);
    let mut wrt_q = Vec::with_capacity(model.n);
    for j in 0..model.n {
        wrt_q.push(solve(s2[j].transpose())?);
    }
    Ok(VhatDerivatives { wrt_x, wrt_p, wrt_q })
}

/// D_y (d vhat / d nu)(y) in Jacobian layout d-by-n:
/// -(D_v^2 f)^{-1} [D_y (d/dnu) D_v f]^T.
pub fn dy_dnu_vhat(
    model: &ModelSpec,
    s: f64,
    x: &DVector<f64>,
    view: &MeasureView,
    vhat: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let hess = (model.costs.dvv_f)(s, x, view, vhat);
    let rhs = model.dy_dnu_dvf(s, x, view, vhat, y).transpose();
    hess.lu()
        .solve(&rhs)
        .map(|m| -m)
        .ok_or_else(|| MfgError::SingularHessian(format!("D_v^2 f singular at s = {s}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    /// n = d = 1, b = v, sigma = 0, f = |v|^2 / 2.
    fn simple_model() -> ModelSpec {
        let mut m = ModelSpec::zero(1, 1, 1.0);
        m.coefficients.b2 = Arc::new(|_| DMatrix::identity(1, 1));
        m.costs.f = Arc::new(|_, _, _, v: &DVector<f64>| 0.5 * v.norm_squared());
        m.costs.dv_f = Arc::new(|_, _, _, v: &DVector<f64>| v.clone());
        m
    }

    #[test]
    fn lagrangian_matches_hand_value() {
        let m = simple_model();
        let view = MeasureView::dirac_zero(1);
        let x = DVector::from_element(1, 0.0);
        let v = DVector::from_element(1, 3.0);
        let p = DVector::from_element(1, 2.0);
        let q = DMatrix::zeros(1, 1);
        // p v + v^2/2 = 6 + 4.5
        assert_relative_eq!(lagrangian(&m, 0.0, &x, &view, &v, &p, &q), 10.5);
    }

    #[test]
    fn hamiltonian_is_minus_half_p_squared() {
        let m = simple_model();
        let view = MeasureView::dirac_zero(1);
        let x = DVector::zeros(1);
        let p = DVector::from_element(1, 1.0);
        let q = DMatrix::zeros(1, 1);
        let (h, vhat) = hamiltonian(&m, 0.0, &x, &view, &p, &q).unwrap();
        assert_relative_eq!(h, -0.5, epsilon = 1e-12);
        assert_relative_eq!(vhat[0], -1.0, epsilon = 1e-12);
        assert!(optimality_residual(&m, 0.0, &x, &view, &vhat, &p, &q) <= 1e-10);
    }

    #[test]
    fn newton_converges_in_one_step_for_quadratic_cost() {
        let m = simple_model();
        let view = MeasureView::dirac_zero(1);
        let x = DVector::zeros(1);
        let p = DVector::from_element(1, 7.3);
        let q = DMatrix::zeros(1, 1);
        let vhat = minimize_v(&m, 0.0, &x, &view, &p, &q).unwrap();
        // Exact closed-form minimizer, not just within Newton tolerance.
        assert_relative_eq!(vhat[0], -7.3, epsilon = 1e-14);
    }

    #[test]
    fn nonquadratic_cost_converges_and_satisfies_first_order_condition() {
        // f = v^2/2 + v^4/4: D_v f = v + v^3, D_v^2 f = 1 + 3 v^2.
        let mut m = simple_model();
        m.costs.f = Arc::new(|_, _, _, v: &DVector<f64>| 0.5 * v[0] * v[0] + 0.25 * v[0].powi(4));
        m.costs.dv_f =
            Arc::new(|_, _, _, v: &DVector<f64>| DVector::from_element(1, v[0] + v[0].powi(3)));
        m.costs.dvv_f = Arc::new(|_, _, _, v: &DVector<f64>| {
            DMatrix::from_element(1, 1, 1.0 + 3.0 * v[0] * v[0])
        });
        let view = MeasureView::dirac_zero(1);
        let x = DVector::zeros(1);
        let p = DVector::from_element(1, 5.0);
        let q = DMatrix::zeros(1, 1);
        let vhat = minimize_v(&m, 0.0, &x, &view, &p, &q).unwrap();
        assert!((vhat[0] + vhat[0].powi(3) + 5.0).abs() <= 1e-10);
    }

    #[test]
    fn vhat_lipschitz_in_p_bounded_by_l_over_two_lambda() {
        // |vhat(p') - vhat(p)| <= L / (2 lambda_v) |p' - p| with 10% slack.
        let m = simple_model();
        let view = MeasureView::dirac_zero(1);
        let x = DVector::zeros(1);
        let q = DMatrix::zeros(1, 1);
        let bound = m.constants.l / (2.0 * m.constants.lambda_v);
        for (a, b) in [(0.0, 1.0), (-2.0, 3.0), (0.5, 0.6)] {
            let va = minimize_v(&m, 0.0, &x, &view, &DVector::from_element(1, a), &q).unwrap();
            let vb = minimize_v(&m, 0.0, &x, &view, &DVector::from_element(1, b), &q).unwrap();
            assert!((va[0] - vb[0]).abs() <= 1.1 * bound * (a - b).abs());
        }
    }

    #[test]
    fn vhat_derivative_maps_match_finite_differences() {
        let m = simple_model();
        let view = MeasureView::dirac_zero(1);
        let x = DVector::zeros(1);
        let p = DVector::from_element(1, 1.2);
        let q = DMatrix::from_element(1, 1, 0.4);
        let vhat = minimize_v(&m, 0.0, &x, &view, &p, &q).unwrap();
        let der = vhat_derivatives(&m, 0.0, &x, &view, &vhat).unwrap();
        let h = 1e-6;
        let vp = minimize_v(&m, 0.0, &x, &view, &DVector::from_element(1, 1.2 + h), &q).unwrap();
        let vm = minimize_v(&m, 0.0, &x, &view, &DVector::from_element(1, 1.2 - h), &q).unwrap();
        assert_relative_eq!(der.wrt_p[(0, 0)], (vp[0] - vm[0]) / (2.0 * h), epsilon = 1e-6);
        assert_relative_eq!(der.wrt_x[(0, 0)], 0.0, epsilon = 1e-12);
        // sigma2 = 0 so q-sensitivity vanishes.
        assert_relative_eq!(der.wrt_q[0][(0, 0)], 0.0, epsilon = 1e-12);
    }
}

//! The value functional V(t, x, mu) and its derivative/diagnostic suite.
//!
//! V(t, x, mu) is the optimal cost of a single player starting at x while
//! the population starts in mu and plays the equilibrium: a `solve_mfg`
//! pass fixes the measure flow, a `solve_control` pass prices the
//! x-anchored player against it. Derivatives reuse the linearized flows:
//!
//! - gradient: sample mean of the control costate at time t;
//! - Hessian: costate block of the Jacobian flow;
//! - linear functional derivative in mu: chain rule through the measure
//!   kernels of the population and of the external player;
//! - time derivative / master equation residual: the Hamiltonian plus a
//!   measure-shift quotient, cross-checked against a central difference
//!   in t under common random numbers.

use nalgebra::{DMatrix, DVector};

use crate::error::{MfgError, Result};
use crate::fbsde::{solve_control, solve_mfg, FbsdeSolution, MeasureFlow, SolverParams, TimeGrid};
use crate::flows::{
    copy_indices, solve_jacobian_x, solve_lfd_kernel, solve_lfd_kernel_external, FlowWorkspace,
};
use crate::hamiltonian;
use crate::measure::ParticleMeasure;
use crate::model::ModelSpec;

/// Equilibrium measure flow plus the x-anchored control solution pricing
/// one starting point against it.
pub struct ValueSolution {
    pub grid: TimeGrid,
    pub x: DVector<f64>,
    pub pop: FbsdeSolution,
    pub flow: MeasureFlow,
    pub ctrl: FbsdeSolution,
}

/// Solve the full pipeline behind V(t, x, mu).
pub fn solve_pipeline(
    model: &ModelSpec,
    t: f64,
    x: &DVector<f64>,
    mu: &ParticleMeasure,
    params: &SolverParams,
) -> Result<ValueSolution> {
    let grid = TimeGrid::new(t, model.horizon, params.steps)?;
    let (pop, flow) = solve_mfg(model, grid, mu, params)?;
    let ctrl = solve_control(model, &flow, x, params)?;
    Ok(ValueSolution { grid, x: x.clone(), pop, flow, ctrl })
}

/// Monte Carlo cost functional of a solved trajectory bundle: left-endpoint
/// running cost plus terminal cost, averaged over particles.
pub fn cost_functional(model: &ModelSpec, sol: &FbsdeSolution, flow: &MeasureFlow) -> f64 {
    let views = flow.scaled_views(model);
    let dt = sol.grid.dt();
    let kk = sol.grid.steps;
    let nn = sol.particles();
    let mut acc = 0.0;
    for i in 0..nn {
        for k in 0..kk {
            acc += (model.costs.f)(sol.grid.time(k), &sol.x[k][i], &views[k], &sol.v[k][i]) * dt;
        }
        acc += (model.costs.g)(&sol.x[kk][i], &views[kk]);
    }
    acc / nn as f64
}

impl ValueSolution {
    pub fn value(&self, model: &ModelSpec) -> f64 {
        cost_functional(model, &self.ctrl, &self.flow)
    }

    /// D_x V(t, x, mu): sample mean of the initial control costate.
    pub fn grad(&self) -> DVector<f64> {
        self.ctrl.mean_p0()
    }

    /// Sample mean of the initial q, the diffusion pairing of the costate.
    pub fn mean_q0(&self) -> DMatrix<f64> {
        let n = self.ctrl.q[0][0].nrows();
        let mut acc = DMatrix::zeros(n, n);
        for m in &self.ctrl.q[0] {
            acc += m;
        }
        acc / self.ctrl.q[0].len() as f64
    }
}

/// D_x^2 V(t, x, mu) through the costate block of the Jacobian flow.
pub fn hessian_value(
    model: &ModelSpec,
    vs: &ValueSolution,
    params: &SolverParams,
) -> Result<DMatrix<f64>> {
    let ws = FlowWorkspace::new(model, &vs.ctrl, &vs.flow);
    Ok(solve_jacobian_x(model, &vs.ctrl, &ws, params)?.mean_p0())
}

/// Linear functional derivative of V in mu, evaluated at the probe atoms:
/// entry a estimates N * dV/d(xi_a), the y-gradient of dV/dnu at y = xi_a.
///
/// Chain rule through the measure kernels: the population kernel moves the
/// measure-dependent cost arguments, the external kernel moves the
/// x-anchored trajectories, and the direct terms differentiate the cost's
/// own measure argument along the probe's Jacobian columns.
pub fn lfd_value(
    model: &ModelSpec,
    vs: &ValueSolution,
    probes: &[usize],
    params: &SolverParams,
) -> Result<Vec<DVector<f64>>> {
    let n = model.n;
    let kk = vs.grid.steps;
    let dt = vs.grid.dt();
    let nn = vs.ctrl.particles();
    let views = vs.flow.scaled_views(model);
    if model.is_measure_decoupled() {
        return Ok(vec![DVector::zeros(n); probes.len()]);
    }
    let pop_ws = FlowWorkspace::new(model, &vs.pop, &vs.flow);
    let ctrl_ws = FlowWorkspace::new(model, &vs.ctrl, &vs.flow);
    let pop_jac = solve_jacobian_x(model, &vs.pop, &pop_ws, params)?;
    let copies = copy_indices(vs.pop.particles(), params.copy_cap);
    let cw = 1.0 / copies.len() as f64;
    let mut out = Vec::with_capacity(probes.len());
    for &a in probes {
        let ker = solve_lfd_kernel(model, &vs.pop, &pop_ws, &pop_jac, a, params)?;
        let ext =
            solve_lfd_kernel_external(model, &vs.ctrl, &ctrl_ws, &vs.pop, &pop_jac, &ker, a, params)?;
        let mut acc = DVector::zeros(n);
        for i in 0..nn {
            for k in 0..kk {
                let s = vs.grid.time(k);
                let (x, v) = (&vs.ctrl.x[k][i], &vs.ctrl.v[k][i]);
                let dxf = (model.costs.dx_f)(s, x, &views[k], v);
                let dvf = (model.costs.dv_f)(s, x, &views[k], v);
                acc += (ext.u[k][i].transpose() * dxf + ext.dv[k][i].transpose() * dvf) * dt;
                // Direct measure dependence of the running cost.
                acc += (model.dy_dnu_f(s, x, &views[k], v, &vs.pop.x[k][a]).transpose()
                    * &pop_jac.u[k][a])
                    .transpose()
                    * dt;
                let mut fb = DVector::zeros(n);
                for &j in &copies {
                    fb += (model.dy_dnu_f(s, x, &views[k], v, &vs.pop.x[k][j]).transpose()
                        * &ker.u[k][j])
                        .transpose()
                        * cw;
                }
                acc += fb * dt;
            }
            let xt = &vs.ctrl.x[kk][i];
            let dxg = (model.costs.dx_g)(xt, &views[kk]);
            acc += ext.u[kk][i].transpose() * dxg;
            acc += (model.dy_dnu_g(xt, &views[kk], &vs.pop.x[kk][a]).transpose()
                * &pop_jac.u[kk][a])
                .transpose();
            for &j in &copies {
                acc += (model.dy_dnu_g(xt, &views[kk], &vs.pop.x[kk][j]).transpose()
                    * &ker.u[kk][j])
                    .transpose()
                    * cw;
            }
        }
        out.push(acc / nn as f64);
    }
    Ok(out)
}

/// The two sides of the master equation at (t, x, mu).
#[derive(Debug, Clone)]
pub struct MasterReport {
    /// -H - measure shift rate: the formula's value for dV/dt.
    pub dt_formula: f64,
    /// Central finite difference of V in t under common random numbers.
    pub dt_fd: f64,
    /// |dt_fd - dt_formula|.
    pub residual: f64,
    pub hamiltonian: f64,
    /// Quotient estimate of the measure-generator term.
    pub measure_rate: f64,
    pub value: f64,
}

/// Evaluate the master equation residual at (t, x, mu). Requires the
/// regularity regime with uncontrolled, state-independent volatility; the
/// measure-generator term is estimated as a difference quotient along the
/// equilibrium cloud's own one-step evolution.
pub fn master_residual(
    model: &ModelSpec,
    t: f64,
    x: &DVector<f64>,
    mu: &ParticleMeasure,
    params: &SolverParams,
) -> Result<MasterReport> {
    if !model.constants.has_a4 {
        return Err(MfgError::MissingA4);
    }
    let vs = solve_pipeline(model, t, x, mu, params)?;
    let value = vs.value(model);
    let dt = vs.grid.dt();
    let view = model.view(mu);
    let (ham, _) = hamiltonian::hamiltonian(model, t, x, &view, &vs.grad(), &vs.mean_q0())?;
    // Measure-generator quotient: re-price (t, x) against the cloud one
    // step along its own equilibrium evolution.
    let m1 = &vs.flow.clouds[1];
    let shifted = solve_pipeline(model, t, x, m1, params)?.value(model);
    let measure_rate = (shifted - value) / dt;
    let dt_formula = -ham - measure_rate;
    // Central difference in t with the same seed and step count: the
    // Brownian increments differ only by the sqrt(dt) scaling.
    let h = dt;
    let up = solve_pipeline(model, t + h, x, mu, params)?.value(model);
    let dn = solve_pipeline(model, t - h, x, mu, params)?.value(model);
    let dt_fd = (up - dn) / (2.0 * h);
    Ok(MasterReport {
        dt_formula,
        dt_fd,
        residual: (dt_fd - dt_formula).abs(),
        hamiltonian: ham,
        measure_rate,
        value,
    })
}

/// Dynamic programming check: compare V(t, x, mu) against the running cost
/// up to t + eps plus the continuation value along the equilibrium flow.
#[derive(Debug, Clone)]
pub struct DppReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// 1D only: the continuation value is read off a quadratic anchor fit of
/// fresh control solves at cloud quantiles of the evolved state.
pub fn dpp_check(
    model: &ModelSpec,
    t: f64,
    x: &DVector<f64>,
    mu: &ParticleMeasure,
    eps: f64,
    params: &SolverParams,
) -> Result<DppReport> {
    if model.n != 1 {
        return Err(MfgError::UnsupportedDimension(model.n, 1));
    }
    let vs = solve_pipeline(model, t, x, mu, params)?;
    let dt = vs.grid.dt();
    let kk = vs.grid.steps;
    let k0 = ((eps / dt).round() as usize).clamp(1, kk - 1);
    let s0 = vs.grid.time(k0);
    let views = vs.flow.scaled_views(model);
    let nn = vs.ctrl.particles();
    // Accumulated running cost of the x-player over [t, t + eps).
    let mut running = 0.0;
    for i in 0..nn {
        for k in 0..k0 {
            running +=
                (model.costs.f)(vs.grid.time(k), &vs.ctrl.x[k][i], &views[k], &vs.ctrl.v[k][i])
                    * dt;
        }
    }
    running /= nn as f64;
    // Continuation values at anchor points along the truncated flow.
    let tail_grid = TimeGrid::new(s0, model.horizon, kk - k0)?;
    let tail_flow = MeasureFlow::from_paths(tail_grid, &vs.pop.x[k0..])?;
    let tail_params = SolverParams { steps: kk - k0, ..params.clone() };
    let mut cloud: Vec<f64> = vs.ctrl.x[k0].iter().map(|p| p[0]).collect();
    cloud.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let anchors: Vec<f64> =
        [0, nn / 4, nn / 2, 3 * nn / 4, nn - 1].iter().map(|&i| cloud[i]).collect();
    let mut phi = DMatrix::zeros(anchors.len(), 3);
    let mut vals = DVector::zeros(anchors.len());
    for (r, &y) in anchors.iter().enumerate() {
        let sol = solve_control(model, &tail_flow, &DVector::from_element(1, y), &tail_params)?;
        vals[r] = cost_functional(model, &sol, &tail_flow);
        phi[(r, 0)] = 1.0;
        phi[(r, 1)] = y;
        phi[(r, 2)] = y * y;
    }
    let coef = phi
        .svd(true, true)
        .solve(&vals, 1e-12)
        .map_err(|e| MfgError::Config(format!("anchor fit failed: {e}")))?;
    let mut continuation = 0.0;
    for i in 0..nn {
        let y = vs.ctrl.x[k0][i][0];
        continuation += coef[0] + coef[1] * y + coef[2] * y * y;
    }
    continuation /= nn as f64;
    let lhs = vs.value(model);
    let rhs = running + continuation;
    Ok(DppReport { lhs, rhs, gap: (lhs - rhs).abs() })
}

/// Decoupling-field consistency: the pathwise population costate p_i(s)
/// must agree with D_x V(s, X_i(s), m_s) recomputed from scratch at
/// sampled interior nodes. Returns the worst absolute mismatch.
pub fn decoupling_check(
    model: &ModelSpec,
    t: f64,
    mu: &ParticleMeasure,
    params: &SolverParams,
    samples: usize,
) -> Result<f64> {
    let grid = TimeGrid::new(t, model.horizon, params.steps)?;
    let (pop, _flow) = solve_mfg(model, grid, mu, params)?;
    let kk = grid.steps;
    let nn = pop.particles();
    let mut worst = 0.0f64;
    for c in 0..samples {
        let k = 1 + (c * (kk - 1)) / samples;
        let i = (c * nn) / samples;
        let s = grid.time(k);
        let tail_grid = TimeGrid::new(s, model.horizon, kk - k)?;
        let tail_flow = MeasureFlow::from_paths(tail_grid, &pop.x[k..])?;
        let tail_params = SolverParams { steps: kk - k, ..params.clone() };
        let ctrl = solve_control(model, &tail_flow, &pop.x[k][i], &tail_params)?;
        worst = worst.max((ctrl.mean_p0() - &pop.p[k][i]).amax());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_params(particles: usize, steps: usize) -> SolverParams {
        SolverParams {
            particles,
            steps,
            seed: 11,
            picard_tol: 1e-9,
            copy_cap: 64,
            flow_tol: 1e-8,
            flow_max: 300,
            ..SolverParams::default()
        }
    }

    fn spread_cloud(n: usize, lo: f64, hi: f64, seed: u64) -> ParticleMeasure {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParticleMeasure::from_scalars(
            &(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn value_grad_hessian_match_lq_oracle() {
        let lqm = lq::LqModel::scalar_benchmark(0.3, 1.0);
        let model = lq::to_model_spec(&lqm).unwrap();
        let oracle = lq::solve_lq(
            &lqm,
            0.0,
            &DVector::from_element(1, 1.0),
            &DMatrix::zeros(1, 1),
            400,
        )
        .unwrap();
        let params = test_params(2000, 40);
        let mu = ParticleMeasure::from_scalars(&[1.0]).unwrap();
        let x = DVector::from_element(1, 1.5);
        let vs = solve_pipeline(&model, 0.0, &x, &mu, &params).unwrap();
        let v = vs.value(&model);
        let g = vs.grad()[0];
        let h = hessian_value(&model, &vs, &params).unwrap()[(0, 0)];
        let (ov, og, oh) =
            (oracle.value(0, &x), oracle.grad(0, &x)[0], oracle.hessian(0)[(0, 0)]);
        assert!((v - ov).abs() <= 0.05 * ov.abs(), "value {v} vs oracle {ov}");
        assert!((g - og).abs() <= 0.05 * og.abs(), "grad {g} vs oracle {og}");
        assert!((h - oh).abs() <= 0.05 * oh.abs(), "hessian {h} vs oracle {oh}");
    }

    #[test]
    fn lfd_value_matches_atom_perturbation() {
        // Deterministic mean-coupled model: finite differences of the whole
        // pipeline in one atom are clean.
        let mut lqm = lq::LqModel::scalar_benchmark(0.0, 1.0);
        lqm.f1_mean = DMatrix::from_element(1, 1, 0.4);
        lqm.g1_mean = DMatrix::from_element(1, 1, -0.2);
        let model = lq::to_model_spec(&lqm).unwrap();
        let nn = 24;
        let params = test_params(nn, 20);
        let mu = spread_cloud(nn, -1.0, 2.0, 7);
        let x = DVector::from_element(1, 0.5);
        let vs = solve_pipeline(&model, 0.0, &x, &mu, &params).unwrap();
        let probes = [0usize, 11, 23];
        let lfd = lfd_value(&model, &vs, &probes, &params).unwrap();
        let h = 1e-4;
        for (slot, &a) in probes.iter().enumerate() {
            let value_with_shift = |shift: f64| {
                let mut pts: Vec<DVector<f64>> = mu.points().to_vec();
                pts[a][0] += shift;
                let mu2 = ParticleMeasure::new(pts).unwrap();
                solve_pipeline(&model, 0.0, &x, &mu2, &params).unwrap().value(&model)
            };
            let fd = nn as f64 * (value_with_shift(h) - value_with_shift(-h)) / (2.0 * h);
            let got = lfd[slot][0];
            assert!(
                (got - fd).abs() <= 2e-2 * fd.abs().max(1.0),
                "probe {a}: lfd {got} vs fd {fd}"
            );
        }
    }

    #[test]
    fn master_residual_is_small_for_lq() {
        let lqm = lq::LqModel::scalar_benchmark(0.3, 1.0);
        let model = lq::to_model_spec(&lqm).unwrap();
        let params = test_params(1000, 25);
        let mu = spread_cloud(1000, 0.5, 1.5, 9);
        let x = DVector::from_element(1, 1.0);
        let rep = master_residual(&model, 0.3, &x, &mu, &params).unwrap();
        let tol = 0.05 * (1.0 + x.norm_squared());
        assert!(rep.residual <= tol, "residual {} > {tol} ({rep:?})", rep.residual);
    }

    #[test]
    fn master_residual_requires_a4() {
        let lqm = lq::LqModel::scalar_benchmark(0.3, 1.0);
        let mut model = lq::to_model_spec(&lqm).unwrap();
        model.constants.has_a4 = false;
        let params = test_params(64, 10);
        let mu = ParticleMeasure::from_scalars(&[1.0]).unwrap();
        let x = DVector::from_element(1, 1.0);
        assert!(matches!(
            master_residual(&model, 0.2, &x, &mu, &params),
            Err(MfgError::MissingA4)
        ));
    }

    #[test]
    fn dynamic_programming_holds_for_lq() {
        let lqm = lq::LqModel::scalar_benchmark(0.3, 1.0);
        let model = lq::to_model_spec(&lqm).unwrap();
        let params = test_params(1000, 25);
        let mu = spread_cloud(1000, 0.5, 1.5, 13);
        let x = DVector::from_element(1, 1.0);
        let rep = dpp_check(&model, 0.0, &x, &mu, 0.1, &params).unwrap();
        assert!(rep.gap <= 1e-2 * (1.0 + rep.lhs.abs()), "dpp gap {} ({rep:?})", rep.gap);
    }

    #[test]
    fn costate_matches_decoupling_field() {
        let mut lqm = lq::LqModel::scalar_benchmark(0.3, 1.0);
        lqm.f1_mean = DMatrix::from_element(1, 1, 0.4);
        let model = lq::to_model_spec(&lqm).unwrap();
        let params = test_params(500, 25);
        let mu = spread_cloud(500, 0.0, 2.0, 21);
        let worst = decoupling_check(&model, 0.0, &mu, &params, 4).unwrap();
        assert!(worst <= 0.05, "decoupling mismatch {worst}");
    }

    #[test]
    fn grad_matches_oracle_for_mean_coupled_model() {
        let mut lqm = lq::LqModel::scalar_benchmark(0.3, 1.0);
        lqm.f1_mean = DMatrix::from_element(1, 1, 0.5);
        let model = lq::to_model_spec(&lqm).unwrap();
        let mean0 = DVector::from_element(1, 1.0);
        let oracle = lq::solve_lq(&lqm, 0.0, &mean0, &DMatrix::zeros(1, 1), 400).unwrap();
        let params = test_params(2000, 40);
        let mu = ParticleMeasure::from_scalars(&[1.0]).unwrap();
        let x = DVector::from_element(1, 0.5);
        let vs = solve_pipeline(&model, 0.0, &x, &mu, &params).unwrap();
        let g = vs.grad()[0];
        let og = oracle.grad(0, &x)[0];
        assert!((g - og).abs() <= 0.05 * og.abs().max(0.1), "grad {g} vs oracle {og}");
    }
}

//! Linearized forward-backward flows along a solved base trajectory.
//!
//! Differentiating the discrete forward-backward system in its initial
//! data produces, for every derivative of interest, a *linear* FBSDE whose
//! coefficients are frozen along the base solution:
//!
//! ```text
//! dU  = (b1 U + b2 dV + drift source) ds + sum_j (S1j U + S2j dV + diff source) dB^j
//! dV  = Dx_vhat U + Dp_vhat P + Dq_vhat Q + control source
//! dP  = -(b1^T P + sum_j S1j^T Q^j + Dxx_f U + DxDv_f dV + driver source) ds + Q dB
//! P(T) = Dxx_g U(T) + terminal source
//! ```
//!
//! A single damped-Picard LSMC template solves every instance; the
//! individual flows differ only in their initial conditions and source
//! terms:
//!
//! - Jacobian flow (U(0) = I, no sources): pathwise D_x of the control
//!   solution, whose costate part estimates the value Hessian;
//! - directional flow (U(0) = eta, mean field sources averaged over the
//!   population): the Gateaux derivative of the equilibrium system along a
//!   direction eta in the initial data;
//! - bare directional flow (U(0) = 0, sources frozen from a full
//!   directional flow): the measure-displacement part in the decomposition
//!   of the directional derivative through the Jacobian;
//! - measure kernel flow (U(0) = 0, direct sources read off one probe
//!   particle's Jacobian, feedback sources averaged over the population's
//!   own kernels): the y-gradient of the linear functional derivative of
//!   the trajectory in its initial measure;
//! - Hessian flow (scalar state only; quadratic sources assembled from the
//!   Jacobian flow and third derivatives of the costs): pathwise D_x^2.

use nalgebra::{DMatrix, DVector};

use crate::error::{MfgError, Result};
use crate::fbsde::{Conditioner, FbsdeSolution, MeasureFlow, SolverParams};
use crate::hamiltonian;
use crate::model::{MeasureView, ModelSpec, StepCoefs};

/// State of a linearized flow: all fields indexed `[step][particle]`, each
/// entry an n-by-r (state/costate) or d-by-r (control) matrix whose columns
/// are independent differentiation directions.
#[derive(Debug, Clone)]
pub struct LinearFlow {
    pub r: usize,
    pub u: Vec<Vec<DMatrix<f64>>>,
    pub p: Vec<Vec<DMatrix<f64>>>,
    /// q[k][i][j]: sensitivity of the j-th costate column.
    pub q: Vec<Vec<Vec<DMatrix<f64>>>>,
    pub dv: Vec<Vec<DMatrix<f64>>>,
    pub iterations: usize,
}

impl LinearFlow {
    fn zeros(n: usize, d: usize, r: usize, steps: usize, particles: usize) -> Self {
        LinearFlow {
            r,
            u: vec![vec![DMatrix::zeros(n, r); particles]; steps + 1],
            p: vec![vec![DMatrix::zeros(n, r); particles]; steps + 1],
            q: vec![vec![vec![DMatrix::zeros(n, r); n]; particles]; steps + 1],
            dv: vec![vec![DMatrix::zeros(d, r); particles]; steps + 1],
            iterations: 0,
        }
    }

    /// Sample average of the initial costate sensitivity; for the Jacobian
    /// flow of a control solve this is the value Hessian estimator.
    pub fn mean_p0(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.p[0][0].nrows(), self.p[0][0].ncols());
        for m in &self.p[0] {
            acc += m;
        }
        acc / self.p[0].len() as f64
    }
}

/// Per-base precomputation shared by all flow solves: scaled measure
/// views, frozen coefficient matrices and the regression operators of
/// every grid node.
pub struct FlowWorkspace {
    pub views: Vec<MeasureView>,
    pub coefs: Vec<StepCoefs>,
    conditioners: Vec<Conditioner>,
}

impl FlowWorkspace {
    pub fn new(model: &ModelSpec, base: &FbsdeSolution, flow: &MeasureFlow) -> Self {
        let views = flow.scaled_views(model);
        let coefs: Vec<StepCoefs> =
            (0..=base.grid.steps).map(|k| model.step_coefs(base.grid.time(k), &views[k])).collect();
        let conditioners = (0..base.grid.steps).map(|k| Conditioner::new(&base.x[k])).collect();
        FlowWorkspace { views, coefs, conditioners }
    }
}

/// A source term at one grid node: absent, identical for every particle,
/// or particle-resolved.
pub enum SourceTerm {
    Zero,
    Shared(DMatrix<f64>),
    PerParticle(Vec<DMatrix<f64>>),
}

impl SourceTerm {
    fn add_into(&self, i: usize, target: &mut DMatrix<f64>) {
        match self {
            SourceTerm::Zero => {}
            SourceTerm::Shared(m) => *target += m,
            SourceTerm::PerParticle(v) => *target += &v[i],
        }
    }
}

/// Source callbacks of one flow instance. Each receives the current flow
/// state, so self-coupled (mean field) terms are resolved by the same
/// Picard iteration that resolves the forward-backward coupling.
pub struct FlowSources<'a> {
    pub r: usize,
    pub init: Box<dyn Fn(usize) -> DMatrix<f64> + 'a>,
    pub drift: Box<dyn Fn(usize, &LinearFlow) -> SourceTerm + 'a>,
    pub diffusion: Box<dyn Fn(usize, usize, &LinearFlow) -> SourceTerm + 'a>,
    pub control: Box<dyn Fn(usize, &LinearFlow) -> SourceTerm + 'a>,
    pub driver: Box<dyn Fn(usize, &LinearFlow) -> SourceTerm + 'a>,
    pub terminal: Box<dyn Fn(&LinearFlow) -> SourceTerm + 'a>,
}

impl<'a> FlowSources<'a> {
    /// No sources: the homogeneous linearization with a given initial
    /// condition.
    pub fn homogeneous(r: usize, init: Box<dyn Fn(usize) -> DMatrix<f64> + 'a>) -> Self {
        FlowSources {
            r,
            init,
            drift: Box::new(|_, _| SourceTerm::Zero),
            diffusion: Box::new(|_, _, _| SourceTerm::Zero),
            control: Box::new(|_, _| SourceTerm::Zero),
            driver: Box::new(|_, _| SourceTerm::Zero),
            terminal: Box::new(|_| SourceTerm::Zero),
        }
    }
}

/// Damped-Picard solve of one linear flow along the base. Regression
/// operators come from the workspace, so iterations only pay for matrix
/// arithmetic and derivative-closure evaluations.
pub fn solve_linear_flow(
    model: &ModelSpec,
    base: &FbsdeSolution,
    ws: &FlowWorkspace,
    sources: &FlowSources,
    params: &SolverParams,
) -> Result<LinearFlow> {
    let n = model.n;
    let d = model.d;
    let r = sources.r;
    let kk = base.grid.steps;
    let nn = base.particles();
    let dt = base.grid.dt();

    let mut st = LinearFlow::zeros(n, d, r, kk, nn);
    for i in 0..nn {
        st.u[0][i] = (sources.init)(i);
    }

    for iter in 0..params.picard_max {
        // Forward sweep: transport u against the control sensitivities of
        // the previous backward sweep (which lag one iteration, exactly as
        // the controls do in the nonlinear solver).
        for k in 0..kk {
            let drift_src = (sources.drift)(k, &st);
            let diff_src: Vec<SourceTerm> =
                (0..n).map(|j| (sources.diffusion)(k, j, &st)).collect();
            let coefs = &ws.coefs[k];
            for i in 0..nn {
                let dv = &st.dv[k][i];
                let mut du = &coefs.b1 * &st.u[k][i] + &coefs.b2 * dv;
                drift_src.add_into(i, &mut du);
                let mut next = &st.u[k][i] + du * dt;
                for j in 0..n {
                    let mut dsig = &coefs.s1[j] * &st.u[k][i] + &coefs.s2[j] * dv;
                    diff_src[j].add_into(i, &mut dsig);
                    next += dsig * base.dw[k][i][j];
                }
                st.u[k + 1][i] = next;
            }
        }
        // Terminal condition.
        let term_src = (sources.terminal)(&st);
        for i in 0..nn {
            let dxxg = (model.costs.dxx_g)(&base.x[kk][i], &ws.views[kk]);
            let mut pk = dxxg * &st.u[kk][i];
            term_src.add_into(i, &mut pk);
            st.p[kk][i] = pk;
        }
        // Backward sweep. The costate tangent is transported pathwise:
        // conditioning it on the state, as the nonlinear sweep does with
        // p itself, would smear each particle's direction onto the
        // population mean and break the linearity of the flow in its
        // per-particle data. The cross-sectional fit is kept only to
        // extract the martingale part feeding the q tangent.
        let mut delta: f64 = 0.0;
        for k in (0..kk).rev() {
            let cond = &ws.conditioners[k];
            let targets = DMatrix::from_fn(nn, n * r, |i, c| st.p[k + 1][i][(c / r, c % r)]);
            let pbar = cond.fit(&targets);
            let resid = &targets - &pbar;
            for j in 0..n {
                let qt = DMatrix::from_fn(nn, n * r, |i, c| resid[(i, c)] * base.dw[k][i][j] / dt);
                let qfit = cond.fit(&qt);
                for i in 0..nn {
                    st.q[k][i][j] = DMatrix::from_fn(n, r, |c, l| qfit[(i, c * r + l)]);
                }
            }
            let ctrl_src = (sources.control)(k, &st);
            let driver_src = (sources.driver)(k, &st);
            let coefs = &ws.coefs[k];
            for i in 0..nn {
                let pb = st.p[k + 1][i].clone();
                let vd = hamiltonian::vhat_derivatives(
                    model,
                    coefs.s,
                    &base.x[k][i],
                    &ws.views[k],
                    &base.v[k][i],
                )?;
                let mut dv = &vd.wrt_x * &st.u[k][i] + &vd.wrt_p * &pb;
                for j in 0..n {
                    dv += &vd.wrt_q[j] * &st.q[k][i][j];
                }
                ctrl_src.add_into(i, &mut dv);
                // Damped update keeps the iteration map linear while
                // preserving the contraction of the nonlinear solver.
                dv = dv * params.damping + &st.dv[k][i] * (1.0 - params.damping);
                delta = delta.max((&dv - &st.dv[k][i]).amax());
                let dxxf = (model.costs.dxx_f)(coefs.s, &base.x[k][i], &ws.views[k], &base.v[k][i]);
                let dxdvf =
                    (model.costs.dxdv_f)(coefs.s, &base.x[k][i], &ws.views[k], &base.v[k][i]);
                let mut driver = &coefs.b1t * &pb + dxxf * &st.u[k][i] + dxdvf * &dv;
                for j in 0..n {
                    driver += &coefs.s1t[j] * &st.q[k][i][j];
                }
                driver_src.add_into(i, &mut driver);
                st.dv[k][i] = dv;
                st.p[k][i] = pb + driver * dt;
            }
        }
        if delta <= params.picard_tol {
            st.iterations = iter + 1;
            return Ok(st);
        }
    }
    Err(MfgError::PicardDivergence(format!(
        "linearized flow did not reach tolerance {} in {} sweeps",
        params.picard_tol, params.picard_max
    )))
}

/// Evenly spaced subsample indices used for law averages; deterministic,
/// capped to keep self-coupled flows quadratic only in the cap.
pub(crate) fn copy_indices(particles: usize, cap: usize) -> Vec<usize> {
    if particles <= cap {
        (0..particles).collect()
    } else {
        (0..cap).map(|t| t * particles / cap).collect()
    }
}

/// Pathwise Jacobian of the solution in its initial state, with the
/// measure flow held fixed: U(0) = I, no sources.
pub fn solve_jacobian_x(
    model: &ModelSpec,
    base: &FbsdeSolution,
    ws: &FlowWorkspace,
    params: &SolverParams,
) -> Result<LinearFlow> {
    let n = model.n;
    let sources = FlowSources::homogeneous(n, Box::new(move |_| DMatrix::identity(n, n)));
    solve_linear_flow(model, base, ws, &sources, params)
}

/// Mean field source callbacks shared by the directional and kernel flows:
/// law averages of the measure-derivative evaluators against a supplied
/// per-particle state reader.
#[derive(Clone)]
struct MeanFieldTerms<'a> {
    model: &'a ModelSpec,
    /// Population trajectories the law averages run over.
    base: &'a FbsdeSolution,
    /// Trajectories the per-particle evaluators are anchored at; equals
    /// `base` except for flows of an external (control) particle.
    at: &'a FbsdeSolution,
    ws: &'a FlowWorkspace,
    copies: Vec<usize>,
}

impl<'a> MeanFieldTerms<'a> {
    fn new(
        model: &'a ModelSpec,
        base: &'a FbsdeSolution,
        ws: &'a FlowWorkspace,
        cap: usize,
    ) -> Self {
        MeanFieldTerms { model, base, at: base, ws, copies: copy_indices(base.particles(), cap) }
    }

    fn with_eval(
        model: &'a ModelSpec,
        base: &'a FbsdeSolution,
        at: &'a FbsdeSolution,
        ws: &'a FlowWorkspace,
        cap: usize,
    ) -> Self {
        MeanFieldTerms { model, base, at, ws, copies: copy_indices(base.particles(), cap) }
    }

    fn weight(&self) -> f64 {
        1.0 / self.copies.len() as f64
    }

    /// mean_j [D_y (d b0/d nu)(y_j)]^T u_j
    fn drift(&self, k: usize, u: &[Vec<DMatrix<f64>>], r: usize) -> SourceTerm {
        let s = self.base.grid.time(k);
        let mut acc = DMatrix::zeros(self.model.n, r);
        for &j in &self.copies {
            acc += self.model.d_dnu_b0(s, &self.ws.views[k], &self.base.x[k][j]).transpose()
                * &u[k][j];
        }
        SourceTerm::Shared(acc * self.weight())
    }

    fn diffusion(&self, k: usize, col: usize, u: &[Vec<DMatrix<f64>>], r: usize) -> SourceTerm {
        let s = self.base.grid.time(k);
        let mut acc = DMatrix::zeros(self.model.n, r);
        for &j in &self.copies {
            acc += self.model.d_dnu_sigma0(s, &self.ws.views[k], &self.base.x[k][j])[col]
                .transpose()
                * &u[k][j];
        }
        SourceTerm::Shared(acc * self.weight())
    }

    /// mean_j D_y (d vhat/d nu)(x_i; y_j) u_j, per evaluation particle.
    fn control(&self, k: usize, u: &[Vec<DMatrix<f64>>], r: usize) -> Result<SourceTerm> {
        let s = self.base.grid.time(k);
        let nn = self.at.particles();
        let mut out = Vec::with_capacity(nn);
        for i in 0..nn {
            let mut acc = DMatrix::zeros(self.model.d, r);
            for &j in &self.copies {
                acc += hamiltonian::dy_dnu_vhat(
                    self.model,
                    s,
                    &self.at.x[k][i],
                    &self.ws.views[k],
                    &self.at.v[k][i],
                    &self.base.x[k][j],
                )? * &u[k][j];
            }
            out.push(acc * self.weight());
        }
        Ok(SourceTerm::PerParticle(out))
    }

    fn driver(&self, k: usize, u: &[Vec<DMatrix<f64>>], r: usize) -> SourceTerm {
        let s = self.base.grid.time(k);
        let nn = self.at.particles();
        let mut out = Vec::with_capacity(nn);
        for i in 0..nn {
            let mut acc = DMatrix::zeros(self.model.n, r);
            for &j in &self.copies {
                acc += self
                    .model
                    .dy_dnu_dxf(
                        s,
                        &self.at.x[k][i],
                        &self.ws.views[k],
                        &self.at.v[k][i],
                        &self.base.x[k][j],
                    )
                    .transpose()
                    * &u[k][j];
            }
            out.push(acc * self.weight());
        }
        SourceTerm::PerParticle(out)
    }

    fn terminal(&self, u: &[Vec<DMatrix<f64>>], r: usize) -> SourceTerm {
        let kk = self.base.grid.steps;
        let nn = self.at.particles();
        let mut out = Vec::with_capacity(nn);
        for i in 0..nn {
            let mut acc = DMatrix::zeros(self.model.n, r);
            for &j in &self.copies {
                acc += self
                    .model
                    .dy_dnu_dxg(&self.at.x[kk][i], &self.ws.views[kk], &self.base.x[kk][j])
                    .transpose()
                    * &u[kk][j];
            }
            out.push(acc * self.weight());
        }
        SourceTerm::PerParticle(out)
    }
}

/// Gateaux derivative of the equilibrium system along a per-particle
/// direction eta in the initial data: U(0) = eta, with the mean field
/// sources resolved self-consistently against the population's own flow.
pub fn solve_directional(
    model: &ModelSpec,
    base: &FbsdeSolution,
    ws: &FlowWorkspace,
    eta: &[DVector<f64>],
    params: &SolverParams,
) -> Result<LinearFlow> {
    if eta.len() != base.particles() {
        return Err(MfgError::Dimension("one direction per particle is required".into()));
    }
    let init: Vec<DMatrix<f64>> =
        eta.iter().map(|e| DMatrix::from_column_slice(model.n, 1, e.as_slice())).collect();
    if model.is_measure_decoupled() {
        let sources = FlowSources::homogeneous(1, Box::new(move |i| init[i].clone()));
        return solve_linear_flow(model, base, ws, &sources, params);
    }
    let mf = MeanFieldTerms::new(model, base, ws, params.copy_cap);
    let sources = FlowSources {
        r: 1,
        init: Box::new(move |i| init[i].clone()),
        drift: Box::new(|k, st| mf.drift(k, &st.u, 1)),
        diffusion: Box::new(|k, j, st| mf.diffusion(k, j, &st.u, 1)),
        control: Box::new(|k, st| mf.control(k, &st.u, 1).expect("control Hessian is invertible")),
        driver: Box::new(|k, st| mf.driver(k, &st.u, 1)),
        terminal: Box::new(|st| mf.terminal(&st.u, 1)),
    };
    solve_linear_flow(model, base, ws, &sources, params)
}

/// The measure-displacement part of a directional derivative: zero initial
/// condition, mean field sources frozen from the full flow. The identity
/// (full) = (Jacobian) eta + (bare) decomposes transport and displacement.
pub fn solve_directional_bare(
    model: &ModelSpec,
    base: &FbsdeSolution,
    ws: &FlowWorkspace,
    full: &LinearFlow,
    params: &SolverParams,
) -> Result<LinearFlow> {
    let n = model.n;
    if model.is_measure_decoupled() {
        let sources = FlowSources::homogeneous(1, Box::new(move |_| DMatrix::zeros(n, 1)));
        return solve_linear_flow(model, base, ws, &sources, params);
    }
    let mf = MeanFieldTerms::new(model, base, ws, params.copy_cap);
    let sources = FlowSources {
        r: 1,
        init: Box::new(move |_| DMatrix::zeros(n, 1)),
        drift: Box::new(|k, _| mf.drift(k, &full.u, 1)),
        diffusion: Box::new(|k, j, _| mf.diffusion(k, j, &full.u, 1)),
        control: Box::new(|k, _| mf.control(k, &full.u, 1).expect("control Hessian is invertible")),
        driver: Box::new(|k, _| mf.driver(k, &full.u, 1)),
        terminal: Box::new(|_| mf.terminal(&full.u, 1)),
    };
    solve_linear_flow(model, base, ws, &sources, params)
}

/// y-gradient of the linear functional derivative of the population
/// trajectories in the initial measure, evaluated at probe atom y =
/// xi_probe. The direct sources read off the probe's own Jacobian columns
/// `jac`; the feedback sources are resolved self-consistently against the
/// population's kernels.
pub fn solve_lfd_kernel(
    model: &ModelSpec,
    base: &FbsdeSolution,
    ws: &FlowWorkspace,
    jac: &LinearFlow,
    probe: usize,
    params: &SolverParams,
) -> Result<LinearFlow> {
    let n = model.n;
    let nn = base.particles();
    if probe >= nn {
        return Err(MfgError::Dimension(format!("probe index {probe} out of range")));
    }
    let mf = MeanFieldTerms::new(model, base, ws, params.copy_cap);
    let kk = base.grid.steps;
    // Direct sources: the probe behaves as a Dirac perturbation transported
    // by its own Jacobian flow.
    let direct_drift = |k: usize| -> DMatrix<f64> {
        let s = base.grid.time(k);
        model.d_dnu_b0(s, &ws.views[k], &base.x[k][probe]).transpose() * &jac.u[k][probe]
    };
    let direct_diff = |k: usize, col: usize| -> DMatrix<f64> {
        let s = base.grid.time(k);
        model.d_dnu_sigma0(s, &ws.views[k], &base.x[k][probe])[col].transpose() * &jac.u[k][probe]
    };
    let sources = FlowSources {
        r: n,
        init: Box::new(move |_| DMatrix::zeros(n, n)),
        drift: Box::new({
            let mf = mf.clone();
            move |k, st| match mf.drift(k, &st.u, n) {
            SourceTerm::Shared(fb) => SourceTerm::Shared(fb + direct_drift(k)),
            _ => SourceTerm::Shared(direct_drift(k)),
            }
        }),
        diffusion: Box::new({
            let mf = mf.clone();
            move |k, j, st| match mf.diffusion(k, j, &st.u, n) {
            SourceTerm::Shared(fb) => SourceTerm::Shared(fb + direct_diff(k, j)),
            _ => SourceTerm::Shared(direct_diff(k, j)),
            }
        }),
        control: Box::new({
            let mf = mf.clone();
            move |k, st| {
            let s = base.grid.time(k);
            let fb = mf.control(k, &st.u, n).expect("control Hessian is invertible");
            let mut out = Vec::with_capacity(nn);
            for i in 0..nn {
                let mut acc = hamiltonian::dy_dnu_vhat(
                    model,
                    s,
                    &base.x[k][i],
                    &ws.views[k],
                    &base.v[k][i],
                    &base.x[k][probe],
                )
                .expect("control Hessian is invertible")
                    * &jac.u[k][probe];
                if let SourceTerm::PerParticle(v) = &fb {
                    acc += &v[i];
                }
                out.push(acc);
            }
            SourceTerm::PerParticle(out)
        }}),
        driver: Box::new({
            let mf = mf.clone();
            move |k, st| {
            let s = base.grid.time(k);
            let fb = mf.driver(k, &st.u, n);
            let mut out = Vec::with_capacity(nn);
            for i in 0..nn {
                let mut acc = model
                    .dy_dnu_dxf(
                        s,
                        &base.x[k][i],
                        &ws.views[k],
                        &base.v[k][i],
                        &base.x[k][probe],
                    )
                    .transpose()
                    * &jac.u[k][probe];
                if let SourceTerm::PerParticle(v) = &fb {
                    acc += &v[i];
                }
                out.push(acc);
            }
            SourceTerm::PerParticle(out)
        }}),
        terminal: Box::new(move |st| {
            let fb = mf.terminal(&st.u, n);
            let mut out = Vec::with_capacity(nn);
            for i in 0..nn {
                let mut acc = model
                    .dy_dnu_dxg(&base.x[kk][i], &ws.views[kk], &base.x[kk][probe])
                    .transpose()
                    * &jac.u[kk][probe];
                if let SourceTerm::PerParticle(v) = &fb {
                    acc += &v[i];
                }
                out.push(acc);
            }
            SourceTerm::PerParticle(out)
        }),
    };
    solve_linear_flow(model, base, ws, &sources, params)
}

/// Measure kernel of an external (control) particle that rides along the
/// population flow without contributing to it: the direct sources read off
/// the probe's Jacobian as in [`solve_lfd_kernel`], while the feedback
/// averages over the population's own kernels, frozen, since the external
/// particle does not feed back into the measure.
#[allow(clippy::too_many_arguments)]
pub fn solve_lfd_kernel_external(
    model: &ModelSpec,
    ctrl_base: &FbsdeSolution,
    ctrl_ws: &FlowWorkspace,
    pop_base: &FbsdeSolution,
    pop_jac: &LinearFlow,
    pop_kernel: &LinearFlow,
    probe: usize,
    params: &SolverParams,
) -> Result<LinearFlow> {
    let n = model.n;
    let nn = ctrl_base.particles();
    if probe >= pop_base.particles() {
        return Err(MfgError::Dimension(format!("probe index {probe} out of range")));
    }
    let mf = MeanFieldTerms::with_eval(model, pop_base, ctrl_base, ctrl_ws, params.copy_cap);
    let kk = ctrl_base.grid.steps;
    let direct_drift = |k: usize| -> DMatrix<f64> {
        let s = ctrl_base.grid.time(k);
        model.d_dnu_b0(s, &ctrl_ws.views[k], &pop_base.x[k][probe]).transpose()
            * &pop_jac.u[k][probe]
    };
    let direct_diff = |k: usize, col: usize| -> DMatrix<f64> {
        let s = ctrl_base.grid.time(k);
        model.d_dnu_sigma0(s, &ctrl_ws.views[k], &pop_base.x[k][probe])[col].transpose()
            * &pop_jac.u[k][probe]
    };
    let sources = FlowSources {
        r: n,
        init: Box::new(move |_| DMatrix::zeros(n, n)),
        drift: Box::new({
            let mf = mf.clone();
            move |k, _| match mf.drift(k, &pop_kernel.u, n) {
                SourceTerm::Shared(fb) => SourceTerm::Shared(fb + direct_drift(k)),
                _ => SourceTerm::Shared(direct_drift(k)),
            }
        }),
        diffusion: Box::new({
            let mf = mf.clone();
            move |k, j, _| match mf.diffusion(k, j, &pop_kernel.u, n) {
                SourceTerm::Shared(fb) => SourceTerm::Shared(fb + direct_diff(k, j)),
                _ => SourceTerm::Shared(direct_diff(k, j)),
            }
        }),
        control: Box::new({
            let mf = mf.clone();
            move |k, _| {
                let s = ctrl_base.grid.time(k);
                let fb = mf.control(k, &pop_kernel.u, n).expect("control Hessian is invertible");
                let mut out = Vec::with_capacity(nn);
                for i in 0..nn {
                    let mut acc = hamiltonian::dy_dnu_vhat(
                        model,
                        s,
                        &ctrl_base.x[k][i],
                        &ctrl_ws.views[k],
                        &ctrl_base.v[k][i],
                        &pop_base.x[k][probe],
                    )
                    .expect("control Hessian is invertible")
                        * &pop_jac.u[k][probe];
                    if let SourceTerm::PerParticle(v) = &fb {
                        acc += &v[i];
                    }
                    out.push(acc);
                }
                SourceTerm::PerParticle(out)
            }
        }),
        driver: Box::new({
            let mf = mf.clone();
            move |k, _| {
                let s = ctrl_base.grid.time(k);
                let fb = mf.driver(k, &pop_kernel.u, n);
                let mut out = Vec::with_capacity(nn);
                for i in 0..nn {
                    let mut acc = model
                        .dy_dnu_dxf(
                            s,
                            &ctrl_base.x[k][i],
                            &ctrl_ws.views[k],
                            &ctrl_base.v[k][i],
                            &pop_base.x[k][probe],
                        )
                        .transpose()
                        * &pop_jac.u[k][probe];
                    if let SourceTerm::PerParticle(v) = &fb {
                        acc += &v[i];
                    }
                    out.push(acc);
                }
                SourceTerm::PerParticle(out)
            }
        }),
        terminal: Box::new(move |_| {
            let fb = mf.terminal(&pop_kernel.u, n);
            let mut out = Vec::with_capacity(nn);
            for i in 0..nn {
                let mut acc = model
                    .dy_dnu_dxg(&ctrl_base.x[kk][i], &ctrl_ws.views[kk], &pop_base.x[kk][probe])
                    .transpose()
                    * &pop_jac.u[kk][probe];
                if let SourceTerm::PerParticle(v) = &fb {
                    acc += &v[i];
                }
                out.push(acc);
            }
            SourceTerm::PerParticle(out)
        }),
    };
    solve_linear_flow(model, ctrl_base, ctrl_ws, &sources, params)
}

/// Second derivatives of the minimizing control map in 1D, from the
/// implicit function theorem applied twice to phi(x, v) = D_v f.
struct VhatSecond {
    xx: f64,
    xp: f64,
    xq: f64,
    pp: f64,
    pq: f64,
    qq: f64,
}

fn vhat_second_1d(
    model: &ModelSpec,
    coefs: &StepCoefs,
    x: &DVector<f64>,
    view: &MeasureView,
    vhat: &DVector<f64>,
) -> Result<VhatSecond> {
    let missing =
        || MfgError::Config("third-order cost derivatives are required for Hessian flows".into());
    let s = coefs.s;
    let (xs, vs) = (x[0], vhat[0]);
    let phi_x = (model.costs.dxdv_f)(s, x, view, vhat)[(0, 0)];
    let phi_v = (model.costs.dvv_f)(s, x, view, vhat)[(0, 0)];
    let phi_xx = model.costs.dx2dv_f_1d.as_ref().ok_or_else(missing)?(s, xs, view, vs);
    let phi_xv = model.costs.dxdv2_f_1d.as_ref().ok_or_else(missing)?(s, xs, view, vs);
    let phi_vv = model.costs.dv3_f_1d.as_ref().ok_or_else(missing)?(s, xs, view, vs);
    let b2 = coefs.b2[(0, 0)];
    let s2 = coefs.s2[0][(0, 0)];
    let vx = -phi_x / phi_v;
    let vp = -b2 / phi_v;
    let vq = -s2 / phi_v;
    Ok(VhatSecond {
        xx: -(phi_xx + 2.0 * phi_xv * vx + phi_vv * vx * vx) / phi_v,
        xp: (-(phi_xv * vp) + phi_x * phi_vv * vp / phi_v) / phi_v,
        xq: (-(phi_xv * vq) + phi_x * phi_vv * vq / phi_v) / phi_v,
        pp: b2 * phi_vv * vp / (phi_v * phi_v),
        pq: b2 * phi_vv * vq / (phi_v * phi_v),
        qq: s2 * phi_vv * vq / (phi_v * phi_v),
    })
}

/// Pathwise second derivative flow in the initial state, scalar problems
/// only: zero initial condition with quadratic sources assembled from the
/// Jacobian flow and third derivatives of the costs.
pub fn solve_hessian_x(
    model: &ModelSpec,
    base: &FbsdeSolution,
    ws: &FlowWorkspace,
    jac: &LinearFlow,
    params: &SolverParams,
) -> Result<LinearFlow> {
    if model.n != 1 || model.d != 1 {
        return Err(MfgError::UnsupportedDimension(model.n, 1));
    }
    let missing =
        || MfgError::Config("third-order cost derivatives are required for Hessian flows".into());
    let nn = base.particles();
    let kk = base.grid.steps;
    // Quadratic control source: the second differential of vhat along the
    // Jacobian flow, beyond the homogeneous first-order terms.
    let quad = move |k: usize| -> Result<Vec<DMatrix<f64>>> {
        let coefs = &ws.coefs[k];
        let mut out = Vec::with_capacity(nn);
        for i in 0..nn {
            let vs = vhat_second_1d(model, coefs, &base.x[k][i], &ws.views[k], &base.v[k][i])?;
            let (ju, jp, jq) = (jac.u[k][i][(0, 0)], jac.p[k][i][(0, 0)], jac.q[k][i][0][(0, 0)]);
            let h = vs.xx * ju * ju
                + 2.0 * (vs.xp * ju * jp + vs.xq * ju * jq + vs.pq * jp * jq)
                + vs.pp * jp * jp
                + vs.qq * jq * jq;
            out.push(DMatrix::from_element(1, 1, h));
        }
        Ok(out)
    };
    let sources = FlowSources {
        r: 1,
        init: Box::new(|_| DMatrix::zeros(1, 1)),
        drift: Box::new(|_, _| SourceTerm::Zero),
        diffusion: Box::new(|_, _, _| SourceTerm::Zero),
        control: Box::new(move |k, _| {
            SourceTerm::PerParticle(quad(k).expect("third derivatives checked at entry"))
        }),
        driver: Box::new(move |k, _| {
            let coefs = &ws.coefs[k];
            let s = coefs.s;
            let mut out = Vec::with_capacity(nn);
            for i in 0..nn {
                let x = &base.x[k][i];
                let v = &base.v[k][i];
                let view = &ws.views[k];
                let f_xxx =
                    model.costs.dx3_f_1d.as_ref().expect("checked at entry")(s, x[0], view, v[0]);
                let f_xxv =
                    model.costs.dx2dv_f_1d.as_ref().expect("checked at entry")(s, x[0], view, v[0]);
                let f_xvv =
                    model.costs.dxdv2_f_1d.as_ref().expect("checked at entry")(s, x[0], view, v[0]);
                let ju = jac.u[k][i][(0, 0)];
                let jv = jac.dv[k][i][(0, 0)];
                let src = f_xxx * ju * ju + 2.0 * f_xxv * ju * jv + f_xvv * jv * jv;
                out.push(DMatrix::from_element(1, 1, src));
            }
            SourceTerm::PerParticle(out)
        }),
        terminal: Box::new(move |_| {
            let mut out = Vec::with_capacity(nn);
            for i in 0..nn {
                let g_xxx = model.costs.dx3_g_1d.as_ref().expect("checked at entry")(
                    base.x[kk][i][0],
                    &ws.views[kk],
                );
                let ju = jac.u[kk][i][(0, 0)];
                out.push(DMatrix::from_element(1, 1, g_xxx * ju * ju));
            }
            SourceTerm::PerParticle(out)
        }),
    };
    // Fail fast on missing third derivatives rather than inside closures.
    if model.costs.dx3_f_1d.is_none()
        || model.costs.dx2dv_f_1d.is_none()
        || model.costs.dxdv2_f_1d.is_none()
        || model.costs.dv3_f_1d.is_none()
        || model.costs.dx3_g_1d.is_none()
    {
        return Err(missing());
    }
    solve_linear_flow(model, base, ws, &sources, params)
}

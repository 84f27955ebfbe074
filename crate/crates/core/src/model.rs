//! Declarative specification of a mean field game problem instance.
//!
//! An instance is the affine-in-(x,v) coefficient family
//!
//! ```text
//! b(s,x,m,v)     = b0(s,m) + b1(s) x + b2(s) v
//! sigma^j(s,x,m,v) = sigma0^j(s,m) + Sigma1^j(s) x + Sigma2^j(s) v,   j = 1..n
//! ```
//!
//! together with running and terminal costs (f, g), every derivative the
//! solver pipeline consumes, and the assumption constants
//! (L, L_x, L_v, L_g, lambda_v, lambda_x, lambda_g).
//!
//! Measure dependence is restricted to the moment family: coefficients and
//! costs may read the measure only through its mean, raw second moment and
//! W2^2(m, delta_0). All measure-derivative evaluators are then exact by
//! construction, and a coupling scale in [0,1] (used by the continuation
//! homotopy) acts by scaling the moments seen by the evaluators.
//!
//! Derivative layout conventions used across the crate:
//! - pointwise derivatives of functions are stored in *gradient layout*:
//!   for phi: R^a -> R^b, `D_x phi` is an a-by-b matrix (row = coordinate of
//!   differentiation, column = component of phi);
//! - derivative *processes* (Jacobian flows etc.) are stored in Jacobian
//!   layout (row = component, column = direction), matching how they enter
//!   the linear flow equations.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MfgError, Result};
use crate::measure::ParticleMeasure;

/// Moment functionals of a measure, the only channel through which
/// coefficients and costs may depend on it.
#[derive(Debug, Clone)]
pub struct MeasureView {
    pub mean: DVector<f64>,
    pub second: DMatrix<f64>,
    pub w2sq_dirac: f64,
}

impl MeasureView {
    pub fn from_measure(m: &ParticleMeasure) -> Self {
        Self { mean: m.mean(), second: m.second_moment(), w2sq_dirac: m.w2sq_to_dirac_zero() }
    }

    pub fn dirac_zero(n: usize) -> Self {
        Self { mean: DVector::zeros(n), second: DMatrix::zeros(n, n), w2sq_dirac: 0.0 }
    }

    fn scaled(&self, lambda: f64) -> Self {
        Self {
            mean: &self.mean * lambda,
            second: &self.second * lambda,
            w2sq_dirac: self.w2sq_dirac * lambda,
        }
    }
}

pub type CoefVec = Arc<dyn Fn(f64, &MeasureView) -> DVector<f64> + Send + Sync>;
pub type CoefMat = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type CoefMatM = Arc<dyn Fn(f64, &MeasureView) -> DMatrix<f64> + Send + Sync>;
pub type CoefMats = Arc<dyn Fn(f64) -> Vec<DMatrix<f64>> + Send + Sync>;
pub type DnuVec = Arc<dyn Fn(f64, &MeasureView, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type DnuMats = Arc<dyn Fn(f64, &MeasureView, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;
pub type RunCost = Arc<dyn Fn(f64, &DVector<f64>, &MeasureView, &DVector<f64>) -> f64 + Send + Sync>;
pub type RunCostVec =
    Arc<dyn Fn(f64, &DVector<f64>, &MeasureView, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type RunCostMat =
    Arc<dyn Fn(f64, &DVector<f64>, &MeasureView, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type RunCostDnu = Arc<
    dyn Fn(f64, &DVector<f64>, &MeasureView, &DVector<f64>, &DVector<f64>) -> DMatrix<f64>
        + Send
        + Sync,
>;
pub type RunCostDnuVec = Arc<
    dyn Fn(f64, &DVector<f64>, &MeasureView, &DVector<f64>, &DVector<f64>) -> DVector<f64>
        + Send
        + Sync,
>;
pub type TermCost = Arc<dyn Fn(&DVector<f64>, &MeasureView) -> f64 + Send + Sync>;
pub type TermCostVec = Arc<dyn Fn(&DVector<f64>, &MeasureView) -> DVector<f64> + Send + Sync>;
pub type TermCostMat = Arc<dyn Fn(&DVector<f64>, &MeasureView) -> DMatrix<f64> + Send + Sync>;
pub type TermCostDnu =
    Arc<dyn Fn(&DVector<f64>, &MeasureView, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type TermCostDnuVec =
    Arc<dyn Fn(&DVector<f64>, &MeasureView, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type Scalar1d = Arc<dyn Fn(f64, f64, &MeasureView, f64) -> f64 + Send + Sync>;
pub type TermScalar1d = Arc<dyn Fn(f64, &MeasureView) -> f64 + Send + Sync>;
pub type DnuScalar1d = Arc<dyn Fn(f64, f64, &MeasureView, f64, f64) -> f64 + Send + Sync>;
pub type TermDnuScalar1d = Arc<dyn Fn(f64, &MeasureView, f64) -> f64 + Send + Sync>;

/// Drift and diffusion coefficient evaluators.
#[derive(Clone)]
pub struct CoefficientSet {
    pub b0: CoefVec,
    pub b1: CoefMat,
    pub b2: CoefMat,
    /// Columns sigma0^j of the constant diffusion part, as an n-by-n matrix.
    pub sigma0: CoefMatM,
    /// State loadings Sigma1^j (n matrices, each n-by-n): column j of sigma
    /// gains Sigma1^j(s) x.
    pub sigma1: CoefMats,
    /// Control loadings Sigma2^j (n matrices, each n-by-d).
    pub sigma2: CoefMats,
    /// D_y (d b0 / d nu)(s,m)(y), gradient layout n-by-n.
    pub d_dnu_b0: DnuVec,
    /// D_y (d sigma0^j / d nu)(s,m)(y) per column, each n-by-n.
    pub d_dnu_sigma0: DnuMats,
    /// Second y-derivatives, 1D only (scalar-valued): D_y^2 (d b0/d nu).
    pub d2_dnu_b0_1d: Option<Arc<dyn Fn(f64, &MeasureView, f64) -> f64 + Send + Sync>>,
    pub d2_dnu_sigma0_1d: Option<Arc<dyn Fn(f64, &MeasureView, f64) -> f64 + Send + Sync>>,
}

/// Running and terminal cost evaluators with all required derivatives.
#[derive(Clone)]
pub struct CostSet {
    pub f: RunCost,
    pub g: TermCost,
    pub dx_f: RunCostVec,
    pub dv_f: RunCostVec,
    pub dx_g: TermCostVec,
    pub dxx_f: RunCostMat,
    /// D_x (D_v f), gradient layout n-by-d.
    pub dxdv_f: RunCostMat,
    pub dvv_f: RunCostMat,
    pub dxx_g: TermCostMat,
    /// D_y d/dnu D_x f (s,x,m,v)(y), gradient layout n-by-n.
    pub dy_dnu_dxf: RunCostDnu,
    /// D_y d/dnu D_v f, gradient layout n-by-d.
    pub dy_dnu_dvf: RunCostDnu,
    /// D_y d/dnu D_x g (x,m)(y), gradient layout n-by-n.
    pub dy_dnu_dxg: TermCostDnu,
    /// D_y (d f / d nu)(s,x,m,v)(y) in R^n.
    pub dy_dnu_f: RunCostDnuVec,
    /// D_y (d g / d nu)(x,m)(y) in R^n.
    pub dy_dnu_g: TermCostDnuVec,
    // Third and mixed derivatives, 1D only (needed for Hessian flows).
    pub dx3_f_1d: Option<Scalar1d>,
    pub dx2dv_f_1d: Option<Scalar1d>,
    pub dxdv2_f_1d: Option<Scalar1d>,
    pub dv3_f_1d: Option<Scalar1d>,
    pub dx3_g_1d: Option<TermScalar1d>,
    // Second y-derivatives of measure derivatives, 1D only.
    pub dyy_dnu_dxf_1d: Option<DnuScalar1d>,
    pub dyy_dnu_dvf_1d: Option<DnuScalar1d>,
    pub dyy_dnu_dxg_1d: Option<TermDnuScalar1d>,
    pub dyy_dnu_f_1d: Option<DnuScalar1d>,
    pub dyy_dnu_g_1d: Option<TermDnuScalar1d>,
}

/// Constants of the growth / convexity assumptions.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AssumptionConstants {
    pub l: f64,
    pub l_x: f64,
    pub l_v: f64,
    pub l_g: f64,
    pub lambda_v: f64,
    pub lambda_x: f64,
    pub lambda_g: f64,
    pub has_a3_prime: bool,
    /// sigma_2 == 0 and time-continuity declared (needed for dt_value).
    pub has_a4: bool,
}

impl AssumptionConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_v > 0.0) {
            return Err(MfgError::Config("lambda_v must be positive".into()));
        }
        if self.l_x > self.l || self.l_v > self.l || self.l_g > self.l {
            return Err(MfgError::Config("L_x, L_v, L_g must not exceed L".into()));
        }
        Ok(())
    }
}

/// A complete problem instance.
#[derive(Clone)]
pub struct ModelSpec {
    pub n: usize,
    pub d: usize,
    pub horizon: f64,
    pub coefficients: CoefficientSet,
    pub costs: CostSet,
    pub constants: AssumptionConstants,
    /// Homotopy parameter in [0,1]: 0 removes all measure coupling,
    /// 1 is the target model.
    pub coupling_scale: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("horizon", &self.horizon)
            .field("constants", &self.constants)
            .field("coupling_scale", &self.coupling_scale)
            .finish()
    }
}

impl ModelSpec {
    /// All-zero instance: zero coefficients and costs, unit convexity
    /// constants. Intended as a base that tests and builders override.
    pub fn zero(n: usize, d: usize, horizon: f64) -> Self {
        let zv = move |k: usize| Arc::new(move |_: f64, _: &MeasureView| DVector::zeros(k));
        let zm = move |r: usize, c: usize| Arc::new(move |_: f64| DMatrix::zeros(r, c));
        let zmm = move |r: usize, c: usize| Arc::new(move |_: f64, _: &MeasureView| DMatrix::zeros(r, c));
        let zms = move |cnt: usize, r: usize, c: usize| {
            Arc::new(move |_: f64| vec![DMatrix::zeros(r, c); cnt])
        };
        ModelSpec {
            n,
            d,
            horizon,
            coefficients: CoefficientSet {
                b0: zv(n),
                b1: zm(n, n),
                b2: zm(n, d),
                sigma0: zmm(n, n),
                sigma1: zms(n, n, n),
                sigma2: zms(n, n, d),
                d_dnu_b0: Arc::new(move |_, _, _| DMatrix::zeros(n, n)),
                d_dnu_sigma0: Arc::new(move |_, _, _| vec![DMatrix::zeros(n, n); n]),
                d2_dnu_b0_1d: Some(Arc::new(|_, _, _| 0.0)),
                d2_dnu_sigma0_1d: Some(Arc::new(|_, _, _| 0.0)),
            },
            costs: CostSet {
                f: Arc::new(|_, _, _, _| 0.0),
                g: Arc::new(|_, _| 0.0),
                dx_f: Arc::new(move |_, _, _, _| DVector::zeros(n)),
                dv_f: Arc::new(move |_, _, _, _| DVector::zeros(d)),
                dx_g: Arc::new(move |_, _| DVector::zeros(n)),
                dxx_f: Arc::new(move |_, _, _, _| DMatrix::zeros(n, n)),
                dxdv_f: Arc::new(move |_, _, _, _| DMatrix::zeros(n, d)),
                dvv_f: Arc::new(move |_, _, _, _| DMatrix::identity(d, d)),
                dxx_g: Arc::new(move |_, _| DMatrix::zeros(n, n)),
                dy_dnu_dxf: Arc::new(move |_, _, _, _, _| DMatrix::zeros(n, n)),
                dy_dnu_dvf: Arc::new(move |_, _, _, _, _| DMatrix::zeros(n, d)),
                dy_dnu_dxg: Arc::new(move |_, _, _| DMatrix::zeros(n, n)),
                dy_dnu_f: Arc::new(move |_, _, _, _, _| DVector::zeros(n)),
                dy_dnu_g: Arc::new(move |_, _, _| DVector::zeros(n)),
                dx3_f_1d: Some(Arc::new(|_, _, _, _| 0.0)),
                dx2dv_f_1d: Some(Arc::new(|_, _, _, _| 0.0)),
                dxdv2_f_1d: Some(Arc::new(|_, _, _, _| 0.0)),
                dv3_f_1d: Some(Arc::new(|_, _, _, _| 0.0)),
                dx3_g_1d: Some(Arc::new(|_, _| 0.0)),
                dyy_dnu_dxf_1d: Some(Arc::new(|_, _, _, _, _| 0.0)),
                dyy_dnu_dvf_1d: Some(Arc::new(|_, _, _, _, _| 0.0)),
                dyy_dnu_dxg_1d: Some(Arc::new(|_, _, _| 0.0)),
                dyy_dnu_f_1d: Some(Arc::new(|_, _, _, _, _| 0.0)),
                dyy_dnu_g_1d: Some(Arc::new(|_, _, _| 0.0)),
            },
            constants: AssumptionConstants {
                l: 1.0,
                l_x: 0.0,
                l_v: 0.0,
                l_g: 0.0,
                lambda_v: 0.5,
                lambda_x: 0.0,
                lambda_g: 0.0,
                has_a3_prime: true,
                has_a4: true,
            },
            coupling_scale: 1.0,
        }
    }

    pub fn with_coupling_scale(&self, lambda: f64) -> ModelSpec {
        let mut m = self.clone();
        m.coupling_scale = lambda;
        m
    }

    /// Moment view of a measure as seen by the evaluators (homotopy-scaled).
    pub fn view(&self, m: &ParticleMeasure) -> MeasureView {
        MeasureView::from_measure(m).scaled(self.coupling_scale)
    }

    pub fn view_raw(&self, raw: &MeasureView) -> MeasureView {
        raw.scaled(self.coupling_scale)
    }

    /// Coefficient matrices frozen at a (time, measure) pair; the hot loops
    /// of the solvers evaluate these once per grid node instead of once per
    /// particle.
    pub fn step_coefs(&self, s: f64, view: &MeasureView) -> StepCoefs {
        let b1 = (self.coefficients.b1)(s);
        let b2 = (self.coefficients.b2)(s);
        let s1 = (self.coefficients.sigma1)(s);
        let s2 = (self.coefficients.sigma2)(s);
        StepCoefs {
            s,
            b0: (self.coefficients.b0)(s, view),
            b1t: b1.transpose(),
            b2t: b2.transpose(),
            b1,
            b2,
            sigma0: (self.coefficients.sigma0)(s, view),
            s1t: s1.iter().map(|m| m.transpose()).collect(),
            s2t: s2.iter().map(|m| m.transpose()).collect(),
            s1,
            s2,
        }
    }

    /// Full drift b(s,x,m,v); the affine structure is assembled here, never
    /// user-supplied.
    pub fn drift(&self, s: f64, x: &DVector<f64>, view: &MeasureView, v: &DVector<f64>) -> DVector<f64> {
        self.step_coefs(s, view).drift(x, v)
    }

    /// Full diffusion matrix sigma(s,x,m,v), columns sigma^j.
    pub fn diffusion(
        &self,
        s: f64,
        x: &DVector<f64>,
        view: &MeasureView,
        v: &DVector<f64>,
    ) -> DMatrix<f64> {
        self.step_coefs(s, view).diffusion(x, v)
    }

    /// D_y (d b0/d nu) with the homotopy scale applied.
    pub fn d_dnu_b0(&self, s: f64, view: &MeasureView, y: &DVector<f64>) -> DMatrix<f64> {
        (self.coefficients.d_dnu_b0)(s, view, y) * self.coupling_scale
    }

    pub fn d_dnu_sigma0(&self, s: f64, view: &MeasureView, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        (self.coefficients.d_dnu_sigma0)(s, view, y)
            .into_iter()
            .map(|m| m * self.coupling_scale)
            .collect()
    }

    pub fn dy_dnu_dxf(
        &self,
        s: f64,
        x: &DVector<f64>,
        view: &MeasureView,
        v: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DMatrix<f64> {
        (self.costs.dy_dnu_dxf)(s, x, view, v, y) * self.coupling_scale
    }

    pub fn dy_dnu_dvf(
        &self,
        s: f64,
        x: &DVector<f64>,
        view: &MeasureView,
        v: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DMatrix<f64> {
        (self.costs.dy_dnu_dvf)(s, x, view, v, y) * self.coupling_scale
    }

    pub fn dy_dnu_dxg(&self, x: &DVector<f64>, view: &MeasureView, y: &DVector<f64>) -> DMatrix<f64> {
        (self.costs.dy_dnu_dxg)(x, view, y) * self.coupling_scale
    }

    pub fn dy_dnu_f(
        &self,
        s: f64,
        x: &DVector<f64>,
        view: &MeasureView,
        v: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DVector<f64> {
        (self.costs.dy_dnu_f)(s, x, view, v, y) * self.coupling_scale
    }

    pub fn dy_dnu_g(&self, x: &DVector<f64>, view: &MeasureView, y: &DVector<f64>) -> DVector<f64> {
        (self.costs.dy_dnu_g)(x, view, y) * self.coupling_scale
    }

    /// True when every measure-derivative evaluator is identically zero on a
    /// probe grid; used to skip kernel solves for decoupled models.
    pub fn is_measure_decoupled(&self) -> bool {
        if self.coupling_scale == 0.0 {
            return true;
        }
        let view = MeasureView::dirac_zero(self.n);
        let mut probe_views = vec![view];
        let mut mv = MeasureView::dirac_zero(self.n);
        mv.mean = DVector::from_element(self.n, 0.7);
        mv.second = DMatrix::identity(self.n, self.n) * 1.3;
        mv.w2sq_dirac = 1.3 * self.n as f64;
        probe_views.push(mv);
        let xs = [0.0f64, 1.1, -0.7];
        for view in &probe_views {
            for &sx in &xs {
                let x = DVector::from_element(self.n, sx);
                let v = DVector::from_element(self.d, sx * 0.5);
                let y = DVector::from_element(self.n, -sx);
                let s = 0.37 * (1.0 + sx.abs());
                if self.d_dnu_b0(s, view, &y).norm() > 0.0
                    || self.d_dnu_sigma0(s, view, &y).iter().any(|m| m.norm() > 0.0)
                    || self.dy_dnu_dxf(s, &x, view, &v, &y).norm() > 0.0
                    || self.dy_dnu_dvf(s, &x, view, &v, &y).norm() > 0.0
                    || self.dy_dnu_dxg(&x, view, &y).norm() > 0.0
                    || self.dy_dnu_f(s, &x, view, &v, &y).norm() > 0.0
                    || self.dy_dnu_g(&x, view, &y).norm() > 0.0
                {
                    return false;
                }
            }
        }
        true
    }
}

/// Coefficient matrices of the affine structure evaluated at one
/// (time, measure) pair, with transposes precomputed for the backward
/// recursions.
#[derive(Debug, Clone)]
pub struct StepCoefs {
    pub s: f64,
    pub b0: DVector<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub b1t: DMatrix<f64>,
    pub b2t: DMatrix<f64>,
    pub sigma0: DMatrix<f64>,
    pub s1: Vec<DMatrix<f64>>,
    pub s2: Vec<DMatrix<f64>>,
    pub s1t: Vec<DMatrix<f64>>,
    pub s2t: Vec<DMatrix<f64>>,
}

impl StepCoefs {
    pub fn drift(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.b0 + &self.b1 * x + &self.b2 * v
    }

    pub fn diffusion(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.b0.len();
        let mut sig = self.sigma0.clone();
        for j in 0..n {
            let col = &self.s1[j] * x + &self.s2[j] * v;
            for i in 0..n {
                sig[(i, j)] += col[i];
            }
        }
        sig
    }
}

/// Witness point of a validator margin.
#[derive(Debug, Clone)]
pub struct Witness {
    pub s: f64,
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub v_prime: DVector<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub passes: bool,
    pub worst_margin: f64,
    pub witness: Option<Witness>,
}

fn sample_vec<R: Rng>(rng: &mut R, k: usize, half_width: f64) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.gen_range(-half_width..half_width))
}

fn sample_view<R: Rng>(rng: &mut R, n: usize, half_width: f64) -> MeasureView {
    let atoms: Vec<DVector<f64>> = (0..16).map(|_| sample_vec(rng, n, half_width)).collect();
    let m = ParticleMeasure::new(atoms).unwrap();
    MeasureView::from_measure(&m)
}

/// Numerical check of the strong convexity inequality in v (and the joint
/// (A3') version plus g-convexity when declared), on random samples from
/// the default [-3,3] box.
pub fn check_convexity(model: &ModelSpec, rng: &mut ChaCha8Rng, sample_count: usize) -> CheckReport {
    let c = &model.constants;
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for _ in 0..sample_count.max(1) {
        let s = rng.gen_range(0.0..model.horizon);
        let x = sample_vec(rng, model.n, 3.0);
        let view = sample_view(rng, model.n, 3.0);
        let v = sample_vec(rng, model.d, 3.0);
        let vp = sample_vec(rng, model.d, 3.0);
        let f = &model.costs.f;
        let dvf = (model.costs.dv_f)(s, &x, &view, &v);
        let margin = f(s, &x, &view, &vp)
            - f(s, &x, &view, &v)
            - dvf.dot(&(&vp - &v))
            - c.lambda_v * (&vp - &v).norm_squared();
        if margin < worst {
            worst = margin;
            witness = Some(Witness { s, x: x.clone(), v: v.clone(), v_prime: vp.clone(), margin });
        }
        if c.has_a3_prime {
            let xp = sample_vec(rng, model.n, 3.0);
            let dxf = (model.costs.dx_f)(s, &x, &view, &v);
            let joint = f(s, &xp, &view, &vp)
                - f(s, &x, &view, &v)
                - dxf.dot(&(&xp - &x))
                - c.lambda_x * (&xp - &x).norm_squared()
                - dvf.dot(&(&vp - &v))
                - c.lambda_v * (&vp - &v).norm_squared();
            let dxg = (model.costs.dx_g)(&x, &view);
            let gm = (model.costs.g)(&xp, &view)
                - (model.costs.g)(&x, &view)
                - dxg.dot(&(&xp - &x))
                - c.lambda_g * (&xp - &x).norm_squared();
            let m = joint.min(gm);
            if m < worst {
                worst = m;
                witness =
                    Some(Witness { s, x: x.clone(), v: v.clone(), v_prime: vp.clone(), margin: m });
            }
        }
    }
    CheckReport { passes: worst >= -1e-12, worst_margin: worst, witness }
}

/// Small mean field effect condition:
/// lambda_x >= L_v^2 / (8 lambda_v) + L_x / 2  and  lambda_g >= L_g / 2.
pub fn check_small_mf_effect(c: &AssumptionConstants) -> bool {
    c.lambda_x >= c.l_v * c.l_v / (8.0 * c.lambda_v) + c.l_x / 2.0 && c.lambda_g >= c.l_g / 2.0
}

#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub passes: bool,
    /// Worst (most positive) violation of the Condition 1(i) inequality.
    pub worst_violation: f64,
    /// Worst violation of the terminal monotonicity Condition 1(iii)
    /// (only checked when (A3') is declared).
    pub terminal_violation: Option<f64>,
    pub alpha: f64,
}

/// Monte Carlo check of the monotonicity condition of the generic FBSDE,
/// with the coefficient functionals (B, A, F, G) built from the model's
/// Hamiltonian derivatives and beta = the minimizing control map.
pub fn check_monotonicity(
    model: &ModelSpec,
    rng: &mut ChaCha8Rng,
    sample_count: usize,
) -> Result<MonotonicityReport> {
    use crate::hamiltonian;

    let c = &model.constants;
    // Under (A3') with measure-independent (b0, sigma0) the inequality holds
    // with alpha = 0; otherwise alpha = L (1 + 1/lambda_v).
    let alpha = if c.has_a3_prime && model.is_measure_decoupled() {
        0.0
    } else {
        c.l * (1.0 + 1.0 / c.lambda_v)
    };
    let lambda = c.lambda_v;
    let cloud = 16usize;
    let mut worst = f64::NEG_INFINITY;
    let mut term_worst: Option<f64> = None;
    for _ in 0..sample_count.max(1) {
        let s = rng.gen_range(0.0..model.horizon);
        let xs: Vec<DVector<f64>> = (0..cloud).map(|_| sample_vec(rng, model.n, 3.0)).collect();
        let xps: Vec<DVector<f64>> = (0..cloud).map(|_| sample_vec(rng, model.n, 3.0)).collect();
        let ps: Vec<DVector<f64>> = (0..cloud).map(|_| sample_vec(rng, model.n, 3.0)).collect();
        let pps: Vec<DVector<f64>> = (0..cloud).map(|_| sample_vec(rng, model.n, 3.0)).collect();
        let qs: Vec<DMatrix<f64>> = (0..cloud)
            .map(|_| DMatrix::from_fn(model.n, model.n, |_, _| rng.gen_range(-3.0..3.0)))
            .collect();
        let qps: Vec<DMatrix<f64>> = (0..cloud)
            .map(|_| DMatrix::from_fn(model.n, model.n, |_, _| rng.gen_range(-3.0..3.0)))
            .collect();
        let mx = ParticleMeasure::new(xs.clone()).unwrap();
        let mxp = ParticleMeasure::new(xps.clone()).unwrap();
        let view = model.view(&mx);
        let viewp = model.view(&mxp);

        let mut lhs = 0.0;
        let mut dbeta2 = 0.0;
        let mut dstate2 = 0.0;
        for i in 0..cloud {
            let vh = hamiltonian::minimize_v(model, s, &xs[i], &view, &ps[i], &qs[i])?;
            let vhp = hamiltonian::minimize_v(model, s, &xps[i], &viewp, &pps[i], &qps[i])?;
            // F = -D_x H, B = D_p H = b(.,vhat), A^j = sigma^j(.,vhat)
            let f_term = |x: &DVector<f64>, view: &MeasureView, v: &DVector<f64>, p: &DVector<f64>, q: &DMatrix<f64>| {
                let mut dxh = (model.coefficients.b1)(s).transpose() * p;
                let s1 = (model.coefficients.sigma1)(s);
                for j in 0..model.n {
                    dxh += s1[j].transpose() * q.column(j);
                }
                dxh += (model.costs.dx_f)(s, x, view, v);
                -dxh
            };
            let df = f_term(&xps[i], &viewp, &vhp, &pps[i], &qps[i])
                - f_term(&xs[i], &view, &vh, &ps[i], &qs[i]);
            lhs += df.dot(&(&xps[i] - &xs[i]));
            let db = model.drift(s, &xps[i], &viewp, &vhp) - model.drift(s, &xs[i], &view, &vh);
            lhs += db.dot(&(&pps[i] - &ps[i]));
            let da = model.diffusion(s, &xps[i], &viewp, &vhp) - model.diffusion(s, &xs[i], &view, &vh);
            for j in 0..model.n {
                lhs += da.column(j).dot(&(qps[i].column(j) - qs[i].column(j)));
            }
            dbeta2 += (&vhp - &vh).norm_squared();
            dstate2 += (&xps[i] - &xs[i]).norm_squared()
                + (&pps[i] - &ps[i]).norm_squared()
                + (&qps[i] - &qs[i]).norm_squared();
        }
        let nf = cloud as f64;
        let violation = lhs / nf - (-lambda * dbeta2 / nf + alpha * dstate2 / nf);
        if violation > worst {
            worst = violation;
        }
        if c.has_a3_prime {
            let mut t = 0.0;
            for i in 0..cloud {
                let dg = (model.costs.dx_g)(&xps[i], &viewp) - (model.costs.dx_g)(&xs[i], &view);
                t += dg.dot(&(&xps[i] - &xs[i]));
            }
            let t = t / cloud as f64;
            let cur = -t; // violation of E[(G'-G)^T (X'-X)] >= 0
            term_worst = Some(term_worst.map_or(cur, |w: f64| w.max(cur)));
        }
    }
    let tol = 1e-9;
    let passes = worst <= tol && term_worst.map_or(true, |t| t <= tol);
    Ok(MonotonicityReport { passes, worst_violation: worst, terminal_violation: term_worst, alpha })
}

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub passes: bool,
    pub max_error: f64,
    pub mismatches: Vec<(String, f64)>,
}

/// Checks every supplied first/second derivative evaluator against central
/// finite differences of its parent on random samples; measure derivatives
/// are checked along single-atom perturbations of a particle cloud.
pub fn check_derivative_consistency(
    model: &ModelSpec,
    rng: &mut ChaCha8Rng,
    sample_count: usize,
    h: f64,
) -> DerivativeReport {
    let tol = 100.0 * h * h;
    let mut errors: Vec<(String, f64)> = Vec::new();
    let record = |name: &str, err: f64, errors: &mut Vec<(String, f64)>| {
        if let Some(e) = errors.iter_mut().find(|(n, _)| n == name) {
            if err > e.1 {
                e.1 = err;
            }
        } else {
            errors.push((name.to_string(), err));
        }
    };
    let n = model.n;
    let d = model.d;
    for _ in 0..sample_count.max(1) {
        let s = rng.gen_range(0.0..model.horizon);
        let x = sample_vec(rng, n, 2.0);
        let v = sample_vec(rng, d, 2.0);
        let atoms: Vec<DVector<f64>> = (0..16).map(|_| sample_vec(rng, n, 2.0)).collect();
        let cloud = ParticleMeasure::new(atoms.clone()).unwrap();
        let view = model.view(&cloud);

        // D_x f, D_v f against FD of f
        let f = &model.costs.f;
        let dxf = (model.costs.dx_f)(s, &x, &view, &v);
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (f(s, &xp, &view, &v) - f(s, &xm, &view, &v)) / (2.0 * h);
            record("dx_f", (fd - dxf[k]).abs(), &mut errors);
        }
        let dvf = (model.costs.dv_f)(s, &x, &view, &v);
        for k in 0..d {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[k] += h;
            vm[k] -= h;
            let fd = (f(s, &x, &view, &vp) - f(s, &x, &view, &vm)) / (2.0 * h);
            record("dv_f", (fd - dvf[k]).abs(), &mut errors);
        }
        // second derivatives against FD of first derivatives
        let dxxf = (model.costs.dxx_f)(s, &x, &view, &v);
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = ((model.costs.dx_f)(s, &xp, &view, &v) - (model.costs.dx_f)(s, &xm, &view, &v))
                / (2.0 * h);
            for i in 0..n {
                record("dxx_f", (fd[i] - dxxf[(k, i)]).abs(), &mut errors);
            }
        }
        let dxdvf = (model.costs.dxdv_f)(s, &x, &view, &v);
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = ((model.costs.dv_f)(s, &xp, &view, &v) - (model.costs.dv_f)(s, &xm, &view, &v))
                / (2.0 * h);
            for i in 0..d {
                record("dxdv_f", (fd[i] - dxdvf[(k, i)]).abs(), &mut errors);
            }
        }
        let dvvf = (model.costs.dvv_f)(s, &x, &view, &v);
        for k in 0..d {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[k] += h;
            vm[k] -= h;
            let fd = ((model.costs.dv_f)(s, &x, &view, &vp) - (model.costs.dv_f)(s, &x, &view, &vm))
                / (2.0 * h);
            for i in 0..d {
                record("dvv_f", (fd[i] - dvvf[(k, i)]).abs(), &mut errors);
            }
        }
        // g derivatives
        let dxg = (model.costs.dx_g)(&x, &view);
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = ((model.costs.g)(&xp, &view) - (model.costs.g)(&xm, &view)) / (2.0 * h);
            record("dx_g", (fd - dxg[k]).abs(), &mut errors);
            let fdv = ((model.costs.dx_g)(&xp, &view) - (model.costs.dx_g)(&xm, &view)) / (2.0 * h);
            let dxxg = (model.costs.dxx_g)(&x, &view);
            for i in 0..n {
                record("dxx_g", (fdv[i] - dxxg[(k, i)]).abs(), &mut errors);
            }
        }
        // Measure derivatives along atom perturbations: perturbing atom a by
        // eps e_k moves any moment functional K(m) by
        // (1/N) [D_y dK/dnu (m)(y_a)]^T (eps e_k) + O(eps^2).
        let nf = atoms.len() as f64;
        let a = rng.gen_range(0..atoms.len());
        for k in 0..n {
            let mut up = atoms.clone();
            let mut dn = atoms.clone();
            up[a][k] += h;
            dn[a][k] -= h;
            let vup = model.view(&ParticleMeasure::new(up).unwrap());
            let vdn = model.view(&ParticleMeasure::new(dn).unwrap());
            let y = &atoms[a];

            let fd_b0 = ((model.coefficients.b0)(s, &vup) - (model.coefficients.b0)(s, &vdn))
                / (2.0 * h)
                * nf;
            let an_b0 = model.d_dnu_b0(s, &view, y);
            for c in 0..n {
                record("d_dnu_b0", (fd_b0[c] - an_b0[(k, c)]).abs(), &mut errors);
            }
            let fd_s0 = ((model.coefficients.sigma0)(s, &vup) - (model.coefficients.sigma0)(s, &vdn))
                / (2.0 * h)
                * nf;
            let an_s0 = model.d_dnu_sigma0(s, &view, y);
            for j in 0..n {
                for c in 0..n {
                    record("d_dnu_sigma0", (fd_s0[(c, j)] - an_s0[j][(k, c)]).abs(), &mut errors);
                }
            }
            let fd_f = (f(s, &x, &vup, &v) - f(s, &x, &vdn, &v)) / (2.0 * h) * nf;
            let an_f = model.dy_dnu_f(s, &x, &view, &v, y);
            record("dy_dnu_f", (fd_f - an_f[k]).abs(), &mut errors);
            let fd_g = ((model.costs.g)(&x, &vup) - (model.costs.g)(&x, &vdn)) / (2.0 * h) * nf;
            let an_g = model.dy_dnu_g(&x, &view, y);
            record("dy_dnu_g", (fd_g - an_g[k]).abs(), &mut errors);
            let fd_dxf =
                ((model.costs.dx_f)(s, &x, &vup, &v) - (model.costs.dx_f)(s, &x, &vdn, &v)) / (2.0 * h) * nf;
            let an_dxf = model.dy_dnu_dxf(s, &x, &view, &v, y);
            for c in 0..n {
                record("dy_dnu_dxf", (fd_dxf[c] - an_dxf[(k, c)]).abs(), &mut errors);
            }
            let fd_dvf =
                ((model.costs.dv_f)(s, &x, &vup, &v) - (model.costs.dv_f)(s, &x, &vdn, &v)) / (2.0 * h) * nf;
            let an_dvf = model.dy_dnu_dvf(s, &x, &view, &v, y);
            for c in 0..d {
                record("dy_dnu_dvf", (fd_dvf[c] - an_dvf[(k, c)]).abs(), &mut errors);
            }
            let fd_dxg = ((model.costs.dx_g)(&x, &vup) - (model.costs.dx_g)(&x, &vdn)) / (2.0 * h) * nf;
            let an_dxg = model.dy_dnu_dxg(&x, &view, y);
            for c in 0..n {
                record("dy_dnu_dxg", (fd_dxg[c] - an_dxg[(k, c)]).abs(), &mut errors);
            }
        }
    }
    let max_error = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let mismatches: Vec<(String, f64)> = errors.into_iter().filter(|(_, e)| *e > tol).collect();
    DerivativeReport { passes: mismatches.is_empty(), max_error, mismatches }
}

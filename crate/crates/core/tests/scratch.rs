use mfg_core::fbsde::SolverParams;
use mfg_core::lq::{self, LqModel};
use mfg_core::measure::ParticleMeasure;
use mfg_core::value::master_residual;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn probe_master_scaling() {
    let model = lq::to_model_spec(&LqModel::scalar_benchmark(0.3, 1.0)).unwrap();
    let mu = ParticleMeasure::from_scalars(&[1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let points: Vec<(f64, f64)> =
        (0..10).map(|_| (rng.gen_range(0.1..0.8), rng.gen_range(-2.0..2.0))).collect();
    for (particles, steps) in [(1000usize, 25usize), (4000, 50), (10_000, 50), (10_000, 100)] {
        let p = SolverParams {
            particles,
            steps,
            seed: 17,
            picard_tol: 1e-8,
            copy_cap: 64,
            flow_tol: 1e-9,
            flow_max: 300,
            ..SolverParams::default()
        };
        let mut resids = Vec::new();
        for &(t, xv) in &points {
            let x = DVector::from_element(1, xv);
            let rep = master_residual(&model, t, &x, &mu, &p).unwrap();
            resids.push((rep.residual, rep.dt_fd, rep.dt_formula));
        }
        let mean: f64 = resids.iter().map(|r| r.0).sum::<f64>() / 10.0;
        println!("N={particles} K={steps}: mean={mean:.5}");
        for ((t, xv), (r, fd, form)) in points.iter().zip(&resids) {
            println!("  t={t:.3} x={xv:+.3}: resid={r:.5} fd={fd:+.5} formula={form:+.5}");
        }
    }
}

//! Particle representation of probability measures in P_2(R^n).
//!
//! A measure is an equal-weight cloud of atoms. The 2-Wasserstein distance
//! is computed exactly: by sorted-quantile coupling in one dimension (any
//! pair of particle counts, via a common refinement) and by linear
//! assignment in higher dimensions (equal particle counts only).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{MfgError, Result};

/// Equal-weight empirical measure on R^n.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleMeasure {
    points: Vec<DVector<f64>>,
    dim: usize,
}

impl ParticleMeasure {
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(MfgError::Dimension("particle measure needs at least one atom".into()));
        }
        let dim = points[0].len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(MfgError::Dimension(format!(
                    "atom {} has dimension {}, expected {}",
                    i,
                    p.len(),
                    dim
                )));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(MfgError::Dimension(format!("atom {} has non-finite entry", i)));
            }
        }
        Ok(Self { points, dim })
    }

    /// 1D measure from scalar atoms.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(xs.iter().map(|&x| DVector::from_element(1, x)).collect())
    }

    /// Dirac mass at the origin of R^n.
    pub fn dirac_zero(n: usize) -> Self {
        Self { points: vec![DVector::zeros(n)], dim: n }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &DVector<f64> {
        &self.points[i]
    }

    /// Mean vector (first raw moment).
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for p in &self.points {
            m += p;
        }
        m / self.points.len() as f64
    }

    /// Raw second-moment matrix sum x_i x_i^T / N.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for p in &self.points {
            m += p * p.transpose();
        }
        m / self.points.len() as f64
    }

    /// W_2^2(m, delta_0) = second raw moment trace.
    pub fn w2sq_to_dirac_zero(&self) -> f64 {
        self.points.iter().map(|p| p.norm_squared()).sum::<f64>() / self.points.len() as f64
    }

    /// Same law, freshly permuted atom indexing. Pairing an original atom
    /// with the copy atom of the same index simulates the pair (xi, xi~)
    /// of independent copies.
    pub fn independent_copy<R: Rng>(&self, rng: &mut R) -> ParticleMeasure {
        let mut pts = self.points.clone();
        pts.shuffle(rng);
        ParticleMeasure { points: pts, dim: self.dim }
    }
}

/// Raw moments of order 1 (mean) or 2 (raw second-moment matrix).
pub fn moment(m: &ParticleMeasure, order: u8) -> DMatrix<f64> {
    match order {
        1 => DMatrix::from_column_slice(m.dim(), 1, m.mean().as_slice()),
        2 => m.second_moment(),
        _ => panic!("moment order must be 1 or 2"),
    }
}

/// Exact 2-Wasserstein distance between two particle measures.
pub fn w2_distance(a: &ParticleMeasure, b: &ParticleMeasure) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MfgError::Dimension(format!(
            "w2_distance: dimensions {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    if a.dim() == 1 {
        Ok(w2_sorted_1d(a, b))
    } else {
        if a.len() != b.len() {
            return Err(MfgError::UnsupportedCoupling(a.len(), b.len()));
        }
        Ok(w2_assignment(a, b))
    }
}

/// Sorted-quantile coupling on the common refinement of the two quantile
/// grids; exact for 1D empirical measures of any atom counts.
fn w2_sorted_1d(a: &ParticleMeasure, b: &ParticleMeasure) -> f64 {
    let mut xs: Vec<f64> = a.points().iter().map(|p| p[0]).collect();
    let mut ys: Vec<f64> = b.points().iter().map(|p| p[0]).collect();
    xs.sort_by(|u, v| u.partial_cmp(v).unwrap());
    ys.sort_by(|u, v| u.partial_cmp(v).unwrap());
    let (na, nb) = (xs.len(), ys.len());
    if na == nb {
        let cost: f64 = xs.iter().zip(&ys).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / na as f64;
        return cost.sqrt();
    }
    // Integrate |F_a^{-1}(u) - F_b^{-1}(u)|^2 du over the merged quantile grid.
    let mut cost = 0.0;
    let mut u = 0.0_f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        cost += (next - u) * (xs[i] - ys[j]).powi(2);
        u = next;
        if ua <= next + 1e-15 {
            i += 1;
        }
        if ub <= next + 1e-15 {
            j += 1;
        }
    }
    cost.sqrt()
}

/// Exact optimal assignment (Hungarian algorithm, O(N^3)) for equal-count
/// clouds in dimension >= 2.
fn w2_assignment(a: &ParticleMeasure, b: &ParticleMeasure) -> f64 {
    let n = a.len();
    let mut cost = vec![vec![0.0_f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            cost[i][j] = (a.point(i) - b.point(j)).norm_squared();
        }
    }
    let total = hungarian_min_cost(&cost);
    (total / n as f64).sqrt()
}

/// Minimal total cost of a perfect matching on a square cost matrix.
fn hungarian_min_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += cost[p[j] - 1][j - 1];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m1(xs: &[f64]) -> ParticleMeasure {
        ParticleMeasure::from_scalars(xs).unwrap()
    }

    #[test]
    fn single_atom_translation() {
        let a = m1(&[0.0]);
        let b = m1(&[1.0]);
        assert_eq!(w2_distance(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn two_atom_sorted_coupling() {
        // sorted coupling cost sqrt((1+1)/2) = 1; crossed coupling sqrt((1+9)/2) ~ 2.236
        let a = m1(&[0.0, 2.0]);
        let b = m1(&[1.0, 3.0]);
        assert!((w2_distance(&a, &b).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identity_of_indiscernibles() {
        let a = m1(&[0.3, -1.2, 4.0]);
        assert_eq!(w2_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn moments_of_symmetric_pair() {
        let m = m1(&[-1.0, 1.0]);
        assert_eq!(moment(&m, 1)[(0, 0)], 0.0);
        assert_eq!(moment(&m, 2)[(0, 0)], 1.0);
        let m = m1(&[0.0, 1.0, 2.0]);
        assert_eq!(moment(&m, 1)[(0, 0)], 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = m1(&[0.0]);
        let b = ParticleMeasure::new(vec![DVector::zeros(2)]).unwrap();
        assert!(matches!(w2_distance(&a, &b), Err(MfgError::Dimension(_))));
    }

    #[test]
    fn unequal_counts_in_2d_rejected() {
        let a = ParticleMeasure::new(vec![DVector::zeros(2)]).unwrap();
        let b = ParticleMeasure::new(vec![DVector::zeros(2), DVector::from_vec(vec![1.0, 0.0])]).unwrap();
        assert!(matches!(w2_distance(&a, &b), Err(MfgError::UnsupportedCoupling(1, 2))));
    }

    #[test]
    fn nan_atoms_rejected() {
        assert!(ParticleMeasure::from_scalars(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn independent_copy_preserves_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = m1(&[0.0, 1.0, 2.5, -3.0]);
        let c = m.independent_copy(&mut rng);
        assert!(w2_distance(&m, &c).unwrap() < 1e-15);
    }

    #[test]
    fn copy_pairing_statistics() {
        // E[xi * xi~] over fresh permutations approaches mean^2.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = m1(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let mean = m.mean()[0];
        let mut acc = 0.0;
        let trials = 10_000;
        for _ in 0..trials {
            let c = m.independent_copy(&mut rng);
            for i in 0..m.len() {
                acc += m.point(i)[0] * c.point(i)[0];
            }
        }
        let est = acc / (trials * m.len()) as f64;
        assert!((est - mean * mean).abs() < 0.05 * (1.0 + mean * mean));
    }

    #[test]
    fn sorted_quantile_unequal_counts() {
        // {0,1} vs {0.5}: W2^2 = 0.5*(0.25)+0.5*(0.25) = 0.25
        let a = m1(&[0.0, 1.0]);
        let b = m1(&[0.5]);
        assert!((w2_distance(&a, &b).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn metric_axioms_random_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.gen_range(1..=32);
            let gen = |rng: &mut ChaCha8Rng, n: usize| {
                m1(&(0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>())
            };
            let a = gen(&mut rng, n);
            let b = gen(&mut rng, n);
            let c = gen(&mut rng, n);
            let dab = w2_distance(&a, &b).unwrap();
            let dba = w2_distance(&b, &a).unwrap();
            let dac = w2_distance(&a, &c).unwrap();
            let dcb = w2_distance(&c, &b).unwrap();
            assert_eq!(dab, dba);
            assert!(dab <= dac + dcb + 1e-12);
            assert!(w2_distance(&a, &a).unwrap() == 0.0);
        }
    }

    #[test]
    fn sorted_matches_permutation_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6usize);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = m1(&xs);
            let b = m1(&ys);
            let fast = w2_distance(&a, &b).unwrap();
            let brute = brute_force_w2(&xs, &ys);
            assert!((fast - brute).abs() < 1e-12, "fast {fast} brute {brute}");
        }
    }

    fn brute_force_w2(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut idx, 0, &mut |perm| {
            let c: f64 = (0..n).map(|i| (xs[i] - ys[perm[i]]).powi(2)).sum::<f64>() / n as f64;
            if c < best {
                best = c;
            }
        });
        best.sqrt()
    }

    fn permute(idx: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == idx.len() {
            f(idx);
            return;
        }
        for i in k..idx.len() {
            idx.swap(k, i);
            permute(idx, k + 1, f);
            idx.swap(k, i);
        }
    }

    #[test]
    fn hungarian_matches_1d_sorted_in_2d_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = rng.gen_range(1..=6usize);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a2 = ParticleMeasure::new(xs.iter().map(|&x| DVector::from_vec(vec![x, 0.0])).collect()).unwrap();
            let b2 = ParticleMeasure::new(ys.iter().map(|&y| DVector::from_vec(vec![y, 0.0])).collect()).unwrap();
            let d2 = w2_distance(&a2, &b2).unwrap();
            let d1 = w2_distance(
                &ParticleMeasure::from_scalars(&xs).unwrap(),
                &ParticleMeasure::from_scalars(&ys).unwrap(),
            )
            .unwrap();
            assert!((d1 - d2).abs() < 1e-12);
        }
    }
}

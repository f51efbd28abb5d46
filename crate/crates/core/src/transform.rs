//! The invertible affine event map `e ↦ M·e + b` and the distribution-level
//! checks that it shifts Gaussian entropy by `ln|det M|` while leaving the
//! mutual information of an event pair unchanged.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Scale of the Gaussian perturbation around the identity at init.
pub const INIT_SCALE: f64 = 0.02;
/// Condition numbers above this count as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Trainable `M` (d×d) and `b` (1×d) living in a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformLayer {
    pub matrix: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

/// `I + INIT_SCALE·G` with standard normal `G`.
pub fn init_matrix<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| {
        let z: f64 = rng.sample(StandardNormal);
        if i == j {
            1.0 + INIT_SCALE * z
        } else {
            INIT_SCALE * z
        }
    })
}

impl TransformLayer {
    pub fn init<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        let m = init_matrix(d, rng);
        let map = AffineMap::new(m.clone(), DVector::zeros(d))?;
        if map.det() == 0.0 {
            return Err(Error::Singular { condition: f64::INFINITY });
        }
        let data = (0..d * d).map(|k| F::of(m[(k / d, k % d)])).collect();
        let matrix = store.add(format!("{prefix}.matrix"), Tensor::matrix(d, d, data)?, true);
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![1, d]), false);
        Ok(Self { matrix, bias, dim: d })
    }

    /// Maps each row `e` of `rows` to `M·e + b`.
    pub fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, rows: Var) -> Result<Var> {
        let (_, w) = g.shape(rows);
        if w != self.dim {
            return Err(Error::shape("transform", format!("rows of width {w} for a {0}x{0} map", self.dim)));
        }
        let m = g.param(self.matrix);
        let b = g.param(self.bias);
        let mapped = g.matmul_t(rows, m)?;
        g.add_row(mapped, b)
    }

    pub fn affine_map<F: Scalar>(&self, store: &ParamStore<F>) -> Result<AffineMap> {
        let d = self.dim;
        let m = store.tensor(self.matrix).data();
        let b = store.tensor(self.bias).data();
        AffineMap::new(
            DMatrix::from_fn(d, d, |i, j| m[i * d + j].f64()),
            DVector::from_iterator(d, b.iter().map(|x| x.f64())),
        )
    }

    pub fn set_trainable<F: Scalar>(&self, store: &mut ParamStore<F>, on: bool) {
        store.set_requires_grad(self.matrix, on);
        store.set_requires_grad(self.bias, on);
    }
}

/// High-precision copy of the event map for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineMap {
    pub fn new(m: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() != b.len() {
            return Err(Error::shape(
                "affine_map",
                format!("{}x{} matrix with bias of {}", m.nrows(), m.ncols(), b.len()),
            ));
        }
        Ok(Self { m, b })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            m: DMatrix::identity(d, d),
            b: DVector::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    /// Ratio of extreme singular values; infinite when `M` is rank deficient.
    pub fn condition(&self) -> f64 {
        let sv = self.m.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Rows `e` (k×d) to `M·e + b`.
    pub fn transform(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rows.ncols() != self.dim() {
            return Err(Error::shape("transform", format!("rows of width {} for dim {}", rows.ncols(), self.dim())));
        }
        let mut out = rows * self.m.transpose();
        for mut r in out.row_iter_mut() {
            r += self.b.transpose();
        }
        Ok(out)
    }

    /// Rows `e'` to `M⁻¹(e' − b)`.
    pub fn invert(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rows.ncols() != self.dim() {
            return Err(Error::shape("invert", format!("rows of width {} for dim {}", rows.ncols(), self.dim())));
        }
        let condition = self.condition();
        if condition.is_nan() || condition > MAX_CONDITION {
            return Err(Error::Singular { condition });
        }
        let lu = self.m.clone().lu();
        let mut shifted = rows.clone();
        for mut r in shifted.row_iter_mut() {
            r -= self.b.transpose();
        }
        // Solve M·xᵀ = shiftedᵀ for all rows at once.
        let sol = lu
            .solve(&shifted.transpose())
            .ok_or(Error::Singular { condition })?;
        Ok(sol.transpose())
    }
}

fn log_det_spd(sigma: &DMatrix<f64>) -> Result<f64> {
    if !sigma.is_square() {
        return Err(Error::shape("covariance", format!("{}x{}", sigma.nrows(), sigma.ncols())));
    }
    let scale = sigma.amax().max(1.0);
    if (sigma - sigma.transpose()).amax() > 1e-10 * scale {
        return Err(Error::NotPositiveDefinite);
    }
    let chol = sigma.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        let v = l[(i, i)];
        if v.is_nan() || v <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        acc += v.ln();
    }
    Ok(2.0 * acc)
}

/// Differential entropy in nats of `N(μ, Σ)`: `½·ln((2πe)^d·det Σ)`.
pub fn gaussian_entropy(sigma: &DMatrix<f64>) -> Result<f64> {
    let d = sigma.nrows() as f64;
    Ok(0.5 * (d * (2.0 * PI * E).ln() + log_det_spd(sigma)?))
}

/// Mutual information between the two `d`-dimensional halves of a jointly
/// Gaussian `2d`-vector with covariance `joint`.
pub fn gaussian_mutual_information(joint: &DMatrix<f64>) -> Result<f64> {
    let n = joint.nrows();
    if !n.is_multiple_of(2) || !joint.is_square() {
        return Err(Error::shape("mutual_information", format!("{}x{} joint covariance", n, joint.ncols())));
    }
    let d = n / 2;
    let s11 = joint.view((0, 0), (d, d)).into_owned();
    let s22 = joint.view((d, d), (d, d)).into_owned();
    Ok(0.5 * (log_det_spd(&s11)? + log_det_spd(&s22)? - log_det_spd(joint)?))
}

/// One structured line of a property report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRecord {
    pub fn new(name: impl Into<String>, expected: f64, observed: f64, tolerance: f64) -> Self {
        let pass = (observed - expected).abs() <= tolerance;
        Self {
            name: name.into(),
            expected,
            observed,
            tolerance,
            pass,
        }
    }
}

pub const PROPERTY_TOL: f64 = 1e-9;

/// Entropy shift under the map: `S(MΣMᵀ) − S(Σ)` against `ln|det M|`.
/// The bias plays no part in a covariance, so it cannot move the shift.
pub fn check_property1(map: &AffineMap, sigma: &DMatrix<f64>) -> Result<CheckRecord> {
    if sigma.nrows() != map.dim() {
        return Err(Error::shape("property1", format!("covariance of dim {} for map of dim {}", sigma.nrows(), map.dim())));
    }
    let det = map.det();
    if det == 0.0 {
        return Err(Error::Singular { condition: f64::INFINITY });
    }
    let mapped = &map.m * sigma * map.m.transpose();
    let observed = gaussian_entropy(&mapped)? - gaussian_entropy(sigma)?;
    Ok(CheckRecord::new("entropy_shift", det.abs().ln(), observed, PROPERTY_TOL))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutualInfoCheck {
    pub before: f64,
    pub after: f64,
    pub record: CheckRecord,
}

/// Mutual information of the pair before and after mapping each half.
pub fn check_property2(map: &AffineMap, joint: &DMatrix<f64>) -> Result<MutualInfoCheck> {
    let d = map.dim();
    if joint.nrows() != 2 * d {
        return Err(Error::shape("property2", format!("joint covariance of dim {} for map of dim {d}", joint.nrows())));
    }
    if map.det() == 0.0 {
        return Err(Error::Singular { condition: f64::INFINITY });
    }
    let mut block = DMatrix::zeros(2 * d, 2 * d);
    block.view_mut((0, 0), (d, d)).copy_from(&map.m);
    block.view_mut((d, d), (d, d)).copy_from(&map.m);
    let mapped = &block * joint * block.transpose();
    let before = gaussian_mutual_information(joint)?;
    let after = gaussian_mutual_information(&mapped)?;
    Ok(MutualInfoCheck {
        before,
        after,
        record: CheckRecord::new("mutual_information_change", 0.0, after - before, PROPERTY_TOL),
    })
}

fn digamma_int(n: usize) -> f64 {
    const EULER: f64 = 0.577_215_664_901_532_9;
    -EULER + (1..n).map(|k| 1.0 / k as f64).sum::<f64>()
}

fn ln_unit_ball_volume(d: usize) -> f64 {
    // V_d = π^{d/2} / Γ(d/2 + 1), via V_d = 2π/d · V_{d−2}
    let mut v: f64 = if d.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = if d.is_multiple_of(2) { 2 } else { 3 };
    while k <= d {
        v *= 2.0 * PI / k as f64;
        k += 2;
    }
    v.ln()
}

/// Nearest-neighbour distance of every point (rows of `pts`), by a sweep
/// over points sorted on the first coordinate.
fn nearest_neighbour_distances(pts: &[Vec<f64>]) -> Vec<f64> {
    let n = pts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]));
    let sorted: Vec<&[f64]> = order.iter().map(|&i| pts[i].as_slice()).collect();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let p = sorted[i];
        let mut best = f64::INFINITY;
        for q in &sorted[i + 1..] {
            let dx = q[0] - p[0];
            if dx * dx >= best {
                break;
            }
            best = best.min(dist2(p, q));
        }
        for q in sorted[..i].iter().rev() {
            let dx = p[0] - q[0];
            if dx * dx >= best {
                break;
            }
            best = best.min(dist2(p, q));
        }
        out[order[i]] = best.sqrt();
    }
    out
}

/// Kozachenko–Leonenko (k = 1) differential entropy estimate in nats.
pub fn knn_entropy(pts: &[Vec<f64>]) -> Result<f64> {
    let n = pts.len();
    if n < 2 {
        return Err(Error::Parameter("entropy estimate needs at least two samples".into()));
    }
    let d = pts[0].len();
    let dists = nearest_neighbour_distances(pts);
    if dists.iter().any(|&r| r <= 0.0) {
        return Err(Error::Parameter("duplicate samples in entropy estimate".into()));
    }
    let mean_log = dists.iter().map(|r| r.ln()).sum::<f64>() / n as f64;
    Ok(digamma_int(n) - digamma_int(1) + ln_unit_ball_volume(d) + d as f64 * mean_log)
}

pub const MC_TOL: f64 = 0.05;

/// Samples `e ~ N(0, Σ)`, maps them (bias included), and compares the
/// nearest-neighbour entropy estimate of `e'` with the closed form `S(MΣMᵀ)`.
pub fn monte_carlo_entropy_check(map: &AffineMap, sigma: &DMatrix<f64>, samples: usize, seed: u64) -> Result<CheckRecord> {
    let d = map.dim();
    let chol = sigma.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = &l * z;
            let mapped = &map.m * e + &map.b;
            mapped.iter().copied().collect()
        })
        .collect();
    let estimate = knn_entropy(&pts)?;
    let exact = gaussian_entropy(&(&map.m * sigma * map.m.transpose()))?;
    Ok(CheckRecord::new("entropy_monte_carlo", exact, estimate, MC_TOL))
}

/// `A·Aᵀ + δ·I` with standard normal `A`: a random well-conditioned SPD matrix.
pub fn random_spd<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

/// Standard normal matrix, resampled until its condition number is modest.
pub fn random_invertible<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    loop {
        let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cond = AffineMap {
            m: m.clone(),
            b: DVector::zeros(d),
        }
        .condition();
        if cond < 1e3 {
            return m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map2() -> AffineMap {
        AffineMap::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]), DVector::from_vec(vec![1.0, 1.0])).unwrap()
    }

    #[test]
    fn identity_map() {
        let rows = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        assert_eq!(AffineMap::identity(3).transform(&rows).unwrap(), rows);
    }

    #[test]
    fn diagonal_example_and_inverse() {
        let m = map2();
        let out = m.transform(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(out, DMatrix::from_row_slice(1, 2, &[3.0, 4.0]));
        let back = m.invert(&out).unwrap();
        assert_abs_diff_eq!(back, DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), epsilon = 1e-12);
    }

    #[test]
    fn zero_matrix_is_singular() {
        let m = AffineMap::new(DMatrix::zeros(3, 3), DVector::zeros(3)).unwrap();
        let rows = DMatrix::from_element(1, 3, 1.0);
        assert!(matches!(m.invert(&rows), Err(Error::Singular { .. })));
    }

    #[test]
    fn width_mismatch() {
        assert!(map2().transform(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn entropy_closed_forms() {
        let s = gaussian_entropy(&DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(s, (2.0 * PI * E).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(s, 2.837_877_066_409_345, epsilon = 1e-12);
        let one = gaussian_entropy(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        let four = gaussian_entropy(&DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_abs_diff_eq!(four - one, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_covariance_is_rejected() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(gaussian_entropy(&s).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(gaussian_entropy(&asym).is_err());
    }

    #[test]
    fn property1_examples() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let id = check_property1(&AffineMap::identity(2), &sigma).unwrap();
        assert!(id.pass);
        assert_abs_diff_eq!(id.observed, 0.0, epsilon = 1e-12);
        let two = AffineMap::new(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2)).unwrap();
        let r = check_property1(&two, &sigma).unwrap();
        assert!(r.pass);
        assert_abs_diff_eq!(r.observed, 4f64.ln(), epsilon = 1e-12);
        let shifted = AffineMap::new(two.m.clone(), DVector::from_vec(vec![5.0, -7.0])).unwrap();
        assert_eq!(check_property1(&shifted, &sigma).unwrap().observed, r.observed);
    }

    #[test]
    fn property2_examples() {
        let indep = DMatrix::identity(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = AffineMap::new(random_invertible(2, &mut rng), DVector::zeros(2)).unwrap();
        let r = check_property2(&map, &indep).unwrap();
        assert_abs_diff_eq!(r.before, 0.0, epsilon = 1e-12);
        assert!(r.record.pass);

        let rho = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let scalar = AffineMap::new(DMatrix::from_element(1, 1, -3.7), DVector::from_element(1, 2.0)).unwrap();
        let r = check_property2(&scalar, &rho).unwrap();
        assert_abs_diff_eq!(r.before, -0.5 * (0.75f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.before, 0.143_841_036_225_890_1, epsilon = 1e-12);
        assert!(r.record.pass);
        assert!(check_property2(&AffineMap::identity(1), &rho).unwrap().record.pass);
    }

    #[test]
    fn unit_ball_volumes() {
        assert_abs_diff_eq!(ln_unit_ball_volume(1), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ln_unit_ball_volume(2), PI.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ln_unit_ball_volume(3), (4.0 * PI / 3.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn nearest_neighbours_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let fast = nearest_neighbour_distances(&pts);
        for (i, p) in pts.iter().enumerate() {
            let brute = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            assert_abs_diff_eq!(fast[i], brute, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_init_is_near_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = TransformLayer::init(&mut store, "t", 8, &mut rng).unwrap();
        let map = layer.affine_map(&store).unwrap();
        assert!((map.det() - 1.0).abs() < 0.5);
        assert!(map.b.iter().all(|&x| x == 0.0));
        assert!(!store.get(layer.bias).decay);
    }
}

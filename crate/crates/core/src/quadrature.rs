//! Deterministic rules for expectations under a Gaussian.
//!
//! Rules are defined for the standard normal `N(0, I)` with weights summing to one, and are
//! mapped onto `N(μ, Σ)` through `x = μ + L z` with `L` the lower Cholesky factor of `Σ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

const MAX_GH_ORDER: usize = 30;
const MAX_TENSOR_NODES: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("gauss-hermite order {0} outside 1..=30")]
    UnsupportedOrder(usize),
    #[error("tensor rule with {q}^{d} nodes exceeds the size guard")]
    RuleTooLarge { q: usize, d: usize },
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("rule dimension {rule} does not match mean dimension {mean}")]
    DimensionMismatch { rule: usize, mean: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureKind {
    GaussHermiteTensor,
    CubatureSphericalRadial,
}

/// Nodes (one column per point) and weights of a rule for `N(0, I_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: DMatrix<f64>,
    weights: Vec<f64>,
    kind: QuadratureKind,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &DMatrix<f64> {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> QuadratureKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Cubature above four dimensions, a 3-point tensor grid otherwise.
    pub fn default_for(d: usize) -> Result<Self, QuadratureError> {
        if d > 4 {
            cubature_rule(d)
        } else {
            tensor_rule(3, d)
        }
    }
}

/// Orthonormal probabilists' Hermite values `p_0..p_{q-1}` at `x`, plus `p_q`.
fn hermite_orthonormal(x: f64, q: usize) -> (Vec<f64>, f64) {
    let mut p = Vec::with_capacity(q + 1);
    p.push(1.0);
    if q >= 1 {
        p.push(x);
    }
    for k in 1..q {
        let next = (x * p[k] - (k as f64).sqrt() * p[k - 1]) / ((k + 1) as f64).sqrt();
        p.push(next);
    }
    let last = p[q];
    p.truncate(q);
    (p, last)
}

/// Probabilists' Gauss–Hermite rule with `q` points (exact to degree `2q − 1`).
///
/// Nodes come from the eigenvalues of the Jacobi matrix and are polished by Newton steps on
/// the orthonormal recurrence; weights are `1 / Σ_k p_k(x)²`.
pub fn gauss_hermite_1d(q: usize) -> Result<QuadratureRule, QuadratureError> {
    if q == 0 || q > MAX_GH_ORDER {
        return Err(QuadratureError::UnsupportedOrder(q));
    }
    let jacobi = DMatrix::from_fn(q, q, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);
    let qf = q as f64;
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, pq) = hermite_orthonormal(*x, q);
            // p_q' = sqrt(q) p_{q-1}
            let dp = qf.sqrt() * p[q - 1];
            if dp != 0.0 {
                *x -= pq / dp;
            }
        }
    }
    // Enforce exact symmetry of the node set.
    for i in 0..q / 2 {
        let m = 0.5 * (nodes[q - 1 - i] - nodes[i]);
        nodes[i] = -m;
        nodes[q - 1 - i] = m;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| 1.0 / hermite_orthonormal(x, q).0.iter().map(|v| v * v).sum::<f64>())
        .collect();
    for i in 0..q / 2 {
        let w = 0.5 * (weights[i] + weights[q - 1 - i]);
        weights[i] = w;
        weights[q - 1 - i] = w;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(QuadratureRule {
        nodes: DMatrix::from_row_slice(1, q, &nodes),
        weights,
        kind: QuadratureKind::GaussHermiteTensor,
    })
}

/// `d`-fold tensor product of the `q`-point Gauss–Hermite rule.
pub fn tensor_rule(q: usize, d: usize) -> Result<QuadratureRule, QuadratureError> {
    if d == 0 {
        return Err(QuadratureError::ZeroDimension);
    }
    let count = (q as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if count > MAX_TENSOR_NODES as u128 {
        return Err(QuadratureError::RuleTooLarge { q, d });
    }
    let base = gauss_hermite_1d(q)?;
    let count = count as usize;
    let mut nodes = DMatrix::zeros(d, count);
    let mut weights = vec![1.0; count];
    for n in 0..count {
        let mut rem = n;
        for k in 0..d {
            let i = rem % q;
            rem /= q;
            nodes[(k, n)] = base.nodes[(0, i)];
            weights[n] *= base.weights[i];
        }
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        kind: QuadratureKind::GaussHermiteTensor,
    })
}

/// Third-degree spherical-radial cubature: `2d` points at `±√d e_k`, weights `1/(2d)`.
pub fn cubature_rule(d: usize) -> Result<QuadratureRule, QuadratureError> {
    if d == 0 {
        return Err(QuadratureError::ZeroDimension);
    }
    let r = (d as f64).sqrt();
    let mut nodes = DMatrix::zeros(d, 2 * d);
    for k in 0..d {
        nodes[(k, k)] = r;
        nodes[(k, d + k)] = -r;
    }
    Ok(QuadratureRule {
        nodes,
        weights: vec![1.0 / (2 * d) as f64; 2 * d],
        kind: QuadratureKind::CubatureSphericalRadial,
    })
}

/// Lower Cholesky factor of a symmetric positive (semi-)definite matrix.
///
/// On failure a diagonal jitter of `1e-12·tr(Σ)/d` is added and grown tenfold per retry up
/// to `1e-6·tr(Σ)/d`.
pub fn cholesky_lower(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, QuadratureError> {
    let d = cov.nrows();
    if d == 0 || cov.ncols() != d || cov.iter().any(|v| !v.is_finite()) {
        return Err(QuadratureError::NotPositiveDefinite);
    }
    let sym = (cov + cov.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c.l());
    }
    let scale = (sym.trace() / d as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12 * scale;
    while jitter <= 1e-6 * scale {
        let mut m = sym.clone();
        for i in 0..d {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok(c.l());
        }
        jitter *= 10.0;
    }
    Err(QuadratureError::NotPositiveDefinite)
}

/// Rule nodes mapped to `N(mean, cov)`, one column per node.
pub fn transformed_nodes(
    rule: &QuadratureRule,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>, QuadratureError> {
    if rule.dim() != mean.len() {
        return Err(QuadratureError::DimensionMismatch {
            rule: rule.dim(),
            mean: mean.len(),
        });
    }
    let l = cholesky_lower(cov)?;
    let mut x = &l * &rule.nodes;
    for mut col in x.column_iter_mut() {
        col += mean;
    }
    Ok(x)
}

/// `E[f(x)]` under `N(mean, cov)` for a vector-valued integrand.
pub fn gaussian_expectation<F>(
    rule: &QuadratureRule,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    integrand: F,
) -> Result<DVector<f64>, QuadratureError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let x = transformed_nodes(rule, mean, cov)?;
    let mut acc: Option<DVector<f64>> = None;
    for (col, &w) in x.column_iter().zip(&rule.weights) {
        let v = integrand(&col.into_owned()) * w;
        acc = Some(match acc {
            Some(a) => a + v,
            None => v,
        });
    }
    Ok(acc.unwrap_or_else(|| DVector::zeros(0)))
}

/// `E[f(x)]` under `N(mean, cov)` for a scalar integrand.
pub fn gaussian_expectation_scalar<F>(
    rule: &QuadratureRule,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    integrand: F,
) -> Result<f64, QuadratureError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let x = transformed_nodes(rule, mean, cov)?;
    Ok(x.column_iter()
        .zip(&rule.weights)
        .map(|(col, &w)| w * integrand(&col.into_owned()))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `E[z^k]` for `z ~ N(0,1)`: `(k−1)!!` for even `k`, zero otherwise.
    fn normal_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(f64::from).product()
        }
    }

    fn moment(rule: &QuadratureRule, powers: &[u32]) -> f64 {
        rule.nodes()
            .column_iter()
            .zip(rule.weights())
            .map(|(c, w)| {
                w * powers
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| c[k].powi(p as i32))
                    .product::<f64>()
            })
            .sum()
    }

    #[test]
    fn small_orders() {
        let r = gauss_hermite_1d(1).unwrap();
        assert_eq!(r.nodes()[(0, 0)], 0.0);
        assert_eq!(r.weights(), &[1.0]);
        let r = gauss_hermite_1d(2).unwrap();
        assert!((r.nodes()[(0, 0)] + 1.0).abs() < 1e-15);
        assert!((r.nodes()[(0, 1)] - 1.0).abs() < 1e-15);
        assert!(r.weights().iter().all(|w| (w - 0.5).abs() < 1e-15));
        let r = gauss_hermite_1d(3).unwrap();
        assert!((moment(&r, &[4]) - 3.0).abs() < 1e-14);
        assert!(matches!(gauss_hermite_1d(0), Err(QuadratureError::UnsupportedOrder(0))));
        assert!(matches!(
            gauss_hermite_1d(31),
            Err(QuadratureError::UnsupportedOrder(31))
        ));
    }

    #[test]
    fn gh_exact_up_to_degree_2q_minus_1() {
        for q in 1..=10 {
            let r = gauss_hermite_1d(q).unwrap();
            assert!(r.weights().iter().all(|&w| w > 0.0));
            for k in 0..(2 * q as u32) {
                let got = moment(&r, &[k]);
                let want = normal_moment(k);
                // Odd moments vanish; measure them against the size of the summed terms.
                let scale: f64 = r
                    .nodes()
                    .iter()
                    .zip(r.weights())
                    .map(|(x, w)| w * x.abs().powi(k as i32))
                    .sum();
                let err = (got - want).abs() / want.abs().max(scale).max(1.0);
                assert!(err < 1e-12, "q={q} k={k}: {got} vs {want}");
            }
        }
        let r = gauss_hermite_1d(30).unwrap();
        assert!((r.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn tensor_examples() {
        let r = tensor_rule(1, 5).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r.nodes().iter().all(|&v| v == 0.0));
        let r = tensor_rule(3, 2).unwrap();
        assert_eq!(r.len(), 9);
        assert!((r.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((moment(&r, &[2, 2]) - 1.0).abs() < 1e-14);
        assert!(matches!(tensor_rule(3, 26), Err(QuadratureError::RuleTooLarge { .. })));
    }

    #[test]
    fn cubature_examples() {
        let r = cubature_rule(1).unwrap();
        let gh = gauss_hermite_1d(2).unwrap();
        assert!((r.nodes()[(0, 0)] - 1.0).abs() < 1e-15 && (r.nodes()[(0, 1)] + 1.0).abs() < 1e-15);
        assert_eq!(r.weights(), gh.weights());
        let r = cubature_rule(26).unwrap();
        for k in 0..26 {
            let mut p = vec![0; 26];
            p[k] = 1;
            assert!(moment(&r, &p).abs() < 1e-15);
            p[k] = 2;
            assert!((moment(&r, &p) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn cubature_exact_to_degree_three() {
        for d in [1usize, 2, 26] {
            let r = cubature_rule(d).unwrap();
            let dims: Vec<usize> = (0..d).collect();
            for &a in &dims {
                for &b in &dims {
                    for &c in &dims {
                        let mut p = vec![0u32; d];
                        p[a] += 1;
                        let m1 = moment(&r, &p);
                        assert!(m1.abs() < 1e-14);
                        p[b] += 1;
                        let m2 = moment(&r, &p);
                        let want2 = if a == b { 1.0 } else { 0.0 };
                        assert!((m2 - want2).abs() < 1e-14);
                        p[c] += 1;
                        assert!(moment(&r, &p).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn expectation_examples() {
        let mean = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.3, 1.5, 0.1, -0.2, 0.0, 0.7]);
        let cov = &a * a.transpose();
        let r = cubature_rule(3).unwrap();
        let one = gaussian_expectation_scalar(&r, &mean, &cov, |_| 1.0).unwrap();
        assert!((one - 1.0).abs() < 1e-15);
        let m = gaussian_expectation(&r, &mean, &cov, |x| x.clone()).unwrap();
        assert!((m - &mean).amax() < 1e-14);
        let zero = DVector::zeros(3);
        let second = gaussian_expectation(&r, &zero, &cov, |x| {
            let o = x * x.transpose();
            DVector::from_column_slice(o.as_slice())
        })
        .unwrap();
        let second = DMatrix::from_column_slice(3, 3, second.as_slice());
        assert!((second - &cov).amax() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            gaussian_expectation_scalar(&cubature_rule(2).unwrap(), &DVector::zeros(2), &bad, |_| 1.0),
            Err(QuadratureError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn cholesky_jitter_rescues_semidefinite() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let rank_one = &v * v.transpose();
        let l = cholesky_lower(&rank_one).unwrap();
        assert!((&l * l.transpose() - rank_one).amax() < 1e-5);
    }

    proptest! {
        #[test]
        fn affine_invariance(mu in prop::collection::vec(-2.0f64..2.0, 2), s in prop::collection::vec(0.1f64..2.0, 2), rho in -0.8f64..0.8) {
            let mean = DVector::from_vec(mu);
            let cov = DMatrix::from_row_slice(2, 2, &[s[0]*s[0], rho*s[0]*s[1], rho*s[0]*s[1], s[1]*s[1]]);
            let rule = tensor_rule(5, 2).unwrap();
            let f = |x: &DVector<f64>| (x[0] * x[1]).sin() + x[0].powi(3);
            let direct = gaussian_expectation_scalar(&rule, &mean, &cov, f).unwrap();
            let l = cholesky_lower(&cov).unwrap();
            let standard = gaussian_expectation_scalar(&rule, &DVector::zeros(2), &DMatrix::identity(2, 2), |z| f(&(&mean + &l * z))).unwrap();
            prop_assert!((direct - standard).abs() < 1e-12);
        }

        #[test]
        fn weights_positive_and_normalised(q in 1usize..=30) {
            let r = gauss_hermite_1d(q).unwrap();
            prop_assert!(r.weights().iter().all(|&w| w > 0.0));
            prop_assert!((r.weights().iter().sum::<f64>() - 1.0).abs() < 1e-13);
        }
    }
}

//! Bootstrap particle filter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{log_likelihood, FilterError, LikelihoodContext, PredictedBelief};
use crate::dynamics::HoltPrediction;
use crate::quadrature::cholesky_lower;

/// Weighted samples; weights are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    particles: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl ParticleEnsemble {
    /// Weights are normalised; they must be non-negative with a positive sum.
    pub fn new(particles: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self, FilterError> {
        if particles.is_empty() || particles.len() != weights.len() {
            return Err(FilterError::InvalidArgument(
                "ensemble needs one weight per particle".into(),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(FilterError::InvalidArgument(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(FilterError::AllWeightsZero);
        }
        Ok(Self {
            particles,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(particles: Vec<DVector<f64>>) -> Result<Self, FilterError> {
        let n = particles.len();
        Self::new(particles, vec![1.0; n])
    }

    /// `n` equally weighted draws from the belief.
    pub fn sample<R: Rng + ?Sized>(belief: &PredictedBelief, n: usize, rng: &mut R) -> Result<Self, FilterError> {
        let l = cholesky_lower(&belief.cov).map_err(|_| FilterError::NotPositiveDefinite)?;
        let d = belief.dim();
        let particles = (0..n)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
                &belief.mean + &l * z
            })
            .collect();
        Self::uniform(particles)
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// `1 / Σ w_i²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = pf_mmse(self);
        let d = mu.len();
        self.particles
            .iter()
            .zip(&self.weights)
            .fold(DMatrix::zeros(d, d), |acc, (p, w)| {
                let dx = p - &mu;
                acc + &dx * dx.transpose() * *w
            })
    }
}

/// Multiplies each weight by the likelihood of its particle (in log space).
pub fn pf_update(ens: &ParticleEnsemble, ctx: &LikelihoodContext<'_>) -> Result<ParticleEnsemble, FilterError> {
    let log_w: Vec<f64> = ens
        .particles
        .par_iter()
        .zip(ens.weights.par_iter())
        .map(|(p, &w)| {
            if w > 0.0 {
                w.ln() + log_likelihood(ctx, p)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(FilterError::AllWeightsZero);
    }
    let weights = log_w.iter().map(|lw| (lw - max).exp()).collect();
    ParticleEnsemble::new(ens.particles.clone(), weights)
}

/// Moves every particle through the smoother's affine map and adds `N(0, diag(q))` noise.
pub fn pf_propagate<R: Rng + ?Sized>(
    ens: &ParticleEnsemble,
    prediction: &HoltPrediction,
    process_noise_diag: &DVector<f64>,
    rng: &mut R,
) -> ParticleEnsemble {
    let sd = process_noise_diag.map(f64::sqrt);
    let particles = ens
        .particles
        .iter()
        .map(|p| {
            let noise = DVector::from_fn(sd.len(), |k, _| {
                if sd[k] > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    sd[k] * z
                } else {
                    0.0
                }
            });
            prediction.apply(p) + noise
        })
        .collect();
    ParticleEnsemble {
        particles,
        weights: ens.weights.clone(),
    }
}

/// Systematic resampling when `ESS < threshold_fraction · n`; otherwise a copy.
pub fn pf_resample<R: Rng + ?Sized>(
    ens: &ParticleEnsemble,
    threshold_fraction: f64,
    rng: &mut R,
) -> Result<ParticleEnsemble, FilterError> {
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(FilterError::InvalidArgument("threshold must lie in (0, 1]".into()));
    }
    let n = ens.len();
    if ens.effective_sample_size() >= threshold_fraction * n as f64 {
        return Ok(ens.clone());
    }
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut particles = Vec::with_capacity(n);
    let mut cumulative = ens.weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = u0 + i as f64 / n as f64;
        while u > cumulative && j + 1 < n {
            j += 1;
            cumulative += ens.weights[j];
        }
        particles.push(ens.particles[j].clone());
    }
    ParticleEnsemble::uniform(particles)
}

/// Posterior mean `Σ w_i x_i`.
pub fn pf_mmse(ens: &ParticleEnsemble) -> DVector<f64> {
    let d = ens.particles[0].len();
    ens.particles
        .iter()
        .zip(&ens.weights)
        .fold(DVector::zeros(d), |acc, (p, w)| acc + p * *w)
}

/// Highest-weight particle; ties go to the lowest index.
pub fn pf_map(ens: &ParticleEnsemble) -> DVector<f64> {
    let mut best = 0;
    for (i, &w) in ens.weights.iter().enumerate() {
        if w > ens.weights[best] {
            best = i;
        }
    }
    ens.particles[best].clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{LinearModel, MeasurementModel};
    use crate::noise::{ChannelNoiseSpec, NoiseModel};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalars(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|&x| DVector::from_vec(vec![x])).collect()
    }

    /// Scalar model whose log-likelihood at particle `x` equals `x`.
    struct Exponential;

    impl MeasurementModel for Exponential {
        fn state_dim(&self) -> usize {
            1
        }
        fn measurement_dim(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &DVector<f64>) -> DVector<f64> {
            // With unit Gaussian noise and y = 0, log f = −h²/2 − ln√(2π); choose h = √(−2x).
            DVector::from_vec(vec![(-2.0 * x[0]).sqrt()])
        }
    }

    #[test]
    fn update_examples() {
        let model = LinearModel {
            matrix: DMatrix::zeros(1, 1),
        };
        let y = DVector::from_vec(vec![0.3]);
        let nm = NoiseModel::iid(1, ChannelNoiseSpec::gaussian(1.0).unwrap(), 0);
        let ctx = LikelihoodContext::new(&model, &y, &nm).unwrap();
        let ens = ParticleEnsemble::new(scalars(&[0.0, 1.0, 2.0]), vec![0.2, 0.3, 0.5]).unwrap();
        let out = pf_update(&ens, &ctx).unwrap();
        for (a, b) in out.weights().iter().zip(ens.weights()) {
            assert!((a - b).abs() < 1e-15);
        }

        let y = DVector::zeros(1);
        let ctx = LikelihoodContext::new(&Exponential, &y, &nm).unwrap();
        let ens = ParticleEnsemble::uniform(scalars(&[-1.0, -1.0 - 3f64.ln()])).unwrap();
        let out = pf_update(&ens, &ctx).unwrap();
        assert!((out.weights()[0] - 0.75).abs() < 1e-12);
        assert!((out.weights()[1] - 0.25).abs() < 1e-12);
        assert!((out.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_likelihood_is_an_error() {
        let model = LinearModel {
            matrix: DMatrix::identity(1, 1),
        };
        let y = DVector::zeros(1);
        let nm = NoiseModel::iid(1, ChannelNoiseSpec::new(0.1, 0.1, 0.0).unwrap(), 0);
        let ctx = LikelihoodContext::new(&model, &y, &nm).unwrap();
        let ens = ParticleEnsemble::uniform(scalars(&[5.0, 6.0])).unwrap();
        assert_eq!(pf_update(&ens, &ctx), Err(FilterError::AllWeightsZero));
    }

    fn identity_prediction(d: usize) -> HoltPrediction {
        HoltPrediction {
            state: DVector::zeros(d),
            gain: 1.0,
            offset: DVector::zeros(d),
        }
    }

    #[test]
    fn propagate_examples() {
        let ens = ParticleEnsemble::uniform(scalars(&[0.5, -1.0, 2.0])).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let same = pf_propagate(&ens, &identity_prediction(1), &DVector::zeros(1), &mut r);
        assert_eq!(same, ens);

        let many = ParticleEnsemble::uniform(vec![DVector::from_vec(vec![1.0, -2.0]); 20_000]).unwrap();
        let pred = HoltPrediction {
            state: DVector::zeros(2),
            gain: 1.2,
            offset: DVector::from_vec(vec![0.1, 0.0]),
        };
        let q = DVector::from_vec(vec![0.04, 0.01]);
        let out = pf_propagate(&many, &pred, &q, &mut ChaCha8Rng::seed_from_u64(2));
        let mean = pf_mmse(&out);
        let expect = pred.apply(&DVector::from_vec(vec![1.0, -2.0]));
        assert!((mean[0] - expect[0]).abs() < 4.0 * 0.2 / (20_000f64).sqrt());
        assert!((mean[1] - expect[1]).abs() < 4.0 * 0.1 / (20_000f64).sqrt());

        let a = pf_propagate(&many, &pred, &q, &mut ChaCha8Rng::seed_from_u64(3));
        let b = pf_propagate(&many, &pred, &q, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn resample_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let ens = ParticleEnsemble::uniform(scalars(&[0.0, 1.0, 2.0, 3.0])).unwrap();
        assert_eq!(pf_resample(&ens, 0.5, &mut r).unwrap(), ens);
        let one = ParticleEnsemble::new(scalars(&[0.0, 7.0, 2.0]), vec![0.0, 1.0, 0.0]).unwrap();
        let out = pf_resample(&one, 0.5, &mut r).unwrap();
        assert!(out.particles().iter().all(|p| p[0] == 7.0));
        assert!(out.weights().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        assert!(pf_resample(&ens, 0.0, &mut r).is_err());
    }

    #[test]
    fn resampling_preserves_the_mean() {
        let n = 5000;
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) * 4.0 - 2.0).collect();
        let ws: Vec<f64> = xs.iter().map(|x| (-(x - 0.5f64).powi(2)).exp()).collect();
        let ens = ParticleEnsemble::new(scalars(&xs), ws).unwrap();
        let before = pf_mmse(&ens)[0];
        let sd = ens.covariance()[(0, 0)].sqrt();
        let out = pf_resample(&ens, 1.0, &mut r).unwrap();
        assert!((pf_mmse(&out)[0] - before).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn point_estimates() {
        let same = ParticleEnsemble::uniform(vec![DVector::from_vec(vec![1.5, 2.0]); 4]).unwrap();
        assert_eq!(pf_mmse(&same), DVector::from_vec(vec![1.5, 2.0]));
        let two = ParticleEnsemble::uniform(scalars(&[0.0, 2.0])).unwrap();
        assert_eq!(pf_mmse(&two)[0], 1.0);
        let ens = ParticleEnsemble::new(scalars(&[3.0, 4.0, 5.0]), vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(pf_map(&ens)[0], 4.0);
        let tie = ParticleEnsemble::uniform(scalars(&[3.0, 4.0, 5.0])).unwrap();
        assert_eq!(pf_map(&tie)[0], 3.0);
    }

    proptest! {
        #[test]
        fn mmse_in_convex_hull(xs in prop::collection::vec(-10.0f64..10.0, 1..30), seed in 0u64..100) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let ws: Vec<f64> = xs.iter().map(|_| r.random::<f64>() + 1e-3).collect();
            let ens = ParticleEnsemble::new(scalars(&xs), ws).unwrap();
            let m = pf_mmse(&ens)[0];
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            prop_assert!((ens.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn map_invariant_to_rescaling(ws in prop::collection::vec(0.01f64..1.0, 2..20), scale in 0.1f64..100.0) {
            let xs: Vec<f64> = (0..ws.len()).map(|i| i as f64).collect();
            let a = ParticleEnsemble::new(scalars(&xs), ws.clone()).unwrap();
            let b = ParticleEnsemble::new(scalars(&xs), ws.iter().map(|w| w * scale).collect()).unwrap();
            prop_assert_eq!(pf_map(&a), pf_map(&b));
        }
    }
}

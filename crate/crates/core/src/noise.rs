//! Measurement noise: each channel carries `n = p·G + (1−p)·U` with `G ~ N(0, σ²)` and
//! `U ~ Uniform(−w, w)` drawn independently.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::powerflow::{MeasurementKind, MeasurementPlan};
use crate::rng;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("gaussian std must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("uniform halfwidth must be positive, got {0}")]
    NonPositiveHalfwidth(f64),
    #[error("mixing coefficient must lie in [0, 1], got {0}")]
    MixOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelNoiseSpec {
    gaussian_std: f64,
    uniform_halfwidth: f64,
    mix_p: f64,
}

impl ChannelNoiseSpec {
    pub fn new(gaussian_std: f64, uniform_halfwidth: f64, mix_p: f64) -> Result<Self, NoiseError> {
        if !(gaussian_std > 0.0) {
            return Err(NoiseError::NonPositiveStd(gaussian_std));
        }
        if !(uniform_halfwidth > 0.0) {
            return Err(NoiseError::NonPositiveHalfwidth(uniform_halfwidth));
        }
        if !(0.0..=1.0).contains(&mix_p) {
            return Err(NoiseError::MixOutOfRange(mix_p));
        }
        Ok(Self {
            gaussian_std,
            uniform_halfwidth,
            mix_p,
        })
    }

    /// Pure Gaussian channel; the (unused) uniform halfwidth defaults to 5σ.
    pub fn gaussian(std: f64) -> Result<Self, NoiseError> {
        Self::new(std, 5.0 * std, 1.0)
    }

    pub fn gaussian_std(&self) -> f64 {
        self.gaussian_std
    }

    pub fn uniform_halfwidth(&self) -> f64 {
        self.uniform_halfwidth
    }

    pub fn mix_p(&self) -> f64 {
        self.mix_p
    }

    /// Variance of the combined variable: `p²σ² + (1−p)²w²/3`.
    pub fn variance(&self) -> f64 {
        let p = self.mix_p;
        let w = self.uniform_halfwidth;
        p * p * self.gaussian_std.powi(2) + (1.0 - p).powi(2) * w * w / 3.0
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g: f64 = StandardNormal.sample(rng);
        let u: f64 = rng.random_range(-1.0..=1.0);
        self.mix_p * self.gaussian_std * g + (1.0 - self.mix_p) * self.uniform_halfwidth * u
    }

    /// Exact log-density: the convolution of `N(0, (pσ)²)` with `U(−(1−p)w, (1−p)w)`.
    pub fn log_density(&self, v: f64) -> f64 {
        let s = self.mix_p * self.gaussian_std;
        let c = (1.0 - self.mix_p) * self.uniform_halfwidth;
        if c == 0.0 || c < 1e-7 * s {
            // The uniform part is negligible against the Gaussian width.
            let z = v / s;
            return -0.5 * z * z - s.ln() - LN_SQRT_2PI;
        }
        if s == 0.0 {
            return if v.abs() <= c {
                -(2.0 * c).ln()
            } else {
                f64::NEG_INFINITY
            };
        }
        let (hi, lo) = if v > 0.0 {
            ((c - v) / s, (-c - v) / s)
        } else {
            ((v + c) / s, (v - c) / s)
        };
        log_diff_phi(hi, lo) - (2.0 * c).ln()
    }
}

/// `log Φ(z)` without underflow for very negative `z`.
pub fn log_std_normal_cdf(z: f64) -> f64 {
    if z > -20.0 {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        -0.5 * z2 - (-z).ln() - LN_SQRT_2PI + series.ln()
    }
}

/// `log(Φ(hi) − Φ(lo))` for `hi > lo`, with `hi` on the lower tail side where possible.
fn log_diff_phi(hi: f64, lo: f64) -> f64 {
    let a = log_std_normal_cdf(hi);
    let b = log_std_normal_cdf(lo);
    if b == f64::NEG_INFINITY {
        return a;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// Per-channel noise specification aligned with a measurement plan, plus the seed that
/// drives [`sample_noise`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    channels: Vec<ChannelNoiseSpec>,
    seed: u64,
}

impl NoiseModel {
    pub fn new(channels: Vec<ChannelNoiseSpec>, seed: u64) -> Self {
        Self { channels, seed }
    }

    /// Every channel identical.
    pub fn iid(count: usize, spec: ChannelNoiseSpec, seed: u64) -> Self {
        Self::new(vec![spec; count], seed)
    }

    /// Voltage channels use `voltage_std`, every other channel `power_std`; the uniform
    /// halfwidth is `halfwidth_factor` times the channel's Gaussian std.
    pub fn for_plan(
        plan: &MeasurementPlan,
        power_std: f64,
        voltage_std: f64,
        mix_p: f64,
        halfwidth_factor: f64,
        seed: u64,
    ) -> Result<Self, NoiseError> {
        let channels = plan
            .entries()
            .iter()
            .map(|e| {
                let std = if e.kind == MeasurementKind::VoltageMagnitude {
                    voltage_std
                } else {
                    power_std
                };
                ChannelNoiseSpec::new(std, halfwidth_factor * std, mix_p)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::new(channels, seed))
    }

    pub fn channels(&self) -> &[ChannelNoiseSpec] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            channels: self.channels.clone(),
            seed,
        }
    }

    /// Gaussian-equivalent variances of all channels.
    pub fn variances(&self) -> DVector<f64> {
        DVector::from_iterator(self.channels.len(), self.channels.iter().map(|c| c.variance()))
    }

    pub fn sample_with<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(self.channels.len(), self.channels.iter().map(|c| c.sample(rng)))
    }
}

/// Noise vector for step `t`, reproducible from the model's seed.
pub fn sample_noise(nm: &NoiseModel, t: u64) -> DVector<f64> {
    let mut r = rng::stream(nm.seed, &[rng::tag("noise"), t]);
    nm.sample_with(&mut r)
}

/// Log-density of channel `k` at residual `v` (`-inf` outside a bounded support).
pub fn noise_log_density(nm: &NoiseModel, k: usize, v: f64) -> f64 {
    nm.channels[k].log_density(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    fn draws(spec: ChannelNoiseSpec, n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| spec.sample(&mut r)).collect()
    }

    #[test]
    fn pure_gaussian_variance() {
        let spec = ChannelNoiseSpec::gaussian(0.02).unwrap();
        let (_, var) = mean_var(&draws(spec, 100_000, 1));
        let se = 0.02f64.powi(2) * (2.0f64 / 100_000.0).sqrt();
        assert!((var - 4e-4).abs() < 3.0 * se);
    }

    #[test]
    fn pure_uniform_is_bounded() {
        let spec = ChannelNoiseSpec::new(0.02, 0.1, 0.0).unwrap();
        assert!(draws(spec, 100_000, 2).iter().all(|x| x.abs() <= 0.1));
    }

    #[test]
    fn half_mix_variance() {
        let (sigma, w) = (0.02, 0.1);
        let spec = ChannelNoiseSpec::new(sigma, w, 0.5).unwrap();
        let expect = 0.25 * sigma * sigma + 0.25 * w * w / 3.0;
        assert!((spec.variance() - expect).abs() < 1e-18);
        let (_, var) = mean_var(&draws(spec, 100_000, 3));
        assert!((var - expect).abs() / expect < 0.02);
    }

    #[test]
    fn density_examples() {
        let spec = ChannelNoiseSpec::gaussian(0.02).unwrap();
        let expect = -(0.02 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((spec.log_density(0.0) - expect).abs() < 1e-14);
        let uni = ChannelNoiseSpec::new(0.02, 0.1, 0.0).unwrap();
        assert_eq!(uni.log_density(0.11), f64::NEG_INFINITY);
        assert!((uni.log_density(0.1) + 0.2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn half_mix_density_matches_convolution_integral() {
        let (sigma, w) = (0.02, 0.1);
        let spec = ChannelNoiseSpec::new(sigma, w, 0.5).unwrap();
        // Direct Simpson integration of φ_s(v − u)/(2c) over u ∈ [−c, c].
        let (s, c) = (0.5 * sigma, 0.5 * w);
        let n = 20_000;
        let h = 2.0 * c / n as f64;
        let phi = |x: f64| (-(x / s).powi(2) / 2.0).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        for v in [0.0, 0.03, -0.06] {
            let mut acc = 0.0;
            for i in 0..=n {
                let u = -c + i as f64 * h;
                let wgt = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += wgt * phi(v - u);
            }
            let oracle = acc * h / 3.0 / (2.0 * c);
            assert!((spec.log_density(v).exp() - oracle).abs() < 1e-8, "v={v}");
        }
    }

    #[test]
    fn log_cdf_is_continuous_at_the_switch() {
        let a = log_std_normal_cdf(-20.0 + 1e-9);
        let b = log_std_normal_cdf(-20.0 - 1e-9);
        assert!((a - b).abs() < 1e-6);
        assert!(log_std_normal_cdf(-60.0).is_finite());
        assert!(log_std_normal_cdf(8.0).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        for p in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let spec = ChannelNoiseSpec::new(0.02, 0.1, p).unwrap();
            // Offset grid: the support edges of the uniform part fall mid-cell.
            let n = 600_000;
            let h = 0.6 / n as f64;
            let lo = -0.3 - 0.5 * h;
            let mut acc = 0.0;
            for i in 0..=n {
                let f = spec.log_density(lo + i as f64 * h).exp();
                acc += if i == 0 || i == n { 0.5 * f } else { f };
            }
            assert!((acc * h - 1.0).abs() < 1e-6, "p={p}: {}", acc * h);
        }
    }

    #[test]
    fn density_approaches_gaussian_as_p_goes_to_one() {
        let g = ChannelNoiseSpec::gaussian(0.02).unwrap();
        let mut prev = f64::INFINITY;
        for p in [0.9, 0.99, 0.999, 0.9999] {
            let spec = ChannelNoiseSpec::new(0.02, 0.1, p).unwrap();
            let gap = (spec.log_density(0.01) - g.log_density(0.01)).abs();
            assert!(gap < prev);
            prev = gap;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn sampling_agrees_with_density_chi_square() {
        let spec = ChannelNoiseSpec::new(0.02, 0.1, 0.5).unwrap();
        let xs = draws(spec, 100_000, 9);
        let edges: Vec<f64> = (0..=30).map(|i| -0.075 + 0.005 * i as f64).collect();
        let prob = |a: f64, b: f64| {
            let n = 200;
            let h = (b - a) / n as f64;
            (0..n)
                .map(|i| spec.log_density(a + (i as f64 + 0.5) * h).exp() * h)
                .sum::<f64>()
        };
        let mut stat = 0.0;
        let mut mass = 0.0;
        for win in edges.windows(2) {
            let observed = xs.iter().filter(|&&x| x >= win[0] && x < win[1]).count() as f64;
            let p = prob(win[0], win[1]);
            mass += p;
            let expected = p * xs.len() as f64;
            stat += (observed - expected).powi(2) / expected;
        }
        let outside = xs.iter().filter(|&&x| x < edges[0] || x >= edges[30]).count() as f64;
        let expected = (1.0 - mass) * xs.len() as f64;
        if expected > 5.0 {
            stat += (outside - expected).powi(2) / expected;
        }
        // 99th percentile of χ² with 30 degrees of freedom.
        assert!(stat < 50.89, "chi-square {stat}");
    }

    #[test]
    fn sample_noise_is_reproducible_per_step() {
        let nm = NoiseModel::iid(5, ChannelNoiseSpec::gaussian(0.1).unwrap(), 4);
        assert_eq!(sample_noise(&nm, 3), sample_noise(&nm, 3));
        assert_ne!(sample_noise(&nm, 3), sample_noise(&nm, 4));
    }

    #[test]
    fn spec_validation() {
        assert!(ChannelNoiseSpec::new(0.0, 1.0, 0.5).is_err());
        assert!(ChannelNoiseSpec::new(1.0, 0.0, 0.5).is_err());
        assert!(ChannelNoiseSpec::new(1.0, 1.0, 1.5).is_err());
    }
}

//! Random-projection feature maps and constrained expressions.
//!
//! A [`RandomBasis`] is a single hidden layer whose input weights and biases
//! are drawn once and frozen. Only the output weights `beta` are ever solved
//! for, so every quantity below is linear in `beta`.
//!
//! A [`ConstrainedExpression`] wraps a basis as
//!
//! ```text
//! x(t)  = (sigma(z(t)) - sigma(z(t0)))^T beta + x0
//! x'(t) = c * sigma'(z(t))^T beta
//! ```
//!
//! which meets `x(t0) = x0` for every `beta`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::stream_rng;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    Logistic,
    Sine,
    ArcTan,
    Swish,
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Tanh,
        Activation::Softplus,
        Activation::Logistic,
        Activation::Sine,
        Activation::ArcTan,
        Activation::Swish,
    ];

    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            // max(x,0) + log1p(exp(-|x|)) never overflows
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Logistic => logistic(x),
            Activation::Sine => x.sin(),
            Activation::ArcTan => x.atan(),
            Activation::Swish => x * logistic(x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => logistic(x),
            Activation::Logistic => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            Activation::Sine => x.cos(),
            Activation::ArcTan => 1.0 / (1.0 + x * x),
            Activation::Swish => {
                let s = logistic(x);
                s + x * s * (1.0 - s)
            }
        }
    }

    /// Value and derivative in one call (shares the transcendental work).
    #[inline]
    pub fn value_and_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Logistic => {
                let s = logistic(x);
                (s, s * (1.0 - s))
            }
            Activation::Swish => {
                let s = logistic(x);
                (x * s, s + x * s * (1.0 - s))
            }
            Activation::Sine => {
                let (s, c) = x.sin_cos();
                (s, c)
            }
            _ => (self.value(x), self.derivative(x)),
        }
    }
}

/// Distribution of the frozen input weights and biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitDistribution {
    /// `U[-bound, bound]`.
    UniformSymmetric { bound: f64 },
    /// `U[lo, hi]`.
    UniformRange { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
    /// Exponential with the given mean (rate `1/mean`).
    Exponential { mean: f64 },
}

impl Default for InitDistribution {
    fn default() -> Self {
        InitDistribution::UniformSymmetric { bound: 1.0 }
    }
}

impl InitDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite();
        match *self {
            InitDistribution::UniformSymmetric { bound } => {
                if !(ok(bound) && bound > 0.0) {
                    return Err(config_err(format!("uniform bound must be positive, got {bound}")));
                }
            }
            InitDistribution::UniformRange { lo, hi } => {
                if !(ok(lo) && ok(hi) && lo < hi) {
                    return Err(config_err(format!("uniform range requires lo < hi, got [{lo}, {hi}]")));
                }
            }
            InitDistribution::Normal { mean, std } => {
                if !(ok(mean) && ok(std) && std > 0.0) {
                    return Err(config_err(format!("normal std must be positive, got {std}")));
                }
            }
            InitDistribution::Exponential { mean } => {
                if !(ok(mean) && mean > 0.0) {
                    return Err(config_err(format!("exponential mean must be positive, got {mean}")));
                }
            }
        }
        Ok(())
    }

    /// Draws `n` values in sequence from `rng`.
    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.validate()?;
        let out = match *self {
            InitDistribution::UniformSymmetric { bound } => {
                let d = Uniform::new_inclusive(-bound, bound).map_err(|e| config_err(e.to_string()))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            InitDistribution::UniformRange { lo, hi } => {
                let d = Uniform::new_inclusive(lo, hi).map_err(|e| config_err(e.to_string()))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            InitDistribution::Normal { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| config_err(e.to_string()))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            InitDistribution::Exponential { mean } => {
                let d = Exp::new(1.0 / mean).map_err(|e| config_err(e.to_string()))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
        };
        Ok(out)
    }
}

/// Distribution plus seed; the seed selects stream 0 of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub distribution: InitDistribution,
    pub seed: u64,
}

impl InitSpec {
    pub fn new(distribution: InitDistribution, seed: u64) -> Self {
        Self { distribution, seed }
    }
}

/// Frozen single-hidden-layer feature map `sigma_j(z) = act(w_j z + b_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBasis {
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

impl RandomBasis {
    /// Draws `neurons` weights, then `neurons` biases, from `init`.
    pub fn build(neurons: usize, activation: Activation, init: &InitSpec) -> Result<Self> {
        let mut rng = stream_rng(init.seed, 0);
        Self::build_with_rng(neurons, activation, &init.distribution, &mut rng)
    }

    pub fn build_with_rng<R: Rng + ?Sized>(
        neurons: usize,
        activation: Activation,
        distribution: &InitDistribution,
        rng: &mut R,
    ) -> Result<Self> {
        if neurons == 0 {
            return Err(config_err("a basis needs at least one neuron"));
        }
        let weights = distribution.sample_n(neurons, rng)?;
        let biases = distribution.sample_n(neurons, rng)?;
        Self::from_parts(weights, biases, activation)
    }

    pub fn from_parts(weights: Vec<f64>, biases: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(config_err(format!(
                "weights ({}) and biases ({}) must be non-empty and of equal length",
                weights.len(),
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(config_err("basis weights and biases must be finite"));
        }
        Ok(Self { weights, biases, activation })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Features at activation-domain coordinate `z`; `sigma_dot` here is d/dz.
    pub fn eval_z_into(&self, z: f64, sigma: &mut [f64], sigma_dot: &mut [f64]) {
        for j in 0..self.len() {
            let (s, d) = self.activation.value_and_derivative(self.weights[j] * z + self.biases[j]);
            sigma[j] = s;
            sigma_dot[j] = self.weights[j] * d;
        }
    }

    /// Features and their derivative with respect to physical time `t`.
    pub fn eval_features(&self, map: &TimeMap, t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut s = vec![0.0; self.len()];
        let mut d = vec![0.0; self.len()];
        self.eval_features_into(map, t, &mut s, &mut d);
        (s, d)
    }

    pub fn eval_features_into(&self, map: &TimeMap, t: f64, sigma: &mut [f64], sigma_dot: &mut [f64]) {
        self.eval_z_into(map.map(t), sigma, sigma_dot);
        for v in sigma_dot.iter_mut() {
            *v *= map.c;
        }
    }
}

/// Affine map from `[t0, tf]` (seconds) onto the activation domain `[z0, zf]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    pub t0: f64,
    pub tf: f64,
    pub z0: f64,
    pub zf: f64,
    pub c: f64,
}

impl TimeMap {
    /// Maps onto `[-1, 1]`.
    pub fn new(t0: f64, tf: f64) -> Result<Self> {
        Self::with_domain(t0, tf, -1.0, 1.0)
    }

    pub fn with_domain(t0: f64, tf: f64, z0: f64, zf: f64) -> Result<Self> {
        if !(t0.is_finite() && tf.is_finite() && t0 < tf) {
            return Err(config_err(format!("time map needs t0 < tf, got [{t0}, {tf}]")));
        }
        if !(z0.is_finite() && zf.is_finite() && z0 != zf) {
            return Err(config_err(format!("activation domain needs z0 != zf, got [{z0}, {zf}]")));
        }
        Ok(Self { t0, tf, z0, zf, c: (zf - z0) / (tf - t0) })
    }

    #[inline]
    pub fn map(&self, t: f64) -> f64 {
        self.z0 + self.c * (t - self.t0)
    }
}

/// Basis + output weights + initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedExpression {
    pub basis: RandomBasis,
    pub timemap: TimeMap,
    pub beta: Vec<f64>,
    pub x0: f64,
    sigma0: Vec<f64>,
}

impl ConstrainedExpression {
    pub fn new(basis: RandomBasis, timemap: TimeMap, beta: Vec<f64>, x0: f64) -> Result<Self> {
        if beta.len() != basis.len() {
            return Err(config_err(format!(
                "beta has {} entries but the basis has {} neurons",
                beta.len(),
                basis.len()
            )));
        }
        let (sigma0, _) = basis.eval_features(&timemap, timemap.t0);
        Ok(Self { basis, timemap, beta, x0, sigma0 })
    }

    /// `(sigma(t) - sigma(t0))^T beta + x0`.
    pub fn value(&self, t: f64) -> f64 {
        let (s, _) = self.basis.eval_features(&self.timemap, t);
        s.iter()
            .zip(&self.sigma0)
            .zip(&self.beta)
            .map(|((s, s0), b)| (s - s0) * b)
            .sum::<f64>()
            + self.x0
    }

    /// `c * sigma_dot(t)^T beta`.
    pub fn derivative(&self, t: f64) -> f64 {
        let (_, d) = self.basis.eval_features(&self.timemap, t);
        d.iter().zip(&self.beta).map(|(d, b)| d * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn tanh_unit() -> RandomBasis {
        RandomBasis::from_parts(vec![1.0], vec![0.0], Activation::Tanh).unwrap()
    }

    #[test]
    fn activation_values_at_zero() {
        assert_eq!(Activation::Swish.value(0.0), 0.0);
        assert_eq!(Activation::Softplus.value(0.0), std::f64::consts::LN_2);
        assert_eq!(Activation::Logistic.value(0.0), 0.5);
        assert_eq!(Activation::Tanh.value(0.0), 0.0);
    }

    #[test]
    fn softplus_does_not_overflow() {
        assert_eq!(Activation::Softplus.value(1000.0), 1000.0);
        assert!(Activation::Softplus.value(-1000.0) >= 0.0);
        assert!(Activation::Swish.derivative(-800.0).is_finite());
    }

    #[test]
    fn build_uniform_bounds_and_count() {
        let init = InitSpec::new(InitDistribution::UniformSymmetric { bound: 1.0 }, 7);
        let b = RandomBasis::build(20, Activation::Tanh, &init).unwrap();
        assert_eq!(b.weights().len(), 20);
        assert_eq!(b.biases().len(), 20);
        assert!(b.weights().iter().chain(b.biases()).all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn degenerate_distributions_are_rejected() {
        let bad = [
            InitDistribution::UniformRange { lo: 0.0, hi: 0.0 },
            InitDistribution::UniformSymmetric { bound: 0.0 },
            InitDistribution::Normal { mean: 0.0, std: 0.0 },
            InitDistribution::Exponential { mean: -1.0 },
        ];
        for d in bad {
            let r = RandomBasis::build(1, Activation::Tanh, &InitSpec::new(d, 1));
            assert!(matches!(r, Err(crate::Error::Config(_))), "{d:?}");
        }
        assert!(RandomBasis::build(0, Activation::Tanh, &InitSpec::new(InitDistribution::default(), 1)).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let init = InitSpec::new(InitDistribution::Normal { mean: 0.0, std: 10.0 }, 3);
        let a = RandomBasis::build(5, Activation::Softplus, &init).unwrap();
        let b = RandomBasis::build(5, Activation::Softplus, &init).unwrap();
        let bits = |r: &RandomBasis| r.weights().iter().chain(r.biases()).map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn exponential_draws_are_positive() {
        let init = InitSpec::new(InitDistribution::Exponential { mean: 2.0 }, 11);
        let b = RandomBasis::build(50, Activation::Tanh, &init).unwrap();
        assert!(b.weights().iter().chain(b.biases()).all(|v| *v > 0.0));
    }

    #[test]
    fn timemap_endpoints() {
        let m = TimeMap::with_domain(2.0, 4.0, -1.0, 1.0).unwrap();
        assert_eq!(m.c, 1.0);
        assert_eq!(m.map(2.0), -1.0);
        assert_eq!(m.map(4.0), 1.0);
        assert!(TimeMap::new(1.0, 1.0).is_err());
    }

    #[test]
    fn tanh_features_at_origin() {
        // z(t) = 0 at the midpoint of [0, 2] -> [-1, 1]; c = 1.
        let m = TimeMap::new(0.0, 0.5).unwrap();
        let (s, d) = tanh_unit().eval_features(&m, 0.25);
        assert_eq!(s, vec![0.0]);
        assert_eq!(d, vec![m.c]);
    }

    #[test]
    fn zero_weight_gives_constant_feature() {
        let b = RandomBasis::from_parts(vec![0.0], vec![0.7], Activation::Softplus).unwrap();
        let m = TimeMap::new(0.0, 1.0).unwrap();
        let (s1, d1) = b.eval_features(&m, 0.1);
        let (s2, d2) = b.eval_features(&m, 0.9);
        assert_eq!(s1, s2);
        assert_eq!(d1, vec![0.0]);
        assert_eq!(d2, vec![0.0]);
    }

    #[test]
    fn feature_derivative_matches_central_difference() {
        let b = RandomBasis::from_parts(vec![0.3], vec![-0.2], Activation::Tanh).unwrap();
        let m = TimeMap::new(0.0, 2.0).unwrap();
        // z = 0.5 at t = 1.5
        let t = 1.5;
        let h = 1e-6;
        let (_, d) = b.eval_features(&m, t);
        let (sp, _) = b.eval_features(&m, t + h);
        let (sm, _) = b.eval_features(&m, t - h);
        let fd = (sp[0] - sm[0]) / (2.0 * h);
        assert!(((d[0] - fd) / fd).abs() < 1e-6);
    }

    #[test]
    fn ce_meets_initial_value_and_zero_beta() {
        let init = InitSpec::new(InitDistribution::default(), 5);
        let basis = RandomBasis::build(8, Activation::Tanh, &init).unwrap();
        let m = TimeMap::new(0.3, 1.3).unwrap();
        let ce = ConstrainedExpression::new(basis.clone(), m, vec![3.0; 8], -2.5).unwrap();
        assert_eq!(ce.value(0.3), -2.5);
        let zero = ConstrainedExpression::new(basis, m, vec![0.0; 8], 4.0).unwrap();
        for t in [0.3, 0.5, 1.0, 1.3] {
            assert_eq!(zero.value(t), 4.0);
            assert_eq!(zero.derivative(t), 0.0);
        }
    }

    #[test]
    fn ce_derivative_matches_central_difference() {
        let init = InitSpec::new(InitDistribution::default(), 9);
        let basis = RandomBasis::build(6, Activation::Tanh, &init).unwrap();
        let m = TimeMap::new(0.0, 1.0).unwrap();
        let ce = ConstrainedExpression::new(basis, m, vec![0.5, -1.0, 2.0, 0.1, -0.3, 1.2], 1.0).unwrap();
        let h = 1e-6;
        for t in [0.1, 0.4, 0.77] {
            let fd = (ce.value(t + h) - ce.value(t - h)) / (2.0 * h);
            let an = ce.derivative(t);
            assert!(((an - fd) / an).abs() < 1e-5, "t={t}: {an} vs {fd}");
        }
    }

    /// Least-squares fit of the CE to noiseless samples of sin(t) + 10 on [0, 1].
    #[test]
    fn ce_fits_sine_and_its_derivative() {
        let init = InitSpec::new(InitDistribution::default(), 2024);
        let basis = RandomBasis::build(20, Activation::Tanh, &init).unwrap();
        let m = TimeMap::new(0.0, 1.0).unwrap();
        let n = 50;
        let ts: Vec<f64> = (1..=n).map(|i| i as f64 / n as f64).collect();
        let (s0, _) = basis.eval_features(&m, 0.0);
        let mut a = DMatrix::zeros(n, 20);
        let mut y = DVector::zeros(n);
        for (i, &t) in ts.iter().enumerate() {
            let (s, _) = basis.eval_features(&m, t);
            for j in 0..20 {
                a[(i, j)] = s[j] - s0[j];
            }
            y[i] = t.sin();
        }
        let beta = crate::lsq::solve_min_norm(&a, &y).unwrap().solution;
        let ce = ConstrainedExpression::new(basis, m, beta.iter().copied().collect(), 10.0).unwrap();
        let mut max_val = 0.0f64;
        let mut max_der = 0.0f64;
        for i in 0..=200 {
            let t = i as f64 / 200.0;
            max_val = max_val.max((ce.value(t) - (t.sin() + 10.0)).abs());
            max_der = max_der.max((ce.derivative(t) - t.cos()).abs());
        }
        assert!(max_val < 1e-4, "value error {max_val}");
        assert!(max_der < 1e-3, "derivative error {max_der}");
    }
}

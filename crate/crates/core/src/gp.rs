//! Exact Gaussian-process regression with a Matérn-5/2 ARD kernel and a
//! constant mean, over 4-dimensional action features.
//!
//! The dataset is small (bounded by the forgetting window), so every solve is
//! a dense Cholesky factorization of the full kernel matrix.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const FEATURE_DIM: usize = 4;

/// Number of optimised hyperparameters: 4 log-lengthscales, log-outputscale,
/// log-noise, and the (unconstrained) constant mean.
pub const NUM_PARAMS: usize = FEATURE_DIM + 3;

pub type FeatureVec = [f64; FEATURE_DIM];

pub const LENGTHSCALE_BOUNDS: (f64, f64) = (0.005, 2.0);
pub const OUTPUTSCALE_BOUNDS: (f64, f64) = (0.05, 20.0);
pub const NOISE_BOUNDS: (f64, f64) = (0.0005, 0.1);

/// Posterior variance floor.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub lengthscales: [f64; FEATURE_DIM],
    pub outputscale: f64,
    pub noise_variance: f64,
    pub mean_constant: f64,
}

impl Default for GpHyperparams {
    /// Geometric midpoint of each bound interval, zero mean.
    fn default() -> Self {
        let mid = |(lo, hi): (f64, f64)| (lo * hi).sqrt();
        Self {
            lengthscales: [mid(LENGTHSCALE_BOUNDS); FEATURE_DIM],
            outputscale: mid(OUTPUTSCALE_BOUNDS),
            noise_variance: mid(NOISE_BOUNDS),
            mean_constant: 0.0,
        }
    }
}

impl GpHyperparams {
    pub fn clamped(mut self) -> Self {
        for l in &mut self.lengthscales {
            *l = l.clamp(LENGTHSCALE_BOUNDS.0, LENGTHSCALE_BOUNDS.1);
        }
        self.outputscale = self.outputscale.clamp(OUTPUTSCALE_BOUNDS.0, OUTPUTSCALE_BOUNDS.1);
        self.noise_variance = self.noise_variance.clamp(NOISE_BOUNDS.0, NOISE_BOUNDS.1);
        self
    }

    pub fn within_bounds(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        self.lengthscales.iter().all(|&l| inside(l, LENGTHSCALE_BOUNDS))
            && inside(self.outputscale, OUTPUTSCALE_BOUNDS)
            && inside(self.noise_variance, NOISE_BOUNDS)
            && self.mean_constant.is_finite()
    }

    /// Packs into the optimiser's parameter space.
    pub fn to_params(&self) -> [f64; NUM_PARAMS] {
        let mut p = [0.0; NUM_PARAMS];
        for d in 0..FEATURE_DIM {
            p[d] = self.lengthscales[d].ln();
        }
        p[FEATURE_DIM] = self.outputscale.ln();
        p[FEATURE_DIM + 1] = self.noise_variance.ln();
        p[FEATURE_DIM + 2] = self.mean_constant;
        p
    }

    pub fn from_params(p: &[f64; NUM_PARAMS]) -> Self {
        let mut lengthscales = [0.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            lengthscales[d] = p[d].exp();
        }
        Self {
            lengthscales,
            outputscale: p[FEATURE_DIM].exp(),
            noise_variance: p[FEATURE_DIM + 1].exp(),
            mean_constant: p[FEATURE_DIM + 2],
        }
    }
}

/// Training set with standardized targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpDataset {
    pub features: Vec<FeatureVec>,
    pub values: Vec<f64>,
    pub raw_mean: f64,
    pub raw_std: f64,
}

impl GpDataset {
    pub fn empty() -> Self {
        Self {
            features: Vec::new(),
            values: Vec::new(),
            raw_mean: 0.0,
            raw_std: 1.0,
        }
    }

    /// Standardizes `raw` to zero mean and unit sample standard deviation.
    /// A single sample (or a constant set) keeps a unit scale.
    pub fn standardized(features: Vec<FeatureVec>, raw: &[f64]) -> Result<Self> {
        if features.len() != raw.len() {
            return Err(invalid(format!(
                "{} features but {} values",
                features.len(),
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite target value"));
        }
        let n = raw.len();
        if n == 0 {
            return Ok(Self::empty());
        }
        let raw_mean = raw.iter().sum::<f64>() / n as f64;
        let mut raw_std = 1.0;
        if n >= 2 {
            let var = raw.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            if sd > 1e-12 {
                raw_std = sd;
            }
        }
        let values = raw.iter().map(|v| (v - raw_mean) / raw_std).collect();
        Ok(Self {
            features,
            values,
            raw_mean,
            raw_std,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_standard(&self, raw: f64) -> f64 {
        (raw - self.raw_mean) / self.raw_std
    }

    pub fn to_raw(&self, standard: f64) -> f64 {
        standard * self.raw_std + self.raw_mean
    }
}

/// Posterior marginal at one point, in standardized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpPosterior {
    pub mean: f64,
    pub variance: f64,
}

impl GpPosterior {
    /// Mean and variance in the original target units.
    pub fn destandardize(&self, data: &GpDataset) -> GpPosterior {
        GpPosterior {
            mean: data.to_raw(self.mean),
            variance: self.variance * data.raw_std * data.raw_std,
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

#[inline]
fn scaled_distance(z1: &FeatureVec, z2: &FeatureVec, hp: &GpHyperparams) -> f64 {
    let mut s = 0.0;
    for d in 0..FEATURE_DIM {
        let t = (z1[d] - z2[d]) / hp.lengthscales[d];
        s += t * t;
    }
    s.sqrt()
}

pub fn matern52_ard(z1: &FeatureVec, z2: &FeatureVec, hp: &GpHyperparams) -> f64 {
    let r = scaled_distance(z1, z2, hp);
    let sr = SQRT5 * r;
    hp.outputscale * (1.0 + sr + 5.0 * r * r / 3.0) * (-sr).exp()
}

/// Lower-triangular Cholesky factor, row-major n x n.
#[derive(Debug, Clone)]
struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn factor(a: &[f64], n: usize) -> Option<Self> {
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Some(Self { n, l })
    }

    /// Factors `a`, retrying with diagonal jitter 1e-8, 1e-7, ..., 1e-4.
    fn factor_with_jitter(a: &[f64], n: usize) -> Result<Self> {
        if let Some(c) = Self::factor(a, n) {
            return Ok(c);
        }
        let mut jitter = 1e-8;
        let mut work = a.to_vec();
        for _ in 0..5 {
            for i in 0..n {
                work[i * n + i] = a[i * n + i] + jitter;
            }
            if let Some(c) = Self::factor(&work, n) {
                return Ok(c);
            }
            jitter *= 10.0;
        }
        Err(Error::NumericalFailure(format!(
            "kernel matrix ({n}x{n}) not positive definite after jitter 1e-4"
        )))
    }

    fn solve_lower(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for p in 0..i {
                s -= self.l[i * n + p] * b[p];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    fn solve_upper(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = b[i];
            for p in (i + 1)..n {
                s -= self.l[p * n + i] * b[p];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_upper(b);
    }

    fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>() * 2.0
    }

    fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for c in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[c] = 1.0;
            self.solve(&mut col);
            for r in 0..n {
                inv[r * n + c] = col[r];
            }
        }
        inv
    }
}

fn kernel_matrix(hp: &GpHyperparams, features: &[FeatureVec]) -> Vec<f64> {
    let n = features.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = matern52_ard(&features[i], &features[j], hp);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += hp.noise_variance;
    }
    k
}

/// A conditioned GP: factorized kernel matrix plus the weight vector
/// `K^-1 (y - m)`, ready for repeated posterior queries.
#[derive(Debug, Clone)]
pub struct GpModel {
    hp: GpHyperparams,
    features: Vec<FeatureVec>,
    chol: Option<Cholesky>,
    weights: Vec<f64>,
}

impl GpModel {
    pub fn condition(hp: &GpHyperparams, data: &GpDataset) -> Result<Self> {
        if data.features.len() != data.values.len() {
            return Err(invalid("dataset features/values length mismatch"));
        }
        if data.is_empty() {
            return Ok(Self {
                hp: *hp,
                features: Vec::new(),
                chol: None,
                weights: Vec::new(),
            });
        }
        let n = data.len();
        let k = kernel_matrix(hp, &data.features);
        let chol = Cholesky::factor_with_jitter(&k, n)?;
        let mut weights: Vec<f64> = data.values.iter().map(|v| v - hp.mean_constant).collect();
        chol.solve(&mut weights);
        Ok(Self {
            hp: *hp,
            features: data.features.clone(),
            chol: Some(chol),
            weights,
        })
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hp
    }

    pub fn predict(&self, z: &FeatureVec) -> GpPosterior {
        let Some(chol) = &self.chol else {
            return GpPosterior {
                mean: self.hp.mean_constant,
                variance: self.hp.outputscale + self.hp.noise_variance,
            };
        };
        let mut kstar: Vec<f64> = self
            .features
            .iter()
            .map(|f| matern52_ard(z, f, &self.hp))
            .collect();
        let mean = self.hp.mean_constant
            + kstar
                .iter()
                .zip(&self.weights)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        chol.solve_lower(&mut kstar);
        let reduction: f64 = kstar.iter().map(|v| v * v).sum();
        let variance = (self.hp.outputscale - reduction).max(VARIANCE_FLOOR);
        GpPosterior { mean, variance }
    }
}

pub fn posterior(hp: &GpHyperparams, data: &GpDataset, z: &FeatureVec) -> Result<GpPosterior> {
    Ok(GpModel::condition(hp, data)?.predict(z))
}

pub fn log_marginal_likelihood(hp: &GpHyperparams, data: &GpDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("log marginal likelihood of an empty dataset"));
    }
    let model = GpModel::condition(hp, data)?;
    let chol = model.chol.as_ref().expect("non-empty dataset is factorized");
    let n = data.len() as f64;
    let fit: f64 = data
        .values
        .iter()
        .zip(&model.weights)
        .map(|(v, w)| (v - hp.mean_constant) * w)
        .sum();
    let lml = -0.5 * fit - 0.5 * chol.log_det() - 0.5 * n * LN_2PI;
    if !lml.is_finite() {
        return Err(Error::NumericalFailure("non-finite log marginal likelihood".into()));
    }
    Ok(lml)
}

/// Analytic gradient of the log marginal likelihood with respect to the
/// packed parameters (see [`GpHyperparams::to_params`]).
pub fn lml_gradient(hp: &GpHyperparams, data: &GpDataset) -> Result<[f64; NUM_PARAMS]> {
    if data.is_empty() {
        return Err(invalid("gradient of an empty dataset"));
    }
    let model = GpModel::condition(hp, data)?;
    let chol = model.chol.as_ref().expect("non-empty dataset is factorized");
    let n = data.len();
    let alpha = &model.weights;
    let kinv = chol.inverse();
    // W = alpha alpha^T - K^-1; dL/dtheta = 0.5 * sum_ij W_ij dK_ij/dtheta
    let w = |i: usize, j: usize| alpha[i] * alpha[j] - kinv[i * n + j];

    let mut grad = [0.0; NUM_PARAMS];
    for i in 0..n {
        for j in 0..n {
            let wij = w(i, j);
            let (zi, zj) = (&data.features[i], &data.features[j]);
            let r = scaled_distance(zi, zj, hp);
            let decay = (-SQRT5 * r).exp();
            let kval = hp.outputscale * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * decay;
            // dk/dlog(l_d) = s * (5/3) (1 + sqrt5 r) exp(-sqrt5 r) (dz_d / l_d)^2
            let common = hp.outputscale * (5.0 / 3.0) * (1.0 + SQRT5 * r) * decay;
            for d in 0..FEATURE_DIM {
                let t = (zi[d] - zj[d]) / hp.lengthscales[d];
                grad[d] += 0.5 * wij * common * t * t;
            }
            grad[FEATURE_DIM] += 0.5 * wij * kval;
        }
        grad[FEATURE_DIM + 1] += 0.5 * w(i, i) * hp.noise_variance;
        grad[FEATURE_DIM + 2] += alpha[i];
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure("non-finite likelihood gradient".into()));
    }
    Ok(grad)
}

/// Central finite-difference gradient in the packed parameter space.
pub fn lml_gradient_fd(hp: &GpHyperparams, data: &GpDataset, step: f64) -> Result<[f64; NUM_PARAMS]> {
    let base = hp.to_params();
    let mut grad = [0.0; NUM_PARAMS];
    for p in 0..NUM_PARAMS {
        let mut plus = base;
        let mut minus = base;
        plus[p] += step;
        minus[p] -= step;
        let fp = log_marginal_likelihood(&GpHyperparams::from_params(&plus), data)?;
        let fm = log_marginal_likelihood(&GpHyperparams::from_params(&minus), data)?;
        grad[p] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Adam ascent on the log marginal likelihood, one step per call. Moment
/// estimates persist across calls on the same instance.
#[derive(Debug, Clone)]
pub struct AdamFitter {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: [f64; NUM_PARAMS],
    v: [f64; NUM_PARAMS],
    t: i32,
}

impl Default for AdamFitter {
    fn default() -> Self {
        Self::new(0.1)
    }
}

impl AdamFitter {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: [0.0; NUM_PARAMS],
            v: [0.0; NUM_PARAMS],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.learning_rate);
    }

    /// Applies one update given a gradient, returning clamped hyperparameters.
    pub fn apply(&mut self, hp: &GpHyperparams, grad: &[f64; NUM_PARAMS]) -> GpHyperparams {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut params = hp.to_params();
        for p in 0..NUM_PARAMS {
            self.m[p] = self.beta1 * self.m[p] + (1.0 - self.beta1) * grad[p];
            self.v[p] = self.beta2 * self.v[p] + (1.0 - self.beta2) * grad[p] * grad[p];
            let m_hat = self.m[p] / bc1;
            let v_hat = self.v[p] / bc2;
            params[p] += self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        GpHyperparams::from_params(&params).clamped()
    }

    pub fn fit_step(&mut self, hp: &GpHyperparams, data: &GpDataset) -> Result<GpHyperparams> {
        if data.len() < 2 {
            return Err(invalid("fitting needs at least two samples"));
        }
        let grad = lml_gradient(hp, data)?;
        Ok(self.apply(hp, &grad))
    }
}

/// One fit step from a fresh optimiser state.
pub fn fit_step(hp: &GpHyperparams, data: &GpDataset) -> Result<GpHyperparams> {
    AdamFitter::default().fit_step(hp, data)
}

//! Dense tensors, deterministic RNG streams, and optimizers.
//!
//! Everything downstream (models, defenses, attacks) builds on these
//! primitives. All math is f64; several identity checks in the theory
//! module compare residuals near machine precision and would drown in
//! f32 noise.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};

/// Row-major dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(DgpError::InvalidArgument(format!(
                "tensor data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn check_shape(&self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(DgpError::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data.iter().map(|a| a * factor).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// In-place `self += factor * other`.
    pub fn scaled_add(&mut self, factor: f64, other: &Tensor) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Deterministic RNG: identical `(seed, stream_id)` pairs yield bitwise
/// identical sequences across runs and platforms.
///
/// Each consumer of randomness (data generation, init, DP noise, leader
/// choice, attack init, ...) owns its own stream so that toggling one
/// feature never perturbs the randomness seen by another.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Rng { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn gen_range(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }

    /// Standard normal sample via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.inner.gen::<f64>();
            let u2 = self.inner.gen::<f64>();
            if u1 > 0.0 {
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }
}

/// Tensor of i.i.d. Gaussian samples drawn from `rng` only.
pub fn gaussian(rng: &mut Rng, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
    if std < 0.0 {
        return Err(DgpError::InvalidArgument(format!(
            "gaussian std must be >= 0, got {std}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mean + std * rng.normal()).collect();
    Ok(Tensor { shape: shape.to_vec(), data })
}

/// Adam optimizer state for a single tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(shape: Vec<usize>) -> Self {
        AdamState {
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam step with bias correction. Returns the delta to subtract from
/// the optimized parameters.
pub fn adam_step(state: &mut AdamState, grad: &Tensor, lr: f64) -> Result<Tensor> {
    if !state.first_moment.same_shape(grad) {
        return Err(DgpError::ShapeMismatch {
            expected: state.first_moment.shape().to_vec(),
            got: grad.shape().to_vec(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let mut update = Tensor::zeros(grad.shape().to_vec());
    for i in 0..grad.len() {
        let g = grad.data()[i];
        let m = b1 * state.first_moment.data()[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment.data()[i] + (1.0 - b2) * g * g;
        state.first_moment.data_mut()[i] = m;
        state.second_moment.data_mut()[i] = v;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        update.data_mut()[i] = lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(update)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_zero_std_is_mean() {
        let mut rng = Rng::new(7, 0);
        let t = gaussian(&mut rng, &[3], 0.0, 0.0).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_negative_std_rejected() {
        let mut rng = Rng::new(7, 0);
        assert!(gaussian(&mut rng, &[3], 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_same_seed_identical() {
        let mut a = Rng::new(42, 3);
        let mut b = Rng::new(42, 3);
        let ta = gaussian(&mut a, &[100], 0.5, 2.0).unwrap();
        let tb = gaussian(&mut b, &[100], 0.5, 2.0).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn gaussian_moments_match_law_of_large_numbers() {
        let mut rng = Rng::new(1, 0);
        let t = gaussian(&mut rng, &[100_000], 0.0, 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "sample std {}", var.sqrt());
    }

    #[test]
    fn rng_streams_differ() {
        let mut a = Rng::new(42, 0);
        let mut b = Rng::new(42, 1);
        let seq_a: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let seq_b: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(seq_a, seq_b);
    }

    #[test]
    fn rng_replay_is_exact() {
        for stream in 0..4 {
            let mut a = Rng::new(9, stream);
            let mut b = Rng::new(9, stream);
            for _ in 0..64 {
                assert_eq!(a.next_u64(), b.next_u64());
            }
        }
    }

    #[test]
    fn adam_zero_grad_zero_update() {
        let mut state = AdamState::new(vec![4]);
        let grad = Tensor::zeros(vec![4]);
        let update = adam_step(&mut state, &grad, 0.1).unwrap();
        assert!(update.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_bounded_by_lr() {
        // Bias-corrected first step: m_hat = g, v_hat = g^2, so the update
        // magnitude is lr * |g| / (|g| + eps) <= lr.
        let mut state = AdamState::new(vec![3]);
        let grad = Tensor::new(vec![3], vec![0.5, -2.0, 1e-3]).unwrap();
        let lr = 0.01;
        let update = adam_step(&mut state, &grad, lr).unwrap();
        for (u, g) in update.data().iter().zip(grad.data()) {
            assert!(u.abs() <= lr * 1.0000001, "update {u} exceeds lr");
            assert_eq!(u.signum(), g.signum());
        }
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        // Independent scalar Adam trace.
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
        let grads = [0.3, -0.7, 0.2, 0.9, -0.1];
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - b2.powi(t as i32 + 1));
            expected.push(lr * m_hat / (v_hat.sqrt() + eps));
        }

        let mut state = AdamState::new(vec![1]);
        for (g, want) in grads.iter().zip(&expected) {
            let grad = Tensor::new(vec![1], vec![*g]).unwrap();
            let update = adam_step(&mut state, &grad, lr).unwrap();
            assert!((update.data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_shape_mismatch_rejected() {
        let mut state = AdamState::new(vec![4]);
        let grad = Tensor::zeros(vec![5]);
        assert!(adam_step(&mut state, &grad, 0.1).is_err());
    }

    #[test]
    fn tensor_ops_match_loop_oracle() {
        let mut rng = Rng::new(11, 0);
        let a = gaussian(&mut rng, &[64], 0.0, 1.0).unwrap();
        let b = gaussian(&mut rng, &[64], 0.0, 1.0).unwrap();

        let mut dot = 0.0;
        let mut norm_sq = 0.0;
        for i in 0..64 {
            dot += a.data()[i] * b.data()[i];
            norm_sq += a.data()[i] * a.data()[i];
        }
        assert!((a.dot(&b).unwrap() - dot).abs() <= 1e-12 * dot.abs().max(1.0));
        assert!((a.norm_sq() - norm_sq).abs() <= 1e-12 * norm_sq);

        let sum = a.add(&b).unwrap();
        for i in 0..64 {
            assert_eq!(sum.data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn tensor_bad_shape_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}

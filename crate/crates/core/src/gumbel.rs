//! Gumbel noise, Gumbel-Max sampling, the temperature-controlled relaxation,
//! and the straight-through combination of the two.
//!
//! All sampling functions take noise explicitly so the hard draw and the
//! relaxation can share one perturbation: `argmax_i (log p_i + G_i)` is the
//! same index for every temperature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `G = -ln(-ln U)`. Strictly increasing on `(0, 1)`; `U = 1/e` maps to 0.
pub fn gumbel_transform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// `k` i.i.d. standard Gumbel draws. Uniforms are clamped to
/// `[ε, 1 - ε]` so the transform never returns an infinity.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let eps = f64::EPSILON;
    (0..k)
        .map(|_| gumbel_transform(rng.random::<f64>().clamp(eps, 1.0 - eps)))
        .collect()
}

/// Index of the largest perturbed log-probability; ties go to the lowest index.
/// Entries equal to `-inf` can never win.
pub fn gumbel_max(log_probs: &[f64], noise: &[f64]) -> Result<usize> {
    if log_probs.len() != noise.len() {
        return Err(Error::InvalidArgument(format!(
            "{} log-probabilities but {} noise values",
            log_probs.len(),
            noise.len()
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (&lp, &g)) in log_probs.iter().zip(noise).enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let v = lp + g;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidArgument("every action has zero probability".to_string()))
}

/// `P = softmax((log p + G) / τ)`, differentiable in `log_probs`.
pub fn gumbel_softmax<'g>(log_probs: &Tensor<'g>, noise: &[f64], tau: f64) -> Result<Tensor<'g>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let g = log_probs.graph();
    let noise = g.constant(noise.to_vec(), &log_probs.shape())?;
    Ok(log_probs.add(&noise)?.scale(1.0 / tau).softmax())
}

/// One decision drawn with shared noise: the hard Gumbel-Max index and its
/// relaxation.
#[derive(Clone, Debug)]
pub struct GumbelSample<'g> {
    pub hard_index: usize,
    pub hard_onehot: Vec<f64>,
    pub soft: Tensor<'g>,
    pub tau: f64,
}

impl<'g> GumbelSample<'g> {
    pub fn new(log_probs: &Tensor<'g>, noise: &[f64], tau: f64) -> Result<Self> {
        let hard_index = log_probs.with_value(|lp| gumbel_max(lp, noise))?;
        let soft = gumbel_softmax(log_probs, noise, tau)?;
        let mut hard_onehot = vec![0.0; noise.len()];
        hard_onehot[hard_index] = 1.0;
        Ok(Self {
            hard_index,
            hard_onehot,
            soft,
            tau,
        })
    }

    /// Draw fresh noise from `rng` and sample.
    pub fn draw<R: Rng + ?Sized>(log_probs: &Tensor<'g>, tau: f64, rng: &mut R) -> Result<Self> {
        let noise = sample_gumbel(rng, log_probs.numel());
        Self::new(log_probs, &noise, tau)
    }
}

/// Hard one-hot in the forward pass, gradient of the relaxation backward.
pub fn straight_through<'g>(sample: &GumbelSample<'g>) -> Result<Tensor<'g>> {
    sample.soft.straight_through(sample.hard_onehot.clone())
}

/// `τ(e) = max(floor, τ₀·exp(decay·e))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau0: 5.0,
            decay: -0.045,
            floor: 0.1,
        }
    }
}

impl TemperatureSchedule {
    pub fn temperature(&self, epoch: u32) -> f64 {
        self.temperature_at(f64::from(epoch))
    }

    /// The same curve at a fractional epoch.
    pub fn temperature_at(&self, epoch: f64) -> f64 {
        (self.tau0 * (self.decay * epoch).exp()).max(self.floor)
    }
}

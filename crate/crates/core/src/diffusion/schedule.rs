//! Linear-β noise schedule, forward noising and the η = 0 DDIM update.

use serde::{Deserialize, Serialize};

use super::LatentTensor;
use crate::error::{Error, Result};

/// `β_t` and `ᾱ_t = ∏_{s≤t}(1 − β_s)` for `t = 1..=T`, stored zero-based.
/// `ᾱ_0` is 1 by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_noise_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::input(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::input(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut acc = 1.0;
    let alpha_bar = beta
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps => Ok(self.alpha_bar[t - 1]),
            _ => Err(Error::input(format!("timestep {t} outside [0, {}]", self.steps))),
        }
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    if t == 0 || t > sched.steps {
        return Err(Error::input(format!("timestep {t} outside [1, {}]", sched.steps)));
    }
    z0.check_same_shape(eps, "q_sample noise shape")?;
    let ab = sched.alpha_bar(t)?;
    Ok(LatentTensor::from_raw(
        z0.data() * ab.sqrt() + eps.data() * (1.0 - ab).sqrt(),
    ))
}

/// Deterministic DDIM update from `t` to `t_prev` given the noise estimate.
pub fn ddim_step(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    if t <= t_prev {
        return Err(Error::input(format!("ddim_step needs t > t_prev, got {t} -> {t_prev}")));
    }
    z_t.check_same_shape(eps_hat, "ddim_step noise estimate shape")?;
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let x0_hat = (z_t.data() - &(eps_hat.data() * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    if t_prev == 0 {
        return Ok(LatentTensor::from_raw(x0_hat));
    }
    Ok(LatentTensor::from_raw(
        x0_hat * ab_prev.sqrt() + eps_hat.data() * (1.0 - ab_prev).sqrt(),
    ))
}

/// `(t, t_prev)` pairs of an evenly strided DDIM trajectory from `T` down to 0.
pub fn ddim_timesteps(sched: &NoiseSchedule, n_steps: usize) -> Result<Vec<(usize, usize)>> {
    if n_steps == 0 || n_steps > sched.steps {
        return Err(Error::input(format!(
            "sampler steps must be in [1, {}], got {n_steps}",
            sched.steps
        )));
    }
    let ts: Vec<usize> = (0..=n_steps).map(|k| k * sched.steps / n_steps).collect();
    Ok((1..=n_steps).rev().map(|k| (ts[k], ts[k - 1])).collect())
}

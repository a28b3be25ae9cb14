//! Forward (noising) diffusion process over a fixed variance schedule.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, and `alpha_bar(t) = Π_{s≤t} (1 − β_s)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("variance schedule needs at least one step"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(VarianceSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::config(format!("timestep {t} outside [1, {}]", self.betas.len())));
        }
        Ok(())
    }
}

impl Default for VarianceSchedule {
    fn default() -> Self {
        linear_beta_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

/// Betas linearly spaced from `beta_start` to `beta_end`, endpoints included.
pub fn linear_beta_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<VarianceSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule length must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect()
    };
    VarianceSchedule::from_betas(betas)
}

fn check_same(a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("noise dims {:?} differ from latent dims {:?}", b.dims(), a.dims())));
    }
    Ok(())
}

/// One Markov step: `z_t = sqrt(1 − β_t) z_{t−1} + sqrt(β_t) ε`.
pub fn forward_diffuse_step(z_prev: &Tensor4, t: usize, sched: &VarianceSchedule, noise: &Tensor4) -> Result<Tensor4> {
    check_same(z_prev, noise)?;
    let beta = sched.beta(t)?;
    let (keep, add) = ((1.0 - beta).sqrt(), beta.sqrt());
    let data = z_prev.data().iter().zip(noise.data()).map(|(z, e)| keep * z + add * e).collect();
    Tensor4::from_vec(z_prev.dims(), data)
}

/// Closed form of `t` chained steps: `sqrt(ᾱ_t) z_0 + sqrt(1 − ᾱ_t) ε`.
pub fn q_sample(z0: &Tensor4, t: usize, sched: &VarianceSchedule, noise: &Tensor4) -> Result<Tensor4> {
    check_same(z0, noise)?;
    let ab = sched.alpha_bar(t)?;
    let (keep, add) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(noise.data()).map(|(z, e)| keep * z + add * e).collect();
    Tensor4::from_vec(z0.dims(), data)
}

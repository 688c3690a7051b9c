//! Edit-friendly DDPM inversion.
//!
//! Every noisy latent is built straight from the clean one with its own
//! Gaussian draw, `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε̃_t`, and each step's noise
//! code is the residual the sampler must inject to land on the previous
//! latent, `z_t = (x_{t−1} − μ̂_t(x_t)) / σ_t`. Replaying the sampler with
//! those codes reproduces `x_0`.
//!
//! Two conventions close the loop in `f32`:
//!
//! * `σ_1 = 0`, so the last code is stored unscaled: `z_1 = x_0 − μ̂_1(x_1)`
//!   and the final step adds it directly ([`code_scale`] is 1 at `t = 1`).
//! * Codes are extracted along the sampler's own replay path (starting at
//!   `x_T`, stepping with the codes already found), so rounding does not
//!   accumulate between inversion and reconstruction.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::predictor::{ConditioningVector, NoisePredictor, PredictRequest};
use crate::schedule::NoiseSchedule;
use crate::tensor::{LatentTensor, Shape};

const RECORD_KIND: &str = "pnpmix-inversion-record";

/// Standard normal from one 64-bit counter word (Box–Muller, cosine branch).
fn normal_from_bits(bits: u64) -> f32 {
    let u1 = ((bits >> 32) as f64 + 0.5) / 4294967296.0;
    let u2 = ((bits & 0xffff_ffff) as f64 + 0.5) / 4294967296.0;
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

fn noise_stream(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// `ε̃_t` for the whole tensor. Element `i` is keyed by `(seed, t, i)` only,
/// so draws are independent of evaluation order.
pub fn forward_noise(seed: u64, t: usize, shape: Shape) -> LatentTensor {
    let mut rng = noise_stream(seed, t);
    let data = (0..shape.numel()).map(|_| normal_from_bits(rng.next_u64())).collect();
    LatentTensor::from_vec_unchecked(shape, data)
}

/// Single element of [`forward_noise`], by flat index `(c·H + h)·W + w`.
pub fn forward_noise_at(seed: u64, t: usize, index: usize) -> f32 {
    let mut rng = noise_stream(seed, t);
    rng.set_word_pos(2 * index as u128);
    normal_from_bits(rng.next_u64())
}

/// `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
pub fn noisy_latent(sched: &NoiseSchedule, t: usize, x0: &LatentTensor, eps: &LatentTensor) -> Result<LatentTensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    LatentTensor::lincomb(ab.sqrt() as f32, x0, (1.0 - ab).sqrt() as f32, eps)
}

/// Multiplier applied to `z_t` in a denoise step: `σ_t` for `t > 1`, `1` at `t = 1`.
pub fn code_scale(sched: &NoiseSchedule, t: usize) -> Result<f32> {
    sched.check_t(t)?;
    if t == 1 {
        return Ok(1.0);
    }
    let s = sched.sigma(t) as f32;
    if s <= 0.0 || !s.is_finite() {
        return Err(Error::Schedule(format!("sigma_{t} = {s}; noise codes are undefined")));
    }
    Ok(s)
}

/// `x_{t−1} = μ̂_t(x_t; ε) + σ_t·z_t` (unscaled `z_1` at the final step).
pub fn denoise_step(
    x_t: &LatentTensor,
    z_t: &LatentTensor,
    sched: &NoiseSchedule,
    t: usize,
    eps: &LatentTensor,
) -> Result<LatentTensor> {
    x_t.ensure_same_shape(z_t)?;
    let mu = sched.posterior_mean(t, x_t, eps)?;
    let s = code_scale(sched, t)?;
    LatentTensor::lincomb(1.0, &mu, s, z_t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionRecord {
    /// `x_aux[t−1]` holds `x_t` for `t = 1..=T`.
    pub x_aux: Vec<LatentTensor>,
    /// `z[t−1]` holds `z_t`.
    pub z: Vec<LatentTensor>,
    pub seed: u64,
}

impl InversionRecord {
    pub fn steps(&self) -> usize {
        self.z.len()
    }

    pub fn shape(&self) -> Shape {
        self.z[0].shape()
    }

    pub fn x(&self, t: usize) -> &LatentTensor {
        &self.x_aux[t - 1]
    }

    pub fn code(&self, t: usize) -> &LatentTensor {
        &self.z[t - 1]
    }

    /// Head of the sampling trajectory, `x_T`.
    pub fn x_top(&self) -> &LatentTensor {
        self.x_aux.last().expect("record is non-empty")
    }

    pub fn check_against(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.z.is_empty() || self.x_aux.len() != self.z.len() || self.z.len() != sched.steps() {
            return Err(Error::Parameter(format!(
                "record has {} latents / {} codes, schedule has {} steps",
                self.x_aux.len(),
                self.z.len(),
                sched.steps()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let shape = self.shape();
        let dims = vec![shape.channels, shape.height, shape.width];
        let mut entries = Vec::with_capacity(2 * self.steps());
        for (i, x) in self.x_aux.iter().enumerate() {
            entries.push((format!("x_aux/{}", i + 1), dims.clone(), x));
        }
        for (i, z) in self.z.iter().enumerate() {
            entries.push((format!("z/{}", i + 1), dims.clone(), z));
        }
        let meta = serde_json::json!({ "T": self.steps(), "seed": self.seed, "shape": shape });
        write_container(path, RECORD_KIND, meta, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (index, mut tensors) = read_container(path, RECORD_KIND)?;
        let steps = index.meta["T"]
            .as_u64()
            .ok_or_else(|| Error::Format("record index lacks T".into()))? as usize;
        let seed = index.meta["seed"]
            .as_u64()
            .ok_or_else(|| Error::Format("record index lacks seed".into()))?;
        if steps == 0 || tensors.len() != 2 * steps {
            return Err(Error::Format(format!(
                "record declares T={steps} but holds {} tensors",
                tensors.len()
            )));
        }
        let z = tensors.split_off(steps);
        Ok(Self {
            x_aux: tensors,
            z,
            seed,
        })
    }
}

fn predict_at(
    predictor: &dyn NoisePredictor,
    x: &LatentTensor,
    t: usize,
    cond: &ConditioningVector,
) -> Result<LatentTensor> {
    predictor.predict(&PredictRequest::new(x, t, cond))
}

pub fn invert(
    x0: &LatentTensor,
    sched: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    cond: &ConditioningVector,
    seed: u64,
) -> Result<InversionRecord> {
    x0.check_finite("inversion input")?;
    let steps = sched.steps();
    let shape = x0.shape();
    let x_aux = (1..=steps)
        .map(|t| noisy_latent(sched, t, x0, &forward_noise(seed, t, shape)))
        .collect::<Result<Vec<_>>>()?;

    let mut z = vec![LatentTensor::zeros(shape); steps];
    let mut current = x_aux[steps - 1].clone();
    for t in (1..=steps).rev() {
        let eps = predict_at(predictor, &current, t, cond)?;
        let mu = sched.posterior_mean(t, &current, &eps)?;
        let scale = code_scale(sched, t)?;
        let target = if t == 1 { x0 } else { &x_aux[t - 2] };
        let code_data = target
            .data()
            .iter()
            .zip(mu.data())
            .map(|(&x, &m)| (x - m) / scale)
            .collect();
        let code = LatentTensor::from_vec_unchecked(shape, code_data);
        code.check_finite(&format!("noise code z_{t}"))?;
        current = LatentTensor::lincomb(1.0, &mu, scale, &code)?;
        z[t - 1] = code;
    }
    Ok(InversionRecord { x_aux, z, seed })
}

/// Replays the sampler from `x_T` with the stored codes.
pub fn reconstruct(
    rec: &InversionRecord,
    sched: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    cond: &ConditioningVector,
) -> Result<LatentTensor> {
    rec.check_against(sched)?;
    let mut current = rec.x_top().clone();
    for t in (1..=sched.steps()).rev() {
        let eps = predict_at(predictor, &current, t, cond)?;
        current = denoise_step(&current, rec.code(t), sched, t, &eps)?;
    }
    Ok(current)
}

//! SGD training of the toy denoiser on `E‖ε − ε_θ(x_t, t, c)‖²` and a
//! finite-difference gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::toy::NoisyExample;
use super::{ConditioningVector, ToyDenoiser};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{LatentTensor, Shape};

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x0: LatentTensor,
    pub cond: ConditioningVector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-4,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Per-step batch loss, normalised per element.
    pub losses: Vec<f32>,
}

impl TrainReport {
    fn window_mean(values: &[f32]) -> f32 {
        values.iter().map(|&v| v as f64).sum::<f64>() as f32 / values.len().max(1) as f32
    }

    /// Mean loss over the first tenth of training (at least one step).
    pub fn initial_loss(&self) -> f32 {
        let k = (self.losses.len() / 10).max(1).min(self.losses.len());
        Self::window_mean(&self.losses[..k])
    }

    /// Mean loss over the last tenth of training (at least one step).
    pub fn final_loss(&self) -> f32 {
        let k = (self.losses.len() / 10).max(1).min(self.losses.len());
        Self::window_mean(&self.losses[self.losses.len() - k..])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{:e}\n", i + 1, l));
        }
        s
    }
}

/// Owned noisy example; borrowed as [`NoisyExample`] by the network.
struct Draw {
    x_t: Vec<f32>,
    t: usize,
    eps: Vec<f32>,
    cond: Vec<f32>,
}

impl Draw {
    fn view(&self) -> NoisyExample<'_> {
        NoisyExample {
            x_t: &self.x_t,
            t: self.t,
            target: &self.eps,
            cond: &self.cond,
        }
    }
}

fn draw_batch(
    rng: &mut ChaCha8Rng,
    dataset: &[TrainSample],
    sched: &NoiseSchedule,
    batch_size: usize,
) -> Vec<Draw> {
    (0..batch_size)
        .map(|_| {
            let sample = &dataset[rng.random_range(0..dataset.len())];
            let t = rng.random_range(1..=sched.steps());
            let a = sched.alpha_bar(t).sqrt() as f32;
            let b = (1.0 - sched.alpha_bar(t)).sqrt() as f32;
            let eps: Vec<f32> = (0..sample.x0.data().len())
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let x_t = sample
                .x0
                .data()
                .iter()
                .zip(&eps)
                .map(|(&x, &e)| a * x + b * e)
                .collect();
            Draw {
                x_t,
                t,
                eps,
                cond: sample.cond.values().to_vec(),
            }
        })
        .collect()
}

fn validate_dataset(model: &ToyDenoiser, dataset: &[TrainSample]) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Training {
            step: 0,
            reason: "empty dataset".into(),
        })?;
    let shape = first.x0.shape();
    if shape != model.config().shape() {
        return Err(Error::Parameter(format!(
            "dataset images are {shape}, model expects {}",
            model.config().shape()
        )));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.x0.shape() != shape {
            return Err(Error::Parameter(format!(
                "dataset image {i} has shape {}, expected {shape}",
                s.x0.shape()
            )));
        }
        if s.cond.dim() != model.config().cond_dim {
            return Err(Error::Parameter(format!(
                "dataset image {i} has conditioning dim {}, model expects {}",
                s.cond.dim(),
                model.config().cond_dim
            )));
        }
    }
    Ok(())
}

/// Plain SGD with a fixed learning rate; bit-reproducible for a fixed seed.
pub fn train_toy(
    model: &mut ToyDenoiser,
    dataset: &[TrainSample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    validate_dataset(model, dataset)?;
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Parameter(format!(
            "batch size must be positive and lr finite and positive (batch={}, lr={})",
            cfg.batch_size, cfg.lr
        )));
    }
    let numel = model.config().shape().numel() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = draw_batch(&mut rng, dataset, sched, cfg.batch_size);
        let batch: Vec<NoisyExample<'_>> = draws.iter().map(Draw::view).collect();
        let (loss, grads) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss became {loss}"),
            });
        }
        model.apply_sgd(&grads, cfg.lr);
        losses.push(loss / numel);
    }
    Ok(TrainReport { losses })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares backprop gradients with central differences on `count` randomly
/// chosen parameters, both evaluated in `f64` on one fixed noisy batch.
pub fn finite_difference_check(
    model: &ToyDenoiser,
    dataset: &[TrainSample],
    sched: &NoiseSchedule,
    count: usize,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    validate_dataset(model, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = draw_batch(&mut rng, dataset, sched, 2);
    let batch: Vec<NoisyExample<'_>> = draws.iter().map(Draw::view).collect();
    let (_, grads) = model.loss_and_grad_f64(&batch)?;
    let h = 1e-5;
    (0..count)
        .map(|_| {
            let index = rng.random_range(0..model.num_params());
            let p = model.param(index) as f64;
            let up = model.loss_f64_with(&batch, index, p + h)?;
            let down = model.loss_f64_with(&batch, index, p - h)?;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get_flat(index);
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            Ok(GradCheck {
                index,
                analytic,
                numeric,
                rel_error,
            })
        })
        .collect()
}

pub(crate) fn palette(class: usize, channels: usize) -> Vec<f32> {
    const COLORS: [[f32; 4]; 4] = [
        [0.9, -0.6, -0.4, 0.3],
        [-0.5, 0.9, -0.3, -0.4],
        [-0.4, -0.5, 0.9, 0.5],
        [0.8, 0.7, -0.7, -0.6],
    ];
    (0..channels).map(|ch| COLORS[class % 4][ch % 4]).collect()
}

/// Images with two coloured Gaussian blobs on a flat backdrop; the blob colour
/// is the class label, exposed as a one-hot condition of width `cond_dim`.
pub fn blob_dataset(count: usize, shape: Shape, cond_dim: usize, seed: u64) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = shape.spatial();
    let sigma = (h.min(w) as f32 / 6.0).max(0.75);
    (0..count)
        .map(|i| {
            let class = i % cond_dim;
            let color = palette(class, shape.channels);
            let mut x = LatentTensor::filled(shape, -0.3);
            for _ in 0..2 {
                let cy = rng.random_range(1.0..(h as f32 - 1.0).max(1.5));
                let cx = rng.random_range(1.0..(w as f32 - 1.0).max(1.5));
                for y in 0..h {
                    for xx in 0..w {
                        let d2 = (y as f32 - cy).powi(2) + (xx as f32 - cx).powi(2);
                        let g = (-d2 / (2.0 * sigma * sigma)).exp();
                        for (ch, col) in color.iter().enumerate() {
                            let v = x.get(ch, y, xx) + col * g;
                            x.set(ch, y, xx, v);
                        }
                    }
                }
            }
            Ok(TrainSample {
                x0: x,
                cond: ConditioningVector::one_hot(class, cond_dim)?,
            })
        })
        .collect()
}

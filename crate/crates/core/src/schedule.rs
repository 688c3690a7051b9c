//! DDPM noise schedule tables.
//!
//! Timesteps are 1-indexed (`1..=T`). Tables are held in `f64` and cast to
//! `f32` only when they multiply tensor data, so cumulative products over
//! long schedules do not drift.

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs T >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        if let Some(last) = alpha_bar.last().filter(|&&ab| ab <= 0.0) {
            return Err(Error::Parameter(format!(
                "cumulative alpha underflows to {last}; shorten the schedule"
            )));
        }
        let sigma = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
            })
            .collect();
        Ok(Self {
            kind,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(steps, beta_start, beta_end, ScheduleKind::Linear)
    }

    /// The standard 1000-step range (1e-4 .. 0.02) rescaled by `1000 / steps`,
    /// so short schedules still end close to pure noise.
    pub fn default_range(steps: usize) -> (f64, f64) {
        let k = 1000.0 / steps.max(1) as f64;
        ((1e-4 * k).min(0.5), (0.02 * k).min(0.5))
    }

    pub fn with_default_range(steps: usize) -> Result<Self> {
        let (start, end) = Self::default_range(steps);
        Self::linear(steps, start, end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Coefficients `(c_x, c_eps)` such that `μ̂ = c_x·x_t − c_eps·ε`.
    pub fn posterior_coefficients(&self, t: usize) -> (f32, f32) {
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        let c_eps = inv_sqrt_alpha * self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        (inv_sqrt_alpha as f32, c_eps as f32)
    }

    /// `μ̂_t = (x_t − β_t/√(1−ᾱ_t)·ε) / √α_t`, elementwise.
    pub fn posterior_mean(&self, t: usize, x_t: &LatentTensor, eps: &LatentTensor) -> Result<LatentTensor> {
        self.check_t(t)?;
        x_t.ensure_same_shape(eps)?;
        let (c_x, c_eps) = self.posterior_coefficients(t);
        let data = x_t
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| c_x * x - c_eps * e)
            .collect();
        let out = LatentTensor::from_vec_unchecked(x_t.shape(), data);
        out.check_finite("posterior_mean")?;
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha_bar,sigma\n");
        for t in 1..=self.steps() {
            s.push_str(&format!(
                "{t},{:e},{:e},{:e}\n",
                self.beta(t),
                self.alpha_bar(t),
                self.sigma(t)
            ));
        }
        s
    }
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, beta_start, beta_end, kind)
}

pub fn posterior_mean(
    sched: &NoiseSchedule,
    t: usize,
    x_t: &LatentTensor,
    eps: &LatentTensor,
) -> Result<LatentTensor> {
    sched.posterior_mean(t, x_t, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn three_step_hand_oracle() {
        let s = build_schedule(3, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        for (got, want) in s.betas().iter().zip([0.1, 0.2, 0.3]) {
            assert!(close(*got, want, 1e-12));
        }
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504]) {
            assert!(close(*got, want, 1e-12), "{got} vs {want}");
        }
        assert_eq!(s.sigma(1), 0.0);
        assert!(close(s.sigma(2), (0.2f64 * 0.1 / 0.28).sqrt(), 1e-12));
    }

    #[test]
    fn single_step_is_deterministic() {
        let s = build_schedule(1, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        assert!(close(s.alpha_bar(1), 0.9, 1e-12));
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn thousand_step_tail_matches_extended_precision_product() {
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        // Oracle: sum of logs with Kahan compensation, then exp.
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            let y = (-beta).ln_1p() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let oracle = sum.exp();
        let got = s.alpha_bar(1000);
        assert!(((got - oracle) / oracle).abs() < 1e-7, "{got} vs {oracle}");
        assert!(got > 3.9e-5 && got < 4.1e-5, "{got}");
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(matches!(NoiseSchedule::linear(0, 0.1, 0.2), Err(Error::Parameter(_))));
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_invariants() {
        for steps in [1usize, 2, 10, 50, 1000] {
            let s = NoiseSchedule::with_default_range(steps).unwrap();
            for t in 1..=steps {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                let ab = s.alpha_bar(t);
                assert!(ab > 0.0 && ab < 1.0);
                assert!(ab < s.alpha_bar(t - 1));
                assert_eq!(ab + (1.0 - ab), 1.0);
                assert!(s.sigma(t) >= 0.0);
            }
        }
    }

    #[test]
    fn posterior_mean_examples() {
        let s = build_schedule(3, 0.1, 0.3, ScheduleKind::Linear).unwrap();
        let shape = Shape::new(2, 2, 2);
        let x = LatentTensor::from_vec(shape, (0..8).map(|i| i as f32 * 0.3 - 1.0).collect()).unwrap();
        let zero = LatentTensor::zeros(shape);
        let ones = LatentTensor::filled(shape, 1.0);

        let mu = s.posterior_mean(2, &x, &zero).unwrap();
        let k = 1.0 / 0.8f64.sqrt();
        for (m, xv) in mu.data().iter().zip(x.data()) {
            assert!((*m as f64 - *xv as f64 * k).abs() < 1e-6);
        }

        let mu = s.posterior_mean(1, &zero, &ones).unwrap();
        let want = -(0.1 / 0.1f64.sqrt()) / 0.9f64.sqrt();
        assert!((want + 0.33333).abs() < 1e-5);
        for m in mu.data() {
            assert!((*m as f64 - want).abs() < 1e-6);
        }

        let x2 = x.scale(2.0).unwrap();
        let e = LatentTensor::from_vec(shape, (0..8).map(|i| 0.7 - i as f32 * 0.11).collect()).unwrap();
        let e2 = e.scale(2.0).unwrap();
        assert_eq!(
            s.posterior_mean(3, &x2, &e2).unwrap(),
            s.posterior_mean(3, &x, &e).unwrap().scale(2.0).unwrap()
        );
        assert!(matches!(s.posterior_mean(4, &x, &e), Err(Error::Parameter(_))));
        assert!(matches!(s.posterior_mean(0, &x, &e), Err(Error::Parameter(_))));
    }

    #[test]
    fn posterior_mean_commutes_with_spatial_permutation() {
        let s = NoiseSchedule::with_default_range(20).unwrap();
        let shape = Shape::new(1, 1, 6);
        let x = LatentTensor::from_vec(shape, vec![0.1, -2.0, 3.3, 0.0, 1.7, -0.4]).unwrap();
        let e = LatentTensor::from_vec(shape, vec![1.0, 0.5, -0.25, 2.0, -1.5, 0.75]).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let px = LatentTensor::from_vec(shape, perm.iter().map(|&i| x.data()[i]).collect()).unwrap();
        let pe = LatentTensor::from_vec(shape, perm.iter().map(|&i| e.data()[i]).collect()).unwrap();
        let mu = s.posterior_mean(7, &x, &e).unwrap();
        let pmu = s.posterior_mean(7, &px, &pe).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(pmu.data()[j].to_bits(), mu.data()[i].to_bits());
        }
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let csv = NoiseSchedule::linear(4, 0.01, 0.04).unwrap().to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("t,beta,alpha_bar,sigma\n1,"));
    }
}

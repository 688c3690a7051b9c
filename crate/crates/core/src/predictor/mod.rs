//! The noise-prediction interface `ε_θ(x_t, t, c)` and its implementations.

mod dummy;
mod exchange;
mod toy;
mod train;

pub use dummy::{IdentityScalePredictor, ZeroPredictor};
pub use exchange::{file_exchange_predict, FileExchangePredictor};
pub use toy::{toy_predict, ToyConfig, ToyDenoiser, ToyGradients};
pub(crate) use train::palette;
pub use train::{blob_dataset, finite_difference_check, train_toy, GradCheck, TrainConfig, TrainReport, TrainSample};

use crate::attention::{AttentionDirective, QkvBundle};
use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningVector {
    values: Vec<f32>,
}

impl ConditioningVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("conditioning vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("conditioning vector has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    /// One-hot encoding of a discrete prompt id.
    pub fn one_hot(id: usize, dim: usize) -> Result<Self> {
        if id >= dim {
            return Err(Error::Parameter(format!("prompt id {id} out of range for dim {dim}")));
        }
        let mut values = vec![0.0; dim];
        values[id] = 1.0;
        Self::new(values)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

#[derive(Clone, Debug)]
pub struct PredictRequest<'a> {
    pub x_t: &'a LatentTensor,
    pub t: usize,
    pub cond: &'a ConditioningVector,
    pub directive: Option<&'a AttentionDirective>,
}

impl<'a> PredictRequest<'a> {
    pub fn new(x_t: &'a LatentTensor, t: usize, cond: &'a ConditioningVector) -> Self {
        Self {
            x_t,
            t,
            cond,
            directive: None,
        }
    }

    pub fn with_directive(mut self, directive: &'a AttentionDirective) -> Self {
        self.directive = Some(directive);
        self
    }
}

/// Output of one forward pass: the noise estimate plus the Q/K/V bundles of
/// every attention layer, in layer order (empty for attention-free predictors).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub eps: LatentTensor,
    pub attention: Vec<QkvBundle<f32>>,
}

/// `ε_θ`. Implementations must be deterministic and callable concurrently.
pub trait NoisePredictor: Send + Sync {
    fn name(&self) -> String;

    /// Spatial/channel shape the predictor accepts, if it is fixed.
    fn input_shape(&self) -> Option<Shape> {
        None
    }

    fn cond_dim(&self) -> Option<usize> {
        None
    }

    fn forward(&self, req: &PredictRequest<'_>) -> Result<Prediction>;

    fn predict(&self, req: &PredictRequest<'_>) -> Result<LatentTensor> {
        self.forward(req).map(|p| p.eps)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn input_shape(&self) -> Option<Shape> {
        (**self).input_shape()
    }
    fn cond_dim(&self) -> Option<usize> {
        (**self).cond_dim()
    }
    fn forward(&self, req: &PredictRequest<'_>) -> Result<Prediction> {
        (**self).forward(req)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn name(&self) -> String {
        (**self).name()
    }
    fn input_shape(&self) -> Option<Shape> {
        (**self).input_shape()
    }
    fn cond_dim(&self) -> Option<usize> {
        (**self).cond_dim()
    }
    fn forward(&self, req: &PredictRequest<'_>) -> Result<Prediction> {
        (**self).forward(req)
    }
}

/// Shared request checks against a predictor's declared shape and condition width.
pub(crate) fn check_request(p: &dyn NoisePredictor, req: &PredictRequest<'_>) -> Result<()> {
    if let Some(shape) = p.input_shape() {
        if req.x_t.shape() != shape {
            return Err(Error::Parameter(format!(
                "{} expects input {shape}, got {}",
                p.name(),
                req.x_t.shape()
            )));
        }
    }
    if let Some(dim) = p.cond_dim() {
        if req.cond.dim() != dim {
            return Err(Error::Parameter(format!(
                "{} expects conditioning dim {dim}, got {}",
                p.name(),
                req.cond.dim()
            )));
        }
    }
    if let Some(d) = req.directive {
        d.validate()?;
    }
    Ok(())
}

pub fn predict(p: &dyn NoisePredictor, req: &PredictRequest<'_>) -> Result<LatentTensor> {
    p.predict(req)
}

use super::{check_request, NoisePredictor, PredictRequest, Prediction};
use crate::error::Result;
use crate::tensor::LatentTensor;

/// Always predicts zero noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn name(&self) -> String {
        "zero".into()
    }

    fn forward(&self, req: &PredictRequest<'_>) -> Result<Prediction> {
        check_request(self, req)?;
        Ok(Prediction {
            eps: LatentTensor::zeros(req.x_t.shape()),
            attention: Vec::new(),
        })
    }
}

/// Predicts `k·x_t`; elementwise, so it is handy for locality tests.
#[derive(Clone, Copy, Debug)]
pub struct IdentityScalePredictor {
    pub k: f32,
}

impl IdentityScalePredictor {
    pub fn new(k: f32) -> Self {
        Self { k }
    }
}

impl NoisePredictor for IdentityScalePredictor {
    fn name(&self) -> String {
        format!("identity:{}", self.k)
    }

    fn forward(&self, req: &PredictRequest<'_>) -> Result<Prediction> {
        check_request(self, req)?;
        Ok(Prediction {
            eps: req.x_t.scale(self.k)?,
            attention: Vec::new(),
        })
    }
}

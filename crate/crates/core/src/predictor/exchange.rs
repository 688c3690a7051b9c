//! File-exchange predictor: delegates `ε_θ` to an external process through a
//! shared directory.
//!
//! Per call the engine writes `request.pnpl` (the latent) and then
//! `request.json` (`{seq, t, cond, directive, shape}`), the latter via an
//! atomic rename so its appearance marks the request as complete. The
//! external process answers with `response.pnpl` (it should also write to a
//! temporary name and rename). The engine deletes the request and response
//! files once the response has been read.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use super::{check_request, NoisePredictor, PredictRequest, Prediction};
use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

pub const REQUEST_LATENT: &str = "request.pnpl";
pub const REQUEST_META: &str = "request.json";
pub const RESPONSE_LATENT: &str = "response.pnpl";

#[derive(Debug)]
pub struct FileExchangePredictor {
    dir: PathBuf,
    timeout: Duration,
    poll: Duration,
    // One request in flight per directory.
    seq: Mutex<u64>,
}

impl FileExchangePredictor {
    pub fn new(dir: impl Into<PathBuf>, timeout: Duration) -> Self {
        Self {
            dir: dir.into(),
            timeout,
            poll: Duration::from_millis(2),
            seq: Mutex::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn exchange(&self, req: &PredictRequest<'_>) -> Result<LatentTensor> {
        let mut seq = self.seq.lock().unwrap_or_else(|e| e.into_inner());
        *seq += 1;
        let response = self.dir.join(RESPONSE_LATENT);
        remove_if_present(&response)?;

        let latent_path = self.dir.join(REQUEST_LATENT);
        req.x_t.save(&latent_path)?;
        let meta = serde_json::json!({
            "seq": *seq,
            "t": req.t,
            "cond": req.cond.values(),
            "directive": req.directive.map(|d| d.to_json()),
            "shape": req.x_t.shape(),
        });
        let tmp = self.dir.join(".request.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&meta).expect("json")).map_err(|e| Error::io(&tmp, e))?;
        let meta_path = self.dir.join(REQUEST_META);
        fs::rename(&tmp, &meta_path).map_err(|e| Error::io(&meta_path, e))?;

        let deadline = Instant::now() + self.timeout;
        let eps = loop {
            if response.exists() {
                match LatentTensor::load(&response) {
                    Ok(t) => break t,
                    Err(Error::Format(_)) if Instant::now() < deadline => {
                        // Possibly caught mid-write; give the writer one more chance.
                        thread::sleep(self.poll * 10);
                        break LatentTensor::load(&response)?;
                    }
                    Err(e) => return Err(e),
                }
            }
            if Instant::now() >= deadline {
                return Err(Error::Integration(format!(
                    "no {RESPONSE_LATENT} in {} within {:?}",
                    self.dir.display(),
                    self.timeout
                )));
            }
            thread::sleep(self.poll);
        };
        for p in [&meta_path, &latent_path, &response] {
            remove_if_present(p)?;
        }
        if eps.shape() != req.x_t.shape() {
            return Err(Error::Format(format!(
                "response shape {} does not match request {}",
                eps.shape(),
                req.x_t.shape()
            )));
        }
        Ok(eps)
    }
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

impl NoisePredictor for FileExchangePredictor {
    fn name(&self) -> String {
        format!("exchange:{}", self.dir.display())
    }

    fn forward(&self, req: &PredictRequest<'_>) -> Result<Prediction> {
        check_request(self, req)?;
        Ok(Prediction {
            eps: self.exchange(req)?,
            attention: Vec::new(),
        })
    }
}

pub fn file_exchange_predict(dir: &Path, req: &PredictRequest<'_>, timeout: Duration) -> Result<LatentTensor> {
    FileExchangePredictor::new(dir, timeout).predict(req)
}

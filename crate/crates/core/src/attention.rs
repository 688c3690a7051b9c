//! Scaled dot-product self-attention and guided appearance attention.
//!
//! Guided appearance attention keeps the reference latent's queries (its
//! spatial structure), takes keys from the personal-concept latent, and
//! extrapolates values away from the reference:
//! `V_gui = V_per + α·(V_per − V_ref)`.
//!
//! Everything here is generic over the float type so the toy denoiser can
//! run the identical math in `f64` for gradient checking.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guidance scale used by default for value guidance.
pub const DEFAULT_ALPHA: f32 = 0.15;

/// Row-major `rows × cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Parameter("ragged matrix rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from(*v).unwrap()).collect(),
        }
    }
}

/// Query/key/value projections of one attention-layer evaluation, each `tokens × d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvBundle<T = f32> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Float> QkvBundle<T> {
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        let b = Self { q, k, v };
        b.validate()?;
        Ok(b)
    }

    pub fn tokens(&self) -> usize {
        self.q.rows
    }

    pub fn d_k(&self) -> usize {
        self.q.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.cols == 0 {
            return Err(Error::Parameter("attention needs d_k > 0".into()));
        }
        if self.k.rows != self.v.rows || self.q.rows != self.k.rows {
            return Err(Error::Parameter(format!(
                "token count mismatch: q {}, k {}, v {}",
                self.q.rows, self.k.rows, self.v.rows
            )));
        }
        if self.k.cols != self.q.cols {
            return Err(Error::Parameter(format!(
                "key width {} does not match query width {}",
                self.k.cols, self.q.cols
            )));
        }
        if self.q.rows == 0 {
            return Err(Error::Parameter("attention needs at least one token".into()));
        }
        Ok(())
    }
}

/// Mode carried by an [`AttentionDirective`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    None,
    Guided,
}

/// Keys and values captured from a donor forward pass, one bundle per attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DonorKv {
    /// Which latent produced the capture, e.g. `per_1`.
    pub tag: String,
    pub layers: Vec<QkvBundle<f32>>,
}

/// Per-request instruction for the predictor's attention layers.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDirective {
    pub mode: AttentionMode,
    pub donor: Option<DonorKv>,
    pub alpha: f32,
}

impl AttentionDirective {
    pub fn none() -> Self {
        Self {
            mode: AttentionMode::None,
            donor: None,
            alpha: 0.0,
        }
    }

    pub fn guided(donor: DonorKv, alpha: f32) -> Result<Self> {
        let d = Self {
            mode: AttentionMode::Guided,
            donor: Some(donor),
            alpha,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == AttentionMode::Guided {
            if self.donor.is_none() {
                return Err(Error::Parameter("guided attention requires a donor".into()));
            }
            if !(self.alpha.is_finite() && self.alpha >= 0.0) {
                return Err(Error::Parameter(format!(
                    "guidance scale must be finite and >= 0, got {}",
                    self.alpha
                )));
            }
        }
        Ok(())
    }

    /// Wire form for the file-exchange sidecar: captured tensors are not
    /// shipped, only the donor tag.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode,
            "donor": self.donor.as_ref().map(|d| d.tag.clone()),
            "alpha": self.alpha,
        })
    }
}

/// Row-wise `softmax(Q·Kᵀ/√d_k)`.
pub fn attention_probs<T: Float>(q: &Matrix<T>, k: &Matrix<T>) -> Matrix<T> {
    let (n, d) = (q.rows, q.cols);
    let m = k.rows;
    let scale = T::one() / T::from(d).unwrap().sqrt();
    let mut probs = vec![T::zero(); n * m];
    for i in 0..n {
        let qi = q.row(i);
        let row = &mut probs[i * m..(i + 1) * m];
        let mut max = T::neg_infinity();
        for (j, slot) in row.iter_mut().enumerate() {
            let kj = k.row(j);
            let mut dot = T::zero();
            for c in 0..d {
                dot = dot + qi[c] * kj[c];
            }
            *slot = dot * scale;
            max = max.max(*slot);
        }
        let mut sum = T::zero();
        for slot in row.iter_mut() {
            *slot = (*slot - max).exp();
            sum = sum + *slot;
        }
        for slot in row.iter_mut() {
            *slot = *slot / sum;
        }
    }
    Matrix {
        rows: n,
        cols: m,
        data: probs,
    }
}

/// `A·V` for probabilities `A` (`n × m`) and values `V` (`m × d_v`).
pub fn apply_probs<T: Float>(probs: &Matrix<T>, v: &Matrix<T>) -> Matrix<T> {
    let (n, m, dv) = (probs.rows, probs.cols, v.cols);
    let mut out = vec![T::zero(); n * dv];
    for i in 0..n {
        let o = &mut out[i * dv..(i + 1) * dv];
        for j in 0..m {
            let a = probs.data[i * m + j];
            for (slot, &vv) in o.iter_mut().zip(v.row(j)) {
                *slot = *slot + a * vv;
            }
        }
    }
    Matrix {
        rows: n,
        cols: dv,
        data: out,
    }
}

pub fn self_attention<T: Float>(b: &QkvBundle<T>) -> Result<Matrix<T>> {
    b.validate()?;
    Ok(apply_probs(&attention_probs(&b.q, &b.k), &b.v))
}

/// `V_per + α·(V_per − V_ref)`, elementwise.
pub fn value_guidance<T: Float>(v_per: &Matrix<T>, v_ref: &Matrix<T>, alpha: T) -> Result<Matrix<T>> {
    if v_per.shape() != v_ref.shape() {
        return Err(Error::dims(
            format!("V_per {}x{}", v_per.rows, v_per.cols),
            format!("V_ref {}x{}", v_ref.rows, v_ref.cols),
        ));
    }
    let data = v_per
        .data
        .iter()
        .zip(&v_ref.data)
        .map(|(&p, &r)| p + alpha * (p - r))
        .collect();
    Ok(Matrix {
        rows: v_per.rows,
        cols: v_per.cols,
        data,
    })
}

/// Attention with the reference's queries, the concept's keys, and guided values.
pub fn guided_appearance_attention<T: Float>(
    reference: &QkvBundle<T>,
    personal: &QkvBundle<T>,
    alpha: T,
) -> Result<Matrix<T>> {
    reference.validate()?;
    personal.validate()?;
    if reference.tokens() != personal.tokens() || reference.d_k() != personal.d_k() {
        return Err(Error::Parameter(format!(
            "reference ({} tokens, d_k {}) and concept ({} tokens, d_k {}) bundles differ",
            reference.tokens(),
            reference.d_k(),
            personal.tokens(),
            personal.d_k()
        )));
    }
    let v = value_guidance(&personal.v, &reference.v, alpha)?;
    Ok(apply_probs(&attention_probs(&reference.q, &personal.k), &v))
}

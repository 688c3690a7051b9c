//! Fusion kernels: latent cloning, mask-guided noise mixing, reference-noise
//! resynthesis and background dilution.
//!
//! Masks are `H×W` and broadcast over channels. All kernels select per pixel
//! rather than multiply by 0/1, so values pass through bit-exactly.

use serde::{Deserialize, Serialize};

use crate::attention::DEFAULT_ALPHA;
use crate::error::{Error, Result};
use crate::masks::{MaskSet, DEFAULT_ME_MARGIN};
use crate::tensor::{BinaryMask, LatentTensor};

pub const DEFAULT_BETA: f32 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageToggles {
    pub value_guidance: bool,
    pub dilution_legacy: bool,
    pub dilution_pp: bool,
    pub ref_noise_mix: bool,
}

impl StageToggles {
    /// Noise mixing and K/V replacement only.
    pub const BASE: Self = Self {
        value_guidance: false,
        dilution_legacy: false,
        dilution_pp: false,
        ref_noise_mix: false,
    };

    pub const FULL: Self = Self {
        value_guidance: true,
        dilution_legacy: false,
        dilution_pp: true,
        ref_noise_mix: true,
    };
}

impl Default for StageToggles {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub alpha: f32,
    pub beta: f32,
    pub me_margin: usize,
    pub toggles: StageToggles,
    /// Adds the `(1−β)·z_ref` exterior term the literal update omits.
    #[serde(default)]
    pub dilution_convex: bool,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            me_margin: DEFAULT_ME_MARGIN,
            toggles: StageToggles::FULL,
            dilution_convex: false,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Parameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        check_beta(self.beta)?;
        if self.toggles.dilution_legacy && self.toggles.dilution_pp {
            return Err(Error::Parameter(
                "legacy dilution and dilution++ are mutually exclusive".into(),
            ));
        }
        Ok(())
    }

    /// Alpha actually handed to the ref passes.
    pub fn effective_alpha(&self) -> f32 {
        if self.toggles.value_guidance {
            self.alpha
        } else {
            0.0
        }
    }
}

fn check_beta(beta: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// Running state of every trajectory at timestep `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBank {
    pub t: usize,
    pub out: LatentTensor,
    pub refs: Vec<LatentTensor>,
    pub back: LatentTensor,
    pub inpaint: LatentTensor,
    pub pers: Vec<LatentTensor>,
}

impl LatentBank {
    pub fn new(t: usize, back: LatentTensor, inpaint: LatentTensor, pers: Vec<LatentTensor>) -> Result<Self> {
        back.ensure_same_shape(&inpaint)?;
        for p in &pers {
            back.ensure_same_shape(p)?;
        }
        let (out, refs) = clone_background(&back, pers.len())?;
        Ok(Self {
            t,
            out,
            refs,
            back,
            inpaint,
            pers,
        })
    }

    pub fn n(&self) -> usize {
        self.refs.len()
    }
}

/// `n+1` copies of the background latent: the output head and one reference per concept.
pub fn clone_background(z_back: &LatentTensor, n: usize) -> Result<(LatentTensor, Vec<LatentTensor>)> {
    if n == 0 {
        return Err(Error::Parameter("at least one concept is required".into()));
    }
    Ok((z_back.clone(), vec![z_back.clone(); n]))
}

fn check_plane(t: &LatentTensor, m: &BinaryMask) -> Result<()> {
    t.ensure_mask_fits(m)
}

/// Writes `src` into `dst` wherever `m` is set.
fn select_into(dst: &mut LatentTensor, src: &LatentTensor, m: &BinaryMask) {
    let plane = m.bits().len();
    let bits = m.bits();
    for (d, s) in dst.data_mut().chunks_mut(plane).zip(src.data().chunks(plane)) {
        for ((d, &s), &b) in d.iter_mut().zip(s).zip(bits) {
            if b {
                *d = s;
            }
        }
    }
}

/// `ε_back⊙M_B + Σ ε_ref_i⊙M_i`.
pub fn mix_noise(eps_back: &LatentTensor, eps_refs: &[LatentTensor], masks: &MaskSet) -> Result<LatentTensor> {
    if eps_refs.is_empty() || eps_refs.len() != masks.n() {
        return Err(Error::Parameter(format!(
            "{} reference noise maps for {} object masks",
            eps_refs.len(),
            masks.n()
        )));
    }
    check_plane(eps_back, masks.background())?;
    let mut out = eps_back.clone();
    for (e, m) in eps_refs.iter().zip(masks.objects()) {
        eps_back.ensure_same_shape(e)?;
        select_into(&mut out, e, m);
    }
    Ok(out)
}

/// `ε_ref_i⊙M_i + ε_back⊙(1−M_i)`.
pub fn resynthesize_ref_noise(eps_ref: &LatentTensor, eps_back: &LatentTensor, m: &BinaryMask) -> Result<LatentTensor> {
    eps_ref.ensure_same_shape(eps_back)?;
    check_plane(eps_ref, m)?;
    let mut out = eps_back.clone();
    select_into(&mut out, eps_ref, m);
    Ok(out)
}

fn dilute(z_src: &LatentTensor, z_ref: &LatentTensor, m_e: &BinaryMask, beta: f32, convex: bool) -> Result<LatentTensor> {
    z_src.ensure_same_shape(z_ref)?;
    check_plane(z_ref, m_e)?;
    check_beta(beta)?;
    let plane = m_e.bits().len();
    let bits = m_e.bits();
    let data = z_src
        .data()
        .iter()
        .zip(z_ref.data())
        .enumerate()
        .map(|(i, (&s, &r))| {
            if bits[i % plane] {
                r
            } else if convex {
                beta * s + (1.0 - beta) * r
            } else {
                beta * s
            }
        })
        .collect();
    let out = LatentTensor::from_vec_unchecked(z_ref.shape(), data);
    out.check_finite("diluted reference latent")?;
    Ok(out)
}

/// `z_inpaint⊙β(1−M_E) + z_ref⊙M_E`.
pub fn background_dilution_pp(
    z_inpaint: &LatentTensor,
    z_ref: &LatentTensor,
    m_e: &BinaryMask,
    beta: f32,
) -> Result<LatentTensor> {
    dilute(z_inpaint, z_ref, m_e, beta, false)
}

/// Same update driven by the original background latent.
pub fn background_dilution_legacy(
    z_back: &LatentTensor,
    z_ref: &LatentTensor,
    m_e: &BinaryMask,
    beta: f32,
) -> Result<LatentTensor> {
    dilute(z_back, z_ref, m_e, beta, false)
}

/// `β·z_src + (1−β)·z_ref` outside `M_E`; experimental.
pub fn background_dilution_convex(
    z_src: &LatentTensor,
    z_ref: &LatentTensor,
    m_e: &BinaryMask,
    beta: f32,
) -> Result<LatentTensor> {
    dilute(z_src, z_ref, m_e, beta, true)
}

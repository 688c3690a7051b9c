//! Scene manifests and procedurally generated toy scenes.
//!
//! A toy scene is a smooth textured background holding one dark square per
//! concept slot, an "inpainted" copy with the squares removed, and one image
//! per concept showing a coloured blob inside its rectangular mask.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blending::{BlendConfig, DEFAULT_BETA};
use crate::attention::DEFAULT_ALPHA;
use crate::error::{Error, Result};
use crate::masks::{load_mask_pgm, save_mask_pgm, MaskSet, DEFAULT_ME_MARGIN};
use crate::pipeline::{AblationStage, SceneBundle};
use crate::predictor::{palette, ConditioningVector};
use crate::schedule::NoiseSchedule;
use crate::tensor::{BinaryMask, LatentTensor, Shape};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const TOY_COND_DIM: usize = 4;

/// The default margin is sized for 64-pixel latents; toy scenes scale it down.
pub fn toy_me_margin(size: usize) -> usize {
    (DEFAULT_ME_MARGIN * size / 64).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub back: String,
    pub inpaint: String,
    pub pers: Vec<String>,
    pub masks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_back: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub cond_dim: usize,
    pub cond_back: usize,
    pub cond_out: usize,
    pub cond_per: Vec<usize>,
    pub seed: u64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub alpha: f32,
    pub beta_dilution: f32,
    pub me_margin: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

impl SceneManifest {
    /// Reads a manifest; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn stage(&self) -> Result<AblationStage> {
        self.stage.as_deref().unwrap_or("e").parse()
    }

    pub fn blend_config(&self, stage: AblationStage) -> Result<BlendConfig> {
        let cfg = BlendConfig {
            alpha: self.alpha,
            beta: self.beta_dilution,
            me_margin: self.me_margin,
            toggles: stage.toggles(),
            dilution_convex: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bundle(&self, base: &Path) -> Result<SceneBundle> {
        if self.pers.len() != self.masks.len() || self.pers.len() != self.cond_per.len() {
            return Err(Error::Validation(format!(
                "manifest lists {} concept latents, {} masks and {} concept ids",
                self.pers.len(),
                self.masks.len(),
                self.cond_per.len()
            )));
        }
        let latent = |rel: &str, role: String| LatentTensor::load(base.join(rel)).map_err(|e| e.with_role(role));
        let back = latent(&self.back, "back".into())?;
        let inpaint = latent(&self.inpaint, "inpaint".into())?;
        let pers = self
            .pers
            .iter()
            .enumerate()
            .map(|(i, p)| latent(p, format!("per_{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let objects = self
            .masks
            .iter()
            .enumerate()
            .map(|(i, p)| load_mask_pgm(base.join(p)).map_err(|e| e.with_role(format!("mask_{}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let masks = match &self.mask_back {
            Some(p) => MaskSet::with_background(objects, load_mask_pgm(base.join(p)).map_err(|e| e.with_role("mask_back"))?)?,
            None => MaskSet::from_objects(objects)?,
        };
        let cond = |id: usize| ConditioningVector::one_hot(id, self.cond_dim);
        let bundle = SceneBundle {
            back,
            inpaint,
            pers,
            masks,
            cond_back: cond(self.cond_back)?,
            cond_out: cond(self.cond_out)?,
            cond_per: self.cond_per.iter().map(|&id| cond(id)).collect::<Result<_>>()?,
            seed: self.seed,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToySceneSpec {
    pub size: usize,
    pub channels: usize,
    pub n: usize,
    pub seed: u64,
}

impl ToySceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n) {
            return Err(Error::Parameter(format!("concept count must be 1..=3, got {}", self.n)));
        }
        if self.size < 4 * self.n || !self.size.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "size {} is too small or odd for {} concepts",
                self.size, self.n
            )));
        }
        if self.channels == 0 {
            return Err(Error::Parameter("channels must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.size, self.size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub back: LatentTensor,
    pub inpaint: LatentTensor,
    pub pers: Vec<LatentTensor>,
    pub masks: MaskSet,
    /// Background outside the masks, concept images inside.
    pub target: LatentTensor,
    pub cond_per: Vec<usize>,
}

struct Rect {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

impl Rect {
    fn contains(&self, h: usize, w: usize) -> bool {
        h >= self.r0 && h < self.r1 && w >= self.c0 && w < self.c1
    }

    fn center(&self) -> (f32, f32) {
        ((self.r0 + self.r1) as f32 / 2.0 - 0.5, (self.c0 + self.c1) as f32 / 2.0 - 0.5)
    }
}

pub fn toy_scene(spec: &ToySceneSpec) -> Result<ToyScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.size;
    let shape = spec.shape();

    let mut inpaint = LatentTensor::zeros(shape);
    for c in 0..spec.channels {
        let base: f32 = rng.random_range(-0.4..0.4);
        let gx: f32 = rng.random_range(-0.6..0.6);
        let gy: f32 = rng.random_range(-0.6..0.6);
        let fx: f32 = rng.random_range(0.5..1.5);
        let fy: f32 = rng.random_range(0.5..1.5);
        let phase: f32 = rng.random_range(0.0..6.0);
        for h in 0..s {
            for w in 0..s {
                let (u, v) = (w as f32 / s as f32 - 0.5, h as f32 / s as f32 - 0.5);
                let tex = 0.15 * (fx * w as f32 + phase).sin() * (fy * h as f32).cos();
                inpaint.set(c, h, w, base + gx * u + gy * v + tex);
            }
        }
    }

    let strip = s / spec.n;
    let rects: Vec<Rect> = (0..spec.n)
        .map(|i| {
            let (c0, c1) = if strip >= 4 { (i * strip + 1, (i + 1) * strip - 1) } else { (i * strip, (i + 1) * strip) };
            let height = rng.random_range((s / 3).max(2)..=(s / 2).max(2));
            let r0 = rng.random_range(0..=s - height);
            Rect { r0, r1: r0 + height, c0, c1 }
        })
        .collect();

    let mut back = inpaint.clone();
    let mut pers = Vec::with_capacity(spec.n);
    let mut objects = Vec::with_capacity(spec.n);
    for (i, r) in rects.iter().enumerate() {
        let (cy, cx) = r.center();
        let half = ((r.r1 - r.r0).min(r.c1 - r.c0) as f32 / 4.0).max(0.5);
        let mut mask = BinaryMask::new(s, s, false);
        let color = palette(i + 1, spec.channels);
        let sigma = ((r.r1 - r.r0).min(r.c1 - r.c0) as f32 / 3.0).max(0.75);
        let mut per = LatentTensor::filled(shape, -0.3);
        for h in 0..s {
            for w in 0..s {
                if r.contains(h, w) {
                    mask.set(h, w, true);
                }
                if (h as f32 - cy).abs() <= half && (w as f32 - cx).abs() <= half {
                    for c in 0..spec.channels {
                        back.set(c, h, w, -0.8);
                    }
                }
                let d2 = (h as f32 - cy).powi(2) + (w as f32 - cx).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                for (c, col) in color.iter().enumerate() {
                    per.set(c, h, w, -0.3 + col * g);
                }
            }
        }
        objects.push(mask);
        pers.push(per);
    }
    let masks = MaskSet::from_objects(objects)?;

    let mut target = back.clone();
    for (per, m) in pers.iter().zip(masks.objects()) {
        for c in 0..spec.channels {
            for h in 0..s {
                for w in 0..s {
                    if m.get(h, w) {
                        target.set(c, h, w, per.get(c, h, w));
                    }
                }
            }
        }
    }
    Ok(ToyScene {
        back,
        inpaint,
        pers,
        masks,
        target,
        cond_per: (1..=spec.n).collect(),
    })
}

pub fn toy_bundle(spec: &ToySceneSpec) -> Result<SceneBundle> {
    let scene = toy_scene(spec)?;
    let cond = |id: usize| ConditioningVector::one_hot(id, TOY_COND_DIM);
    Ok(SceneBundle {
        back: scene.back,
        inpaint: scene.inpaint,
        pers: scene.pers,
        masks: scene.masks,
        cond_back: cond(0)?,
        cond_out: cond(0)?,
        cond_per: scene.cond_per.iter().map(|&i| cond(i)).collect::<Result<_>>()?,
        seed: spec.seed,
    })
}

/// Writes a toy scene's assets and manifest into `dir`; returns the manifest path.
pub fn write_toy_scene(dir: &Path, spec: &ToySceneSpec, steps: usize) -> Result<PathBuf> {
    let scene = toy_scene(spec)?;
    let (beta_start, beta_end) = NoiseSchedule::default_range(steps);
    NoiseSchedule::linear(steps, beta_start, beta_end)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scene.back.save(dir.join("back.pnpl"))?;
    scene.inpaint.save(dir.join("inpaint.pnpl"))?;
    scene.target.save(dir.join("target.pnpl"))?;
    save_mask_pgm(scene.masks.background(), dir.join("mask_back.pgm"))?;
    let mut pers = Vec::new();
    let mut masks = Vec::new();
    for (i, (p, m)) in scene.pers.iter().zip(scene.masks.objects()).enumerate() {
        let (pn, mn) = (format!("per_{}.pnpl", i + 1), format!("mask_{}.pgm", i + 1));
        p.save(dir.join(&pn))?;
        save_mask_pgm(m, dir.join(&mn))?;
        pers.push(pn);
        masks.push(mn);
    }
    let manifest = SceneManifest {
        back: "back.pnpl".into(),
        inpaint: "inpaint.pnpl".into(),
        pers,
        masks,
        mask_back: Some("mask_back.pgm".into()),
        target: Some("target.pnpl".into()),
        cond_dim: TOY_COND_DIM,
        cond_back: 0,
        cond_out: 0,
        cond_per: scene.cond_per,
        seed: spec.seed,
        steps,
        beta_start,
        beta_end,
        alpha: DEFAULT_ALPHA,
        beta_dilution: DEFAULT_BETA,
        me_margin: toy_me_margin(spec.size),
        stage: Some("e".into()),
    };
    let path = dir.join(MANIFEST_NAME);
    manifest.save(&path)?;
    Ok(path)
}

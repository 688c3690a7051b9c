//! The sampling loop that fuses concept images into a background.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::attention::{AttentionDirective, DonorKv};
use crate::blending::{
    background_dilution_convex, background_dilution_legacy, background_dilution_pp, mix_noise, resynthesize_ref_noise,
    BlendConfig, LatentBank, StageToggles,
};
use crate::error::{Error, Result};
use crate::inversion::{denoise_step, invert, reconstruct, InversionRecord};
use crate::masks::MaskSet;
use crate::predictor::{ConditioningVector, NoisePredictor, PredictRequest, Prediction};
use crate::schedule::NoiseSchedule;
use crate::tensor::{BinaryMask, LatentTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub back: LatentTensor,
    pub inpaint: LatentTensor,
    pub pers: Vec<LatentTensor>,
    pub masks: MaskSet,
    pub cond_back: ConditioningVector,
    pub cond_out: ConditioningVector,
    pub cond_per: Vec<ConditioningVector>,
    pub seed: u64,
}

impl SceneBundle {
    pub fn n(&self) -> usize {
        self.pers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.back.shape();
        let check = |t: &LatentTensor, role: String| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Validation(format!(
                    "{role} latent is {}, background is {shape}",
                    t.shape()
                )));
            }
            Ok(())
        };
        check(&self.inpaint, "inpaint".into())?;
        for (i, p) in self.pers.iter().enumerate() {
            check(p, format!("per_{}", i + 1))?;
        }
        if self.pers.is_empty() {
            return Err(Error::Validation("scene has no concepts".into()));
        }
        if self.masks.n() != self.n() {
            return Err(Error::Validation(format!(
                "{} concept latents but {} object masks",
                self.n(),
                self.masks.n()
            )));
        }
        if self.cond_per.len() != self.n() {
            return Err(Error::Validation(format!(
                "{} concept latents but {} concept conditions",
                self.n(),
                self.cond_per.len()
            )));
        }
        if self.masks.shape() != (shape.height, shape.width) {
            return Err(Error::Validation(format!(
                "masks are {}x{}, latents are {shape}",
                self.masks.shape().0,
                self.masks.shape().1
            )));
        }
        Ok(())
    }

    /// Inversion seed for role `k` (0 background, 1 inpaint, 2.. concepts).
    pub fn role_seed(&self, k: usize) -> u64 {
        self.seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

pub fn role_name(k: usize) -> String {
    match k {
        0 => "back".into(),
        1 => "inpaint".into(),
        k => format!("per_{}", k - 1),
    }
}

/// Inversion records for every input plus the initial latent bank.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedScene {
    /// `[back, inpaint, per_1, .., per_n]`.
    pub records: Vec<InversionRecord>,
    pub bank: LatentBank,
}

impl PreparedScene {
    pub fn back(&self) -> &InversionRecord {
        &self.records[0]
    }

    pub fn inpaint(&self) -> &InversionRecord {
        &self.records[1]
    }

    pub fn per(&self, i: usize) -> &InversionRecord {
        &self.records[2 + i]
    }

    /// Swaps in a different inpaint record (and its trajectory head).
    pub fn set_inpaint(&mut self, rec: InversionRecord) {
        self.bank.inpaint = rec.x_top().clone();
        self.records[1] = rec;
    }
}

fn cond_for(bundle: &SceneBundle, k: usize) -> &ConditioningVector {
    match k {
        0 | 1 => &bundle.cond_back,
        k => &bundle.cond_per[k - 2],
    }
}

pub fn prepare(bundle: &SceneBundle, sched: &NoiseSchedule, predictor: &dyn NoisePredictor) -> Result<PreparedScene> {
    bundle.validate()?;
    let images: Vec<&LatentTensor> = [&bundle.back, &bundle.inpaint].into_iter().chain(&bundle.pers).collect();
    let records = images
        .par_iter()
        .enumerate()
        .map(|(k, x0)| {
            invert(x0, sched, predictor, cond_for(bundle, k), bundle.role_seed(k)).map_err(|e| e.with_role(role_name(k)))
        })
        .collect::<Result<Vec<_>>>()?;
    let bank = LatentBank::new(
        sched.steps(),
        records[0].x_top().clone(),
        records[1].x_top().clone(),
        records[2..].iter().map(|r| r.x_top().clone()).collect(),
    )?;
    Ok(PreparedScene { records, bank })
}

/// Reconstruction of the background image through its own record.
pub fn reconstructed_background(
    bundle: &SceneBundle,
    prepared: &PreparedScene,
    sched: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
) -> Result<LatentTensor> {
    reconstruct(prepared.back(), sched, predictor, &bundle.cond_back)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub eps_back: LatentTensor,
    pub eps_refs: Vec<LatentTensor>,
    pub eps_gui: LatentTensor,
    /// Bank after the step, i.e. at `t − 1`.
    pub bank: LatentBank,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineTrace {
    pub steps: Vec<TraceStep>,
}

impl PipelineTrace {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.steps {
            let p = |name: String| dir.join(format!("t{:04}_{name}.pnpl", s.t));
            s.eps_back.save(p("eps_back".into()))?;
            s.eps_gui.save(p("eps_gui".into()))?;
            s.bank.out.save(p("out".into()))?;
            s.bank.back.save(p("back".into()))?;
            s.bank.inpaint.save(p("inpaint".into()))?;
            for (i, e) in s.eps_refs.iter().enumerate() {
                e.save(p(format!("eps_ref_{}", i + 1)))?;
                s.bank.refs[i].save(p(format!("ref_{}", i + 1)))?;
                s.bank.pers[i].save(p(format!("per_{}", i + 1)))?;
            }
        }
        Ok(())
    }
}

fn forward(
    predictor: &dyn NoisePredictor,
    x: &LatentTensor,
    t: usize,
    cond: &ConditioningVector,
    directive: Option<&AttentionDirective>,
) -> Result<Prediction> {
    let mut req = PredictRequest::new(x, t, cond);
    if let Some(d) = directive {
        req = req.with_directive(d);
    }
    let pred = predictor.forward(&req)?;
    x.ensure_same_shape(&pred.eps)?;
    pred.eps.check_finite("predicted noise")?;
    Ok(pred)
}

struct ConceptStep {
    eps_per: LatentTensor,
    eps_ref: LatentTensor,
}

fn concept_step(
    bundle: &SceneBundle,
    bank: &LatentBank,
    predictor: &dyn NoisePredictor,
    cfg: &BlendConfig,
    i: usize,
) -> Result<ConceptStep> {
    let t = bank.t;
    let per = forward(predictor, &bank.pers[i], t, &bundle.cond_per[i], None)
        .map_err(|e| e.with_role(format!("per_{}", i + 1)).at_stage(t, "per"))?;
    let donor = DonorKv {
        tag: format!("per_{}", i + 1),
        layers: per.attention,
    };
    let directive = AttentionDirective::guided(donor, cfg.effective_alpha())?;
    let eps_ref = forward(predictor, &bank.refs[i], t, &bundle.cond_out, Some(&directive))
        .map_err(|e| e.with_role(format!("ref_{}", i + 1)).at_stage(t, "ref"))?
        .eps;
    Ok(ConceptStep {
        eps_per: per.eps,
        eps_ref,
    })
}

pub fn run_prepared(
    bundle: &SceneBundle,
    prepared: &PreparedScene,
    sched: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    cfg: &BlendConfig,
    mut trace: Option<&mut PipelineTrace>,
) -> Result<LatentTensor> {
    bundle.validate()?;
    cfg.validate()?;
    for r in &prepared.records {
        r.check_against(sched)?;
    }
    let n = bundle.n();
    let toggles = cfg.toggles;
    let expanded: Vec<BinaryMask> = if toggles.dilution_pp || toggles.dilution_legacy {
        bundle.masks.expanded(cfg.me_margin)?
    } else {
        Vec::new()
    };
    let mut bank = prepared.bank.clone();
    bank.t = sched.steps();

    for t in (1..=sched.steps()).rev() {
        bank.t = t;
        let eps_back = forward(predictor, &bank.back, t, &bundle.cond_back, None)
            .map_err(|e| e.with_role("back").at_stage(t, "back"))?
            .eps;
        let eps_inpaint = forward(predictor, &bank.inpaint, t, &bundle.cond_back, None)
            .map_err(|e| e.with_role("inpaint").at_stage(t, "inpaint"))?
            .eps;
        let concepts = (0..n)
            .into_par_iter()
            .map(|i| concept_step(bundle, &bank, predictor, cfg, i))
            .collect::<Result<Vec<_>>>()?;

        let eps_refs = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if toggles.ref_noise_mix {
                    resynthesize_ref_noise(&c.eps_ref, &eps_back, bundle.masks.object(i))
                } else {
                    Ok(c.eps_ref.clone())
                }
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_stage(t, "resynthesize"))?;
        let eps_gui = mix_noise(&eps_back, &eps_refs, &bundle.masks).map_err(|e| e.at_stage(t, "mix"))?;

        let z_back = prepared.back().code(t);
        let step = |x: &LatentTensor, z: &LatentTensor, eps: &LatentTensor| {
            denoise_step(x, z, sched, t, eps).map_err(|e| e.at_stage(t, "step"))
        };
        let mut next = LatentBank {
            t: t - 1,
            out: step(&bank.out, z_back, &eps_gui)?,
            refs: (0..n)
                .map(|i| step(&bank.refs[i], z_back, &eps_refs[i]))
                .collect::<Result<_>>()?,
            back: step(&bank.back, z_back, &eps_back)?,
            inpaint: step(&bank.inpaint, prepared.inpaint().code(t), &eps_inpaint)?,
            pers: (0..n)
                .map(|i| step(&bank.pers[i], prepared.per(i).code(t), &concepts[i].eps_per))
                .collect::<Result<_>>()?,
        };

        if toggles.dilution_pp || toggles.dilution_legacy {
            let source = if toggles.dilution_pp { &next.inpaint } else { &next.back };
            let diluted = next
                .refs
                .iter()
                .zip(&expanded)
                .map(|(r, me)| {
                    if cfg.dilution_convex {
                        background_dilution_convex(source, r, me, cfg.beta)
                    } else if toggles.dilution_pp {
                        background_dilution_pp(source, r, me, cfg.beta)
                    } else {
                        background_dilution_legacy(source, r, me, cfg.beta)
                    }
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.at_stage(t, "dilute"))?;
            next.refs = diluted;
        }

        if let Some(tr) = trace.as_deref_mut() {
            tr.steps.push(TraceStep {
                t,
                eps_back,
                eps_refs,
                eps_gui,
                bank: next.clone(),
            });
        }
        bank = next;
    }
    Ok(bank.out)
}

pub fn run(
    bundle: &SceneBundle,
    sched: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    cfg: &BlendConfig,
) -> Result<LatentTensor> {
    let prepared = prepare(bundle, sched, predictor)?;
    run_prepared(bundle, &prepared, sched, predictor, cfg, None)
}

/// Rows of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationStage {
    A,
    B,
    C,
    D,
    E,
}

impl AblationStage {
    pub const ALL: [AblationStage; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn toggles(self) -> StageToggles {
        let mut t = StageToggles::BASE;
        if self >= Self::B {
            t.value_guidance = true;
        }
        if self >= Self::C {
            t.dilution_legacy = true;
        }
        if self >= Self::D {
            t.ref_noise_mix = true;
        }
        if self == Self::E {
            t.dilution_legacy = false;
            t.dilution_pp = true;
        }
        t
    }

    pub fn config(self) -> BlendConfig {
        BlendConfig {
            toggles: self.toggles(),
            ..BlendConfig::default()
        }
    }
}

impl fmt::Display for AblationStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
            Self::E => "e",
        };
        f.write_str(c)
    }
}

impl FromStr for AblationStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            "e" => Ok(Self::E),
            other => Err(Error::Parameter(format!("unknown ablation stage {other:?}; expected a..e"))),
        }
    }
}

pub fn run_ablation(
    bundle: &SceneBundle,
    sched: &NoiseSchedule,
    predictor: &dyn NoisePredictor,
    stage: AblationStage,
) -> Result<LatentTensor> {
    run(bundle, sched, predictor, &stage.config())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{IdentityScalePredictor, ToyConfig, ToyDenoiser, ZeroPredictor};
    use crate::scene::{toy_bundle, ToySceneSpec};
    use crate::tensor::Shape;

    fn small_scene(n: usize, seed: u64) -> SceneBundle {
        toy_bundle(&ToySceneSpec { size: 8, channels: 2, n, seed }).unwrap()
    }

    fn toy(shape: Shape) -> ToyDenoiser {
        ToyDenoiser::random(ToyConfig::new(shape, 8, 4), 11).unwrap()
    }

    #[test]
    fn prepare_counts_and_clones() {
        let sched = NoiseSchedule::with_default_range(6).unwrap();
        let bundle = small_scene(2, 1);
        let prep = prepare(&bundle, &sched, &ZeroPredictor).unwrap();
        assert_eq!(prep.records.len(), 4);
        assert_eq!(prep.bank.refs.len() + 1, 3);
        assert!(prep.bank.refs.iter().all(|r| r == prep.back().x_top()));
        assert_eq!(&prep.bank.out, prep.back().x_top());
        for (k, r) in prep.records.iter().enumerate() {
            let cond = cond_for(&bundle, k);
            let x0 = [&bundle.back, &bundle.inpaint].into_iter().chain(&bundle.pers).nth(k).unwrap();
            let back = reconstruct(r, &sched, &ZeroPredictor, cond).unwrap();
            assert!(back.max_abs_diff(x0).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn mismatched_bundle_rejected() {
        let sched = NoiseSchedule::with_default_range(4).unwrap();
        let mut bundle = small_scene(1, 1);
        bundle.inpaint = LatentTensor::zeros(Shape::new(1, 8, 8));
        let err = prepare(&bundle, &sched, &ZeroPredictor).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        let mut bundle = small_scene(2, 1);
        bundle.pers.pop();
        assert!(matches!(prepare(&bundle, &sched, &ZeroPredictor), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_predictor_without_extras_reproduces_background() {
        let sched = NoiseSchedule::with_default_range(10).unwrap();
        let bundle = small_scene(1, 2);
        let cfg = BlendConfig {
            toggles: StageToggles::BASE,
            ..Default::default()
        };
        let out = run(&bundle, &sched, &ZeroPredictor, &cfg).unwrap();
        assert!(out.max_abs_diff(&bundle.back).unwrap() <= 1e-4);
    }

    #[test]
    fn background_region_exact_for_every_stage() {
        let sched = NoiseSchedule::with_default_range(8).unwrap();
        let bundle = small_scene(2, 3);
        let model = toy(bundle.back.shape());
        let predictors: Vec<&dyn NoisePredictor> = vec![&ZeroPredictor, &model];
        for p in predictors {
            let prep = prepare(&bundle, &sched, p).unwrap();
            let recon = reconstructed_background(&bundle, &prep, &sched, p).unwrap();
            for stage in AblationStage::ALL {
                let out = run_prepared(&bundle, &prep, &sched, p, &stage.config(), None).unwrap();
                let d = out.max_abs_diff_masked(&recon, bundle.masks.background()).unwrap();
                assert_eq!(d, 0.0, "{} stage {stage}", p.name());
                assert!(out.max_abs_diff_masked(&bundle.back, bundle.masks.background()).unwrap() <= 1e-4);
            }
        }
    }

    #[test]
    fn stage_e_is_default_and_deterministic() {
        let sched = NoiseSchedule::with_default_range(6).unwrap();
        let bundle = small_scene(2, 4);
        let model = toy(bundle.back.shape());
        let e = run_ablation(&bundle, &sched, &model, AblationStage::E).unwrap();
        let full = run(&bundle, &sched, &model, &BlendConfig::default()).unwrap();
        assert_eq!(e.to_bytes(), full.to_bytes());
    }

    #[test]
    fn value_guidance_changes_output_with_attention() {
        let sched = NoiseSchedule::with_default_range(6).unwrap();
        let bundle = small_scene(1, 5);
        let model = toy(bundle.back.shape());
        let prep = prepare(&bundle, &sched, &model).unwrap();
        let a = run_prepared(&bundle, &prep, &sched, &model, &AblationStage::A.config(), None).unwrap();
        let b = run_prepared(&bundle, &prep, &sched, &model, &AblationStage::B.config(), None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
        // Without attention layers the guidance scale has nothing to act on.
        let prep = prepare(&bundle, &sched, &ZeroPredictor).unwrap();
        let a = run_prepared(&bundle, &prep, &sched, &ZeroPredictor, &AblationStage::A.config(), None).unwrap();
        let b = run_prepared(&bundle, &prep, &sched, &ZeroPredictor, &AblationStage::B.config(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn legacy_equals_pp_when_inpaint_is_background() {
        let sched = NoiseSchedule::with_default_range(6).unwrap();
        let bundle = small_scene(2, 6);
        let model = toy(bundle.back.shape());
        let mut prep = prepare(&bundle, &sched, &model).unwrap();
        prep.set_inpaint(prep.back().clone());
        let c = run_prepared(&bundle, &prep, &sched, &model, &AblationStage::C.config(), None).unwrap();
        let mut cfg = AblationStage::C.config();
        cfg.toggles.dilution_legacy = false;
        cfg.toggles.dilution_pp = true;
        let pp = run_prepared(&bundle, &prep, &sched, &model, &cfg, None).unwrap();
        assert_eq!(c, pp);
    }

    #[test]
    fn removing_a_concept_leaves_the_rest_alone() {
        let sched = NoiseSchedule::with_default_range(8).unwrap();
        let bundle = small_scene(2, 7);
        let p = IdentityScalePredictor::new(0.4);
        let cfg = BlendConfig {
            toggles: StageToggles {
                ref_noise_mix: true,
                ..StageToggles::BASE
            },
            ..Default::default()
        };
        let full = run(&bundle, &sched, &p, &cfg).unwrap();
        let mut reduced = bundle.clone();
        reduced.masks = bundle.masks.without(1).unwrap();
        reduced.pers.remove(1);
        reduced.cond_per.remove(1);
        let out = run(&reduced, &sched, &p, &cfg).unwrap();
        let keep = bundle.masks.object(1).complement();
        assert!(full.max_abs_diff_masked(&out, &keep).unwrap() <= 1e-4);
    }

    #[test]
    fn trace_records_every_step() {
        let sched = NoiseSchedule::with_default_range(5).unwrap();
        let bundle = small_scene(1, 8);
        let prep = prepare(&bundle, &sched, &ZeroPredictor).unwrap();
        let mut trace = PipelineTrace::default();
        let out = run_prepared(&bundle, &prep, &sched, &ZeroPredictor, &BlendConfig::default(), Some(&mut trace)).unwrap();
        assert_eq!(trace.steps.len(), 5);
        assert_eq!(trace.steps.last().unwrap().bank.out, out);
        assert_eq!(trace.steps[0].t, 5);
        let dir = tempfile::tempdir().unwrap();
        trace.save_dir(dir.path()).unwrap();
        assert!(dir.path().join("t0001_eps_gui.pnpl").exists());
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("e".parse::<AblationStage>().unwrap(), AblationStage::E);
        assert!(matches!("f".parse::<AblationStage>(), Err(Error::Parameter(_))));
        assert_eq!(AblationStage::E.toggles(), StageToggles::FULL);
        let c = AblationStage::C.toggles();
        assert!(c.value_guidance && c.dilution_legacy && !c.ref_noise_mix && !c.dilution_pp);
    }

    #[test]
    fn stage_errors_carry_timestep() {
        let sched = NoiseSchedule::with_default_range(4).unwrap();
        let bundle = small_scene(1, 9);
        // Wrong conditioning width for the model: fails on the first back pass.
        let model = ToyDenoiser::random(ToyConfig::new(bundle.back.shape(), 8, 3), 1).unwrap();
        let err = run(&bundle, &sched, &model, &BlendConfig::default()).unwrap_err();
        assert!(err.to_string().contains("back"), "{err}");
    }
}

use pnpmix::blending::{BlendConfig, StageToggles};
use pnpmix::pipeline::{prepare, reconstructed_background, run, run_prepared, AblationStage};
use pnpmix::predictor::{IdentityScalePredictor, NoisePredictor, ToyConfig, ToyDenoiser};
use pnpmix::scene::{toy_bundle, ToySceneSpec, TOY_COND_DIM};
use pnpmix::schedule::NoiseSchedule;
use proptest::prelude::*;

fn toggles() -> impl Strategy<Value = StageToggles> {
    (any::<bool>(), 0u8..3, any::<bool>()).prop_map(|(value_guidance, dilution, ref_noise_mix)| StageToggles {
        value_guidance,
        dilution_legacy: dilution == 1,
        dilution_pp: dilution == 2,
        ref_noise_mix,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn background_region_replays_background(
        seed in 0u64..1000,
        n in 1usize..=3,
        toggles in toggles(),
        alpha in 0.0f32..0.5,
        beta in 0.0f32..=1.0,
        margin in 0usize..4,
        convex in any::<bool>(),
        use_toy in any::<bool>(),
    ) {
        let spec = ToySceneSpec { size: 12, channels: 2, n, seed };
        let bundle = toy_bundle(&spec).unwrap();
        let sched = NoiseSchedule::with_default_range(12).unwrap();
        let toy = ToyDenoiser::random(ToyConfig::new(spec.shape(), 4, TOY_COND_DIM), seed).unwrap();
        let ident = IdentityScalePredictor::new(0.2);
        let p: &dyn NoisePredictor = if use_toy { &toy } else { &ident };
        let cfg = BlendConfig { alpha, beta, me_margin: margin, toggles, dilution_convex: convex };
        let prepared = prepare(&bundle, &sched, p).unwrap();
        let recon = reconstructed_background(&bundle, &prepared, &sched, p).unwrap();
        let out = run_prepared(&bundle, &prepared, &sched, p, &cfg, None).unwrap();
        prop_assert_eq!(out.max_abs_diff_masked(&recon, bundle.masks.background()).unwrap(), 0.0);
        prop_assert!(out.max_abs_diff_masked(&bundle.back, bundle.masks.background()).unwrap() <= 1e-4);
        let again = run_prepared(&bundle, &prepared, &sched, p, &cfg, None).unwrap();
        prop_assert_eq!(out.to_bytes(), again.to_bytes());
    }
}

#[test]
fn full_runs_are_bit_identical() {
    let spec = ToySceneSpec { size: 16, channels: 3, n: 2, seed: 11 };
    let bundle = toy_bundle(&spec).unwrap();
    let sched = NoiseSchedule::with_default_range(20).unwrap();
    let toy = ToyDenoiser::random(ToyConfig::new(spec.shape(), 8, TOY_COND_DIM), 2).unwrap();
    let a = run(&bundle, &sched, &toy, &BlendConfig::default()).unwrap();
    let b = run(&bundle, &sched, &toy, &BlendConfig::default()).unwrap();
    assert_eq!(a.digest(), b.digest());
}

#[test]
fn value_guidance_difference_needs_distinct_values() {
    // Stage a and b differ only through alpha, which acts on V_per - V_ref.
    let spec = ToySceneSpec { size: 16, channels: 3, n: 1, seed: 4 };
    let bundle = toy_bundle(&spec).unwrap();
    let sched = NoiseSchedule::with_default_range(10).unwrap();
    let toy = ToyDenoiser::random(ToyConfig::new(spec.shape(), 8, TOY_COND_DIM), 3).unwrap();
    let prepared = prepare(&bundle, &sched, &toy).unwrap();
    let a = run_prepared(&bundle, &prepared, &sched, &toy, &AblationStage::A.config(), None).unwrap();
    let b = run_prepared(&bundle, &prepared, &sched, &toy, &AblationStage::B.config(), None).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 0.0);

    // When the concept is the background itself, both trajectories coincide and V_per == V_ref.
    let mut same = bundle.clone();
    same.pers = vec![same.back.clone()];
    same.cond_per = vec![same.cond_out.clone()];
    let mut prepared = prepare(&same, &sched, &toy).unwrap();
    prepared.records[2] = prepared.records[0].clone();
    prepared.bank.pers[0] = prepared.bank.back.clone();
    let a = run_prepared(&same, &prepared, &sched, &toy, &AblationStage::A.config(), None).unwrap();
    let b = run_prepared(&same, &prepared, &sched, &toy, &AblationStage::B.config(), None).unwrap();
    assert_eq!(a, b);
}

mod common;

use featsplat_pipeline::config::Mix;
use featsplat_pipeline::{Error, PipelineConfig, Preset};

#[test]
fn defaults_are_valid_and_documented_values() {
    let c = PipelineConfig::default();
    c.validate().unwrap();
    assert_eq!(c.feature_dim, 8);
    assert_eq!(c.latent_channels, 8);
    assert_eq!(c.k_fraction, 0.25);
    assert_eq!((c.resolution.backbone, c.resolution.detail), (256, 512));
    assert_eq!(c.input_views, 2);
    assert_eq!((c.optim.lr_backbone, c.optim.lr_refiner, c.optim.clip), (3e-4, 1e-4, 1.0));
}

#[test]
fn overrides_reach_nested_fields() {
    let c = PipelineConfig::default()
        .with_overrides(&["schedule.stage1_steps=7", "refiner.mix=\"per_view\"", "optim.lr_backbone=0.01", "seed=9"])
        .unwrap();
    assert_eq!(c.schedule.stage1_steps, 7);
    assert_eq!(c.refiner.mix, Mix::PerView);
    assert_eq!(c.optim.lr_backbone, 0.01);
    assert_eq!(c.seed, 9);
    // bare strings need no quotes
    let c = PipelineConfig::default().with_overrides(&["refiner.mix=joint"]).unwrap();
    assert_eq!(c.refiner.mix, Mix::Joint);
}

#[test]
fn bad_overrides_are_config_errors() {
    let base = PipelineConfig::default();
    for bad in ["nope=1", "schedule.nope=1", "seed", "seed.x=1", "seed=\"abc\""] {
        assert!(matches!(base.with_overrides(&[bad]), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn validation_rejects_inconsistent_resolutions() {
    let base = PipelineConfig::default();
    let cases = [
        vec!["resolution.backbone=128"],
        vec!["resolution.backbone=96", "resolution.detail=192"],
        vec!["resolution.backbone=16", "resolution.detail=32"],
        vec!["k_fraction=0"],
        vec!["k_fraction=1.5"],
        vec!["synth.views_per_scene=2"],
        vec!["feature_cnn.enabled=true"],
        vec!["loss.l2=-1"],
        vec!["optim.clip=0"],
        vec!["background=[0, 2, 0]"],
    ];
    for sets in cases {
        assert!(matches!(base.with_overrides(&sets), Err(Error::Config(_))), "{sets:?}");
    }
    assert!(base.with_overrides(&["resolution.backbone=128", "resolution.detail=256"]).is_ok());
}

#[test]
fn load_reads_partial_files_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    std::fs::write(&p, r#"{"seed": 3, "schedule": {"stage2_steps": 5}}"#).unwrap();
    let c = PipelineConfig::load(&p).unwrap();
    assert_eq!(c.seed, 3);
    assert_eq!(c.schedule.stage2_steps, 5);
    assert_eq!(c.schedule.stage1_steps, PipelineConfig::default().schedule.stage1_steps);
    std::fs::write(&p, r#"{"seeds": 3}"#).unwrap();
    assert!(matches!(PipelineConfig::load(&p), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::load(&dir.path().join("missing.json")), Err(Error::Io { .. })));
}

#[test]
fn json_roundtrip() {
    let c = common::tiny_cfg();
    let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn presets_switch_the_ablation_modules() {
    let base = PipelineConfig::default();
    let on = |p: Preset| {
        let c = p.apply(&base);
        c.validate().unwrap();
        (c.detail.enabled, c.detail.frequency, c.feature_cnn.enabled, c.refiner.enabled, c.refiner.guided)
    };
    assert_eq!(on(Preset::Base), (false, false, false, false, false));
    assert_eq!(on(Preset::CnnDpm), (true, false, false, false, false));
    assert_eq!(on(Preset::DdDpm), (true, true, false, false, false));
    assert_eq!(on(Preset::GsFeatureCnn), (true, true, true, false, false));
    assert_eq!(on(Preset::Sd), (true, true, false, true, false));
    assert_eq!(on(Preset::FeatureGuidedSd), (true, true, false, true, true));
    for p in Preset::ALL {
        assert_eq!(Preset::parse(p.name()).unwrap(), p);
    }
    assert!(matches!(Preset::parse("bigger"), Err(Error::Config(_))));
}

//! Single-precision instantiation: the whole forward path is generic over
//! the scalar type, so an `f32` build of the model must run end to end.
//! (Gradient-tolerance checks stay `f64`-only; central differences at
//! h=1e-5 are meaningless in single precision.)

use fusionseg_core::mask_ops::{noise_reduce, MaskStack};
use fusionseg_core::pipeline::{predict_stage1, stage2_run, ModelConfig, Stage1Model};
use fusionseg_core::prompt_masker::RegionGrowMasker;
use fusionseg_core::synth::{
    class_legend, generate_scene, CorruptionConfig, CorruptionMode, RadarNoiseConfig, SceneConfig,
};

#[test]
fn f32_pipeline_runs_end_to_end() {
    let scene = generate_scene::<f32>(
        &SceneConfig {
            object_count: (1, 2),
            rng_seed: 21,
            ..SceneConfig::desk(32)
        },
        &RadarNoiseConfig {
            points_per_object: (6, 10),
            ..Default::default()
        },
        &CorruptionConfig {
            mode: CorruptionMode::Fog,
            severity: 0.4,
            rng_seed: 2,
        },
    );
    let cfg = ModelConfig {
        widths: vec![2, 3, 4, 5],
        decoder_width: 4,
        classifier_hidden: 6,
        target_count: 24,
        ..ModelConfig::desk64()
    };
    let model: Stage1Model<f32> = Stage1Model::new(&cfg, 3).unwrap();

    let stack = predict_stage1(&model, &scene).unwrap();
    for pix in 0..32 * 32 {
        let s: f32 = (0..stack.n_classes()).map(|c| stack.channel(c)[pix]).sum();
        assert!((s - 1.0).abs() < 1e-4, "pixel {pix} sums to {s}");
    }

    let masker = RegionGrowMasker::default();
    let (m_nr, _) = stage2_run(&scene, &model, &masker, 0.5).unwrap();
    m_nr.validate_unit_range().unwrap();
}

#[test]
fn f32_mask_algebra_stays_in_unit_range() {
    let legend = class_legend();
    let mut init: MaskStack<f32> = MaskStack::zeros(legend.clone(), 2, 2);
    init.channel_mut(0).copy_from_slice(&[1.0, 0.0, 0.7, 0.2]);
    init.channel_mut(8).copy_from_slice(&[0.0, 1.0, 0.6, 0.1]);
    init.channel_mut(3).copy_from_slice(&[0.2, 0.9, 0.1, 0.8]);
    let mut sam: MaskStack<f32> = MaskStack::zeros(legend, 2, 2);
    sam.channel_mut(3).copy_from_slice(&[1.0, 1.0, 0.5, 0.25]);
    let nr = noise_reduce(&sam, &init, 0.5).unwrap();
    nr.validate_unit_range().unwrap();
    // pixel 0: noise=1 erases the pseudo-mask, init value survives
    assert_eq!(nr.channel(3)[0], 0.2);
}

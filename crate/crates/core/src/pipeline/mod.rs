//! End-to-end orchestration: stage-1 fusion model, stage-2 pseudo-mask
//! generation with noise reduction, stage-3 dual-encoder segmentation over
//! inpainted images, training, evaluation, and ablation drivers.

mod ablation;
mod train;

pub use ablation::{run_ablation, AblationComponents, AblationKind, AblationReport, ArmResult};
pub use train::{
    corpus_with_images, evaluate_predictor, prepare_inpainted_set, train_stage1, train_stage3,
    EvalOutcome, LogRecord, TrainConfig, TrainLog,
};

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::checkpoint::{find_entry, read_checkpoint, write_checkpoint, CheckpointEntry};
use crate::error::{Error, Result};
use crate::fusion::{CafLevel, ImageEncoder, LevelFeatures, MaskDecoder};
use crate::image::Image;
use crate::inpaint::{
    iterative_inpaint, mask_ordering, InpaintConfig, Inpainter, PromptTable,
};
use crate::mask_ops::{noise_reduce, rasterize, BinaryMask, MaskStack, PromptLabel};
use crate::numerics::{Binder, Linear, Param, Tape, Tensor};
use crate::prompt_masker::{PromptMasker, SkippedPrompt};
use crate::radar::{
    project_point, sample_or_pad, PointClassifier, PointEncoder, SampledPoints,
};
use crate::scalar::Scalar;
use crate::synth::Scene;

/// Fixed salt so evaluation-time point sampling is independent of epoch.
const EVAL_SAMPLE_SALT: u64 = 0x45564131;
/// Salt for stage-2 sampling during mask generation.
const STAGE2_SAMPLE_SALT: u64 = 0x53544132;

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(29);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 31)
}

/// Shape hyperparameters shared by both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    /// Channel widths of the four pyramid levels.
    pub widths: Vec<usize>,
    pub decoder_width: usize,
    pub classifier_hidden: usize,
    /// Radar points sampled (or zero-padded) per frame.
    pub target_count: usize,
    pub radar_enabled: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for 64×64 scenes.
    pub fn desk64() -> Self {
        ModelConfig {
            n_classes: crate::synth::N_CLASSES,
            widths: vec![4, 8, 16, 32],
            decoder_width: 16,
            classifier_hidden: 32,
            target_count: 1000,
            radar_enabled: true,
        }
    }

    /// Full-scale widths for 320×320 runs.
    pub fn full320() -> Self {
        ModelConfig {
            widths: vec![16, 32, 64, 128],
            ..ModelConfig::desk64()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 {
            return Err(Error::InvalidConfig {
                what: "model config",
                why: format!("need 4 pyramid widths, got {}", self.widths.len()),
            });
        }
        if self.n_classes < 3 || self.target_count == 0 {
            return Err(Error::InvalidConfig {
                what: "model config",
                why: "need at least 3 classes and a positive target_count".into(),
            });
        }
        Ok(())
    }
}

/// Stage-1 fusion model: image pyramid + point encoder + per-level
/// cross-attention + mask decoder + point classifier.
#[derive(Clone, Debug)]
pub struct Stage1Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub image_encoder: ImageEncoder<F>,
    pub point_encoder: PointEncoder<F>,
    pub caf: Vec<CafLevel<F>>,
    pub decoder: MaskDecoder<F>,
    pub classifier: PointClassifier<F>,
}

impl<F: Scalar> Stage1Model<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_encoder = ImageEncoder::new("img_enc", &cfg.widths, &mut rng);
        let point_encoder = PointEncoder::new("pt_enc", &cfg.widths, &mut rng);
        let caf = (0..4)
            .map(|i| CafLevel::new(&format!("caf{}", i + 1), cfg.widths[i], &mut rng))
            .collect();
        let decoder = MaskDecoder::new("decoder", &cfg.widths, cfg.decoder_width, cfg.n_classes, &mut rng);
        let classifier = PointClassifier::new(
            "classifier",
            cfg.widths[3],
            cfg.classifier_hidden,
            cfg.n_classes,
            &mut rng,
        );
        Ok(Stage1Model {
            cfg: cfg.clone(),
            image_encoder,
            point_encoder,
            caf,
            decoder,
            classifier,
        })
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut p = self.image_encoder.params();
        p.extend(self.point_encoder.params());
        for level in &self.caf {
            p.extend(level.params());
        }
        p.extend(self.decoder.params());
        p.extend(self.classifier.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p = self.image_encoder.params_mut();
        p.extend(self.point_encoder.params_mut());
        for level in &mut self.caf {
            p.extend(level.params_mut());
        }
        p.extend(self.decoder.params_mut());
        p.extend(self.classifier.params_mut());
        p
    }

    /// Full differentiable forward pass: per-pixel class probabilities
    /// (`(H·W)×C`) and per-point class probabilities.
    pub fn forward(
        &self,
        binder: &mut Binder<'_, F>,
        image: &Tensor<F>,
        h: usize,
        w: usize,
        sampled: &SampledPoints<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let img_levels = self.image_encoder.forward(binder, image, h, w)?;
        let radar_taps = self.point_encoder.forward(binder, sampled)?;
        let n_valid = sampled.valid_count();
        let mut fused = Vec::with_capacity(4);
        for i in 0..4 {
            let f = self.caf[i].fuse(binder, &img_levels[i].features, &radar_taps[i], n_valid)?;
            fused.push(LevelFeatures {
                features: f,
                h: img_levels[i].h,
                w: img_levels[i].w,
            });
        }
        let mask = self.decoder.forward(binder, &fused, h, w)?;
        let probs = self.classifier.forward(binder, &radar_taps[3], &sampled.valid)?;
        Ok((mask, probs))
    }
}

/// All-invalid placeholder for radar-free forward passes.
pub fn empty_sampled<F: Scalar>() -> SampledPoints<F> {
    SampledPoints {
        matrix: vec![F::zero(); crate::radar::POINT_FEATURES],
        target_count: 1,
        valid: vec![false],
        source_indices: vec![None],
    }
}

/// Sample a scene's radar frame for the model, honoring `radar_enabled`.
pub fn sample_scene_points<F: Scalar>(
    model_cfg: &ModelConfig,
    scene: &Scene<F>,
    sample_seed: u64,
) -> Result<SampledPoints<F>> {
    if model_cfg.radar_enabled {
        sample_or_pad(&scene.radar, model_cfg.target_count, sample_seed)
    } else {
        Ok(empty_sampled())
    }
}

/// Run stage 1 on a scene, returning the initial mask stack and the
/// per-point class probability rows (row-major, `target_count × C`).
pub fn stage1_forward<F: Scalar>(
    model: &Stage1Model<F>,
    scene: &Scene<F>,
    sample_seed: u64,
) -> Result<(MaskStack<F>, Vec<F>, SampledPoints<F>)> {
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let sampled = sample_scene_points(&model.cfg, scene, sample_seed)?;
    let image = scene.image.to_tensor()?;
    let (mask, probs) = model.forward(
        &mut binder,
        &image,
        scene.image.height,
        scene.image.width,
        &sampled,
    )?;
    let stack = MaskStack::from_pixel_major(
        scene.gt.legend.clone(),
        scene.image.height,
        scene.image.width,
        mask.data(),
    )?;
    Ok((stack, probs.data().to_vec(), sampled))
}

/// Stage-1 inference with the evaluation-time sampling seed.
pub fn predict_stage1<F: Scalar>(model: &Stage1Model<F>, scene: &Scene<F>) -> Result<MaskStack<F>> {
    let (stack, _, _) = stage1_forward(model, scene, mix_seed(EVAL_SAMPLE_SALT, scene.seed, 0))?;
    Ok(stack)
}

// ── Stage 2 ────────────────────────────────────────────────────────────

/// What stage 2 observed while generating pseudo-masks.
#[derive(Clone, Debug, Default)]
pub struct Stage2Report {
    pub skipped: Vec<SkippedPrompt>,
    /// Masks dropped because no prompt landed inside them.
    pub dropped_masks: usize,
    /// True when no prompt produced a mask at all (the result falls back to
    /// the clamped initial stack).
    pub all_prompts_skipped: bool,
}

/// Stage-2 pipeline: project sampled radar points, prompt the masker,
/// class-label each pseudo-mask from the point classifier, rasterize, and
/// denoise against the stage-1 prediction.
pub fn stage2_run<F: Scalar>(
    scene: &Scene<F>,
    model: &Stage1Model<F>,
    masker: &dyn PromptMasker<F>,
    mask_threshold: f64,
) -> Result<(MaskStack<F>, Stage2Report)> {
    let sample_seed = mix_seed(STAGE2_SAMPLE_SALT, scene.seed, 0);
    let (m_init, prob_rows, sampled) = stage1_forward(model, scene, sample_seed)?;
    let n_classes = model.cfg.n_classes;

    let mut report = Stage2Report::default();
    let mut prompts = Vec::new();
    let mut prompt_labels: Vec<PromptLabel<F>> = Vec::new();
    for (row, valid) in sampled.valid.iter().enumerate() {
        if !valid {
            continue;
        }
        let src = sampled.source_indices[row].expect("valid row has a source");
        let proj = project_point(&scene.radar.points[src], &scene.camera);
        if !proj.in_view {
            report.skipped.push(SkippedPrompt {
                index: row,
                u: proj.u,
                v: proj.v,
                reason: "projection outside the image".into(),
            });
            continue;
        }
        prompts.push((proj.u, proj.v));
        prompt_labels.push(PromptLabel {
            u: proj.u.floor() as usize,
            v: proj.v.floor() as usize,
            probs: prob_rows[row * n_classes..(row + 1) * n_classes].to_vec(),
        });
    }

    let outcome = masker.masks_for_prompts(&scene.image, &prompts)?;
    report.skipped.extend(outcome.skipped);

    let mut classified = Vec::new();
    for mask in outcome.masks {
        if mask.area() == 0 {
            report.dropped_masks += 1;
            continue;
        }
        match crate::mask_ops::assign_class(&mask, &prompt_labels) {
            Ok(labeled) => classified.push(labeled),
            Err(Error::Unclassifiable) => report.dropped_masks += 1,
            Err(e) => return Err(e),
        }
    }
    report.all_prompts_skipped = prompts.is_empty();

    let m_sam = rasterize(&classified, &m_init.legend, m_init.height, m_init.width)?;
    let m_nr = noise_reduce(&m_sam, &m_init, F::of_f64(mask_threshold))?;
    Ok((m_nr, report))
}

// ── Stage 3 ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionVariant {
    Addition,
    Gated,
    Concatenation,
}

impl FusionVariant {
    pub fn name(&self) -> &'static str {
        match self {
            FusionVariant::Addition => "addition",
            FusionVariant::Gated => "gated",
            FusionVariant::Concatenation => "concatenation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(FusionVariant::Addition),
            "gated" => Ok(FusionVariant::Gated),
            "concatenation" => Ok(FusionVariant::Concatenation),
            other => Err(Error::InvalidConfig {
                what: "fusion variant",
                why: format!("unknown variant `{other}`"),
            }),
        }
    }

    pub fn all() -> Vec<FusionVariant> {
        vec![
            FusionVariant::Addition,
            FusionVariant::Gated,
            FusionVariant::Concatenation,
        ]
    }

    fn code(&self) -> f64 {
        match self {
            FusionVariant::Addition => 0.0,
            FusionVariant::Gated => 1.0,
            FusionVariant::Concatenation => 2.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        match v as i64 {
            0 => Ok(FusionVariant::Addition),
            1 => Ok(FusionVariant::Gated),
            2 => Ok(FusionVariant::Concatenation),
            other => Err(Error::InvalidConfig {
                what: "fusion variant code",
                why: other.to_string(),
            }),
        }
    }
}

/// Per-level fusion parameters, present only for the variant that needs
/// them.
#[derive(Clone, Debug)]
pub enum FusionParams<F: Scalar> {
    Addition,
    /// Per-channel gate logits, one `1×C` vector per level.
    Gated(Vec<Param<F>>),
    /// `2C → C` projections, one per level.
    Concatenation(Vec<Linear<F>>),
}

/// Stage-3 model: two encoders (original and inpainted branches), per-level
/// feature fusion, shared decoder.
#[derive(Clone, Debug)]
pub struct Stage3Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub variant: FusionVariant,
    pub encoder_orig: ImageEncoder<F>,
    pub encoder_inp: ImageEncoder<F>,
    pub fusion: FusionParams<F>,
    pub decoder: MaskDecoder<F>,
}

impl<F: Scalar> Stage3Model<F> {
    pub fn new(cfg: &ModelConfig, variant: FusionVariant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // the two branches are initialized independently
        let encoder_orig = ImageEncoder::new("enc_orig", &cfg.widths, &mut rng);
        let encoder_inp = ImageEncoder::new("enc_inp", &cfg.widths, &mut rng);
        let fusion = match variant {
            FusionVariant::Addition => FusionParams::Addition,
            FusionVariant::Gated => FusionParams::Gated(
                (0..4)
                    .map(|i| Param::zeros(format!("gate{}", i + 1), &[1, cfg.widths[i]]))
                    .collect(),
            ),
            FusionVariant::Concatenation => FusionParams::Concatenation(
                (0..4)
                    .map(|i| {
                        Linear::new(
                            &format!("fuse{}", i + 1),
                            2 * cfg.widths[i],
                            cfg.widths[i],
                            &mut rng,
                        )
                    })
                    .collect(),
            ),
        };
        let decoder = MaskDecoder::new("decoder3", &cfg.widths, cfg.decoder_width, cfg.n_classes, &mut rng);
        Ok(Stage3Model {
            cfg: cfg.clone(),
            variant,
            encoder_orig,
            encoder_inp,
            fusion,
            decoder,
        })
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut p = self.encoder_orig.params();
        p.extend(self.encoder_inp.params());
        match &self.fusion {
            FusionParams::Addition => {}
            FusionParams::Gated(gates) => p.extend(gates.iter()),
            FusionParams::Concatenation(projs) => {
                for l in projs {
                    p.extend(l.params());
                }
            }
        }
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p = self.encoder_orig.params_mut();
        p.extend(self.encoder_inp.params_mut());
        match &mut self.fusion {
            FusionParams::Addition => {}
            FusionParams::Gated(gates) => p.extend(gates.iter_mut()),
            FusionParams::Concatenation(projs) => {
                for l in projs {
                    p.extend(l.params_mut());
                }
            }
        }
        p.extend(self.decoder.params_mut());
        p
    }

    /// Dual-encoder forward: encode both images, fuse per level by the
    /// configured variant, decode.
    pub fn forward(
        &self,
        binder: &mut Binder<'_, F>,
        original: &Tensor<F>,
        inpainted: &Tensor<F>,
        h: usize,
        w: usize,
    ) -> Result<Tensor<F>> {
        let a = self.encoder_orig.forward(binder, original, h, w)?;
        let b = self.encoder_inp.forward(binder, inpainted, h, w)?;
        let mut fused = Vec::with_capacity(4);
        for i in 0..4 {
            let rows = a[i].features.shape()[0];
            let f = match &self.fusion {
                FusionParams::Addition => a[i].features.add(&b[i].features)?,
                FusionParams::Gated(gates) => {
                    let gate = binder.bind(&gates[i])?.sigmoid()?;
                    let ga = gate.broadcast_rows(rows)?;
                    let gb = gate.neg()?.add_scalar(F::one())?.broadcast_rows(rows)?;
                    a[i].features.mul(&ga)?.add(&b[i].features.mul(&gb)?)?
                }
                FusionParams::Concatenation(projs) => {
                    let cat = Tensor::concat_cols(&[&a[i].features, &b[i].features])?;
                    projs[i].forward(binder, &cat)?
                }
            };
            fused.push(LevelFeatures {
                features: f,
                h: a[i].h,
                w: a[i].w,
            });
        }
        self.decoder.forward(binder, &fused, h, w)
    }
}

/// Stage-3 generation settings: the inpaint controls, the class→prompt
/// table, and the threshold that binarizes denoised channels into inpaint
/// regions.
#[derive(Clone, Debug)]
pub struct InpaintSettings {
    pub config: InpaintConfig,
    pub prompts: PromptTable,
    pub channel_threshold: f64,
}

impl InpaintSettings {
    pub fn default_for_legend(legend: &[String]) -> Self {
        InpaintSettings {
            config: InpaintConfig::default(),
            prompts: PromptTable::default_for_legend(legend),
            channel_threshold: 0.5,
        }
    }
}

/// Binarize the object channels of a denoised stack into per-class inpaint
/// masks (one request per class channel), ordered for the fold.
pub fn masks_from_stack<F: Scalar>(stack: &MaskStack<F>, threshold: f64) -> Vec<BinaryMask> {
    let thr = F::of_f64(threshold);
    let mut masks = Vec::new();
    for c in 1..stack.n_classes() - 1 {
        let chan = stack.channel(c);
        let data: Vec<bool> = chan.iter().map(|v| *v >= thr).collect();
        if data.iter().any(|&b| b) {
            masks.push(BinaryMask {
                width: stack.width,
                height: stack.height,
                data,
                class_index: Some(c),
                provenance: Vec::new(),
            });
        }
    }
    let order = mask_ordering(&masks);
    order.into_iter().map(|i| masks[i].clone()).collect()
}

/// Produce the inpainted companion image for a scene from its denoised
/// stack. The generator seed mixes the configured seed with the scene seed
/// so scenes are independent but reproducible.
pub fn inpainted_image<F: Scalar>(
    scene: &Scene<F>,
    m_nr: &MaskStack<F>,
    settings: &InpaintSettings,
    inpainter: &dyn Inpainter<F>,
) -> Result<Image<F>> {
    let masks = masks_from_stack(m_nr, settings.channel_threshold);
    let config = InpaintConfig {
        rng_seed: mix_seed(settings.config.rng_seed, scene.seed, 17),
        ..settings.config
    };
    iterative_inpaint(&scene.image, &masks, &m_nr.legend, &settings.prompts, inpainter, &config)
}

/// Full three-stage inference for one scene: stage-1 masks, stage-2
/// denoised pseudo-masks, inpainting, stage-3 dual-encoder decode.
pub fn predict_stage3<F: Scalar>(
    scene: &Scene<F>,
    stage1: &Stage1Model<F>,
    stage3: &Stage3Model<F>,
    masker: &dyn PromptMasker<F>,
    inpainter: &dyn Inpainter<F>,
    settings: &InpaintSettings,
    mask_threshold: f64,
) -> Result<(MaskStack<F>, Image<F>)> {
    let (m_nr, _report) = stage2_run(scene, stage1, masker, mask_threshold)?;
    let inp = inpainted_image(scene, &m_nr, settings, inpainter)?;
    let tape = Tape::new();
    let mut binder = Binder::new(&tape);
    let mask = stage3.forward(
        &mut binder,
        &scene.image.to_tensor()?,
        &inp.to_tensor()?,
        scene.image.height,
        scene.image.width,
    )?;
    let stack = MaskStack::from_pixel_major(
        scene.gt.legend.clone(),
        scene.image.height,
        scene.image.width,
        mask.data(),
    )?;
    Ok((stack, inp))
}

// ── Checkpointing ──────────────────────────────────────────────────────

fn meta_entries(cfg: &ModelConfig, kind: f64) -> Vec<CheckpointEntry> {
    vec![
        CheckpointEntry::scalar("meta.kind", kind),
        CheckpointEntry::scalar("meta.n_classes", cfg.n_classes as f64),
        CheckpointEntry::vector("meta.widths", cfg.widths.iter().map(|&w| w as f64).collect()),
        CheckpointEntry::scalar("meta.decoder_width", cfg.decoder_width as f64),
        CheckpointEntry::scalar("meta.classifier_hidden", cfg.classifier_hidden as f64),
        CheckpointEntry::scalar("meta.target_count", cfg.target_count as f64),
        CheckpointEntry::scalar("meta.radar_enabled", if cfg.radar_enabled { 1.0 } else { 0.0 }),
    ]
}

fn cfg_from_meta(entries: &[CheckpointEntry], path: &Path) -> Result<ModelConfig> {
    let scalar = |name: &str| -> Result<f64> { Ok(find_entry(entries, name, path)?.data[0]) };
    Ok(ModelConfig {
        n_classes: scalar("meta.n_classes")? as usize,
        widths: find_entry(entries, "meta.widths", path)?
            .data
            .iter()
            .map(|&w| w as usize)
            .collect(),
        decoder_width: scalar("meta.decoder_width")? as usize,
        classifier_hidden: scalar("meta.classifier_hidden")? as usize,
        target_count: scalar("meta.target_count")? as usize,
        radar_enabled: scalar("meta.radar_enabled")? != 0.0,
    })
}

fn param_entries<F: Scalar>(params: Vec<&Param<F>>) -> Vec<CheckpointEntry> {
    params
        .into_iter()
        .map(|p| CheckpointEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}

fn load_params<F: Scalar>(
    params: Vec<&mut Param<F>>,
    entries: &[CheckpointEntry],
    path: &Path,
) -> Result<()> {
    for p in params {
        let e = find_entry(entries, &p.name, path)?;
        if e.shape != p.shape {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                lhs: p.shape.clone(),
                rhs: e.shape.clone(),
            });
        }
        p.data = e.data.iter().map(|&v| F::of_f64(v)).collect();
    }
    Ok(())
}

pub fn save_stage1<F: Scalar>(path: &Path, model: &Stage1Model<F>) -> Result<()> {
    let mut entries = meta_entries(&model.cfg, 1.0);
    entries.extend(param_entries(model.params()));
    write_checkpoint(path, &entries)
}

pub fn load_stage1<F: Scalar>(path: &Path) -> Result<Stage1Model<F>> {
    let entries = read_checkpoint(path)?;
    if find_entry(&entries, "meta.kind", path)?.data[0] != 1.0 {
        return Err(Error::format(path, "checkpoint", "not a stage-1 checkpoint"));
    }
    let cfg = cfg_from_meta(&entries, path)?;
    let mut model = Stage1Model::new(&cfg, 0)?;
    load_params(model.params_mut(), &entries, path)?;
    Ok(model)
}

pub fn save_stage3<F: Scalar>(path: &Path, model: &Stage3Model<F>) -> Result<()> {
    let mut entries = meta_entries(&model.cfg, 3.0);
    entries.push(CheckpointEntry::scalar("meta.variant", model.variant.code()));
    entries.extend(param_entries(model.params()));
    write_checkpoint(path, &entries)
}

pub fn load_stage3<F: Scalar>(path: &Path) -> Result<Stage3Model<F>> {
    let entries = read_checkpoint(path)?;
    if find_entry(&entries, "meta.kind", path)?.data[0] != 3.0 {
        return Err(Error::format(path, "checkpoint", "not a stage-3 checkpoint"));
    }
    let cfg = cfg_from_meta(&entries, path)?;
    let variant = FusionVariant::from_code(find_entry(&entries, "meta.variant", path)?.data[0])?;
    let mut model = Stage3Model::new(&cfg, variant, 0)?;
    load_params(model.params_mut(), &entries, path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_masker::{EmptyMasker, RegionGrowMasker};
    use crate::synth::{
        generate_scene, CorruptionConfig, RadarNoiseConfig, SceneConfig,
    };

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            widths: vec![2, 3, 4, 5],
            decoder_width: 4,
            classifier_hidden: 6,
            target_count: 64,
            ..ModelConfig::desk64()
        }
    }

    fn scene_of(seed: u64) -> Scene<f64> {
        generate_scene(
            &SceneConfig { rng_seed: seed, ..SceneConfig::desk(32) },
            &RadarNoiseConfig::default(),
            &CorruptionConfig::none(),
        )
    }

    #[test]
    fn stage1_output_rows_sum_to_one() {
        let model: Stage1Model<f64> = Stage1Model::new(&tiny_cfg(), 3).unwrap();
        let scene = scene_of(1);
        let (stack, probs, sampled) = stage1_forward(&model, &scene, 9).unwrap();
        let c = stack.n_classes();
        for pix in 0..32 * 32 {
            let s: f64 = (0..c).map(|ch| stack.channel(ch)[pix]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for row in 0..sampled.target_count {
            let s: f64 = probs[row * c..(row + 1) * c].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_radar_scene_equals_camera_only_path() {
        let model: Stage1Model<f64> = Stage1Model::new(&tiny_cfg(), 3).unwrap();
        let mut scene = scene_of(2);
        scene.radar = crate::radar::RadarFrame::empty(0);

        let (with_radar_path, _, _) = stage1_forward(&model, &scene, 5).unwrap();
        let mut camera_cfg = tiny_cfg();
        camera_cfg.radar_enabled = false;
        let camera_model = Stage1Model { cfg: camera_cfg, ..model.clone() };
        let (camera_only, _, _) = stage1_forward(&camera_model, &scene, 5).unwrap();
        assert_eq!(with_radar_path.planes(), camera_only.planes());
    }

    #[test]
    fn stage1_checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("fusionseg-pipeline-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s1.ckpt");
        let model: Stage1Model<f64> = Stage1Model::new(&tiny_cfg(), 7).unwrap();
        save_stage1(&path, &model).unwrap();
        let back: Stage1Model<f64> = load_stage1(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        for (a, b) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
        }
        let scene = scene_of(3);
        let (m1, _, _) = stage1_forward(&model, &scene, 1).unwrap();
        let (m2, _, _) = stage1_forward(&back, &scene, 1).unwrap();
        assert_eq!(m1.planes(), m2.planes());
    }

    #[test]
    fn stage2_with_empty_radar_returns_init_object_channels() {
        let model: Stage1Model<f64> = Stage1Model::new(&tiny_cfg(), 3).unwrap();
        let mut scene = scene_of(4);
        scene.radar = crate::radar::RadarFrame::empty(0);
        let masker = RegionGrowMasker::default();
        let (m_nr, report) = stage2_run(&scene, &model, &masker, 0.5).unwrap();
        assert!(report.all_prompts_skipped);
        let (m_init, _, _) =
            stage1_forward(&model, &scene, mix_seed(STAGE2_SAMPLE_SALT, scene.seed, 0)).unwrap();
        for c in 1..m_nr.n_classes() - 1 {
            assert_eq!(m_nr.channel(c), m_init.channel(c));
        }
    }

    #[test]
    fn stage2_with_empty_masker_degenerates_like_the_empty_radar_case() {
        // an empty-mask stub yields no pseudo-masks, so the denoised stack
        // falls back to the initial object channels, exactly as when the
        // radar frame is empty
        let model: Stage1Model<f64> = Stage1Model::new(&tiny_cfg(), 3).unwrap();
        let scene = scene_of(5);
        let (with_stub, report) = stage2_run(&scene, &model, &EmptyMasker, 0.5).unwrap();
        assert!(report.dropped_masks > 0);
        let (m_init, _, _) =
            stage1_forward(&model, &scene, mix_seed(STAGE2_SAMPLE_SALT, scene.seed, 0)).unwrap();
        for c in 1..with_stub.n_classes() - 1 {
            assert_eq!(with_stub.channel(c), m_init.channel(c));
        }
    }

    #[test]
    fn stage3_concatenation_output_matches_stack_shape() {
        let model: Stage3Model<f64> =
            Stage3Model::new(&tiny_cfg(), FusionVariant::Concatenation, 11).unwrap();
        let scene = scene_of(6);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let img = scene.image.to_tensor().unwrap();
        let out = model.forward(&mut binder, &img, &img, 32, 32).unwrap();
        assert_eq!(out.shape(), &[32 * 32, 9]);
    }

    #[test]
    fn stage3_addition_with_zeroed_inpainted_branch_equals_single_branch() {
        let mut model: Stage3Model<f64> =
            Stage3Model::new(&tiny_cfg(), FusionVariant::Addition, 11).unwrap();
        for p in model.encoder_inp.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let scene = scene_of(7);
        let img = scene.image.to_tensor().unwrap();

        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let dual = model.forward(&mut binder, &img, &img, 32, 32).unwrap();

        // single-branch decode of the original image
        let tape2 = Tape::new();
        let mut binder2 = Binder::new(&tape2);
        let levels = model.encoder_orig.forward(&mut binder2, &img, 32, 32).unwrap();
        let single = model.decoder.forward(&mut binder2, &levels, 32, 32).unwrap();
        assert_eq!(dual.data(), single.data());
    }

    #[test]
    fn stage3_checkpoint_round_trip_per_variant() {
        let dir = std::env::temp_dir().join("fusionseg-pipeline-test");
        std::fs::create_dir_all(&dir).unwrap();
        for variant in FusionVariant::all() {
            let path = dir.join(format!("s3-{}.ckpt", variant.name()));
            let model: Stage3Model<f64> = Stage3Model::new(&tiny_cfg(), variant, 13).unwrap();
            save_stage3(&path, &model).unwrap();
            let back: Stage3Model<f64> = load_stage3(&path).unwrap();
            assert_eq!(back.variant, variant);
            for (a, b) in model.params().iter().zip(back.params().iter()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.data, b.data);
            }
        }
    }

    #[test]
    fn masks_from_stack_binarizes_object_channels_only() {
        let legend = crate::synth::class_legend();
        let mut stack: MaskStack<f64> = MaskStack::zeros(legend, 4, 4);
        // background fully on; boat channel (5) half on; water on
        for i in 0..16 {
            stack.channel_mut(0)[i] = 1.0;
        }
        for i in 0..8 {
            stack.channel_mut(5)[i] = 0.9;
        }
        let masks = masks_from_stack(&stack, 0.5);
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].class_index, Some(5));
        assert_eq!(masks[0].area(), 8);
    }
}

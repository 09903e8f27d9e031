use crate::error::{Error, Result};
use crate::inpaint::Inpainter;
use crate::prompt_masker::PromptMasker;
use crate::scalar::Scalar;
use crate::synth::{Corpus, Split};

use super::train::{
    corpus_with_images, prepare_inpainted_set, train_stage1, train_stage3, TrainConfig,
};
use super::{FusionVariant, InpaintSettings, ModelConfig};

/// Which factor an ablation varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    /// Radar point sampling budget: 100 / 200 / 1000 points.
    Sampling,
    /// Stage-3 feature fusion: addition / gated / concatenation.
    FusionVariants,
    /// Dual-encoder fusion versus feeding only the inpainted image.
    NoInpaintFusion,
    /// Camera-only versus fusion versus fusion+inpainting.
    Stages,
}

impl AblationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::Sampling => "sampling",
            AblationKind::FusionVariants => "fusion-variant",
            AblationKind::NoInpaintFusion => "no-inpaint-fusion",
            AblationKind::Stages => "stages",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sampling" => Ok(AblationKind::Sampling),
            "fusion-variant" => Ok(AblationKind::FusionVariants),
            "no-inpaint-fusion" => Ok(AblationKind::NoInpaintFusion),
            "stages" => Ok(AblationKind::Stages),
            other => Err(Error::InvalidConfig {
                what: "ablation kind",
                why: format!("unknown kind `{other}`"),
            }),
        }
    }
}

/// One trained arm: its name, the seed, and the final validation mIoU.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub kind: AblationKind,
    pub results: Vec<ArmResult>,
}

impl AblationReport {
    /// Arm names in first-seen order.
    pub fn arms(&self) -> Vec<String> {
        let mut names = Vec::new();
        for r in &self.results {
            if !names.contains(&r.arm) {
                names.push(r.arm.clone());
            }
        }
        names
    }

    /// Mean and standard deviation of an arm's per-seed mIoU.
    pub fn arm_stats(&self, arm: &str) -> Option<(f64, f64)> {
        let values: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.val_miou)
            .collect();
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        Some((mean, var.sqrt()))
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("# ablation: {}\n", self.kind.name());
        let arm_w = self.arms().iter().map(|a| a.len()).max().unwrap_or(3).max(3);
        out.push_str(&format!("{:<arm_w$}  {:>8}  {:>8}  seeds\n", "arm", "mean", "sd"));
        for arm in self.arms() {
            let (mean, sd) = self.arm_stats(&arm).unwrap();
            let n = self.results.iter().filter(|r| r.arm == arm).count();
            out.push_str(&format!("{arm:<arm_w$}  {mean:>8.4}  {sd:>8.4}  {n}\n"));
        }
        out
    }

    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!("arm={} seed={} miou={}\n", r.arm, r.seed, r.val_miou));
        }
        for arm in self.arms() {
            let (mean, sd) = self.arm_stats(&arm).unwrap();
            out.push_str(&format!("arm={arm} mean={mean} sd={sd}\n"));
        }
        out
    }
}

/// Pluggable stage-2/3 components an ablation needs.
pub struct AblationComponents<'a, F: Scalar> {
    pub masker: &'a dyn PromptMasker<F>,
    pub inpainter: &'a dyn Inpainter<F>,
    pub settings: InpaintSettings,
    pub mask_threshold: f64,
    pub workers: usize,
}

fn require_val<F: Scalar>(corpus: &Corpus<F>) -> Result<()> {
    if corpus.split_indices(Split::Val).is_empty() {
        return Err(Error::InvalidConfig {
            what: "corpus",
            why: "ablations need a non-empty val split".into(),
        });
    }
    Ok(())
}

fn final_miou(log: &super::train::TrainLog, what: &str) -> Result<f64> {
    log.final_val_miou().ok_or_else(|| Error::InvalidConfig {
        what: "ablation",
        why: format!("{what}: no validation mIoU recorded"),
    })
}

/// Train and evaluate every arm of an ablation, identically except for the
/// ablated factor. Deterministic per (corpus, seeds).
pub fn run_ablation<F: Scalar>(
    corpus: &Corpus<F>,
    kind: AblationKind,
    seeds: &[u64],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    components: &AblationComponents<'_, F>,
) -> Result<AblationReport> {
    require_val(corpus)?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig {
            what: "ablation",
            why: "need at least one seed".into(),
        });
    }
    let mut results = Vec::new();
    for &seed in seeds {
        let seeded = TrainConfig { seed, ..*train_cfg };
        match kind {
            AblationKind::Sampling => {
                for &target in &[100usize, 200, 1000] {
                    let cfg = ModelConfig {
                        target_count: target,
                        radar_enabled: true,
                        ..model_cfg.clone()
                    };
                    let (_, log) = train_stage1(corpus, &cfg, &seeded)?;
                    results.push(ArmResult {
                        arm: target.to_string(),
                        seed,
                        val_miou: final_miou(&log, "sampling arm")?,
                    });
                }
            }
            AblationKind::FusionVariants => {
                let fusion_cfg = ModelConfig { radar_enabled: true, ..model_cfg.clone() };
                let (stage1, _) = train_stage1(corpus, &fusion_cfg, &seeded)?;
                let inpainted = prepare_inpainted_set(
                    corpus,
                    &stage1,
                    components.masker,
                    components.inpainter,
                    &components.settings,
                    components.mask_threshold,
                    &[Split::Train, Split::Val],
                    components.workers,
                )?;
                for variant in FusionVariant::all() {
                    let (_, log) = train_stage3(corpus, &inpainted, &fusion_cfg, variant, &seeded)?;
                    results.push(ArmResult {
                        arm: variant.name().to_string(),
                        seed,
                        val_miou: final_miou(&log, "fusion-variant arm")?,
                    });
                }
            }
            AblationKind::NoInpaintFusion => {
                let fusion_cfg = ModelConfig { radar_enabled: true, ..model_cfg.clone() };
                let (stage1, _) = train_stage1(corpus, &fusion_cfg, &seeded)?;
                let inpainted = prepare_inpainted_set(
                    corpus,
                    &stage1,
                    components.masker,
                    components.inpainter,
                    &components.settings,
                    components.mask_threshold,
                    &[Split::Train, Split::Val],
                    components.workers,
                )?;
                let (_, log) = train_stage3(
                    corpus,
                    &inpainted,
                    &fusion_cfg,
                    FusionVariant::Concatenation,
                    &seeded,
                )?;
                results.push(ArmResult {
                    arm: "fusion".to_string(),
                    seed,
                    val_miou: final_miou(&log, "fusion arm")?,
                });
                // no-fusion arm: one encoder, fed the inpainted image directly
                let inpainted_corpus = corpus_with_images(corpus, &inpainted);
                let camera_cfg = ModelConfig { radar_enabled: false, ..model_cfg.clone() };
                let (_, log) = train_stage1(&inpainted_corpus, &camera_cfg, &seeded)?;
                results.push(ArmResult {
                    arm: "no_fusion".to_string(),
                    seed,
                    val_miou: final_miou(&log, "no-fusion arm")?,
                });
            }
            AblationKind::Stages => {
                let camera_cfg = ModelConfig { radar_enabled: false, ..model_cfg.clone() };
                let (_, log) = train_stage1(corpus, &camera_cfg, &seeded)?;
                results.push(ArmResult {
                    arm: "camera_only".to_string(),
                    seed,
                    val_miou: final_miou(&log, "camera-only arm")?,
                });

                let fusion_cfg = ModelConfig { radar_enabled: true, ..model_cfg.clone() };
                let (stage1, log) = train_stage1(corpus, &fusion_cfg, &seeded)?;
                results.push(ArmResult {
                    arm: "fusion".to_string(),
                    seed,
                    val_miou: final_miou(&log, "fusion arm")?,
                });

                let inpainted = prepare_inpainted_set(
                    corpus,
                    &stage1,
                    components.masker,
                    components.inpainter,
                    &components.settings,
                    components.mask_threshold,
                    &[Split::Train, Split::Val],
                    components.workers,
                )?;
                let (_, log) = train_stage3(
                    corpus,
                    &inpainted,
                    &fusion_cfg,
                    FusionVariant::Concatenation,
                    &seeded,
                )?;
                results.push(ArmResult {
                    arm: "fusion_inpaint".to_string(),
                    seed,
                    val_miou: final_miou(&log, "fusion+inpaint arm")?,
                });
            }
        }
    }
    Ok(AblationReport { kind, results })
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::inpaint::Inpainter;
use crate::losses::{alpha_from_frequencies, dice_loss, focal_loss, ClassSubset, ClassWeights, IouAccumulator};
use crate::mask_ops::MaskStack;
use crate::numerics::{Binder, Tape, Tensor};
use crate::optim::{AdamW, LinearSchedule};
use crate::prompt_masker::PromptMasker;
use crate::scalar::Scalar;
use crate::synth::{Corpus, Scene, Split};

use super::{
    inpainted_image, mix_seed, sample_scene_points, stage2_run, FusionVariant, InpaintSettings,
    ModelConfig, Stage1Model, Stage3Model,
};

/// Optimization settings; the learning rate decays linearly from
/// `lr_initial` to `lr_min` over all steps.
///
/// The segmentation objective is dice plus `lambda_pixel_ce` times a plain
/// per-pixel cross-entropy. Channel-averaged dice alone cannot revive a
/// class whose softmax mass has collapsed (the gradient dies with the
/// probability), and a from-scratch model passes through that regime; the
/// cross-entropy term keeps rare classes trainable. Both terms sit under
/// `lambda_seg`, so zeroing it still freezes the whole image path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_seg: f64,
    pub lambda_cls: f64,
    pub lambda_pixel_ce: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 5e-4,
            lr_min: 1e-6,
            epochs: 12,
            batch_size: 8,
            lambda_seg: 1.0,
            lambda_cls: 1.0,
            lambda_pixel_ce: 0.3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_initial > 0.0
            && self.lr_min > 0.0
            && self.lr_initial >= self.lr_min
            && self.epochs > 0
            && self.batch_size > 0
            && self.lambda_seg >= 0.0
            && self.lambda_cls >= 0.0
            && self.lambda_pixel_ce >= 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                what: "train config",
                why: format!("{self:?}"),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        l_seg: f64,
        l_cls: f64,
        lr: f64,
    },
    Epoch {
        epoch: usize,
        val_miou: Option<f64>,
    },
}

/// Line-delimited training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# train-log v1\n");
        for r in &self.records {
            match r {
                LogRecord::Step {
                    epoch,
                    step,
                    l_seg,
                    l_cls,
                    lr,
                } => out.push_str(&format!(
                    "epoch={epoch} step={step} l_seg={l_seg} l_cls={l_cls} lr={lr}\n"
                )),
                LogRecord::Epoch { epoch, val_miou } => match val_miou {
                    Some(v) => out.push_str(&format!("epoch={epoch} val_miou={v}\n")),
                    None => out.push_str(&format!("epoch={epoch} val_miou=absent\n")),
                },
            }
        }
        out
    }

    pub fn final_val_miou(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Epoch { val_miou, .. } => *val_miou,
            _ => None,
        })
    }
}

fn to_divergence(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            what: format!("non-finite value in `{op}`"),
        },
        other => other,
    }
}

fn mean_of_terms<F: Scalar>(terms: &[Tensor<F>]) -> Result<Tensor<F>> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    acc.scale(F::of_f64(1.0 / terms.len() as f64))
}

/// Segmentation objective for one scene: dice plus the cross-entropy
/// stabilizer (focal with γ=0 and unit alphas is plain cross-entropy).
fn seg_objective<F: Scalar>(
    mask: &Tensor<F>,
    scene: &Scene<F>,
    lambda_pixel_ce: f64,
) -> Result<Tensor<F>> {
    let gt = scene.gt.to_pixel_major_tensor()?;
    let dice = dice_loss(mask, &gt)?;
    if lambda_pixel_ce == 0.0 {
        return Ok(dice);
    }
    let targets = scene.gt.argmax_map();
    let valid = vec![true; targets.len()];
    let ce_weights = ClassWeights {
        alpha: vec![F::one(); scene.gt.n_classes()],
        gamma: F::zero(),
    };
    let ce = focal_loss(mask, &targets, &ce_weights, &valid)?.loss;
    dice.add(&ce.scale(F::of_f64(lambda_pixel_ce))?)
}

/// Per-point class frequencies over the train split, for focal alphas.
fn point_class_weights<F: Scalar>(corpus: &Corpus<F>, train: &[usize]) -> Result<ClassWeights<F>> {
    let n = corpus.legend.len();
    let mut counts = vec![0u64; n];
    for &i in train {
        if let Some(labels) = &corpus.scenes[i].radar.labels {
            for &l in labels {
                if l < n {
                    counts[l] += 1;
                }
            }
        }
    }
    let alpha = if counts.iter().any(|&c| c > 0) {
        alpha_from_frequencies(&counts)?
    } else {
        vec![F::one(); n]
    };
    Ok(ClassWeights {
        alpha,
        gamma: F::of_f64(2.0),
    })
}

/// Train the stage-1 fusion model with the joint dice + focal objective.
/// Deterministic per seed; aborts with the offending step on divergence.
pub fn train_stage1<F: Scalar>(
    corpus: &Corpus<F>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Stage1Model<F>, TrainLog)> {
    train_cfg.validate()?;
    let train_idx = corpus.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidConfig {
            what: "corpus",
            why: "empty train split".into(),
        });
    }
    let val_idx = corpus.split_indices(Split::Val);
    let mut model = Stage1Model::new(model_cfg, train_cfg.seed)?;
    let weights = point_class_weights(corpus, &train_idx)?;

    let steps_per_epoch = train_idx.len().div_ceil(train_cfg.batch_size);
    let schedule = LinearSchedule {
        initial: train_cfg.lr_initial,
        minimum: train_cfg.lr_min,
        total_steps: steps_per_epoch * train_cfg.epochs,
    };
    let mut opt: AdamW<F> = AdamW::new(train_cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(train_cfg.seed, epoch as u64, 101));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(train_cfg.batch_size) {
            let tape = Tape::new();
            let mut binder = Binder::new(&tape);
            let mut seg_terms = Vec::with_capacity(chunk.len());
            let mut cls_terms = Vec::with_capacity(chunk.len());
            for &scene_idx in chunk {
                let scene = &corpus.scenes[scene_idx];
                let sampled = sample_scene_points(
                    model_cfg,
                    scene,
                    mix_seed(train_cfg.seed, scene.seed, epoch as u64),
                )?;
                let image = scene.image.to_tensor()?;
                let (mask, probs) = model
                    .forward(&mut binder, &image, scene.image.height, scene.image.width, &sampled)
                    .map_err(|e| to_divergence(e, global_step))?;
                seg_terms.push(
                    seg_objective(&mask, scene, train_cfg.lambda_pixel_ce)
                        .map_err(|e| to_divergence(e, global_step))?,
                );

                let labels = sampled.labels_from(&scene.radar);
                let targets: Vec<usize> = labels.iter().map(|l| l.unwrap_or(0)).collect();
                let valid: Vec<bool> = sampled
                    .valid
                    .iter()
                    .zip(labels.iter())
                    .map(|(&v, l)| v && l.is_some())
                    .collect();
                let focal = focal_loss(&probs, &targets, &weights, &valid)
                    .map_err(|e| to_divergence(e, global_step))?;
                cls_terms.push(focal.loss);
            }
            let l_seg = mean_of_terms(&seg_terms)?;
            let l_cls = mean_of_terms(&cls_terms)?;
            let total = l_seg
                .scale(F::of_f64(train_cfg.lambda_seg))?
                .add(&l_cls.scale(F::of_f64(train_cfg.lambda_cls))?)?;
            tape.backward(&total).map_err(|e| to_divergence(e, global_step))?;

            let lr = F::of_f64(schedule.lr_at(global_step));
            opt.begin_step();
            let grads: std::collections::BTreeMap<String, Vec<F>> =
                binder.grads().into_iter().collect();
            for p in model.params_mut() {
                if let Some(g) = grads.get(&p.name) {
                    opt.update(&p.name, &mut p.data, g, lr);
                }
            }
            log.records.push(LogRecord::Step {
                epoch,
                step: global_step,
                l_seg: l_seg.item().as_f64(),
                l_cls: l_cls.item().as_f64(),
                lr: lr.as_f64(),
            });
            global_step += 1;
        }

        let val_miou = if val_idx.is_empty() {
            None
        } else {
            let acc = evaluate_predictor(corpus, &val_idx, 1, |scene| {
                super::predict_stage1(&model, scene)
            })?;
            acc.mean_iou(ClassSubset::All)
        };
        log.records.push(LogRecord::Epoch { epoch, val_miou });
    }
    Ok((model, log))
}

/// Train the stage-3 dual-encoder model on precomputed inpainted images
/// (dice objective only; stage 1 stays frozen).
pub fn train_stage3<F: Scalar>(
    corpus: &Corpus<F>,
    inpainted: &[Option<Image<F>>],
    model_cfg: &ModelConfig,
    variant: FusionVariant,
    train_cfg: &TrainConfig,
) -> Result<(Stage3Model<F>, TrainLog)> {
    train_cfg.validate()?;
    let train_idx = corpus.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidConfig {
            what: "corpus",
            why: "empty train split".into(),
        });
    }
    let val_idx = corpus.split_indices(Split::Val);
    let need = |i: usize| -> Result<&Image<F>> {
        inpainted
            .get(i)
            .and_then(|o| o.as_ref())
            .ok_or(Error::InvalidConfig {
                what: "stage-3 inputs",
                why: format!("missing inpainted image for scene {i}"),
            })
    };
    let mut model = Stage3Model::new(model_cfg, variant, train_cfg.seed)?;

    let steps_per_epoch = train_idx.len().div_ceil(train_cfg.batch_size);
    let schedule = LinearSchedule {
        initial: train_cfg.lr_initial,
        minimum: train_cfg.lr_min,
        total_steps: steps_per_epoch * train_cfg.epochs,
    };
    let mut opt: AdamW<F> = AdamW::new(train_cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(train_cfg.seed, epoch as u64, 303));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(train_cfg.batch_size) {
            let tape = Tape::new();
            let mut binder = Binder::new(&tape);
            let mut seg_terms = Vec::with_capacity(chunk.len());
            for &scene_idx in chunk {
                let scene = &corpus.scenes[scene_idx];
                let inp = need(scene_idx)?;
                let mask = model
                    .forward(
                        &mut binder,
                        &scene.image.to_tensor()?,
                        &inp.to_tensor()?,
                        scene.image.height,
                        scene.image.width,
                    )
                    .map_err(|e| to_divergence(e, global_step))?;
                seg_terms.push(
                    seg_objective(&mask, scene, train_cfg.lambda_pixel_ce)
                        .map_err(|e| to_divergence(e, global_step))?,
                );
            }
            let l_seg = mean_of_terms(&seg_terms)?;
            tape.backward(&l_seg).map_err(|e| to_divergence(e, global_step))?;

            let lr = F::of_f64(schedule.lr_at(global_step));
            opt.begin_step();
            let grads: std::collections::BTreeMap<String, Vec<F>> =
                binder.grads().into_iter().collect();
            for p in model.params_mut() {
                if let Some(g) = grads.get(&p.name) {
                    opt.update(&p.name, &mut p.data, g, lr);
                }
            }
            log.records.push(LogRecord::Step {
                epoch,
                step: global_step,
                l_seg: l_seg.item().as_f64(),
                l_cls: 0.0,
                lr: lr.as_f64(),
            });
            global_step += 1;
        }

        let val_miou = if val_idx.is_empty() {
            None
        } else {
            let acc = evaluate_predictor(corpus, &val_idx, 1, |scene| {
                let inp = need(scene.index)?;
                let tape = Tape::new();
                let mut binder = Binder::new(&tape);
                let mask = model.forward(
                    &mut binder,
                    &scene.image.to_tensor()?,
                    &inp.to_tensor()?,
                    scene.image.height,
                    scene.image.width,
                )?;
                MaskStack::from_pixel_major(
                    scene.gt.legend.clone(),
                    scene.image.height,
                    scene.image.width,
                    mask.data(),
                )
            })?;
            acc.mean_iou(ClassSubset::All)
        };
        log.records.push(LogRecord::Epoch { epoch, val_miou });
    }
    Ok((model, log))
}

/// Precompute stage-2 masks and inpainted images for the given splits.
/// Scene-parallel; results sit at the scene's corpus index.
pub fn prepare_inpainted_set<F: Scalar>(
    corpus: &Corpus<F>,
    stage1: &Stage1Model<F>,
    masker: &dyn PromptMasker<F>,
    inpainter: &dyn Inpainter<F>,
    settings: &InpaintSettings,
    mask_threshold: f64,
    splits: &[Split],
    workers: usize,
) -> Result<Vec<Option<Image<F>>>> {
    let mut wanted: Vec<usize> = Vec::new();
    for &s in splits {
        wanted.extend(corpus.split_indices(s));
    }
    wanted.sort_unstable();
    let produce = |i: usize| -> Result<Image<F>> {
        let scene = &corpus.scenes[i];
        let (m_nr, _) = stage2_run(scene, stage1, masker, mask_threshold)?;
        inpainted_image(scene, &m_nr, settings, inpainter)
    };
    let mut out: Vec<Option<Image<F>>> = vec![None; corpus.scenes.len()];
    if workers <= 1 {
        for &i in &wanted {
            out[i] = Some(produce(i)?);
        }
    } else {
        let chunks: Vec<&[usize]> = wanted.chunks(wanted.len().div_ceil(workers)).collect();
        let results: Vec<Result<Vec<(usize, Image<F>)>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&i| produce(i).map(|img| (i, img)))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            for (i, img) in r? {
                out[i] = Some(img);
            }
        }
    }
    Ok(out)
}

/// Swap scene images for their companions where provided (used by the
/// inpainted-only ablation arm).
pub fn corpus_with_images<F: Scalar>(corpus: &Corpus<F>, images: &[Option<Image<F>>]) -> Corpus<F> {
    let mut out = corpus.clone();
    for (scene, replacement) in out.scenes.iter_mut().zip(images.iter()) {
        if let Some(img) = replacement {
            scene.image = img.clone();
        }
    }
    out
}

/// Evaluation outcome: the accumulated counts plus the headline means.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub accumulator: IouAccumulator,
    pub miou_all: Option<f64>,
    pub miou_targets: Option<f64>,
    pub miou_drivable: Option<f64>,
}

impl EvalOutcome {
    pub fn from_accumulator(accumulator: IouAccumulator) -> Self {
        EvalOutcome {
            miou_all: accumulator.mean_iou(ClassSubset::All),
            miou_targets: accumulator.mean_iou(ClassSubset::Targets),
            miou_drivable: accumulator.mean_iou(ClassSubset::Drivable),
            accumulator,
        }
    }
}

/// Run a predictor over the given scene indices and accumulate
/// dataset-level IoU counts. Scene-parallel when `workers > 1`; the
/// integer accumulator makes the result independent of scheduling.
pub fn evaluate_predictor<F, P>(
    corpus: &Corpus<F>,
    indices: &[usize],
    workers: usize,
    predictor: P,
) -> Result<IouAccumulator>
where
    F: Scalar,
    P: Fn(&Scene<F>) -> Result<MaskStack<F>> + Sync,
{
    let n_classes = corpus.legend.len();
    let eval_one = |i: usize| -> Result<IouAccumulator> {
        let scene = &corpus.scenes[i];
        let pred = predictor(scene)?;
        let mut acc = IouAccumulator::new(n_classes);
        acc.update(&pred.argmax_map(), &scene.gt.argmax_map());
        Ok(acc)
    };
    let mut total = IouAccumulator::new(n_classes);
    if workers <= 1 || indices.len() < 2 {
        for &i in indices {
            total.merge(&eval_one(i)?);
        }
    } else {
        let chunks: Vec<&[usize]> = indices.chunks(indices.len().div_ceil(workers)).collect();
        let results: Vec<Result<IouAccumulator>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        let mut acc = IouAccumulator::new(n_classes);
                        for &i in chunk {
                            acc.merge(&eval_one(i)?);
                        }
                        Ok(acc)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            total.merge(&r?);
        }
    }
    Ok(total)
}

//! Command implementations. Every command is deterministic given its
//! resolved configuration and seed, and writes that configuration next to
//! its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use fusionseg_core::image::write_atomic;
use fusionseg_core::inpaint::MockInpainter;
use fusionseg_core::losses::{format_iou_records, format_iou_table, ClassSubset, IouAccumulator};
use fusionseg_core::mask_ops::{export_argmax_png, read_maskstack, write_maskstack, MaskStack};
use fusionseg_core::pipeline::{
    evaluate_predictor, load_stage1, load_stage3, predict_stage1, predict_stage3, run_ablation,
    save_stage1, save_stage3, train_stage1, train_stage3, AblationComponents, AblationKind,
    FusionVariant, Stage1Model, Stage3Model,
};
use fusionseg_core::synth::{base_color, generate_corpus, read_corpus, write_corpus, Corpus, Split};
use fusionseg_core::{Error, Result};

use crate::config::RunConfig;

fn write_resolved(out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_atomic(&out_dir.join("resolved.cfg"), cfg.to_text().as_bytes())
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn palette_for(legend: &[String]) -> Vec<[u8; 3]> {
    legend
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let rgb = base_color(i.min(fusionseg_core::synth::N_CLASSES - 1));
            [
                (rgb[0] * 255.0).round() as u8,
                (rgb[1] * 255.0).round() as u8,
                (rgb[2] * 255.0).round() as u8,
            ]
        })
        .collect()
}

fn mock_inpainter(cfg: &RunConfig, legend: &[String]) -> MockInpainter {
    let mut mock = MockInpainter::new((0..legend.len()).map(base_color).collect());
    mock.noise_amplitude = cfg.noise_amplitude;
    mock
}

/// `gen`: write a synthetic corpus.
pub fn cmd_gen(
    cfg: &RunConfig,
    out: &Path,
    count: usize,
    seed: u64,
    adverse_only: bool,
    force: bool,
) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::InvalidConfig {
                what: "gen output",
                why: format!("{} is not empty (use --force to overwrite)", out.display()),
            });
        }
    }
    ensure_dir(out)?;
    let corpus_cfg = cfg.corpus_config(count, seed, adverse_only)?;
    let corpus: Corpus<f64> = generate_corpus(&corpus_cfg)?;
    write_corpus(out, &corpus)?;
    write_resolved(out, cfg)?;
    println!(
        "wrote {} scenes ({} train / {} val / {} test) to {}",
        corpus.scenes.len(),
        corpus.split_indices(Split::Train).len(),
        corpus.split_indices(Split::Val).len(),
        corpus.split_indices(Split::Test).len(),
        out.display()
    );
    Ok(())
}

/// `train --stage 1`: train the fusion (or camera-only) model.
pub fn cmd_train_stage1(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    seed: u64,
    radar: bool,
) -> Result<()> {
    ensure_dir(out)?;
    let corpus: Corpus<f64> = read_corpus(corpus_dir)?;
    let model_cfg = cfg.model_config(radar);
    let (model, log) = train_stage1(&corpus, &model_cfg, &cfg.train_config(seed))?;
    save_stage1(&out.join("stage1.ckpt"), &model)?;
    write_atomic(&out.join("train.log"), log.to_text().as_bytes())?;
    write_resolved(out, cfg)?;
    match log.final_val_miou() {
        Some(v) => println!("stage-1 training done; final val mIoU {v:.4}"),
        None => println!("stage-1 training done (no val split)"),
    }
    Ok(())
}

/// `train --stage 3`: freeze a stage-1 checkpoint, generate denoised masks
/// and inpainted companions, train the dual-encoder model.
pub fn cmd_train_stage3(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    seed: u64,
    stage1_ckpt: &Path,
    variant: FusionVariant,
    workers: usize,
) -> Result<()> {
    ensure_dir(out)?;
    let corpus: Corpus<f64> = read_corpus(corpus_dir)?;
    let stage1: Stage1Model<f64> = load_stage1(stage1_ckpt)?;
    let masker = cfg.masker();
    let inpainter = mock_inpainter(cfg, &corpus.legend);
    let settings = cfg.inpaint_settings(&corpus.legend);
    let inpainted = fusionseg_core::pipeline::prepare_inpainted_set(
        &corpus,
        &stage1,
        &masker,
        &inpainter,
        &settings,
        cfg.mask_threshold,
        &[Split::Train, Split::Val],
        workers,
    )?;
    let model_cfg = cfg.model_config(true);
    let (model, log) = train_stage3(&corpus, &inpainted, &model_cfg, variant, &cfg.train_config(seed))?;
    save_stage3(&out.join("stage3.ckpt"), &model)?;
    write_atomic(&out.join("train.log"), log.to_text().as_bytes())?;
    write_resolved(out, cfg)?;
    match log.final_val_miou() {
        Some(v) => println!("stage-3 training done; final val mIoU {v:.4}"),
        None => println!("stage-3 training done (no val split)"),
    }
    Ok(())
}

/// `infer`: write predicted mask stacks (and optionally the inpainted
/// companion images) for a split.
pub fn cmd_infer(
    cfg: &RunConfig,
    corpus_dir: &Path,
    ckpt: &Path,
    stage3_ckpt: Option<&Path>,
    out: &Path,
    split: Split,
    save_inpainted: bool,
    workers: usize,
) -> Result<()> {
    ensure_dir(out)?;
    let pred_dir = out.join("pred");
    ensure_dir(&pred_dir)?;
    let corpus: Corpus<f64> = read_corpus(corpus_dir)?;
    let stage1: Stage1Model<f64> = load_stage1(ckpt)?;
    let stage3: Option<Stage3Model<f64>> = stage3_ckpt.map(load_stage3).transpose()?;
    let masker = cfg.masker();
    let inpainter = mock_inpainter(cfg, &corpus.legend);
    let settings = cfg.inpaint_settings(&corpus.legend);
    let palette = palette_for(&corpus.legend);
    let indices = corpus.split_indices(split);
    if save_inpainted && stage3.is_some() {
        ensure_dir(&out.join("inpainted"))?;
    }

    let run_one = |i: usize| -> Result<()> {
        let scene = &corpus.scenes[i];
        let stack = match &stage3 {
            None => predict_stage1(&stage1, scene)?,
            Some(s3) => {
                let (stack, inpainted) = predict_stage3(
                    scene,
                    &stage1,
                    s3,
                    &masker,
                    &inpainter,
                    &settings,
                    cfg.mask_threshold,
                )?;
                if save_inpainted {
                    inpainted.write_ppm(&out.join("inpainted").join(format!("{}.ppm", scene.dir_name())))?;
                }
                stack
            }
        };
        write_maskstack(&pred_dir.join(format!("{}.maskstack", scene.dir_name())), &stack)?;
        export_argmax_png(
            &pred_dir.join(format!("{}.png", scene.dir_name())),
            &stack,
            &palette,
        )
    };

    if workers <= 1 || indices.len() < 2 {
        for &i in &indices {
            run_one(i)?;
        }
    } else {
        let chunks: Vec<&[usize]> = indices.chunks(indices.len().div_ceil(workers)).collect();
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        for &i in chunk {
                            run_one(i)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            r?;
        }
    }
    write_resolved(out, cfg)?;
    println!(
        "wrote {} predictions ({} split) to {}",
        indices.len(),
        split.name(),
        pred_dir.display()
    );
    Ok(())
}

/// `eval`: per-class IoU table over a split, with target/drivable subset
/// means. `pred` is a directory produced by `infer`, or the literal `gt`
/// for a ground-truth self-check.
pub fn cmd_eval(
    cfg: &RunConfig,
    corpus_dir: &Path,
    pred: &str,
    split: Split,
    subset: ClassSubset,
    out: Option<&Path>,
    workers: usize,
) -> Result<()> {
    let corpus: Corpus<f64> = read_corpus(corpus_dir)?;
    let indices = corpus.split_indices(split);
    let acc: IouAccumulator = if pred == "gt" {
        evaluate_predictor(&corpus, &indices, workers, |scene| Ok(scene.gt.clone()))?
    } else {
        let pred_dir = PathBuf::from(pred);
        evaluate_predictor(&corpus, &indices, workers, |scene| {
            let stack: MaskStack<f64> =
                read_maskstack(&pred_dir.join(format!("{}.maskstack", scene.dir_name())))?;
            scene.gt.same_layout(&stack)?;
            Ok(stack)
        })?
    };
    let ious = acc.class_iou();
    let means = [
        ("mIoU", acc.mean_iou(ClassSubset::All)),
        ("mIoU_t", acc.mean_iou(ClassSubset::Targets)),
        ("mIoU_d", acc.mean_iou(ClassSubset::Drivable)),
        ("mean(subset)", acc.mean_iou(subset)),
    ];
    let table = format_iou_table(&corpus.legend, &ious, &means);
    let records = format_iou_records(&corpus.legend, &ious, &means);
    print!("{table}");
    if let Some(out) = out {
        ensure_dir(out)?;
        write_atomic(&out.join("eval.txt"), table.as_bytes())?;
        write_atomic(&out.join("eval.records"), records.as_bytes())?;
        write_resolved(out, cfg)?;
    }
    Ok(())
}

/// `ablate`: drive one of the ablation studies and write its report.
pub fn cmd_ablate(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    kind: AblationKind,
    seeds: &[u64],
    workers: usize,
) -> Result<()> {
    ensure_dir(out)?;
    let corpus: Corpus<f64> = read_corpus(corpus_dir)?;
    let masker = cfg.masker();
    let inpainter = mock_inpainter(cfg, &corpus.legend);
    let components = AblationComponents {
        masker: &masker,
        inpainter: &inpainter,
        settings: cfg.inpaint_settings(&corpus.legend),
        mask_threshold: cfg.mask_threshold,
        workers,
    };
    let report = run_ablation(
        &corpus,
        kind,
        seeds,
        &cfg.model_config(true),
        &cfg.train_config(0),
        &components,
    )?;
    write_atomic(&out.join("report.txt"), report.to_table().as_bytes())?;
    write_atomic(&out.join("report.records"), report.to_records().as_bytes())?;
    write_resolved(out, cfg)?;
    print!("{}", report.to_table());
    Ok(())
}

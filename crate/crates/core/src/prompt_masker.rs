//! Promptable instance masking: the seam a real segmentation model plugs
//! into, plus a deterministic region-growing mock used for tests and
//! desk-scale runs.

use std::collections::VecDeque;

use crate::error::Result;
use crate::image::Image;
use crate::mask_ops::BinaryMask;
use crate::scalar::Scalar;

/// A prompt that could not produce a mask, and why. Skips are reported, not
/// silently dropped: mislocated prompts are a known failure source worth
/// observing downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct SkippedPrompt {
    pub index: usize,
    pub u: f64,
    pub v: f64,
    pub reason: String,
}

/// Masks for the in-bounds prompts plus skip records for the rest.
#[derive(Clone, Debug)]
pub struct PromptOutcome {
    pub masks: Vec<BinaryMask>,
    pub skipped: Vec<SkippedPrompt>,
}

/// Behavioral contract: one binary mask (image-sized, class-free) per
/// in-bounds prompt, deterministic for identical inputs. Prompts are
/// batched per image so a real adapter can amortize image encoding.
pub trait PromptMasker<F: Scalar>: Send + Sync {
    fn masks_for_prompts(&self, image: &Image<F>, prompts: &[(f64, f64)]) -> Result<PromptOutcome>;
}

/// Deterministic mock masker: grows a 4-connected region from the prompt
/// pixel over neighbors whose color stays within `color_tolerance`
/// (Euclidean RGB) of the seed pixel's color, capped at
/// `max_region_fraction` of the image area.
#[derive(Clone, Debug)]
pub struct RegionGrowMasker {
    pub color_tolerance: f64,
    pub max_region_fraction: f64,
}

impl Default for RegionGrowMasker {
    fn default() -> Self {
        RegionGrowMasker {
            color_tolerance: 0.08,
            max_region_fraction: 0.5,
        }
    }
}

fn color_dist<F: Scalar>(a: [F; 3], b: [F; 3]) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        let d = a[i].as_f64() - b[i].as_f64();
        acc += d * d;
    }
    acc.sqrt()
}

impl<F: Scalar> PromptMasker<F> for RegionGrowMasker {
    fn masks_for_prompts(&self, image: &Image<F>, prompts: &[(f64, f64)]) -> Result<PromptOutcome> {
        let (w, h) = (image.width, image.height);
        let cap = ((w * h) as f64 * self.max_region_fraction).floor().max(1.0) as usize;
        let mut masks = Vec::new();
        let mut skipped = Vec::new();
        for (index, &(u, v)) in prompts.iter().enumerate() {
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                skipped.push(SkippedPrompt {
                    index,
                    u,
                    v,
                    reason: "prompt outside image bounds".into(),
                });
                continue;
            }
            let (su, sv) = (u.floor() as usize, v.floor() as usize);
            let seed_color = image.get(su, sv);
            let mut mask = BinaryMask::empty(w, h);
            let mut queue = VecDeque::new();
            mask.data[sv * w + su] = true;
            queue.push_back((su, sv));
            let mut count = 1usize;
            while let Some((cu, cv)) = queue.pop_front() {
                if count >= cap {
                    break;
                }
                // fixed neighbor order: up, down, left, right
                let neighbors = [
                    (cu as i64, cv as i64 - 1),
                    (cu as i64, cv as i64 + 1),
                    (cu as i64 - 1, cv as i64),
                    (cu as i64 + 1, cv as i64),
                ];
                for (nu, nv) in neighbors {
                    if count >= cap {
                        break;
                    }
                    if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                        continue;
                    }
                    let (nu, nv) = (nu as usize, nv as usize);
                    if mask.data[nv * w + nu] {
                        continue;
                    }
                    if color_dist(image.get(nu, nv), seed_color) <= self.color_tolerance {
                        mask.data[nv * w + nu] = true;
                        count += 1;
                        queue.push_back((nu, nv));
                    }
                }
            }
            mask.provenance = vec![(su, sv)];
            masks.push(mask);
        }
        Ok(PromptOutcome { masks, skipped })
    }
}

/// Trivial conforming implementation: an empty mask per in-bounds prompt.
/// Exists to check that the pipeline accepts any implementation of the seam.
#[derive(Clone, Copy, Debug, Default)]
pub struct EmptyMasker;

impl<F: Scalar> PromptMasker<F> for EmptyMasker {
    fn masks_for_prompts(&self, image: &Image<F>, prompts: &[(f64, f64)]) -> Result<PromptOutcome> {
        let (w, h) = (image.width, image.height);
        let mut masks = Vec::new();
        let mut skipped = Vec::new();
        for (index, &(u, v)) in prompts.iter().enumerate() {
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                skipped.push(SkippedPrompt {
                    index,
                    u,
                    v,
                    reason: "prompt outside image bounds".into(),
                });
                continue;
            }
            let mut mask = BinaryMask::empty(w, h);
            mask.provenance = vec![(u.floor() as usize, v.floor() as usize)];
            masks.push(mask);
        }
        Ok(PromptOutcome { masks, skipped })
    }
}

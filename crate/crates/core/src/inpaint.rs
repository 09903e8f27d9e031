//! Iterative mask-conditioned inpainting over a pluggable generator, plus a
//! deterministic mock generator.
//!
//! The fold threads one image through the generator, one `(mask, prompt)`
//! pair at a time; outside-mask pixels must come back untouched.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask_ops::BinaryMask;
use crate::scalar::Scalar;

/// Generation controls carried verbatim to any real adapter; the mock only
/// uses `guidance_scale` (as an inverse noise amplitude) and the seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InpaintConfig {
    pub guidance_scale: f64,
    pub inference_steps: u32,
    pub rng_seed: u64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            guidance_scale: 7.0,
            inference_steps: 50,
            rng_seed: 0,
        }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.guidance_scale > 0.0 && self.inference_steps >= 1 {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                what: "inpaint config",
                why: format!("{self:?}"),
            })
        }
    }
}

/// One fill request: image, region, text prompt, generation controls.
#[derive(Debug)]
pub struct InpaintRequest<'a, F: Scalar> {
    pub image: &'a Image<F>,
    pub mask: &'a BinaryMask,
    pub prompt: &'a str,
    pub config: InpaintConfig,
}

/// Mask-conditioned generator contract: same-size output, deterministic per
/// seed, pixels outside the mask unchanged (bit-exact for the mock, within
/// 1/255 for a real adapter).
pub trait Inpainter<F: Scalar>: Send + Sync {
    fn inpaint(&self, request: &InpaintRequest<'_, F>) -> Result<Image<F>>;
}

/// Returns the request image unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityInpainter;

impl<F: Scalar> Inpainter<F> for IdentityInpainter {
    fn inpaint(&self, request: &InpaintRequest<'_, F>) -> Result<Image<F>> {
        Ok(request.image.clone())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Position-keyed unit sample: independent of fill order, so disjoint
/// regions compose the same regardless of mask order.
fn hash_unit(seed: u64, key: u64, u: usize, v: usize, channel: usize) -> f64 {
    let mut h = splitmix64(seed ^ key.rotate_left(17));
    h = splitmix64(h ^ (u as u64) ^ ((v as u64) << 24) ^ ((channel as u64) << 48));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Deterministic stand-in generator: fills masked pixels with a class-keyed
/// base color plus low-amplitude position-hashed noise scaled by
/// `1/guidance_scale`. Outside-mask pixels are copied bit-exactly.
#[derive(Clone, Debug)]
pub struct MockInpainter {
    /// Base fill color per class index.
    pub base_colors: Vec<[f64; 3]>,
    pub noise_amplitude: f64,
}

impl MockInpainter {
    pub fn new(base_colors: Vec<[f64; 3]>) -> Self {
        MockInpainter {
            base_colors,
            noise_amplitude: 0.25,
        }
    }
}

impl<F: Scalar> Inpainter<F> for MockInpainter {
    fn inpaint(&self, request: &InpaintRequest<'_, F>) -> Result<Image<F>> {
        request.config.validate()?;
        let image = request.image;
        let mask = request.mask;
        if mask.width != image.width || mask.height != image.height {
            return Err(Error::ShapeMismatch {
                op: "mock_inpaint",
                lhs: vec![image.width, image.height],
                rhs: vec![mask.width, mask.height],
            });
        }
        let (base, key) = match mask.class_index {
            Some(c) if c < self.base_colors.len() => (self.base_colors[c], c as u64),
            Some(c) => {
                return Err(Error::ClassOutOfRange {
                    class: c,
                    len: self.base_colors.len(),
                })
            }
            // class-free masks key their texture off the prompt text
            None => {
                let h = hash_str(request.prompt);
                let color = [
                    hash_unit(h, 1, 0, 0, 0),
                    hash_unit(h, 2, 0, 0, 0),
                    hash_unit(h, 3, 0, 0, 0),
                ];
                (color, h)
            }
        };
        let amp = self.noise_amplitude / request.config.guidance_scale;
        let mut out = image.clone();
        for v in 0..image.height {
            for u in 0..image.width {
                if !mask.contains(u, v) {
                    continue;
                }
                let mut rgb = [F::zero(); 3];
                for (ch, slot) in rgb.iter_mut().enumerate() {
                    let noise = (hash_unit(request.config.rng_seed, key, u, v, ch) - 0.5) * 2.0 * amp;
                    *slot = F::of_f64((base[ch] + noise).clamp(0.0, 1.0));
                }
                out.set(u, v, rgb);
            }
        }
        Ok(out)
    }
}

/// Class-name → prompt-text table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptTable {
    entries: BTreeMap<String, String>,
}

impl PromptTable {
    pub fn new() -> Self {
        PromptTable::default()
    }

    /// One generic prompt per legend entry.
    pub fn default_for_legend(legend: &[String]) -> Self {
        let mut entries = BTreeMap::new();
        for name in legend {
            entries.insert(name.clone(), format!("a photo of a {name} on water"));
        }
        PromptTable { entries }
    }

    pub fn set(&mut self, class_name: impl Into<String>, prompt: impl Into<String>) {
        self.entries.insert(class_name.into(), prompt.into());
    }

    pub fn get(&self, class_name: &str) -> Result<&str> {
        self.entries
            .get(class_name)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::MissingPrompt(class_name.to_string()))
    }
}

/// Deterministic processing order for a set of masks: descending area,
/// ties by class index, then by top-left pixel position. Largest first, so
/// small objects overwrite large-region fills where they overlap.
pub fn mask_ordering(masks: &[BinaryMask]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by_key(|&i| {
        let m = &masks[i];
        (
            std::cmp::Reverse(m.area()),
            m.class_index.unwrap_or(usize::MAX),
            m.top_left().unwrap_or((usize::MAX, usize::MAX)),
        )
    });
    order
}

/// Fold the inpainter over the masks in the given order, threading the
/// image: `I ← inpaint(I, mask_i, prompt_i)`.
pub fn iterative_inpaint<F: Scalar>(
    image: &Image<F>,
    masks: &[BinaryMask],
    legend: &[String],
    prompts: &PromptTable,
    inpainter: &dyn Inpainter<F>,
    config: &InpaintConfig,
) -> Result<Image<F>> {
    config.validate()?;
    // resolve every prompt up front so a missing entry fails before any work
    let mut texts = Vec::with_capacity(masks.len());
    for mask in masks {
        if mask.width != image.width || mask.height != image.height {
            return Err(Error::ShapeMismatch {
                op: "iterative_inpaint",
                lhs: vec![image.width, image.height],
                rhs: vec![mask.width, mask.height],
            });
        }
        let class = mask.class_index.ok_or(Error::InvalidConfig {
            what: "iterative_inpaint",
            why: "unclassified mask".into(),
        })?;
        if class >= legend.len() {
            return Err(Error::ClassOutOfRange {
                class,
                len: legend.len(),
            });
        }
        texts.push(prompts.get(&legend[class])?.to_string());
    }
    let mut current = image.clone();
    for (mask, text) in masks.iter().zip(texts.iter()) {
        current = inpainter.inpaint(&InpaintRequest {
            image: &current,
            mask,
            prompt: text,
            config: *config,
        })?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn legend() -> Vec<String> {
        vec!["background".into(), "boat".into(), "buoy".into(), "water".into()]
    }

    fn palette() -> Vec<[f64; 3]> {
        vec![[0.5, 0.5, 0.5], [0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9]]
    }

    fn base_image() -> Image<f64> {
        let mut img = Image::new(8, 6);
        for v in 0..6 {
            for u in 0..8 {
                img.set(u, v, [u as f64 / 8.0, v as f64 / 6.0, 0.3]);
            }
        }
        img
    }

    fn rect_mask(x0: usize, y0: usize, x1: usize, y1: usize, class: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(8, 6);
        for v in y0..y1 {
            for u in x0..x1 {
                m.data[v * 8 + u] = true;
            }
        }
        m.class_index = Some(class);
        m
    }

    #[test]
    fn empty_mask_list_returns_input_bit_exactly() {
        let img = base_image();
        let out = iterative_inpaint(
            &img,
            &[],
            &legend(),
            &PromptTable::default_for_legend(&legend()),
            &MockInpainter::new(palette()),
            &InpaintConfig::default(),
        )
        .unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn identity_inpainter_leaves_image_unchanged() {
        let img = base_image();
        let masks = vec![rect_mask(1, 1, 4, 4, 1), rect_mask(5, 2, 7, 5, 2)];
        let out = iterative_inpaint(
            &img,
            &masks,
            &legend(),
            &PromptTable::default_for_legend(&legend()),
            &IdentityInpainter,
            &InpaintConfig::default(),
        )
        .unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn disjoint_masks_compose_order_free_and_match_region_oracle() {
        let img = base_image();
        let a = rect_mask(0, 0, 3, 3, 1);
        let b = rect_mask(4, 3, 8, 6, 2);
        let table = PromptTable::default_for_legend(&legend());
        let mock = MockInpainter::new(palette());
        let cfg = InpaintConfig::default();

        let ab = iterative_inpaint(&img, &[a.clone(), b.clone()], &legend(), &table, &mock, &cfg).unwrap();
        let ba = iterative_inpaint(&img, &[b.clone(), a.clone()], &legend(), &table, &mock, &cfg).unwrap();
        assert_eq!(ab, ba);

        // direct two-region composition: apply the mock to each region of the
        // original independently and splice
        let only_a = iterative_inpaint(&img, &[a.clone()], &legend(), &table, &mock, &cfg).unwrap();
        let only_b = iterative_inpaint(&img, &[b.clone()], &legend(), &table, &mock, &cfg).unwrap();
        for v in 0..6 {
            for u in 0..8 {
                let want = if a.contains(u, v) {
                    only_a.get(u, v)
                } else if b.contains(u, v) {
                    only_b.get(u, v)
                } else {
                    img.get(u, v)
                };
                assert_eq!(ab.get(u, v), want, "pixel ({u},{v})");
            }
        }
    }

    #[test]
    fn threading_law_two_masks_equals_manual_composition() {
        let img = base_image();
        let a = rect_mask(0, 0, 5, 5, 1);
        let b = rect_mask(2, 2, 7, 6, 2); // overlaps a
        let table = PromptTable::default_for_legend(&legend());
        let mock = MockInpainter::new(palette());
        let cfg = InpaintConfig::default();

        let folded = iterative_inpaint(&img, &[a.clone(), b.clone()], &legend(), &table, &mock, &cfg).unwrap();
        let step1 = mock
            .inpaint(&InpaintRequest { image: &img, mask: &a, prompt: table.get("boat").unwrap(), config: cfg })
            .unwrap();
        let step2 = mock
            .inpaint(&InpaintRequest { image: &step1, mask: &b, prompt: table.get("buoy").unwrap(), config: cfg })
            .unwrap();
        assert_eq!(folded, step2);
    }

    #[test]
    fn outside_mask_pixels_are_bit_identical() {
        let img = base_image();
        let mask = rect_mask(2, 1, 6, 5, 1);
        let mock = MockInpainter::new(palette());
        let out = mock
            .inpaint(&InpaintRequest {
                image: &img,
                mask: &mask,
                prompt: "boat",
                config: InpaintConfig::default(),
            })
            .unwrap();
        for v in 0..6 {
            for u in 0..8 {
                if !mask.contains(u, v) {
                    assert_eq!(out.get(u, v), img.get(u, v));
                } else {
                    assert_ne!(out.get(u, v), img.get(u, v), "masked pixel untouched");
                }
            }
        }
    }

    #[test]
    fn full_image_mask_paints_everything_near_base_color() {
        let img = base_image();
        let mut mask = rect_mask(0, 0, 8, 6, 2);
        mask.data = vec![true; 48];
        let mock = MockInpainter::new(palette());
        let cfg = InpaintConfig::default();
        let out = mock
            .inpaint(&InpaintRequest { image: &img, mask: &mask, prompt: "buoy", config: cfg })
            .unwrap();
        let amp = mock.noise_amplitude / cfg.guidance_scale;
        for v in 0..6 {
            for u in 0..8 {
                let got = out.get(u, v);
                assert!((got[1] - 0.9).abs() <= amp + 1e-12);
            }
        }
    }

    #[test]
    fn mock_is_bit_deterministic_per_seed() {
        let img = base_image();
        let mask = rect_mask(1, 1, 7, 5, 1);
        let mock = MockInpainter::new(palette());
        let cfg = InpaintConfig { rng_seed: 123, ..Default::default() };
        let request = InpaintRequest {
            image: &img,
            mask: &mask,
            prompt: "boat",
            config: cfg,
        };
        let a = mock.inpaint(&request).unwrap();
        let b = mock.inpaint(&request).unwrap();
        assert_eq!(a, b);
        let other = mock
            .inpaint(&InpaintRequest {
                image: &img,
                mask: &mask,
                prompt: "boat",
                config: InpaintConfig { rng_seed: 124, ..Default::default() },
            })
            .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn ordering_is_by_area_then_class_then_position() {
        let small = rect_mask(0, 0, 2, 5, 1); // area 10
        let large = rect_mask(0, 0, 8, 5, 2); // area 40
        assert_eq!(mask_ordering(&[small.clone(), large.clone()]), vec![1, 0]);

        let a = rect_mask(0, 0, 4, 3, 5);
        let b = rect_mask(4, 3, 8, 6, 2); // same area, lower class
        assert_eq!(mask_ordering(&[a.clone(), b.clone()]), vec![1, 0]);

        let c = rect_mask(0, 3, 4, 6, 2); // same area+class as b, earlier top-left
        let order = mask_ordering(&[b.clone(), c.clone()]);
        assert_eq!(order, vec![1, 0]);
    }

    #[test]
    fn ordering_is_a_stable_permutation_on_random_sets() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let masks: Vec<BinaryMask> = (0..6)
                .map(|_| {
                    let x0 = rng.random_range(0..6);
                    let y0 = rng.random_range(0..4);
                    let x1 = rng.random_range(x0 + 1..=8);
                    let y1 = rng.random_range(y0 + 1..=6);
                    rect_mask(x0, y0, x1, y1, rng.random_range(1..3))
                })
                .collect();
            let order = mask_ordering(&masks);
            let again = mask_ordering(&masks);
            assert_eq!(order, again);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..6).collect::<Vec<_>>());
            for pair in order.windows(2) {
                assert!(masks[pair[0]].area() >= masks[pair[1]].area());
            }
        }
    }

    #[test]
    fn missing_prompt_class_is_an_error() {
        let img = base_image();
        let mask = rect_mask(0, 0, 2, 2, 1);
        let mut table = PromptTable::new();
        table.set("background", "x");
        let err = iterative_inpaint(
            &img,
            &[mask],
            &legend(),
            &table,
            &IdentityInpainter,
            &InpaintConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingPrompt(_)));
    }
}

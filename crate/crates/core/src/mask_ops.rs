//! Mask-stack algebra: channel conventions, noise reduction of prompted
//! pseudo-masks, class assignment, and rasterization.
//!
//! Channel 0 is background and the last channel is water; those two are the
//! noise sources the reduction step subtracts from object channels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{write_atomic, write_indexed_png};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Per-class soft masks, `C × H × W` planes in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack<F: Scalar> {
    pub legend: Vec<String>,
    pub height: usize,
    pub width: usize,
    data: Vec<F>,
}

impl<F: Scalar> MaskStack<F> {
    pub fn zeros(legend: Vec<String>, height: usize, width: usize) -> Self {
        let n = legend.len() * height * width;
        MaskStack {
            legend,
            height,
            width,
            data: vec![F::zero(); n],
        }
    }

    pub fn from_planes(legend: Vec<String>, height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != legend.len() * height * width {
            return Err(Error::ShapeMismatch {
                op: "mask_stack",
                lhs: vec![legend.len(), height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(MaskStack {
            legend,
            height,
            width,
            data,
        })
    }

    /// Build from a pixel-major `(H·W) × C` probability matrix (decoder
    /// output layout).
    pub fn from_pixel_major(legend: Vec<String>, height: usize, width: usize, rows: &[F]) -> Result<Self> {
        let c = legend.len();
        if rows.len() != c * height * width {
            return Err(Error::ShapeMismatch {
                op: "mask_stack",
                lhs: vec![height * width, c],
                rhs: vec![rows.len()],
            });
        }
        let mut data = vec![F::zero(); rows.len()];
        let hw = height * width;
        for pix in 0..hw {
            for ch in 0..c {
                data[ch * hw + pix] = rows[pix * c + ch];
            }
        }
        MaskStack::from_planes(legend, height, width, data)
    }

    /// Pixel-major `(H·W) × C` copy (loss/metric layout).
    pub fn to_pixel_major(&self) -> Vec<F> {
        let c = self.n_classes();
        let hw = self.height * self.width;
        let mut rows = vec![F::zero(); c * hw];
        for ch in 0..c {
            for pix in 0..hw {
                rows[pix * c + ch] = self.data[ch * hw + pix];
            }
        }
        rows
    }

    pub fn to_pixel_major_tensor(&self) -> Result<Tensor<F>> {
        Tensor::from_vec(&[self.height * self.width, self.n_classes()], self.to_pixel_major())
    }

    pub fn n_classes(&self) -> usize {
        self.legend.len()
    }

    pub fn background_index(&self) -> usize {
        0
    }

    pub fn water_index(&self) -> usize {
        self.legend.len() - 1
    }

    pub fn channel(&self, c: usize) -> &[F] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [F] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn planes(&self) -> &[F] {
        &self.data
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> F {
        self.data[c * self.height * self.width + v * self.width + u]
    }

    pub fn set(&mut self, c: usize, u: usize, v: usize, value: F) {
        self.data[c * self.height * self.width + v * self.width + u] = value;
    }

    pub fn validate_unit_range(&self) -> Result<()> {
        if self
            .data
            .iter()
            .all(|v| *v >= F::zero() && *v <= F::one())
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                what: "mask stack",
                why: "values outside [0,1]".into(),
            })
        }
    }

    pub fn same_layout(&self, other: &MaskStack<F>) -> Result<()> {
        if self.legend != other.legend {
            return Err(Error::LegendMismatch(format!(
                "{:?} vs {:?}",
                self.legend, other.legend
            )));
        }
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch {
                op: "mask_stack",
                lhs: vec![self.height, self.width],
                rhs: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    /// Per-pixel argmax class (ties to the lowest index).
    pub fn argmax_map(&self) -> Vec<usize> {
        let hw = self.height * self.width;
        let c = self.n_classes();
        let mut out = vec![0usize; hw];
        for pix in 0..hw {
            let mut best = 0usize;
            let mut best_v = self.data[pix];
            for ch in 1..c {
                let v = self.data[ch * hw + pix];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            out[pix] = best;
        }
        out
    }
}

/// Combined background+water noise mask: both channels binarized at
/// `threshold` (≥ counts as on), summed, clamped to `[0,1]`.
pub fn extract_noise_mask<F: Scalar>(m_init: &MaskStack<F>, threshold: F) -> Vec<F> {
    let bg = m_init.channel(m_init.background_index());
    let water = m_init.channel(m_init.water_index());
    bg.iter()
        .zip(water.iter())
        .map(|(b, w)| {
            let bb = if *b >= threshold { F::one() } else { F::zero() };
            let ww = if *w >= threshold { F::one() } else { F::zero() };
            (bb + ww).min(F::one())
        })
        .collect()
}

/// Noise reduction over prompted pseudo-masks: per object channel,
/// subtract the noise mask, rectify, merge the initial mask back in, and
/// clamp to `[0,1]`. Background and water channels are taken from the
/// initial stack, which is what defines the noise in the first place.
pub fn noise_reduce<F: Scalar>(
    m_sam: &MaskStack<F>,
    m_init: &MaskStack<F>,
    threshold: F,
) -> Result<MaskStack<F>> {
    m_sam.same_layout(m_init)?;
    let noise = extract_noise_mask(m_init, threshold);
    let mut out = MaskStack::zeros(m_init.legend.clone(), m_init.height, m_init.width);
    let bg = m_init.background_index();
    let water = m_init.water_index();
    for c in 0..m_init.n_classes() {
        let dst = out.channel_mut(c);
        if c == bg || c == water {
            dst.copy_from_slice(m_init.channel(c));
            continue;
        }
        let sam = m_sam.channel(c);
        let init = m_init.channel(c);
        for i in 0..dst.len() {
            let denoised = (sam[i] - noise[i]).max(F::zero());
            dst[i] = (denoised + init[i]).max(F::zero()).min(F::one());
        }
    }
    Ok(out)
}

/// Strictly binary instance mask with provenance back to the prompt points
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    pub class_index: Option<usize>,
    /// Prompt pixels `(u, v)` this mask came from.
    pub provenance: Vec<(usize, usize)>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
            class_index: None,
            provenance: Vec::new(),
        }
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        u < self.width && v < self.height && self.data[v * self.width + u]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// First set pixel in scan order `(v, u)`; None for an empty mask.
    pub fn top_left(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|b| *b)
            .map(|i| (i / self.width, i % self.width))
    }
}

/// A prompt pixel with the class distribution predicted for its radar point.
#[derive(Clone, Debug)]
pub struct PromptLabel<F: Scalar> {
    pub u: usize,
    pub v: usize,
    pub probs: Vec<F>,
}

/// Label a binary mask by the mean class distribution of the prompt points
/// inside it: argmax excluding background, ties to the lowest class index.
pub fn assign_class<F: Scalar>(mask: &BinaryMask, prompts: &[PromptLabel<F>]) -> Result<BinaryMask> {
    let inside: Vec<&PromptLabel<F>> = prompts
        .iter()
        .filter(|p| mask.contains(p.u, p.v))
        .collect();
    if inside.is_empty() {
        return Err(Error::Unclassifiable);
    }
    let n_classes = inside[0].probs.len();
    let mut mean = vec![F::zero(); n_classes];
    for p in &inside {
        for (m, v) in mean.iter_mut().zip(p.probs.iter()) {
            *m += *v;
        }
    }
    let count = F::of_f64(inside.len() as f64);
    for m in mean.iter_mut() {
        *m = *m / count;
    }
    // background (index 0) is not a candidate
    let mut best = 1usize;
    for c in 2..n_classes {
        if mean[c] > mean[best] {
            best = c;
        }
    }
    let mut labeled = mask.clone();
    labeled.class_index = Some(best);
    Ok(labeled)
}

/// Union per-class binary masks into a stack: channel `c` is the elementwise
/// max over all masks labeled `c`.
pub fn rasterize<F: Scalar>(
    masks: &[BinaryMask],
    legend: &[String],
    height: usize,
    width: usize,
) -> Result<MaskStack<F>> {
    let mut out = MaskStack::zeros(legend.to_vec(), height, width);
    for mask in masks {
        let class = mask.class_index.ok_or(Error::InvalidConfig {
            what: "rasterize",
            why: "unclassified mask".into(),
        })?;
        if class >= legend.len() {
            return Err(Error::ClassOutOfRange {
                class,
                len: legend.len(),
            });
        }
        if mask.width != width || mask.height != height {
            return Err(Error::ShapeMismatch {
                op: "rasterize",
                lhs: vec![height, width],
                rhs: vec![mask.height, mask.width],
            });
        }
        let dst = out.channel_mut(class);
        for (d, &m) in dst.iter_mut().zip(mask.data.iter()) {
            if m {
                *d = F::one();
            }
        }
    }
    Ok(out)
}

// ── File format ────────────────────────────────────────────────────────
//
// Chunked binary, little-endian:
//
//   magic "FSEGMSK1" | u32 version=1 | u32 C | u32 H | u32 W
//   per class: u32 name_len | utf-8 name
//   C·H·W little-endian f32 planes, row-major per channel

const MASK_MAGIC: &[u8; 8] = b"FSEGMSK1";

pub fn write_maskstack<F: Scalar>(path: &Path, stack: &MaskStack<F>) -> Result<()> {
    let mut out = Vec::with_capacity(stack.planes().len() * 4 + 64);
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(stack.n_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(stack.height as u32).to_le_bytes());
    out.extend_from_slice(&(stack.width as u32).to_le_bytes());
    for name in &stack.legend {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for v in stack.planes() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn read_maskstack<F: Scalar>(path: &Path) -> Result<MaskStack<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::format(path, "maskstack", why);
    if bytes.len() < 24 || &bytes[..8] != MASK_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = 8usize;
    let read_u32 = |bytes: &[u8], pos: &mut usize| -> Result<u32> {
        if *pos + 4 > bytes.len() {
            return Err(Error::format(path, "maskstack", "truncated"));
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let version = read_u32(&bytes, &mut pos)?;
    if version != 1 {
        return Err(bad("unsupported version"));
    }
    let c = read_u32(&bytes, &mut pos)? as usize;
    let h = read_u32(&bytes, &mut pos)? as usize;
    let w = read_u32(&bytes, &mut pos)? as usize;
    let mut legend = Vec::with_capacity(c);
    for _ in 0..c {
        let len = read_u32(&bytes, &mut pos)? as usize;
        if pos + len > bytes.len() {
            return Err(bad("truncated legend"));
        }
        legend.push(
            String::from_utf8(bytes[pos..pos + len].to_vec())
                .map_err(|_| Error::format(path, "maskstack", "legend not utf-8"))?,
        );
        pos += len;
    }
    let need = c * h * w * 4;
    if bytes.len() != pos + need {
        return Err(bad("plane data size mismatch"));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for i in 0..c * h * w {
        let off = pos + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        data.push(F::of_f64(v as f64));
    }
    MaskStack::from_planes(legend, h, w, data)
}

/// Export the per-pixel argmax as an 8-bit indexed PNG for inspection.
pub fn export_argmax_png<F: Scalar>(
    path: &Path,
    stack: &MaskStack<F>,
    palette: &[[u8; 3]],
) -> Result<()> {
    if palette.len() < stack.n_classes() || stack.n_classes() > 256 {
        return Err(Error::InvalidConfig {
            what: "palette",
            why: format!(
                "{} entries for {} classes",
                palette.len(),
                stack.n_classes()
            ),
        });
    }
    let indices: Vec<u8> = stack.argmax_map().iter().map(|&c| c as u8).collect();
    write_indexed_png(path, stack.width, stack.height, &indices, palette)
}

//! Line-delimited request/response protocol for out-of-process masker and
//! inpainter adapters.
//!
//! A real model server speaks this over stdin/stdout, one message per line,
//! fields separated by tabs (prompt text therefore must not contain tabs or
//! newlines). Binary masks travel as run-length counts over the row-major
//! pixel sequence, alternating zero-run/one-run and starting with a zero
//! run.
//!
//! ```text
//! mask-request\t<image-path>\t<n>\t<u1>,<v1>\t…
//! mask-response\t<prompt-index>\t<width>\t<height>\t<rle counts…>
//! mask-skip\t<prompt-index>\t<reason>
//! inpaint-request\t<image-path>\t<guidance>\t<steps>\t<seed>\t<width>\t<height>\t<rle>\t<prompt>
//! inpaint-response\t<image-path>
//! ```

use crate::error::{Error, Result};
use crate::mask_ops::BinaryMask;

fn bad(why: impl Into<String>) -> Error {
    Error::InvalidConfig {
        what: "protocol line",
        why: why.into(),
    }
}

/// Run-length counts of a bit sequence: alternating runs of zeros and ones,
/// starting with zeros (a leading one-run yields a first count of 0).
pub fn rle_encode(bits: &[bool]) -> String {
    let mut counts: Vec<usize> = Vec::new();
    let mut current = false;
    let mut run = 0usize;
    for &b in bits {
        if b == current {
            run += 1;
        } else {
            counts.push(run);
            current = b;
            run = 1;
        }
    }
    counts.push(run);
    counts
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn rle_decode(encoded: &str, len: usize) -> Result<Vec<bool>> {
    let mut bits = Vec::with_capacity(len);
    let mut value = false;
    for tok in encoded.split_whitespace() {
        let run: usize = tok.parse().map_err(|_| bad(format!("bad run `{tok}`")))?;
        bits.extend(std::iter::repeat(value).take(run));
        value = !value;
    }
    if bits.len() != len {
        return Err(bad(format!("rle decodes to {} bits, expected {len}", bits.len())));
    }
    Ok(bits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskRequest {
    pub image_path: String,
    pub prompts: Vec<(f64, f64)>,
}

impl MaskRequest {
    pub fn to_line(&self) -> String {
        let mut fields = vec![
            "mask-request".to_string(),
            self.image_path.clone(),
            self.prompts.len().to_string(),
        ];
        for (u, v) in &self.prompts {
            fields.push(format!("{u},{v}"));
        }
        fields.join("\t")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields[0] != "mask-request" {
            return Err(bad("not a mask-request"));
        }
        let n: usize = fields[2].parse().map_err(|_| bad("bad prompt count"))?;
        if fields.len() != 3 + n {
            return Err(bad("prompt count mismatch"));
        }
        let mut prompts = Vec::with_capacity(n);
        for f in &fields[3..] {
            let (u, v) = f.split_once(',').ok_or_else(|| bad("bad prompt pair"))?;
            prompts.push((
                u.parse().map_err(|_| bad("bad prompt u"))?,
                v.parse().map_err(|_| bad("bad prompt v"))?,
            ));
        }
        Ok(MaskRequest {
            image_path: fields[1].to_string(),
            prompts,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskResponse {
    Mask {
        prompt_index: usize,
        width: usize,
        height: usize,
        bits: Vec<bool>,
    },
    Skip {
        prompt_index: usize,
        reason: String,
    },
}

impl MaskResponse {
    pub fn from_mask(prompt_index: usize, mask: &BinaryMask) -> Self {
        MaskResponse::Mask {
            prompt_index,
            width: mask.width,
            height: mask.height,
            bits: mask.data.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        match self {
            MaskResponse::Mask {
                prompt_index,
                width,
                height,
                bits,
            } => format!(
                "mask-response\t{prompt_index}\t{width}\t{height}\t{}",
                rle_encode(bits)
            ),
            MaskResponse::Skip {
                prompt_index,
                reason,
            } => format!("mask-skip\t{prompt_index}\t{reason}"),
        }
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.first() {
            Some(&"mask-response") => {
                if fields.len() != 5 {
                    return Err(bad("mask-response needs 5 fields"));
                }
                let prompt_index = fields[1].parse().map_err(|_| bad("bad index"))?;
                let width: usize = fields[2].parse().map_err(|_| bad("bad width"))?;
                let height: usize = fields[3].parse().map_err(|_| bad("bad height"))?;
                let bits = rle_decode(fields[4], width * height)?;
                Ok(MaskResponse::Mask {
                    prompt_index,
                    width,
                    height,
                    bits,
                })
            }
            Some(&"mask-skip") => {
                if fields.len() != 3 {
                    return Err(bad("mask-skip needs 3 fields"));
                }
                Ok(MaskResponse::Skip {
                    prompt_index: fields[1].parse().map_err(|_| bad("bad index"))?,
                    reason: fields[2].to_string(),
                })
            }
            _ => Err(bad("not a mask response")),
        }
    }
}

/// Inpaint request over the wire; mirrors the masker protocol and adds the
/// prompt text and generation controls.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintRequestLine {
    pub image_path: String,
    pub guidance_scale: f64,
    pub inference_steps: u32,
    pub rng_seed: u64,
    pub width: usize,
    pub height: usize,
    pub mask_bits: Vec<bool>,
    pub prompt: String,
}

impl InpaintRequestLine {
    pub fn to_line(&self) -> Result<String> {
        if self.prompt.contains('\t') || self.prompt.contains('\n') {
            return Err(bad("prompt must not contain tabs or newlines"));
        }
        Ok(format!(
            "inpaint-request\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.image_path,
            self.guidance_scale,
            self.inference_steps,
            self.rng_seed,
            self.width,
            self.height,
            rle_encode(&self.mask_bits),
            self.prompt
        ))
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 9 || fields[0] != "inpaint-request" {
            return Err(bad("not an inpaint-request"));
        }
        let width: usize = fields[5].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[6].parse().map_err(|_| bad("bad height"))?;
        Ok(InpaintRequestLine {
            image_path: fields[1].to_string(),
            guidance_scale: fields[2].parse().map_err(|_| bad("bad guidance"))?,
            inference_steps: fields[3].parse().map_err(|_| bad("bad steps"))?,
            rng_seed: fields[4].parse().map_err(|_| bad("bad seed"))?,
            width,
            height,
            mask_bits: rle_decode(fields[7], width * height)?,
            prompt: fields[8].to_string(),
        })
    }
}

//! RGB raster images in `[0,1]` with binary PPM I/O and an indexed PNG
//! writer for mask visualization.
//!
//! On-disk rasters are 8-bit; [`Image::quantize`] snaps in-memory values to
//! the same grid so a written-and-reread image is bit-identical.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Row-major interleaved RGB image, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<F: Scalar> {
    pub width: usize,
    pub height: usize,
    data: Vec<F>,
}

impl<F: Scalar> Image<F> {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![F::zero(); width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: vec![width, height, 3],
                rhs: vec![data.len()],
            });
        }
        Ok(Image { width, height, data })
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> [F; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, u: usize, v: usize, rgb: [F; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Clamp to `[0,1]` and snap every channel to the 8-bit grid, matching
    /// what a PPM write/read round trip produces.
    pub fn quantize(&mut self) {
        for v in self.data.iter_mut() {
            let q = (v.as_f64().clamp(0.0, 1.0) * 255.0).round() / 255.0;
            *v = F::of_f64(q);
        }
    }

    /// View as an untracked `(H·W)×3` tensor (row-major: v-major, then u).
    pub fn to_tensor(&self) -> Result<Tensor<F>> {
        Tensor::from_vec(&[self.width * self.height, 3], self.data.clone())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() + 32);
        bytes.extend_from_slice(format!("P6\n{} {}\n255\n", self.width, self.height).as_bytes());
        for v in &self.data {
            bytes.push((v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        write_atomic(path, &bytes)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::format(path, "ppm", why);
        // header: "P6" <w> <h> <max> single-whitespace separated
        let mut pos = 0usize;
        let token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(Error::format(path, "ppm", "truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
        };
        if token(&bytes, &mut pos)? != "P6" {
            return Err(bad("not a P6 file"));
        }
        let width: usize = token(&bytes, &mut pos)?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = token(&bytes, &mut pos)?.parse().map_err(|_| bad("bad height"))?;
        let maxval: usize = token(&bytes, &mut pos)?.parse().map_err(|_| bad("bad maxval"))?;
        if maxval != 255 {
            return Err(bad("only maxval 255 supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(bad("truncated pixel data"));
        }
        let data: Vec<F> = bytes[pos..pos + need]
            .iter()
            .map(|&b| F::of_f64(b as f64 / 255.0))
            .collect();
        Image::from_data(width, height, data)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

// ── Indexed PNG writer ─────────────────────────────────────────────────
//
// Emits a real 8-bit indexed-color PNG using stored (uncompressed) deflate
// blocks, so the output is deterministic and dependency-free.

fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

fn adler32(data: &[u8]) -> u32 {
    let mut a = 1u32;
    let mut b = 0u32;
    for &byte in data {
        a = (a + byte as u32) % 65521;
        b = (b + a) % 65521;
    }
    (b << 16) | a
}

fn png_chunk(out: &mut Vec<u8>, kind: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    let mut body = Vec::with_capacity(4 + payload.len());
    body.extend_from_slice(kind);
    body.extend_from_slice(payload);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32(&body).to_be_bytes());
}

/// Write an 8-bit indexed-color PNG. `indices` is row-major, one palette
/// index per pixel.
pub fn write_indexed_png(
    path: &Path,
    width: usize,
    height: usize,
    indices: &[u8],
    palette: &[[u8; 3]],
) -> Result<()> {
    if indices.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "write_indexed_png",
            lhs: vec![width, height],
            rhs: vec![indices.len()],
        });
    }
    let mut png = Vec::new();
    png.extend_from_slice(&[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);

    let mut ihdr = Vec::new();
    ihdr.extend_from_slice(&(width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(height as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 3, 0, 0, 0]); // 8-bit, indexed, deflate, adaptive, no interlace
    png_chunk(&mut png, b"IHDR", &ihdr);

    let mut plte = Vec::with_capacity(palette.len() * 3);
    for rgb in palette {
        plte.extend_from_slice(rgb);
    }
    png_chunk(&mut png, b"PLTE", &plte);

    // raw scanlines: filter byte 0 + row
    let mut raw = Vec::with_capacity(height * (width + 1));
    for v in 0..height {
        raw.push(0u8);
        raw.extend_from_slice(&indices[v * width..(v + 1) * width]);
    }
    // zlib stream with stored deflate blocks
    let mut idat = vec![0x78, 0x01];
    let mut off = 0usize;
    while off < raw.len() {
        let chunk = (raw.len() - off).min(65535);
        let last = off + chunk == raw.len();
        idat.push(if last { 1 } else { 0 });
        idat.extend_from_slice(&(chunk as u16).to_le_bytes());
        idat.extend_from_slice(&(!(chunk as u16)).to_le_bytes());
        idat.extend_from_slice(&raw[off..off + chunk]);
        off += chunk;
    }
    idat.extend_from_slice(&adler32(&raw).to_be_bytes());
    png_chunk(&mut png, b"IDAT", &idat);
    png_chunk(&mut png, b"IEND", &[]);

    write_atomic(path, &png)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_lossless_after_quantize() {
        let dir = std::env::temp_dir().join("fusionseg-image-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ppm");
        let mut img: Image<f64> = Image::new(5, 3);
        for v in 0..3 {
            for u in 0..5 {
                img.set(u, v, [0.1 * u as f64, 0.2 * v as f64, 0.7]);
            }
        }
        img.quantize();
        img.write_ppm(&path).unwrap();
        let back: Image<f64> = Image::read_ppm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn png_writer_emits_valid_signature_and_crcs() {
        let dir = std::env::temp_dir().join("fusionseg-image-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mask.png");
        let idx = vec![0u8, 1, 2, 1, 0, 2];
        write_indexed_png(&path, 3, 2, &idx, &[[0, 0, 0], [255, 0, 0], [0, 0, 255]]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
        // walk chunks, verifying CRCs
        let mut pos = 8;
        let mut kinds = Vec::new();
        while pos < bytes.len() {
            let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
            let body = &bytes[pos + 4..pos + 8 + len];
            let crc = u32::from_be_bytes(bytes[pos + 8 + len..pos + 12 + len].try_into().unwrap());
            assert_eq!(crc, crc32(body));
            kinds.push(body[..4].to_vec());
            pos += 12 + len;
        }
        assert_eq!(kinds[0], b"IHDR");
        assert_eq!(kinds.last().unwrap(), b"IEND");
    }
}

//! Stage-1 model pieces: a small strided-convolution image pyramid, the
//! per-level cross-attention fusion of image and radar features, and the
//! mask decoder.
//!
//! Feature maps are row-major `(H·W)×C` matrices (v-major, then u); that
//! flattening order is fixed for reproducibility.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Binder, Linear, Param, RowMix, Tensor};
use crate::scalar::Scalar;

/// Index map for padded patch extraction: output element `i` reads input
/// element `map[i]`, with `-1` reading zero.
pub fn im2col_map(
    h: usize,
    w: usize,
    in_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<i64>, usize, usize) {
    let out_h = (h + 2 * pad - kernel) / stride + 1;
    let out_w = (w + 2 * pad - kernel) / stride + 1;
    let mut map = Vec::with_capacity(out_h * out_w * kernel * kernel * in_c);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let y = (oy * stride + ky) as i64 - pad as i64;
                    let x = (ox * stride + kx) as i64 - pad as i64;
                    for c in 0..in_c {
                        if y >= 0 && y < h as i64 && x >= 0 && x < w as i64 {
                            map.push((y * w as i64 + x) * in_c as i64 + c as i64);
                        } else {
                            map.push(-1);
                        }
                    }
                }
            }
        }
    }
    (map, out_h, out_w)
}

/// Bilinear resampling table between two spatial grids (half-pixel centers),
/// acting on `(H·W)×C` row matrices.
pub fn bilinear_table<F: Scalar>(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<RowMix<F>> {
    let mut table = Vec::with_capacity(dst_h * dst_w);
    for dy in 0..dst_h {
        let sy = ((dy as f64 + 0.5) * src_h as f64 / dst_h as f64 - 0.5)
            .clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = sy - y0 as f64;
        for dx in 0..dst_w {
            let sx = ((dx as f64 + 0.5) * src_w as f64 / dst_w as f64 - 0.5)
                .clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = sx - x0 as f64;
            table.push(RowMix {
                sources: vec![
                    (y0 * src_w + x0, F::of_f64((1.0 - wy) * (1.0 - wx))),
                    (y0 * src_w + x1, F::of_f64((1.0 - wy) * wx)),
                    (y1 * src_w + x0, F::of_f64(wy * (1.0 - wx))),
                    (y1 * src_w + x1, F::of_f64(wy * wx)),
                ],
            });
        }
    }
    table
}

/// 2-D convolution expressed as patch extraction plus a matrix product.
#[derive(Clone, Debug)]
pub struct Conv2d<F: Scalar> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2d {
            weight: Param::xavier(format!("{name}.weight"), kernel * kernel * in_c, out_c, rng),
            bias: Param::zeros(format!("{name}.bias"), &[1, out_c]),
            in_c,
            out_c,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(
        &self,
        binder: &mut Binder<'_, F>,
        x: &Tensor<F>,
        h: usize,
        w: usize,
    ) -> Result<(Tensor<F>, usize, usize)> {
        let (map, out_h, out_w) = im2col_map(h, w, self.in_c, self.kernel, self.stride, self.pad);
        let cols = self.kernel * self.kernel * self.in_c;
        let patches = x.gather_elems(&map, &[out_h * out_w, cols])?;
        let wgt = binder.bind(&self.weight)?;
        let b = binder.bind(&self.bias)?;
        let out = patches
            .matmul(&wgt)?
            .add(&b.broadcast_rows(out_h * out_w)?)?;
        Ok((out, out_h, out_w))
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// A feature map plus its spatial extents.
#[derive(Clone, Debug)]
pub struct LevelFeatures<F: Scalar> {
    pub features: Tensor<F>,
    pub h: usize,
    pub w: usize,
}

/// Four-level strided-convolution pyramid; level `i` halves the spatial
/// extent of level `i-1`.
#[derive(Clone, Debug)]
pub struct ImageEncoder<F: Scalar> {
    pub convs: Vec<Conv2d<F>>,
    pub widths: Vec<usize>,
}

impl<F: Scalar> ImageEncoder<F> {
    pub fn new(name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::with_capacity(widths.len());
        let mut in_c = 3;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&format!("{name}.conv{}", i + 1), in_c, w, 3, 2, 1, rng));
            in_c = w;
        }
        ImageEncoder {
            convs,
            widths: widths.to_vec(),
        }
    }

    pub fn forward(
        &self,
        binder: &mut Binder<'_, F>,
        image: &Tensor<F>,
        h: usize,
        w: usize,
    ) -> Result<Vec<LevelFeatures<F>>> {
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::InvalidConfig {
                what: "image size",
                why: format!("{w}x{h} not divisible by 16"),
            });
        }
        let mut levels = Vec::with_capacity(self.convs.len());
        let (mut x, mut ch, mut cw) = (image.clone(), h, w);
        for conv in &self.convs {
            let (y, nh, nw) = conv.forward(binder, &x, ch, cw)?;
            x = y.relu()?;
            ch = nh;
            cw = nw;
            levels.push(LevelFeatures {
                features: x.clone(),
                h: ch,
                w: cw,
            });
        }
        Ok(levels)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// One level of cross-attention fusion: image features as queries, radar
/// features as keys and values, residual add.
#[derive(Clone, Debug)]
pub struct CafLevel<F: Scalar> {
    pub wq: Param<F>,
    pub wk: Param<F>,
    pub wv: Param<F>,
    pub width: usize,
}

impl<F: Scalar> CafLevel<F> {
    pub fn new(name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        CafLevel {
            wq: Param::xavier(format!("{name}.wq"), width, width, rng),
            wk: Param::xavier(format!("{name}.wk"), width, width, rng),
            wv: Param::xavier(format!("{name}.wv"), width, width, rng),
            width,
        }
    }

    /// Fused features `Q + softmax(Q Kᵀ / √C) V`.
    ///
    /// `f_radar` rows past `n_valid` are padding and are dropped before the
    /// key/value projections, so padding can never change the output. An
    /// empty key set contributes nothing: the result is exactly `Q`.
    pub fn fuse(
        &self,
        binder: &mut Binder<'_, F>,
        f_img: &Tensor<F>,
        f_radar: &Tensor<F>,
        n_valid: usize,
    ) -> Result<Tensor<F>> {
        if f_img.shape()[1] != self.width || f_radar.shape()[1] != self.width {
            return Err(Error::ShapeMismatch {
                op: "cross_attention_fuse",
                lhs: f_img.shape().to_vec(),
                rhs: f_radar.shape().to_vec(),
            });
        }
        let q = f_img.matmul(&binder.bind(&self.wq)?)?;
        if n_valid == 0 {
            return Ok(q);
        }
        let rows: Vec<usize> = (0..n_valid).collect();
        let r = f_radar.take_rows(&rows)?;
        let k = r.matmul(&binder.bind(&self.wk)?)?;
        let v = r.matmul(&binder.bind(&self.wv)?)?;
        let scale = F::of_f64(1.0 / (self.width as f64).sqrt());
        let scores = q.matmul(&k.transpose()?)?.scale(scale)?;
        let attended = scores.softmax_rows()?.matmul(&v)?;
        q.add(&attended)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.wq, &self.wk, &self.wv]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv]
    }
}

/// Decoder from the fused pyramid to per-pixel class probabilities: each
/// level is projected to a common width, bilinearly upsampled to level-1
/// resolution, concatenated, projected to class channels, softmaxed per
/// pixel, then upsampled to the input resolution.
#[derive(Clone, Debug)]
pub struct MaskDecoder<F: Scalar> {
    pub level_proj: Vec<Linear<F>>,
    pub out_proj: Linear<F>,
    pub common_width: usize,
    pub n_classes: usize,
}

impl<F: Scalar> MaskDecoder<F> {
    pub fn new(
        name: &str,
        widths: &[usize],
        common_width: usize,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let level_proj = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Linear::new(&format!("{name}.proj{}", i + 1), w, common_width, rng))
            .collect();
        let out_proj = Linear::new(
            &format!("{name}.out"),
            common_width * widths.len(),
            n_classes,
            rng,
        );
        MaskDecoder {
            level_proj,
            out_proj,
            common_width,
            n_classes,
        }
    }

    /// Per-pixel class probabilities at `out_h × out_w`, as an
    /// `(out_h·out_w) × n_classes` matrix whose rows sum to one.
    pub fn forward(
        &self,
        binder: &mut Binder<'_, F>,
        levels: &[LevelFeatures<F>],
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor<F>> {
        let (h1, w1) = (levels[0].h, levels[0].w);
        let mut upsampled = Vec::with_capacity(levels.len());
        for (proj, level) in self.level_proj.iter().zip(levels.iter()) {
            let p = proj.forward(binder, &level.features)?;
            let up = if (level.h, level.w) == (h1, w1) {
                p
            } else {
                p.mix_rows(&bilinear_table(level.h, level.w, h1, w1))?
            };
            upsampled.push(up);
        }
        let refs: Vec<&Tensor<F>> = upsampled.iter().collect();
        let cat = Tensor::concat_cols(&refs)?;
        let probs = self.out_proj.forward(binder, &cat)?.softmax_rows()?;
        if (h1, w1) == (out_h, out_w) {
            Ok(probs)
        } else {
            probs.mix_rows(&bilinear_table(h1, w1, out_h, out_w))
        }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut p: Vec<&Param<F>> = self.level_proj.iter().flat_map(|l| l.params()).collect();
        p.extend(self.out_proj.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut p: Vec<&mut Param<F>> = self
            .level_proj
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect();
        p.extend(self.out_proj.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, grads_agree};
    use crate::numerics::Tape;
    use rand::{RngExt, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn encoder_shape_law_on_64x64() {
        let mut r = rng(0);
        let enc: ImageEncoder<f64> = ImageEncoder::new("enc", &[4, 8, 16, 32], &mut r);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let image = Tensor::from_vec(&[64 * 64, 3], vec![0.5; 64 * 64 * 3]).unwrap();
        let levels = enc.forward(&mut binder, &image, 64, 64).unwrap();
        let expect = [(32, 4), (16, 8), (8, 16), (4, 32)];
        for (level, (hw, c)) in levels.iter().zip(expect.iter()) {
            assert_eq!((level.h, level.w), (*hw, *hw));
            assert_eq!(level.features.shape(), &[hw * hw, *c]);
        }
    }

    #[test]
    fn encoder_rejects_bad_dimensions() {
        let mut r = rng(0);
        let enc: ImageEncoder<f64> = ImageEncoder::new("enc", &[4, 8, 16, 32], &mut r);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let image = Tensor::from_vec(&[60 * 60, 3], vec![0.0; 60 * 60 * 3]).unwrap();
        assert!(enc.forward(&mut binder, &image, 60, 60).is_err());
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_features() {
        let mut r = rng(1);
        let enc: ImageEncoder<f64> = ImageEncoder::new("enc", &[4, 8, 16, 32], &mut r);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let image = Tensor::zeros(&[32 * 32, 3]);
        let levels = enc.forward(&mut binder, &image, 32, 32).unwrap();
        for level in levels {
            assert!(level.features.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn caf_zero_value_matrix_returns_query_bit_exactly() {
        let mut r = rng(2);
        let mut caf: CafLevel<f64> = CafLevel::new("caf", 6, &mut r);
        caf.wv.data.iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let f_img = Tensor::from_vec(&[5, 6], rand_vec(&mut r, 30)).unwrap();
        let f_radar = Tensor::from_vec(&[4, 6], rand_vec(&mut r, 24)).unwrap();
        let fused = caf.fuse(&mut binder, &f_img, &f_radar, 4).unwrap();
        let q = f_img.matmul(&binder.bind(&caf.wq).unwrap()).unwrap();
        assert_eq!(fused.data(), q.data());
    }

    #[test]
    fn caf_single_radar_row_broadcasts_its_value() {
        let mut r = rng(3);
        let caf: CafLevel<f64> = CafLevel::new("caf", 4, &mut r);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let f_img = Tensor::from_vec(&[3, 4], rand_vec(&mut r, 12)).unwrap();
        let f_radar = Tensor::from_vec(&[1, 4], rand_vec(&mut r, 4)).unwrap();
        let fused = caf.fuse(&mut binder, &f_img, &f_radar, 1).unwrap();
        let q = f_img.matmul(&binder.bind(&caf.wq).unwrap()).unwrap();
        let v = f_radar.matmul(&binder.bind(&caf.wv).unwrap()).unwrap();
        for row in 0..3 {
            for c in 0..4 {
                let want = q.data()[row * 4 + c] + v.data()[c];
                let got = fused.data()[row * 4 + c];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn caf_padded_rows_never_change_output() {
        let mut r = rng(4);
        let caf: CafLevel<f64> = CafLevel::new("caf", 5, &mut r);
        let valid = rand_vec(&mut r, 3 * 5);
        let mut padded = valid.clone();
        padded.extend(vec![0.0; 4 * 5]);
        let f_img = Tensor::from_vec(&[6, 5], rand_vec(&mut r, 30)).unwrap();

        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let tight = Tensor::from_vec(&[3, 5], valid).unwrap();
        let loose = Tensor::from_vec(&[7, 5], padded).unwrap();
        let a = caf.fuse(&mut binder, &f_img, &tight, 3).unwrap();
        let b = caf.fuse(&mut binder, &f_img, &loose, 3).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn caf_matches_straight_line_dense_oracle() {
        // 6 pixels × 4 radar points, checked against an independent
        // evaluation of the projection/attention/residual chain.
        let mut r = rng(5);
        let c = 4usize;
        let caf: CafLevel<f64> = CafLevel::new("caf", c, &mut r);
        let img = rand_vec(&mut r, 6 * c);
        let rad = rand_vec(&mut r, 4 * c);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let fused = caf
            .fuse(
                &mut binder,
                &Tensor::from_vec(&[6, c], img.clone()).unwrap(),
                &Tensor::from_vec(&[4, c], rad.clone()).unwrap(),
                4,
            )
            .unwrap();

        let matvec = |m: &[f64], x: &[f64], rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * c];
            for i in 0..rows {
                for j in 0..c {
                    for k in 0..c {
                        out[i * c + j] += x[i * c + k] * m[k * c + j];
                    }
                }
            }
            out
        };
        let q = matvec(&caf.wq.data, &img, 6);
        let k = matvec(&caf.wk.data, &rad, 4);
        let v = matvec(&caf.wv.data, &rad, 4);
        for pix in 0..6 {
            let mut scores = [0.0f64; 4];
            for n in 0..4 {
                for d in 0..c {
                    scores[n] += q[pix * c + d] * k[n * c + d];
                }
                scores[n] /= (c as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for d in 0..c {
                let mut att = 0.0;
                for n in 0..4 {
                    att += exps[n] / z * v[n * c + d];
                }
                let want = q[pix * c + d] + att;
                let got = fused.data()[pix * c + d];
                assert!((got - want).abs() < 1e-10, "pixel {pix} channel {d}");
            }
        }
    }

    #[test]
    fn decoder_rows_sum_to_one_at_input_resolution() {
        let mut r = rng(6);
        let widths = [3usize, 5, 7, 9];
        let dec: MaskDecoder<f64> = MaskDecoder::new("dec", &widths, 6, 9, &mut r);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let dims = [(8usize, 8usize), (4, 4), (2, 2), (1, 1)];
        let levels: Vec<LevelFeatures<f64>> = widths
            .iter()
            .zip(dims.iter())
            .map(|(&c, &(h, w))| LevelFeatures {
                features: Tensor::from_vec(&[h * w, c], rand_vec(&mut r, h * w * c)).unwrap(),
                h,
                w,
            })
            .collect();
        let probs = dec.forward(&mut binder, &levels, 16, 16).unwrap();
        assert_eq!(probs.shape(), &[256, 9]);
        for row in 0..256 {
            let s: f64 = probs.data()[row * 9..(row + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_level_encoder_gradient_matches_finite_differences() {
        let widths = [2usize, 3];
        let h = 8usize;
        let build = |weights: &[f64]| -> crate::Result<f64> {
            let mut r = rng(7);
            let mut enc: ImageEncoder<f64> = ImageEncoder::new("enc", &widths, &mut r);
            // splice the probed weights into conv1
            enc.convs[0].weight.data.copy_from_slice(&weights[..27 * 2]);
            let tape = Tape::new();
            let mut binder = Binder::new(&tape);
            let mut ri = rng(8);
            let image = Tensor::from_vec(&[h * h, 3], rand_vec(&mut ri, h * h * 3))?;
            // only two levels: run convs manually
            let (a, ah, aw) = enc.convs[0].forward(&mut binder, &image, h, h)?;
            let a = a.relu()?;
            let (b, _, _) = enc.convs[1].forward(&mut binder, &a, ah, aw)?;
            let loss = b.relu()?.mean()?;
            Ok(loss.item())
        };
        let mut r = rng(7);
        let enc: ImageEncoder<f64> = ImageEncoder::new("enc", &widths, &mut r);
        let w0 = enc.convs[0].weight.data.clone();

        let numeric = finite_difference_grad(|w| build(w), &w0, 1e-5).unwrap();

        // analytic
        let mut r = rng(7);
        let enc: ImageEncoder<f64> = ImageEncoder::new("enc", &widths, &mut r);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let mut ri = rng(8);
        let image = Tensor::from_vec(&[h * h, 3], rand_vec(&mut ri, h * h * 3)).unwrap();
        let (a, ah, aw) = enc.convs[0].forward(&mut binder, &image, h, h).unwrap();
        let a = a.relu().unwrap();
        let (b, _, _) = enc.convs[1].forward(&mut binder, &a, ah, aw).unwrap();
        let loss = b.relu().unwrap().mean().unwrap();
        tape.backward(&loss).unwrap();
        let analytic = binder
            .grads()
            .into_iter()
            .find(|(n, _)| n == "enc.conv1.weight")
            .unwrap()
            .1;
        let (ok, worst) = grads_agree(&analytic, &numeric, 1e-4, 1e-9);
        assert!(ok, "worst rel err {worst}");
    }
}

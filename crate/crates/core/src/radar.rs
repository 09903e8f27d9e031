//! Radar point clouds: sampling/padding, pinhole projection, the shared
//! per-point encoder, and the per-point classification head.
//!
//! Geometry and physical values are `f64`; learned features take the
//! engine's scalar type.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::numerics::{Binder, Linear, Tensor};
use crate::scalar::Scalar;

pub const POINT_FEATURES: usize = 5;

/// One radar return: position (meters, camera-aligned frame), radar cross
/// section (dBsm) and Doppler velocity (m/s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rcs: f64,
    pub doppler: f64,
}

impl RadarPoint {
    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.z, self.rcs, self.doppler]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Variable-length point set with optional per-point class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarFrame {
    pub frame_id: u64,
    pub points: Vec<RadarPoint>,
    pub labels: Option<Vec<usize>>,
}

impl RadarFrame {
    pub fn empty(frame_id: u64) -> Self {
        RadarFrame {
            frame_id,
            points: Vec::new(),
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if let Some(p) = self.points.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig {
                what: "radar frame",
                why: format!("non-finite point {p:?}"),
            });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::InvalidConfig {
                    what: "radar frame",
                    why: format!(
                        "{} labels for {} points",
                        labels.len(),
                        self.points.len()
                    ),
                });
            }
            if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::ClassOutOfRange {
                    class: l,
                    len: n_classes,
                });
            }
        }
        Ok(())
    }
}

/// Fixed-size point matrix with an explicit validity vector; rows past the
/// real points are exactly zero.
#[derive(Clone, Debug)]
pub struct SampledPoints<F: Scalar> {
    /// `target_count × 5`, row-major.
    pub matrix: Vec<F>,
    pub target_count: usize,
    pub valid: Vec<bool>,
    /// Original frame index per row (None for padded rows).
    pub source_indices: Vec<Option<usize>>,
}

impl<F: Scalar> SampledPoints<F> {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_weights(&self) -> Vec<F> {
        self.valid
            .iter()
            .map(|&v| if v { F::one() } else { F::zero() })
            .collect()
    }

    pub fn to_tensor(&self) -> Result<Tensor<F>> {
        Tensor::from_vec(&[self.target_count, POINT_FEATURES], self.matrix.clone())
    }

    /// Class label per row, via source indices.
    pub fn labels_from(&self, frame: &RadarFrame) -> Vec<Option<usize>> {
        self.source_indices
            .iter()
            .map(|src| {
                src.and_then(|i| frame.labels.as_ref().map(|l| l[i]))
            })
            .collect()
    }
}

/// Sample without replacement down to `target_count`, or keep all points in
/// order and zero-pad. Deterministic per seed.
pub fn sample_or_pad<F: Scalar>(
    frame: &RadarFrame,
    target_count: usize,
    rng_seed: u64,
) -> Result<SampledPoints<F>> {
    if target_count == 0 {
        return Err(Error::InvalidConfig {
            what: "target_count",
            why: "must be at least 1".into(),
        });
    }
    let n = frame.len();
    let selected: Vec<usize> = if n > target_count {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..target_count {
            let j = rng.random_range(i..n);
            indices.swap(i, j);
        }
        let mut chosen = indices[..target_count].to_vec();
        chosen.sort_unstable();
        chosen
    } else {
        (0..n).collect()
    };

    let mut matrix = vec![F::zero(); target_count * POINT_FEATURES];
    let mut valid = vec![false; target_count];
    let mut source_indices = vec![None; target_count];
    for (row, &src) in selected.iter().enumerate() {
        let p = frame.points[src];
        let dst = &mut matrix[row * POINT_FEATURES..(row + 1) * POINT_FEATURES];
        dst[0] = F::of_f64(p.x);
        dst[1] = F::of_f64(p.y);
        dst[2] = F::of_f64(p.z);
        dst[3] = F::of_f64(p.rcs);
        dst[4] = F::of_f64(p.doppler);
        valid[row] = true;
        source_indices[row] = Some(src);
    }
    Ok(SampledPoints {
        matrix,
        target_count,
        valid,
        source_indices,
    })
}

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Minimum depth for a projection to count as in view.
    pub z_min: f64,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            z_min: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                what: "camera",
                why: format!("{self:?}"),
            })
        }
    }
}

/// Continuous pixel coordinates of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub in_view: bool,
}

pub fn project_point(p: &RadarPoint, cam: &CameraModel) -> Projection {
    if p.z <= cam.z_min {
        return Projection {
            u: 0.0,
            v: 0.0,
            in_view: false,
        };
    }
    let u = cam.cx + cam.fx * p.x / p.z;
    let v = cam.cy + cam.fy * p.y / p.z;
    let in_view = u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64;
    Projection { u, v, in_view }
}

pub fn project_points(frame: &RadarFrame, cam: &CameraModel) -> Vec<Projection> {
    frame.points.iter().map(|p| project_point(p, cam)).collect()
}

/// Invert the pinhole model at a known depth.
pub fn back_project(u: f64, v: f64, z: f64, cam: &CameraModel) -> (f64, f64, f64) {
    ((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z)
}

// ── Text serialization ─────────────────────────────────────────────────
//
// Line-delimited format, one file per frame:
//
//   # radar-points v1
//   frame <frame_id>
//   <frame_id> <x> <y> <z> <rcs> <doppler> <label|->
//
// Floats use shortest-round-trip formatting, so a write/read cycle is
// lossless.

pub fn write_radar_txt(path: &Path, frame: &RadarFrame) -> Result<()> {
    let mut out = String::from("# radar-points v1\n");
    out.push_str(&format!("frame {}\n", frame.frame_id));
    for (i, p) in frame.points.iter().enumerate() {
        let label = match &frame.labels {
            Some(l) => l[i].to_string(),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            frame.frame_id, p.x, p.y, p.z, p.rcs, p.doppler, label
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_radar_txt(path: &Path) -> Result<RadarFrame> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: String| Error::format(path, "radar-points", why);
    let mut frame_id: Option<u64> = None;
    let mut points = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "frame" {
            if fields.len() != 2 {
                return Err(bad(format!("line {}: bad frame header", lineno + 1)));
            }
            frame_id = Some(
                fields[1]
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad frame id", lineno + 1)))?,
            );
            continue;
        }
        if fields.len() != 7 {
            return Err(bad(format!(
                "line {}: expected 7 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| bad(format!("line {}: bad frame_id", lineno + 1)))?;
        if let Some(expect) = frame_id {
            if id != expect {
                return Err(bad(format!("line {}: frame_id {} != {}", lineno + 1, id, expect)));
            }
        } else {
            frame_id = Some(id);
        }
        let mut nums = [0.0f64; 5];
        for (k, slot) in nums.iter_mut().enumerate() {
            *slot = fields[k + 1]
                .parse()
                .map_err(|_| bad(format!("line {}: bad float", lineno + 1)))?;
        }
        points.push(RadarPoint {
            x: nums[0],
            y: nums[1],
            z: nums[2],
            rcs: nums[3],
            doppler: nums[4],
        });
        labels.push(if fields[6] == "-" {
            None
        } else {
            Some(
                fields[6]
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad label", lineno + 1)))?,
            )
        });
    }
    let frame_id = frame_id.ok_or_else(|| bad("missing frame header".into()))?;
    let labels = if labels.iter().all(|l| l.is_none()) {
        None
    } else if labels.iter().all(|l| l.is_some()) {
        Some(labels.into_iter().map(|l| l.unwrap()).collect())
    } else {
        return Err(bad("mixed labeled and unlabeled records".into()));
    };
    Ok(RadarFrame {
        frame_id,
        points,
        labels,
    })
}

// ── Point encoder and classifier ───────────────────────────────────────

/// Fixed input normalization for the five point features, bringing meters,
/// dBsm and m/s onto comparable unit scales before the shared MLP. Zero
/// rows stay zero, so the padding contract is unaffected.
pub const POINT_FEATURE_SCALE: [f64; 5] = [1.0 / 20.0, 1.0 / 20.0, 1.0 / 30.0, 1.0 / 15.0, 1.0 / 4.0];

/// Shared per-point MLP emitting embeddings at the four image channel
/// widths. Padded rows are masked to exact zeros at every tap.
#[derive(Clone, Debug)]
pub struct PointEncoder<F: Scalar> {
    pub layers: Vec<Linear<F>>,
}

impl<F: Scalar> PointEncoder<F> {
    pub fn new(name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut in_dim = POINT_FEATURES;
        for (i, &w) in widths.iter().enumerate() {
            let mut layer = Linear::new(&format!("{name}.layer{}", i + 1), in_dim, w, rng);
            // a small positive bias keeps rows whose previous activations
            // were fully rectified away from sitting exactly on the next
            // kink (zero bias parks them there, where the gradient is dead)
            layer.bias.data.iter_mut().for_each(|b| *b = F::of_f64(0.01));
            layers.push(layer);
            in_dim = w;
        }
        PointEncoder { layers }
    }

    /// Per-level features, each `target_count × width_i`.
    pub fn forward(
        &self,
        binder: &mut Binder<'_, F>,
        sampled: &SampledPoints<F>,
    ) -> Result<Vec<Tensor<F>>> {
        let mask = sampled.valid_weights();
        let scale = Tensor::from_vec(
            &[1, POINT_FEATURES],
            POINT_FEATURE_SCALE.iter().map(|&s| F::of_f64(s)).collect(),
        )?;
        let mut h = sampled
            .to_tensor()?
            .mul(&scale.broadcast_rows(sampled.target_count)?)?;
        let mut taps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(binder, &h)?.relu()?.scale_rows(&mask)?;
            taps.push(h.clone());
        }
        Ok(taps)
    }

    pub fn params(&self) -> Vec<&crate::numerics::Param<F>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut crate::numerics::Param<F>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Per-point classification head: MLP stack plus row softmax. Invalid rows
/// come out uniform and carry no gradient.
#[derive(Clone, Debug)]
pub struct PointClassifier<F: Scalar> {
    pub hidden: Linear<F>,
    pub output: Linear<F>,
    pub n_classes: usize,
}

impl<F: Scalar> PointClassifier<F> {
    pub fn new(name: &str, in_dim: usize, hidden_dim: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut hidden = Linear::new(&format!("{name}.hidden"), in_dim, hidden_dim, rng);
        // same off-kink bias as the encoder layers
        hidden.bias.data.iter_mut().for_each(|b| *b = F::of_f64(0.01));
        PointClassifier {
            hidden,
            output: Linear::new(&format!("{name}.output"), hidden_dim, n_classes, rng),
            n_classes,
        }
    }

    /// Class probabilities per row (`target_count × n_classes`); every row
    /// sums to one.
    pub fn forward(
        &self,
        binder: &mut Binder<'_, F>,
        features: &Tensor<F>,
        valid: &[bool],
    ) -> Result<Tensor<F>> {
        let h = self.hidden.forward(binder, features)?.relu()?;
        let probs = self.output.forward(binder, &h)?.softmax_rows()?;
        // keep valid rows, overwrite padded rows with the uniform distribution
        let weights: Vec<F> = valid
            .iter()
            .map(|&v| if v { F::one() } else { F::zero() })
            .collect();
        let kept = probs.scale_rows(&weights)?;
        let uniform = F::of_f64(1.0 / self.n_classes as f64);
        let fill: Vec<F> = valid
            .iter()
            .flat_map(|&v| {
                std::iter::repeat(if v { F::zero() } else { uniform }).take(self.n_classes)
            })
            .collect();
        kept.add(&Tensor::from_vec(&[valid.len(), self.n_classes], fill)?)
    }

    pub fn params(&self) -> Vec<&crate::numerics::Param<F>> {
        let mut p = self.hidden.params();
        p.extend(self.output.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut crate::numerics::Param<F>> {
        let mut p = self.hidden.params_mut();
        p.extend(self.output.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn frame_of(n: usize) -> RadarFrame {
        let points = (0..n)
            .map(|i| RadarPoint {
                x: i as f64 * 0.1,
                y: -(i as f64) * 0.05,
                z: 5.0 + i as f64 * 0.01,
                rcs: i as f64,
                doppler: -1.0,
            })
            .collect();
        RadarFrame {
            frame_id: 9,
            points,
            labels: None,
        }
    }

    #[test]
    fn sample_downsamples_to_target_without_replacement() {
        let frame = frame_of(1500);
        let s: SampledPoints<f64> = sample_or_pad(&frame, 1000, 42).unwrap();
        assert_eq!(s.valid_count(), 1000);
        let mut seen = std::collections::HashSet::new();
        for src in s.source_indices.iter().flatten() {
            assert!(*src < 1500);
            assert!(seen.insert(*src), "index {} repeated", src);
        }
    }

    #[test]
    fn sample_pads_empty_frame_with_invalid_zero_rows() {
        let frame = RadarFrame::empty(1);
        let s: SampledPoints<f64> = sample_or_pad(&frame, 1000, 0).unwrap();
        assert_eq!(s.valid_count(), 0);
        assert!(s.matrix.iter().all(|&v| v == 0.0));
        assert!(s.valid.iter().all(|v| !v));
    }

    #[test]
    fn sample_at_boundary_preserves_order() {
        let frame = frame_of(1000);
        let s: SampledPoints<f64> = sample_or_pad(&frame, 1000, 7).unwrap();
        for (row, src) in s.source_indices.iter().enumerate() {
            assert_eq!(*src, Some(row));
        }
    }

    #[test]
    fn sample_is_deterministic_per_seed() {
        let frame = frame_of(1500);
        let a: SampledPoints<f64> = sample_or_pad(&frame, 100, 5).unwrap();
        let b: SampledPoints<f64> = sample_or_pad(&frame, 100, 5).unwrap();
        let c: SampledPoints<f64> = sample_or_pad(&frame, 100, 6).unwrap();
        assert_eq!(a.source_indices, b.source_indices);
        assert_ne!(a.source_indices, c.source_indices);
    }

    #[test]
    fn projection_hits_principal_point_on_axis() {
        let cam = CameraModel::new(100.0, 100.0, 160.0, 160.0, 320, 320);
        let p = project_point(
            &RadarPoint { x: 0.0, y: 0.0, z: 5.0, rcs: 0.0, doppler: 0.0 },
            &cam,
        );
        assert_eq!((p.u, p.v, p.in_view), (160.0, 160.0, true));
    }

    #[test]
    fn behind_camera_is_flagged_out_of_view() {
        let cam = CameraModel::new(100.0, 100.0, 160.0, 160.0, 320, 320);
        let p = project_point(
            &RadarPoint { x: 1.0, y: 0.0, z: -2.0, rcs: 0.0, doppler: 0.0 },
            &cam,
        );
        assert!(!p.in_view);
    }

    #[test]
    fn hand_computed_pinhole_projection() {
        let cam = CameraModel::new(100.0, 100.0, 160.0, 160.0, 320, 320);
        let p = project_point(
            &RadarPoint { x: 1.0, y: 0.5, z: 4.0, rcs: 0.0, doppler: 0.0 },
            &cam,
        );
        assert_eq!((p.u, p.v), (185.0, 172.5));
    }

    #[test]
    fn back_projection_round_trip() {
        let cam = CameraModel::new(90.0, 110.0, 31.5, 30.0, 64, 64);
        let p = RadarPoint { x: 1.3, y: -0.4, z: 12.0, rcs: 0.0, doppler: 0.0 };
        let proj = project_point(&p, &cam);
        let (x, y, z) = back_project(proj.u, proj.v, p.z, &cam);
        assert!((x - p.x).abs() < 1e-9);
        assert!((y - p.y).abs() < 1e-9);
        assert_eq!(z, p.z);
    }

    #[test]
    fn radar_txt_round_trip_is_lossless() {
        let dir = std::env::temp_dir().join("fusionseg-radar-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("frame.txt");
        let mut frame = frame_of(7);
        frame.labels = Some(vec![0, 1, 2, 3, 4, 5, 6]);
        frame.points[2].x = 0.1 + 0.2; // a value without a short decimal form
        write_radar_txt(&path, &frame).unwrap();
        let back = read_radar_txt(&path).unwrap();
        assert_eq!(frame, back);
    }

    #[test]
    fn encoder_emits_zero_features_for_all_invalid_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc: PointEncoder<f64> = PointEncoder::new("enc", &[4, 8, 16, 32], &mut rng);
        let s: SampledPoints<f64> = sample_or_pad(&RadarFrame::empty(0), 16, 0).unwrap();
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let taps = enc.forward(&mut binder, &s).unwrap();
        assert_eq!(taps.len(), 4);
        for (i, tap) in taps.iter().enumerate() {
            assert_eq!(tap.shape(), &[16, [4, 8, 16, 32][i]]);
            assert!(tap.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant_on_valid_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc: PointEncoder<f64> = PointEncoder::new("enc", &[4, 8, 16, 32], &mut rng);
        let frame = frame_of(6);
        let s: SampledPoints<f64> = sample_or_pad(&frame, 6, 0).unwrap();
        let mut permuted = frame.clone();
        permuted.points.reverse();
        let sp: SampledPoints<f64> = sample_or_pad(&permuted, 6, 0).unwrap();

        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let a = enc.forward(&mut binder, &s).unwrap();
        let b = enc.forward(&mut binder, &sp).unwrap();
        for (ta, tb) in a.iter().zip(b.iter()) {
            let c = ta.shape()[1];
            for row in 0..6 {
                let ra = &ta.data()[row * c..(row + 1) * c];
                let rb = &tb.data()[(5 - row) * c..(6 - row) * c];
                assert_eq!(ra, rb);
            }
        }
    }

    #[test]
    fn classifier_rows_sum_to_one_and_zero_params_give_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cls: PointClassifier<f64> = PointClassifier::new("cls", 8, 16, 9, &mut rng);
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let feats = Tensor::from_vec(&[4, 8], (0..32).map(|i| i as f64 * 0.01).collect()).unwrap();
        let valid = [true, true, false, true];
        let probs = cls.forward(&mut binder, &feats, &valid).unwrap();
        for r in 0..4 {
            let s: f64 = probs.data()[r * 9..(r + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
        }
        // invalid row is uniform
        for &v in &probs.data()[2 * 9..3 * 9] {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
        // zero parameters → uniform everywhere
        for p in cls.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        let probs = cls.forward(&mut binder, &feats, &valid).unwrap();
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-12));
    }
}
